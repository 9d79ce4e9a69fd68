#include "cosa/autograd.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "cosa/errors.hpp"

namespace cosa::ag {

template <typename T>
Var<T> Tape<T>::constant(Matrix<T> value) {
  Node& n = nodes_.emplace_back();
  n.own = std::move(value);
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::param(const Param<T>& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var<T>(this, it->second);
  Node& n = nodes_.emplace_back();
  n.external = &p.value;
  if (grad_enabled_) {
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    n.external_grad = &p.grad;
    n.requires_grad = true;
  }
  const int id = static_cast<int>(nodes_.size() - 1);
  params_.emplace(&p, id);
  return Var<T>(this, id);
}

template <typename T>
Matrix<T>& Tape<T>::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  n.grad_touched = true;
  if (n.external_grad) return *n.external_grad;
  if (n.grad.size() == 0) {
    const Matrix<T>& v = n.external ? *n.external : n.own;
    n.grad.setZero(v.rows(), v.cols());
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (!grad_enabled_) throw Error("backward() on a tape recorded without gradients");
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward() needs a 1x1 loss");
  grad(loss.id())(0, 0) += T(1);
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.requires_grad && n.grad_touched && n.backward) n.backward();
  }
}

template <typename T>
Var<T> Tape<T>::push(Matrix<T> value, std::span<const Var<T>> inputs, std::function<void()> backward) {
  Node& n = nodes_.emplace_back();
  n.own = std::move(value);
  if (grad_enabled_) {
    for (const Var<T>& in : inputs) {
      if (in.valid() && requires_grad(in.id())) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return Var<T>(this, static_cast<int>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::push(Matrix<T> value, std::initializer_list<Var<T>> inputs, std::function<void()> backward) {
  return push(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
}

// ---------------------------------------------------------------------------
// Ops. Each closure captures the id its own node will receive (the tape size
// before the push).

namespace {

template <typename T>
bool needs(const Var<T>& v) {
  return v.valid() && v.tape()->requires_grad(v.id());
}

void check(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
int next_id(Tape<T>* t) {
  return static_cast<int>(t->size());
}

}  // namespace

// The blocked kernel rounds a row differently depending on how many rows
// share the product. Inference tapes use the coefficient-wise kernel so a
// score never depends on what else was packed with it.
template <typename T, typename A, typename B>
void product(const Tape<T>* t, Matrix<T>& out, const A& a, const B& b) {
  if (t->grad_enabled()) {
    out.noalias() = a * b;
  } else {
    out.noalias() = a.lazyProduct(b);
  }
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape<T>* t = a.tape();
  Matrix<T> out;
  product(t, out, a.value(), b.value());
  const int self = next_id(t);
  return t->push(std::move(out), {a, b}, [t, a, b, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(a)) t->grad(a.id()).noalias() += g * b.value().transpose();
    if (needs(b)) t->grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  check(a.cols() == b.cols(), "matmul_nt: column counts differ");
  Tape<T>* t = a.tape();
  Matrix<T> out;
  product(t, out, a.value(), b.value().transpose());
  const int self = next_id(t);
  return t->push(std::move(out), {a, b}, [t, a, b, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(a)) t->grad(a.id()).noalias() += g * b.value();
    if (needs(b)) t->grad(b.id()).noalias() += g.transpose() * a.value();
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  check(x.cols() == w.rows(), "linear: input width differs from weight rows");
  Tape<T>* t = x.tape();
  Matrix<T> out;
  product(t, out, x.value(), w.value());
  if (bias.valid()) {
    check(bias.rows() == 1 && bias.cols() == w.cols(), "linear: bias shape");
    out.rowwise() += bias.value().row(0);
  }
  const int self = next_id(t);
  return t->push(std::move(out), {x, w, bias}, [t, x, w, bias, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(x)) t->grad(x.id()).noalias() += g * w.value().transpose();
    if (needs(w)) t->grad(w.id()).noalias() += x.value().transpose() * g;
    if (needs(bias)) t->grad(bias.id()).row(0) += g.colwise().sum();
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  Tape<T>* t = a.tape();
  const int self = next_id(t);
  return t->push(a.value() + b.value(), {a, b}, [t, a, b, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(a)) t->grad(a.id()) += g;
    if (needs(b)) t->grad(b.id()) += g;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  Tape<T>* t = a.tape();
  const int self = next_id(t);
  return t->push(a.value() - b.value(), {a, b}, [t, a, b, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(a)) t->grad(a.id()) += g;
    if (needs(b)) t->grad(b.id()) -= g;
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  check(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape");
  Tape<T>* t = a.tape();
  Matrix<T> out = a.value();
  out.rowwise() += row.value().row(0);
  const int self = next_id(t);
  return t->push(std::move(out), {a, row}, [t, a, row, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(a)) t->grad(a.id()) += g;
    if (needs(row)) t->grad(row.id()).row(0) += g.colwise().sum();
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tape<T>* t = a.tape();
  const int self = next_id(t);
  return t->push(a.value() * factor, {a}, [t, a, factor, self] {
    if (needs(a)) t->grad(a.id()) += t->grad(self) * factor;
  });
}

template <typename T>
Var<T> div_scalar(Var<T> a, Var<T> s) {
  check(s.rows() == 1 && s.cols() == 1, "div_scalar: divisor must be 1x1");
  Tape<T>* t = a.tape();
  const T d = s.item();
  const int self = next_id(t);
  return t->push(a.value() / d, {a, s}, [t, a, s, self] {
    const Matrix<T>& g = t->grad(self);
    const T d = s.item();
    if (needs(a)) t->grad(a.id()) += g / d;
    if (needs(s)) t->grad(s.id())(0, 0) -= (g.array() * a.value().array()).sum() / (d * d);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Tape<T>* t = a.tape();
  const int self = next_id(t);
  return t->push(a.value().transpose(), {a}, [t, a, self] {
    if (needs(a)) t->grad(a.id()) += t->grad(self).transpose();
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tape<T>* t = a.tape();
  const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T k = T(0.044715);
  const auto& x = a.value().array();
  Matrix<T> out = (T(0.5) * x * (T(1) + (c * (x + k * x.cube())).tanh())).matrix();
  const int self = next_id(t);
  return t->push(std::move(out), {a}, [t, a, c, k, self] {
    const auto& x = a.value().array();
    const auto th = (c * (x + k * x.cube())).tanh().eval();
    const auto dydx = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * c * (T(1) + T(3) * k * x.square());
    t->grad(a.id()).array() += t->grad(self).array() * dydx;
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  check(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d, "layer_norm: affine shape");
  Tape<T>* t = x.tape();
  auto xhat = std::make_shared<Matrix<T>>(n, d);
  auto rstd = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n);
  const Matrix<T>& xv = x.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = xv.row(i).mean();
    const T var = (xv.row(i).array() - mu).square().mean();
    const T r = T(1) / std::sqrt(var + eps);
    (*rstd)(i) = r;
    xhat->row(i) = (xv.row(i).array() - mu) * r;
  }
  Matrix<T> out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  const int self = next_id(t);
  return t->push(std::move(out), {x, gamma, beta}, [t, x, gamma, beta, xhat, rstd, self] {
    const Matrix<T>& g = t->grad(self);
    if (needs(gamma)) t->grad(gamma.id()).row(0) += (g.array() * xhat->array()).colwise().sum().matrix();
    if (needs(beta)) t->grad(beta.id()).row(0) += g.colwise().sum();
    if (needs(x)) {
      Matrix<T>& gx = t->grad(x.id());
      const auto gam = gamma.value().row(0).array();
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const auto dxhat = (g.row(i).array() * gam).eval();
        const T m1 = dxhat.mean();
        const T m2 = (dxhat * xhat->row(i).array()).mean();
        gx.row(i).array() += (*rstd)(i) * (dxhat - m1 - xhat->row(i).array() * m2);
      }
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> src, std::vector<int> rows) {
  Tape<T>* t = src.tape();
  const Matrix<T>& sv = src.value();
  Matrix<T> out(static_cast<Eigen::Index>(rows.size()), sv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check(rows[r] >= 0 && rows[r] < sv.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = sv.row(rows[r]);
  }
  const int self = next_id(t);
  return t->push(std::move(out), {src}, [t, src, rows = std::move(rows), self] {
    const Matrix<T>& g = t->grad(self);
    Matrix<T>& gs = t->grad(src.id());
    for (std::size_t r = 0; r < rows.size(); ++r) gs.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  check(!parts.empty(), "concat_rows: nothing to concatenate");
  Tape<T>* t = parts.front().tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    check(p.cols() == cols, "concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  const int self = next_id(t);
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return t->push(std::move(out), parts, [t, inputs, self] {
    const Matrix<T>& g = t->grad(self);
    Eigen::Index at = 0;
    for (const auto& p : inputs) {
      if (needs(p)) t->grad(p.id()) += g.middleRows(at, p.rows());
      at += p.rows();
    }
  });
}

template <typename T>
Var<T> mean_row_groups(Var<T> x, std::vector<int> sizes) {
  Tape<T>* t = x.tape();
  Eigen::Index total = 0;
  for (int s : sizes) {
    check(s >= 1, "mean_row_groups: empty group");
    total += s;
  }
  check(total == x.rows(), "mean_row_groups: group sizes do not cover the rows");
  Matrix<T> out(static_cast<Eigen::Index>(sizes.size()), x.cols());
  Eigen::Index at = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.value().middleRows(at, sizes[i]).colwise().mean();
    at += sizes[i];
  }
  const int self = next_id(t);
  return t->push(std::move(out), {x}, [t, x, sizes = std::move(sizes), self] {
    const Matrix<T>& g = t->grad(self);
    Matrix<T>& gx = t->grad(x.id());
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const auto share = (g.row(static_cast<Eigen::Index>(i)) / static_cast<T>(sizes[i])).eval();
      for (int k = 0; k < sizes[i]; ++k) gx.row(at + k) += share;
      at += sizes[i];
    }
  });
}

template <typename T>
Var<T> normalize_rows(Var<T> x) {
  Tape<T>* t = x.tape();
  const Matrix<T>& xv = x.value();
  auto norms = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(xv.rowwise().norm());
  for (Eigen::Index i = 0; i < norms->size(); ++i) {
    if (!((*norms)(i) > T(0))) throw NumericalError("normalize_rows: zero-norm row " + std::to_string(i));
  }
  Matrix<T> out = xv.array().colwise() / norms->array();
  const int self = next_id(t);
  return t->push(std::move(out), {x}, [t, x, norms, self] {
    const Matrix<T>& g = t->grad(self);
    const Matrix<T>& y = t->value(self);
    Matrix<T>& gx = t->grad(x.id());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      const T dot = g.row(i).dot(y.row(i));
      gx.row(i) += (g.row(i) - dot * y.row(i)) / (*norms)(i);
    }
  });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::vector<AttentionSegment> segments, int heads,
                 std::vector<std::uint8_t> key_valid) {
  const Eigen::Index d = q.cols();
  check(k.cols() == d && v.cols() == d && k.rows() == v.rows(), "attention: q/k/v widths differ");
  check(heads >= 1 && d % heads == 0, "attention: width not divisible by heads");
  check(key_valid.empty() || static_cast<Eigen::Index>(key_valid.size()) == k.rows(), "attention: key mask size");
  Tape<T>* t = q.tape();
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Matrix<T>& qv = q.value();
  const Matrix<T>& kv = k.value();
  const Matrix<T>& vv = v.value();

  Matrix<T> out = Matrix<T>::Zero(qv.rows(), d);
  const bool keep = t->grad_enabled() && (needs(q) || needs(k) || needs(v));
  auto probs = std::make_shared<std::vector<Matrix<T>>>();
  if (keep) probs->reserve(segments.size() * static_cast<std::size_t>(heads));

  Matrix<T> scores;
  for (const AttentionSegment& s : segments) {
    check(s.q_begin >= 0 && s.q_begin + s.q_len <= qv.rows() && s.k_begin >= 0 && s.k_begin + s.k_len <= kv.rows(),
          "attention: segment out of range");
    check(!s.causal || s.q_len == s.k_len, "attention: causal segment needs q_len == k_len");
    for (int h = 0; h < heads; ++h) {
      const auto qh = qv.block(s.q_begin, h * dh, s.q_len, dh);
      const auto kh = kv.block(s.k_begin, h * dh, s.k_len, dh);
      const auto vh = vv.block(s.k_begin, h * dh, s.k_len, dh);
      if (t->grad_enabled()) {
        scores.noalias() = qh * kh.transpose();
      } else {
        scores.noalias() = qh.lazyProduct(kh.transpose());
      }
      for (int i = 0; i < s.q_len; ++i) {
        const int limit = s.causal ? i + 1 : s.k_len;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < limit; ++j) {
          if (key_valid.empty() || key_valid[static_cast<std::size_t>(s.k_begin + j)]) mx = std::max(mx, scores(i, j));
        }
        T sum = 0;
        for (int j = 0; j < s.k_len; ++j) {
          const bool allowed = j < limit && (key_valid.empty() || key_valid[static_cast<std::size_t>(s.k_begin + j)]);
          const T e = allowed ? std::exp((scores(i, j) - mx) * scale) : T(0);
          scores(i, j) = e;
          sum += e;
        }
        if (sum > T(0)) scores.row(i) /= sum;
      }
      if (t->grad_enabled()) {
        out.block(s.q_begin, h * dh, s.q_len, dh).noalias() = scores * vh;
      } else {
        out.block(s.q_begin, h * dh, s.q_len, dh).noalias() = scores.lazyProduct(vh);
      }
      if (keep) probs->push_back(scores);
    }
  }

  const int self = next_id(t);
  return t->push(std::move(out), {q, k, v},
                 [t, q, k, v, segments = std::move(segments), heads, dh, scale, probs, self] {
                   const Matrix<T>& g = t->grad(self);
                   const Matrix<T>& qv = q.value();
                   const Matrix<T>& kv = k.value();
                   const Matrix<T>& vv = v.value();
                   Matrix<T>* gq = needs(q) ? &t->grad(q.id()) : nullptr;
                   Matrix<T>* gk = needs(k) ? &t->grad(k.id()) : nullptr;
                   Matrix<T>* gv = needs(v) ? &t->grad(v.id()) : nullptr;
                   Matrix<T> dp, ds;
                   std::size_t idx = 0;
                   for (const AttentionSegment& s : segments) {
                     for (int h = 0; h < heads; ++h, ++idx) {
                       const Matrix<T>& p = (*probs)[idx];
                       const auto go = g.block(s.q_begin, h * dh, s.q_len, dh);
                       const auto vh = vv.block(s.k_begin, h * dh, s.k_len, dh);
                       if (gv) gv->block(s.k_begin, h * dh, s.k_len, dh).noalias() += p.transpose() * go;
                       dp.noalias() = go * vh.transpose();
                       const auto row_dot = (dp.array() * p.array()).rowwise().sum().eval();
                       ds = (p.array() * (dp.array().colwise() - row_dot)).matrix() * scale;
                       if (gq) gq->block(s.q_begin, h * dh, s.q_len, dh).noalias() += ds * kv.block(s.k_begin, h * dh, s.k_len, dh);
                       if (gk) gk->block(s.k_begin, h * dh, s.k_len, dh).noalias() += ds.transpose() * qv.block(s.q_begin, h * dh, s.q_len, dh);
                     }
                   }
                 });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> targets) {
  const Matrix<T>& lv = logits.value();
  check(static_cast<Eigen::Index>(targets.size()) == lv.rows() && !targets.empty(),
        "cross_entropy: one target per row required");
  Tape<T>* t = logits.tape();
  auto softmax = std::make_shared<Matrix<T>>(lv.rows(), lv.cols());
  T total = 0;
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    const int target = targets[static_cast<std::size_t>(i)];
    check(target >= 0 && target < lv.cols(), "cross_entropy: target out of range");
    const T mx = lv.row(i).maxCoeff();
    softmax->row(i) = (lv.row(i).array() - mx).exp();
    const T sum = softmax->row(i).sum();
    softmax->row(i) /= sum;
    total += (mx + std::log(sum)) - lv(i, target);
  }
  const T n = static_cast<T>(lv.rows());
  Matrix<T> out(1, 1);
  out(0, 0) = total / n;
  const int self = next_id(t);
  return t->push(std::move(out), {logits}, [t, logits, targets = std::move(targets), softmax, n, self] {
    const T g = t->grad(self)(0, 0);
    Matrix<T>& gl = t->grad(logits.id());
    gl += *softmax * (g / n);
    for (std::size_t i = 0; i < targets.size(); ++i) gl(static_cast<Eigen::Index>(i), targets[i]) -= g / n;
  });
}

#define COSA_INSTANTIATE(T)                                                                              \
  template class Tape<T>;                                                                                \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                             \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                                          \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                                     \
  template Var<T> add<T>(Var<T>, Var<T>);                                                                \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                                \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                                            \
  template Var<T> scale<T>(Var<T>, T);                                                                   \
  template Var<T> div_scalar<T>(Var<T>, Var<T>);                                                         \
  template Var<T> transpose<T>(Var<T>);                                                                  \
  template Var<T> gelu<T>(Var<T>);                                                                       \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                              \
  template Var<T> gather_rows<T>(Var<T>, std::vector<int>);                                              \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                               \
  template Var<T> mean_row_groups<T>(Var<T>, std::vector<int>);                                                    \
  template Var<T> normalize_rows<T>(Var<T>);                                                             \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, std::vector<AttentionSegment>, int,               \
                               std::vector<std::uint8_t>);                                               \
  template Var<T> cross_entropy<T>(Var<T>, std::vector<int>);

COSA_INSTANTIATE(float)
COSA_INSTANTIATE(double)

}  // namespace cosa::ag
