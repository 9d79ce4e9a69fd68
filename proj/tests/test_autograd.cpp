#include <gtest/gtest.h>

#include <functional>

#include "cosa/autograd.hpp"
#include "cosa/errors.hpp"
#include "cosa/rng.hpp"
#include "test_util.hpp"

using namespace cosa;
using namespace cosa::ag;
using M = Matrix<double>;
using P = Param<double>;
using V = Var<double>;

namespace {

P random_param(int r, int c, Rng& rng, double scale = 1.0) {
  P p;
  p.value.resize(r, c);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = scale * rng.normal();
  return p;
}

// Reduces an op output to a scalar with fixed random weights so every output
// element contributes a distinct amount.
V reduce(Tape<double>& t, V out) {
  Rng rng(12345);
  M w(out.rows(), out.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  M ones = M::Ones(out.cols(), 1);
  M row_ones = M::Ones(1, out.rows());
  V weighted = t.push((out.value().array() * w.array()).matrix(), {out}, [&t, out, w, id = static_cast<int>(t.size())] {
    t.grad(out.id()).array() += t.grad(id).array() * w.array();
  });
  return matmul(matmul(t.constant(row_ones), weighted), t.constant(ones));
}

using Builder = std::function<V(Tape<double>&, std::vector<V>&)>;

// Central differences over every entry of every input.
void check_gradients(std::vector<P>& params, const Builder& build, double tol = 1e-6) {
  auto loss_of = [&] {
    Tape<double> t(false);
    std::vector<V> vars;
    for (auto& p : params) vars.push_back(t.param(p));
    return reduce(t, build(t, vars)).item();
  };
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> t;
    std::vector<V> vars;
    for (auto& p : params) vars.push_back(t.param(p));
    t.backward(reduce(t, build(t, vars)));
  }
  const double h = 1e-6;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index i = 0; i < params[k].value.size(); ++i) {
      double& x = params[k].value.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss_of();
      x = saved - h;
      const double down = loss_of();
      x = saved;
      const double fd = (up - down) / (2 * h);
      const double an = params[k].grad.data()[i];
      EXPECT_LT(std::abs(fd - an), tol * std::max(1.0, std::abs(fd))) << "input " << k << " entry " << i;
    }
  }
}

}  // namespace

TEST(Autograd, Matmul) {
  Rng rng(1);
  std::vector<P> ps = {random_param(3, 4, rng), random_param(4, 2, rng), random_param(5, 4, rng)};
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return matmul(v[0], v[1]); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return matmul_nt(v[2], v[0]); });
}

TEST(Autograd, LinearAndElementwise) {
  Rng rng(2);
  std::vector<P> ps = {random_param(3, 4, rng), random_param(4, 5, rng), random_param(1, 5, rng),
                       random_param(3, 5, rng), random_param(1, 1, rng, 0.1)};
  ps[4].value(0, 0) = 0.7;
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return linear(v[0], v[1], v[2]); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return sub(add(linear(v[0], v[1]), v[3]), v[3]); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return add_row(scale(v[3], 0.5), v[2]); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return div_scalar(v[3], v[4]); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return transpose(gelu(v[3])); });
}

TEST(Autograd, LayerNorm) {
  Rng rng(3);
  std::vector<P> ps = {random_param(4, 6, rng), random_param(1, 6, rng), random_param(1, 6, rng)};
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return layer_norm(v[0], v[1], v[2]); });
}

TEST(Autograd, RowOps) {
  Rng rng(4);
  std::vector<P> ps = {random_param(5, 3, rng), random_param(2, 3, rng)};
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return gather_rows(v[0], {4, 0, 0, 2}); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) {
    const std::vector<V> parts = {v[1], v[0], v[1]};
    return concat_rows<double>(parts);
  });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return mean_row_groups(v[0], {2, 1, 2}); });
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return normalize_rows(v[0]); });
}

TEST(Autograd, CrossEntropy) {
  Rng rng(5);
  std::vector<P> ps = {random_param(4, 6, rng)};
  check_gradients(ps, [](Tape<double>&, std::vector<V>& v) { return cross_entropy(v[0], {0, 5, 2, 2}); });
}

TEST(Autograd, CrossEntropyValue) {
  Tape<double> t(false);
  M logits(2, 3);
  logits << 1, 2, 3, 0, 0, 0;
  const double want = 0.5 * (-(3 - std::log(std::exp(1) + std::exp(2) + std::exp(3))) + std::log(3.0));
  EXPECT_NEAR(cross_entropy(t.constant(logits), {2, 1}).item(), want, 1e-12);
}

TEST(Autograd, AttentionSegments) {
  Rng rng(6);
  // two query segments over a shared key set, one causal self segment
  std::vector<P> ps = {random_param(7, 4, rng), random_param(7, 4, rng), random_param(7, 4, rng)};
  const std::vector<AttentionSegment> segs = {{0, 3, 0, 3, true}, {3, 4, 3, 4, false}};
  check_gradients(ps, [&](Tape<double>&, std::vector<V>& v) { return attention(v[0], v[1], v[2], segs, 2); });
  const std::vector<std::uint8_t> valid = {1, 1, 0, 1, 1, 0, 1};
  check_gradients(ps, [&](Tape<double>&, std::vector<V>& v) { return attention(v[0], v[1], v[2], segs, 2, valid); });
  const std::vector<AttentionSegment> cross = {{0, 2, 2, 5, false}, {2, 5, 0, 2, false}};
  check_gradients(ps, [&](Tape<double>&, std::vector<V>& v) { return attention(v[0], v[1], v[2], cross, 1); });
}

TEST(Autograd, AttentionMatchesReference) {
  Rng rng(7);
  const P q = random_param(3, 2, rng), k = random_param(3, 2, rng), v = random_param(3, 2, rng);
  Tape<double> t(false);
  const M out = attention(t.param(q), t.param(k), t.param(v), {{0, 3, 0, 3, true}}, 1).value();
  for (int i = 0; i < 3; ++i) {
    std::vector<double> w(i + 1);
    double z = 0;
    for (int j = 0; j <= i; ++j) z += (w[j] = std::exp(q.value.row(i).dot(k.value.row(j)) / std::sqrt(2.0)));
    for (int c = 0; c < 2; ++c) {
      double want = 0;
      for (int j = 0; j <= i; ++j) want += w[j] / z * v.value(j, c);
      EXPECT_NEAR(out(i, c), want, 1e-12);
    }
  }
}

TEST(Autograd, ParamsAccumulateAcrossUses) {
  P p;
  p.value = M::Constant(1, 1, 3.0);
  p.zero_grad();
  Tape<double> t;
  V a = t.param(p);
  V b = t.param(p);
  EXPECT_EQ(a.id(), b.id());
  t.backward(matmul(a, b));
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 6.0);
}

TEST(Autograd, Errors) {
  Tape<double> t;
  V a = t.constant(M::Zero(2, 3));
  V b = t.constant(M::Zero(2, 3));
  EXPECT_THROW(matmul(a, b), ShapeError);
  EXPECT_THROW(t.backward(a), ShapeError);
  EXPECT_THROW(normalize_rows(a), NumericalError);
  Tape<double> off(false);
  EXPECT_THROW(off.backward(off.constant(M::Zero(1, 1))), Error);
}

TEST(Autograd, InferenceRowsIndependentOfPacking) {
  Rng rng(8);
  for (int width : {2, 8, 64}) {
    const P x = random_param(37, 16, rng), w = random_param(16, width, rng);
    Tape<double> t(false);
    const M packed = matmul(t.param(x), t.param(w)).value();
    for (int r = 0; r < 37; ++r) {
      P row;
      row.value = x.value.row(r);
      EXPECT_EQ(matmul(t.param(row), t.param(w)).value().row(0), packed.row(r)) << width << " row " << r;
    }
  }
}
