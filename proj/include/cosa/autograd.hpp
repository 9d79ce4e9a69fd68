#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace cosa::ag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Learnable tensor plus its gradient accumulator. The accumulator is mutable
/// so read-only model handles can still be differentiated.
template <typename T>
struct Param {
  Matrix<T> value;
  mutable Matrix<T> grad;
  bool decay = true;  // subject to weight decay

  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape<T>* tape() const { return tape_; }
  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Convenience for 1x1 nodes.
  T item() const { return value()(0, 0); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Eager reverse-mode tape. Values are computed when an op is recorded;
/// backward() replays the recorded closures in reverse order.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Matrix<T> value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var<T> param(const Param<T>& p);

  const Matrix<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.own;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient buffer of a node, zero-initialized on first access.
  Matrix<T>& grad(int id);

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
  void backward(Var<T> loss);

  /// Records an op result. `backward` is dropped when no input needs grad.
  Var<T> push(Matrix<T> value, std::initializer_list<Var<T>> inputs, std::function<void()> backward);
  Var<T> push(Matrix<T> value, std::span<const Var<T>> inputs, std::function<void()> backward);

 private:
  struct Node {
    Matrix<T> own;
    const Matrix<T>* external = nullptr;
    Matrix<T> grad;
    Matrix<T>* external_grad = nullptr;
    bool requires_grad = false;
    bool grad_touched = false;
    std::function<void()> backward;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Param<T>*, int> params_;
  bool grad_enabled_;
};

struct AttentionSegment {
  int q_begin = 0;
  int q_len = 0;
  int k_begin = 0;
  int k_len = 0;
  bool causal = false;  // query i sees keys 0..i (requires q_len == k_len)
};

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
/// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
/// x * w + bias (bias is a 1 x out row, optional)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias = {});
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
/// Broadcast-adds a 1 x cols row to every row of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row);
template <typename T>
Var<T> scale(Var<T> a, T factor);
/// a / s for a 1x1 node s.
template <typename T>
Var<T> div_scalar(Var<T> a, Var<T> s);
template <typename T>
Var<T> transpose(Var<T> a);
/// tanh-approximated GELU.
template <typename T>
Var<T> gelu(Var<T> a);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
template <typename T>
Var<T> gather_rows(Var<T> src, std::vector<int> rows);
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts);
/// Mean over consecutive row blocks; sizes[i] rows form output row i.
template <typename T>
Var<T> mean_row_groups(Var<T> x, std::vector<int> sizes);
/// Row-wise L2 normalization; throws NumericalError on a zero row.
template <typename T>
Var<T> normalize_rows(Var<T> x);
/// Multi-head scaled dot-product attention over packed sequences. q, k, v
/// hold heads side by side in their columns. `key_valid` (optional, one flag
/// per key row) masks padding keys.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::vector<AttentionSegment> segments, int heads,
                 std::vector<std::uint8_t> key_valid = {});
/// Mean softmax cross-entropy of each row against its target class.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> targets);

}  // namespace cosa::ag
