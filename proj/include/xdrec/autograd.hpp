#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace xdrec {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using IdxList = std::vector<int32_t>;

// One value in the computation graph. Leaves with requires_grad are
// parameters; their grad buffers persist until zeroed by the owner.
struct Node {
  Mat value;
  Mat grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Mat& grad_buffer() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols())
      grad = Mat::Zero(value.rows(), value.cols());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Mat value);
  static Var parameter(Mat value);

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  Mat& grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->grad.size() > 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  float item() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse sweep from a 1x1 loss. Gradients accumulate into every reachable
// node that requires grad.
void backward(const Var& loss);

// Disables graph construction for the lifetime of the guard (per thread).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

void zero_grad(const ParamList& params);
ParamList prefixed(const std::string& prefix, const ParamList& params);

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a (n x m) scaled per row by col (n x 1).
Var mul_col(const Var& a, const Var& col);
Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
// x * w + b, w is (in x out), b is (1 x out).
Var linear(const Var& x, const Var& w, const Var& b);

Var gelu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);

// Rows of table selected by idx (duplicates allowed).
Var gather_rows(const Var& table, std::span<const int32_t> idx);
Var concat_cols(std::span<const Var> parts);

// Per-row reductions, output is (n x 1).
Var row_dot(const Var& a, const Var& b);
Var row_sqnorm(const Var& a);
Var row_norm(const Var& a);

// Segment b covers rows [offsets[b], offsets[b+1]).
Var segment_mean(const Var& x, std::span<const int> offsets);
// Repeats row b of x (B x m) over segment b.
Var repeat_segments(const Var& x, std::span<const int> offsets);

// Bidirectional multi-head attention restricted to each segment.
Var segment_attention(const Var& q, const Var& k, const Var& v, std::span<const int> offsets, int heads);

// Identity forward; backward multiplies the upstream gradient by -lambda.
Var grad_reverse(const Var& x, float lambda);
// Identity forward; no gradient flows to x.
Var stop_gradient(const Var& x);

// Row b of c (B x d) dotted with rows [b*group, (b+1)*group) of cand; (B x group).
Var group_dot(const Var& c, const Var& cand, int group);

Var sum(const Var& a);
Var mean(const Var& a);

// Mean softmax cross-entropy of logits rows against target columns.
Var softmax_xent(const Var& logits, std::span<const int32_t> targets);
// Mean binary cross-entropy of logits (n x 1) against labels in {0,1}.
Var bce_with_logits(const Var& logits, std::span<const float> labels);

}  // namespace ops
}  // namespace xdrec
