#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every op builds a node that remembers its parents and a
// closure that scatters the node's gradient into them. Graphs are owned by
// the tensors that reference them; there is no global tape, so independent
// graphs can be built on different threads.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ecer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording on the current thread while alive.
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

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  /// Row vector [1, n].
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Mutable access to the values. Intended for leaves (parameters,
  /// inputs); mutating an interior node invalidates its graph.
  std::span<double> mutable_data() { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  /// Seeds d(self)/d(self) = 1 (self must hold one element) and
  /// back-propagates through the recorded graph.
  void backward() const;
  /// Back-propagates an explicit upstream gradient.
  void backward(std::span<const double> seed) const;

  /// Same values, no history, no grad.
  Tensor detach() const;
  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace ops {

// Shape-preserving elementwise ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor relu(const Tensor& a);

/// a[m, n] + b[1, n] (row broadcast).
Tensor add_row(const Tensor& a, const Tensor& b);
/// a[m, n] * s where s holds one element.
Tensor mul_scalar(const Tensor& a, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
/// a[m, k] · b[n, k]ᵀ.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Concatenation along columns of 2-D tensors with equal row counts.
Tensor concat_cols(const std::vector<Tensor>& parts);
/// Concatenation along rows of 2-D tensors with equal column counts.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Gathers rows by index.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column means of a[m, n] → [1, n].
Tensor mean_rows(const Tensor& a);
/// Column sums of a[m, n] → [1, n].
Tensor sum_rows(const Tensor& a);
/// Mean over consecutive row groups: a[g·r, n] → [g, n].
Tensor group_mean_rows(const Tensor& a, std::size_t group);

/// Divides each row by its L2 norm. Rows with zero norm map to zero rows;
/// `zero_rows` (optional) receives their count.
Tensor l2_normalize_rows(const Tensor& a, std::size_t* zero_rows = nullptr);
/// Row-wise cosine similarity matrix: out[i][j] = cos(a_i, b_j).
Tensor cosine_matrix(const Tensor& a, const Tensor& b);

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
/// Negative log-likelihood summed over rows: -Σ_i logp[i][labels[i]].
Tensor nll_sum(const Tensor& logp, std::span<const std::size_t> labels);

// Image ops over [B, C, H, W].
/// 3×3 convolution, stride 1, zero padding 1. w: [O, C, 3, 3].
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor max_pool2x2(const Tensor& x);
/// [B, C, H, W] → [B·H·W, C], row index b·HW + (h·W + w).
Tensor nchw_to_rows(const Tensor& x);
/// [B, C, H, W] → [B, C] spatial mean.
Tensor spatial_mean(const Tensor& x);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalization over (B, H, W). Training mode uses batch
/// statistics and updates the running estimates in `state`; evaluation mode
/// uses the running estimates.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool training);

/// Builds a node for a fused op. `backward` receives the result node; its
/// `grad` holds the upstream gradient and `parents[i]` map to `inputs[i]`
/// (use `Node::ensure_grad` on parents that require grad).
Tensor custom(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
              std::function<void(detail::Node&)> backward);

}  // namespace ops
}  // namespace ecer
