#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace pp {

/// Reverse-mode autodiff over dense tensors. One tape records one training
/// step: leaves are registered first, ops append nodes in topological order,
/// backward() walks the record in exact reverse. Every forward op checks its
/// output for NaN/Inf and throws Error{Numeric} on the first hit, so a
/// diverging run fails loudly at the op that produced it.
class Tape {
 public:
  using H = int;

  H leaf(Tensor value, bool requires_grad);
  H constant(Tensor value) { return leaf(std::move(value), false); }

  // elementwise, shapes must match exactly (no broadcasting)
  H add(H a, H b);
  H sub(H a, H b);
  H mul(H a, H b);
  H scalar_mul(H a, double s);
  H relu(H a);
  H tanh_op(H a);
  H square(H a);
  /// log(x + shift); shift = kLogEps guards losses whose argument reaches 0.
  H log_shifted(H a, double shift);

  // reductions
  H sum_all(H a);
  H mean_all(H a);
  H sum_axis(H a, int axis);
  H mean_axis(H a, int axis);
  /// max over one axis; gradient flows to the first maximal element only.
  H max_axis(H a, int axis);

  // shape plumbing
  H reshape(H a, std::vector<int> shape);
  H concat_rows(H a, H b);

  // linear algebra
  H matmul(H a, H b);     // (m,k) @ (k,n)
  H matmul_nt(H a, H b);  // (m,k) @ (n,k)^T
  /// rows scaled to unit L2 norm (norm clamped below at 1e-12)
  H row_normalize(H a);

  // model-specific ops
  /// softmax over the last axis; each fiber sums to 1 (max-subtracted).
  H softmax_channels(H a);
  /// x: (B,H,W,Cin), w: (k,k,Cin,Cout); zero padding, cross-correlation.
  H conv2d(H x, H w, int stride, int padding);
  H add_channel_bias(H x, H bias);
  /// (B,H,W,K) -> (B,K): spatial max, ties resolved to the lowest flat index.
  H spatial_max(H a);
  H stop_gradient(H a);
  /// mean over rows with active[r] != 0 of -log softmax(logits[r])[label[r]].
  H cross_entropy_rows(H logits, std::vector<int> labels,
                       std::vector<unsigned char> active);
  /// -(1/K) sum_i sum_d log(tanh(sum_{b in rows[i][d]} G[b,i]) + eps)
  H group_tanh_log(H g_matrix, std::vector<std::vector<std::vector<int>>> rows);
  /// (1/K) sum_i sum_d max_{b in rows[i][d]} G[b,i]
  H group_max_sum(H g_matrix, std::vector<std::vector<std::vector<int>>> rows);
  /// per-prototype binary-concrete mask from 2-column logits gamma:
  /// M_i = sigmoid((gamma[i,0] - gamma[i,1] + noise[i]) / tau)
  H gumbel_sigmoid(H gamma, std::vector<double> noise, double tau);

  const Tensor& value(H h) const { return nodes_[static_cast<size_t>(h)].value; }
  /// valid after backward(); zeros tensor if the node was never reached
  const Tensor& grad(H h);

  void backward(H loss);
  size_t size() const { return nodes_.size(); }

  static constexpr double kLogEps = 1e-12;

 private:
  struct Node {
    Tensor value;
    Tensor grad;            // allocated lazily during backward
    bool requires_grad = false;
    bool reached = false;   // a downstream node deposited gradient here
    std::function<void(Tape&)> back;  // nullptr for leaves
  };

  H push(Tensor value, bool requires_grad, std::function<void(Tape&)> back);
  Tensor& grad_buf(H h);
  bool wants_grad(H h) const {
    return nodes_[static_cast<size_t>(h)].requires_grad;
  }
  void check_finite(const Tensor& t, const char* op) const;

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

/// Standard Adam with bias correction; state is owned per parameter tensor.
struct AdamState {
  Tensor m;
  Tensor v;
  long step = 0;
};

void adam_step(Tensor& param, const Tensor& grad, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

}  // namespace pp
