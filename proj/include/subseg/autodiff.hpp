#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "subseg/tensor.hpp"

namespace subseg::ad {

/// Thread-local flag; when false, ops compute values without recording the
/// graph (inference mode).
bool& grad_enabled();

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct Node {
  Tensor val;
  Tensor grad;  // allocated lazily, same shape as val
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> back;
  uint64_t id = 0;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor(val.dims);
  }
};

/// Handle to a graph node. Copy is cheap (shared ownership).
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  /// Leaf that never requires grad.
  static Var constant(Tensor t);
  /// Trainable leaf (requires grad regardless of grad mode).
  static Var param(Tensor t);

  bool defined() const { return static_cast<bool>(n_); }
  const Tensor& value() const { return n_->val; }
  Tensor& value() { return n_->val; }
  Tensor& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_ && n_->needs_grad; }
  const std::shared_ptr<Node>& node() const { return n_; }

  void zero_grad() {
    if (n_ && !n_->grad.data.empty())
      std::fill(n_->grad.data.begin(), n_->grad.data.end(), 0.0);
  }

 private:
  std::shared_ptr<Node> n_;
};

/// Runs reverse-mode accumulation from a scalar root into every reachable
/// node with requires == true.
void backward(const Var& root);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scalar_mul(const Var& a, double c);
Var scalar_add(const Var& a, double c);
Var add_fixed(const Var& a, const Tensor& t);  // a + constant tensor
Var scale_by(const Var& s, const Var& x);      // s: [1] scalar variable
Var gelu(const Var& x);
Var tanh_op(const Var& x);
Var sigmoid_op(const Var& x);

// ---- linear algebra / shaping ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_row(const Var& x, const Var& b);  // [n,d] + [d]
Var reshape_copy(const Var& x, std::vector<long> dims);
Var slice_rows(const Var& x, long r0, long len);
Var slice_cols(const Var& x, long c0, long len);
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);

// ---- reductions / normalization ----
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var gap_chw(const Var& x);  // [C,H,W] -> [C] spatial mean
Var softmax_rows(const Var& x);
/// Softmax over a length-M vector; the denominator is accumulated in
/// value-sorted order so the result is bit-identical under permutation of
/// the inputs.
Var softmax_vec_canonical(const Var& e);
Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

// ---- conv / resampling ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
/// Transposed conv, kernel 2 stride 2 (exact 2x upsampling). w: [Cin,Cout,2,2].
Var upconv2x(const Var& x, const Var& w, const Var& b);
Var upsample_bilinear(const Var& x, long out_h, long out_w);

// ---- losses ----
Var bce_logits_mean(const Var& logits, const Tensor& target);
Var soft_dice_loss(const Var& logits, const Tensor& target, double eps);

/// Convex fusion sum_m alpha[m] * maps[m], accumulated per element in
/// value-sorted order and clamped to [min_m maps, max_m maps] so the result
/// is permutation-exact and the convexity bound holds in floating point.
Var fuse_convex(const Var& alpha, const std::vector<Var>& maps);

}  // namespace subseg::ad
