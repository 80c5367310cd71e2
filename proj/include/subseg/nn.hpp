#pragma once

#include <map>
#include <string>
#include <vector>

#include "subseg/autodiff.hpp"
#include "subseg/rng.hpp"
#include "subseg/tensor.hpp"

namespace subseg::nn {

/// Owns named parameters and buffers in a fixed creation order, which makes
/// initialization, optimization, and checkpoints deterministic.
class ParamStore {
 public:
  ad::Var create(const std::string& name, Tensor init);
  /// Non-trainable tensor that is still serialized with checkpoints.
  ad::Var create_buffer(const std::string& name, Tensor value);

  const ad::Var& get(const std::string& name) const;
  bool has(const std::string& name) const;

  const std::vector<std::string>& names() const { return order_; }
  const std::vector<std::string>& buffer_names() const { return buffer_order_; }
  std::vector<ad::Var> trainable() const;
  long param_count() const;

 private:
  std::map<std::string, ad::Var> vars_;
  std::vector<std::string> order_;
  std::vector<std::string> buffer_order_;
};

// Initializers; all randomness comes from the caller's rng so parameter
// creation order fixes the values.
Tensor init_normal(std::vector<long> dims, double stddev, Rng& rng);
Tensor init_conv(long c_out, long c_in, long k, Rng& rng);      // He fan-in
Tensor init_upconv(long c_in, long c_out, Rng& rng);            // kernel 2x2
Tensor init_linear(long d_in, long d_out, Rng& rng);            // Xavier

/// Adam over a fixed parameter list; state arrays keyed by position.
class Adam {
 public:
  explicit Adam(std::vector<ad::Var> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void zero_grad();
  void step(double lr);
  long steps_taken() const { return t_; }

 private:
  struct Slot {
    ad::Var p;
    Tensor m, v;
  };
  std::vector<Slot> slots_;
  double b1_, b2_, eps_;
  long t_ = 0;
};

}  // namespace subseg::nn
