#include "subseg/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace subseg::nn {

ad::Var ParamStore::create(const std::string& name, Tensor init) {
  if (vars_.count(name)) throw std::invalid_argument("params: duplicate name '" + name + "'");
  ad::Var v = ad::Var::param(std::move(init));
  vars_.emplace(name, v);
  order_.push_back(name);
  return v;
}

ad::Var ParamStore::create_buffer(const std::string& name, Tensor value) {
  if (vars_.count(name)) throw std::invalid_argument("params: duplicate name '" + name + "'");
  ad::Var v = ad::Var::constant(std::move(value));
  vars_.emplace(name, v);
  buffer_order_.push_back(name);
  return v;
}

const ad::Var& ParamStore::get(const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw std::invalid_argument("params: unknown name '" + name + "'");
  return it->second;
}

bool ParamStore::has(const std::string& name) const { return vars_.count(name) != 0; }

std::vector<ad::Var> ParamStore::trainable() const {
  std::vector<ad::Var> out;
  out.reserve(order_.size());
  for (const std::string& n : order_) out.push_back(vars_.at(n));
  return out;
}

long ParamStore::param_count() const {
  long n = 0;
  for (const std::string& name : order_) n += vars_.at(name).value().numel();
  return n;
}

Tensor init_normal(std::vector<long> dims, double stddev, Rng& rng) {
  Tensor t(std::move(dims));
  for (double& v : t.data) v = stddev * rng.normal();
  return t;
}

Tensor init_conv(long c_out, long c_in, long k, Rng& rng) {
  const double stddev = std::sqrt(2.0 / double(c_in * k * k));
  return init_normal({c_out, c_in, k, k}, stddev, rng);
}

Tensor init_upconv(long c_in, long c_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / double(c_in * 4));
  return init_normal({c_in, c_out, 2, 2}, stddev, rng);
}

Tensor init_linear(long d_in, long d_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / double(d_in + d_out));
  return init_normal({d_in, d_out}, stddev, rng);
}

Adam::Adam(std::vector<ad::Var> params, double beta1, double beta2, double eps)
    : b1_(beta1), b2_(beta2), eps_(eps) {
  slots_.reserve(params.size());
  for (ad::Var& p : params) {
    Slot s;
    s.m = Tensor(p.value().dims);
    s.v = Tensor(p.value().dims);
    s.p = std::move(p);
    slots_.push_back(std::move(s));
  }
}

void Adam::zero_grad() {
  for (Slot& s : slots_) s.p.zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, double(t_));
  const double bc2 = 1.0 - std::pow(b2_, double(t_));
  for (Slot& s : slots_) {
    Tensor& g = s.p.grad();
    Tensor& x = s.p.value();
    for (size_t i = 0; i < x.data.size(); ++i) {
      const double gi = g.data[i];
      s.m.data[i] = b1_ * s.m.data[i] + (1.0 - b1_) * gi;
      s.v.data[i] = b2_ * s.v.data[i] + (1.0 - b2_) * gi * gi;
      const double mhat = s.m.data[i] / bc1;
      const double vhat = s.v.data[i] / bc2;
      x.data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace subseg::nn
