#include "subseg/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace subseg::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapC = Eigen::Map<const RowMat>;

std::atomic<uint64_t> g_node_counter{0};

std::shared_ptr<Node> new_node(Tensor val) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->id = ++g_node_counter;
  return n;
}

bool recording(std::initializer_list<const Var*> parents) {
  if (!grad_enabled()) return false;
  for (const Var* p : parents)
    if (p->requires_grad()) return true;
  return false;
}

Var make_op(Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = new_node(std::move(val));
  bool req = false;
  if (grad_enabled())
    for (const Var& p : parents) req = req || p.requires_grad();
  if (req) {
    n->needs_grad = true;
    n->parents.reserve(parents.size());
    for (const Var& p : parents) n->parents.push_back(p.node());
    n->back = std::move(back);
  }
  return Var(n);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.value().dims) + " vs " + shape_str(b.value().dims));
}

double sigmoid_d(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

Var Var::constant(Tensor t) { return Var(new_node(std::move(t))); }

Var Var::param(Tensor t) {
  auto n = new_node(std::move(t));
  n->needs_grad = true;
  return Var(n);
}

void backward(const Var& root) {
  if (!root.defined() || root.value().numel() != 1)
    throw std::invalid_argument("backward: root must be a defined scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->needs_grad || seen.count(n)) continue;
    seen.insert(n);
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  root.node()->ensure_grad();
  root.node()->grad.data[0] = 1.0;
  for (Node* n : order)
    if (n->back) n->back(*n);
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->needs_grad) continue;
      p->ensure_grad();
      const long n = self.grad.numel();
      for (long i = 0; i < n; ++i) p->grad[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const long n = self.grad.numel();
    if (self.parents[0]->needs_grad) {
      self.parents[0]->ensure_grad();
      for (long i = 0; i < n; ++i) self.parents[0]->grad[i] += self.grad[i];
    }
    if (self.parents[1]->needs_grad) {
      self.parents[1]->ensure_grad();
      for (long i = 0; i < n; ++i) self.parents[1]->grad[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const long n = self.grad.numel();
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    if (self.parents[0]->needs_grad) {
      self.parents[0]->ensure_grad();
      for (long i = 0; i < n; ++i) self.parents[0]->grad[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->needs_grad) {
      self.parents[1]->ensure_grad();
      for (long i = 0; i < n; ++i) self.parents[1]->grad[i] += self.grad[i] * av[i];
    }
  });
}

Var scalar_mul(const Var& a, double c) {
  Tensor out(a.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.value()[i] * c;
  return make_op(std::move(out), {a}, [c](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    for (long i = 0; i < n; ++i) p->grad[i] += self.grad[i] * c;
  });
}

Var scalar_add(const Var& a, double c) {
  Tensor out(a.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.value()[i] + c;
  return make_op(std::move(out), {a}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    for (long i = 0; i < n; ++i) p->grad[i] += self.grad[i];
  });
}

Var add_fixed(const Var& a, const Tensor& t) {
  if (!a.value().same_shape(t))
    throw std::invalid_argument("add_fixed: shape mismatch");
  Tensor out(a.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = a.value()[i] + t[i];
  return make_op(std::move(out), {a}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    for (long i = 0; i < n; ++i) p->grad[i] += self.grad[i];
  });
}

Var scale_by(const Var& s, const Var& x) {
  if (s.value().numel() != 1) throw std::invalid_argument("scale_by: scalar must have 1 element");
  const double c = s.value()[0];
  Tensor out(x.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = x.value()[i] * c;
  return make_op(std::move(out), {s, x}, [](Node& self) {
    const long n = self.grad.numel();
    const double c = self.parents[0]->val[0];
    const Tensor& xv = self.parents[1]->val;
    if (self.parents[0]->needs_grad) {
      self.parents[0]->ensure_grad();
      double acc = 0.0;
      for (long i = 0; i < n; ++i) acc += self.grad[i] * xv[i];
      self.parents[0]->grad[0] += acc;
    }
    if (self.parents[1]->needs_grad) {
      self.parents[1]->ensure_grad();
      for (long i = 0; i < n; ++i) self.parents[1]->grad[i] += self.grad[i] * c;
    }
  });
}

Var gelu(const Var& x) {
  Tensor out(x.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) {
    const double v = x.value()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  }
  return make_op(std::move(out), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (long i = 0; i < n; ++i) {
      const double v = p->val[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      p->grad[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Var tanh_op(const Var& x) {
  Tensor out(x.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = std::tanh(x.value()[i]);
  return make_op(std::move(out), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    for (long i = 0; i < n; ++i) {
      const double y = self.val[i];
      p->grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

Var sigmoid_op(const Var& x) {
  Tensor out(x.value().dims);
  const long n = out.numel();
  for (long i = 0; i < n; ++i) out[i] = sigmoid_d(x.value()[i]);
  return make_op(std::move(out), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    for (long i = 0; i < n; ++i) {
      const double y = self.val[i];
      p->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dims[1] != bv.dims[0])
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.dims) + " x " +
                                shape_str(bv.dims));
  const long m = av.dims[0], k = av.dims[1], n = bv.dims[1];
  Tensor out({m, n});
  {
    MapC A(av.data.data(), m, k), B(bv.data.data(), k, n);
    MapM C(out.data.data(), m, n);
    C.noalias() = A * B;
  }
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    MapC G(self.grad.data.data(), m, n);
    if (self.parents[0]->needs_grad) {
      self.parents[0]->ensure_grad();
      MapC B(self.parents[1]->val.data.data(), k, n);
      MapM GA(self.parents[0]->grad.data.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (self.parents[1]->needs_grad) {
      self.parents[1]->ensure_grad();
      MapC A(self.parents[0]->val.data.data(), m, k);
      MapM GB(self.parents[1]->grad.data.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

Var transpose(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw std::invalid_argument("transpose: rank-2 required");
  const long m = av.dims[0], n = av.dims[1];
  Tensor out({n, m});
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j) out.at2(j, i) = av.at2(i, j);
  return make_op(std::move(out), {a}, [m, n](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < n; ++j) p->grad.at2(i, j) += self.grad.at2(j, i);
  });
}

Var add_row(const Var& x, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dims[0] != xv.dims[1])
    throw std::invalid_argument("add_row: shape mismatch");
  const long n = xv.dims[0], d = xv.dims[1];
  Tensor out({n, d});
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < d; ++j) out.at2(i, j) = xv.at2(i, j) + bv[j];
  return make_op(std::move(out), {x, b}, [n, d](Node& self) {
    if (self.parents[0]->needs_grad) {
      self.parents[0]->ensure_grad();
      const long total = n * d;
      for (long i = 0; i < total; ++i) self.parents[0]->grad[i] += self.grad[i];
    }
    if (self.parents[1]->needs_grad) {
      self.parents[1]->ensure_grad();
      for (long i = 0; i < n; ++i)
        for (long j = 0; j < d; ++j) self.parents[1]->grad[j] += self.grad.at2(i, j);
    }
  });
}

Var reshape_copy(const Var& x, std::vector<long> dims) {
  Tensor out;
  out.dims = std::move(dims);
  if (Tensor::checked_numel(out.dims) != x.value().numel())
    throw std::invalid_argument("reshape: element count mismatch");
  out.data = x.value().data;
  return make_op(std::move(out), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = self.grad.numel();
    for (long i = 0; i < n; ++i) p->grad[i] += self.grad[i];
  });
}

Var slice_rows(const Var& x, long r0, long len) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || r0 < 0 || len <= 0 || r0 + len > xv.dims[0])
    throw std::invalid_argument("slice_rows: out of range");
  const long d = xv.dims[1];
  Tensor out({len, d});
  std::copy(xv.data.begin() + r0 * d, xv.data.begin() + (r0 + len) * d, out.data.begin());
  return make_op(std::move(out), {x}, [r0, len, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (long i = 0; i < len * d; ++i) p->grad[r0 * d + i] += self.grad[i];
  });
}

Var slice_cols(const Var& x, long c0, long len) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || c0 < 0 || len <= 0 || c0 + len > xv.dims[1])
    throw std::invalid_argument("slice_cols: out of range");
  const long n = xv.dims[0], d = xv.dims[1];
  Tensor out({n, len});
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < len; ++j) out.at2(i, j) = xv.at2(i, c0 + j);
  return make_op(std::move(out), {x}, [c0, len, n, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    (void)d;
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < len; ++j) p->grad.at2(i, c0 + j) += self.grad.at2(i, j);
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  const long d = xs[0].value().dims[1];
  long rows = 0;
  for (const Var& v : xs) {
    if (v.value().rank() != 2 || v.value().dims[1] != d)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += v.value().dims[0];
  }
  Tensor out({rows, d});
  long r = 0;
  std::vector<long> row_of;
  for (const Var& v : xs) {
    row_of.push_back(r);
    std::copy(v.value().data.begin(), v.value().data.end(), out.data.begin() + r * d);
    r += v.value().dims[0];
  }
  return make_op(std::move(out), xs, [row_of, d](Node& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      if (!p->needs_grad) continue;
      p->ensure_grad();
      const long n = p->val.numel();
      const long off = row_of[k] * d;
      for (long i = 0; i < n; ++i) p->grad[i] += self.grad[off + i];
    }
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  const long n = xs[0].value().dims[0];
  long cols = 0;
  for (const Var& v : xs) {
    if (v.value().rank() != 2 || v.value().dims[0] != n)
      throw std::invalid_argument("concat_cols: row mismatch");
    cols += v.value().dims[1];
  }
  Tensor out({n, cols});
  long c = 0;
  std::vector<long> col_of, width;
  for (const Var& v : xs) {
    col_of.push_back(c);
    width.push_back(v.value().dims[1]);
    for (long i = 0; i < n; ++i)
      for (long j = 0; j < v.value().dims[1]; ++j) out.at2(i, c + j) = v.value().at2(i, j);
    c += v.value().dims[1];
  }
  return make_op(std::move(out), xs, [col_of, width, n](Node& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      if (!p->needs_grad) continue;
      p->ensure_grad();
      for (long i = 0; i < n; ++i)
        for (long j = 0; j < width[k]; ++j)
          p->grad.at2(i, j) += self.grad.at2(i, col_of[k] + j);
    }
  });
}

// ------------------------------------------------------------------ reductions

Var sum_all(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data) acc += v;
  return make_op(Tensor::scalar(acc), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const double g = self.grad[0];
    for (double& v : p->grad.data) v += g;
  });
}

Var mean_all(const Var& x) {
  const double n = static_cast<double>(x.value().numel());
  double acc = 0.0;
  for (double v : x.value().data) acc += v;
  return make_op(Tensor::scalar(acc / n), {x}, [n](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const double g = self.grad[0] / n;
    for (double& v : p->grad.data) v += g;
  });
}

Var gap_chw(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw std::invalid_argument("gap: rank-3 [C,H,W] required");
  const long c = xv.dims[0], hw = xv.dims[1] * xv.dims[2];
  Tensor out({c});
  for (long i = 0; i < c; ++i) {
    double acc = 0.0;
    for (long j = 0; j < hw; ++j) acc += xv[i * hw + j];
    out[i] = acc / static_cast<double>(hw);
  }
  return make_op(std::move(out), {x}, [c, hw](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (long i = 0; i < c; ++i) {
      const double g = self.grad[i] / static_cast<double>(hw);
      for (long j = 0; j < hw; ++j) p->grad[i * hw + j] += g;
    }
  });
}

Var softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 required");
  const long n = xv.dims[0], d = xv.dims[1];
  Tensor out({n, d});
  for (long i = 0; i < n; ++i) {
    double mx = xv.at2(i, 0);
    for (long j = 1; j < d; ++j) mx = std::max(mx, xv.at2(i, j));
    double denom = 0.0;
    for (long j = 0; j < d; ++j) {
      const double e = std::exp(xv.at2(i, j) - mx);
      out.at2(i, j) = e;
      denom += e;
    }
    for (long j = 0; j < d; ++j) out.at2(i, j) /= denom;
  }
  return make_op(std::move(out), {x}, [n, d](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (long i = 0; i < n; ++i) {
      double dot = 0.0;
      for (long j = 0; j < d; ++j) dot += self.grad.at2(i, j) * self.val.at2(i, j);
      for (long j = 0; j < d; ++j)
        p->grad.at2(i, j) += self.val.at2(i, j) * (self.grad.at2(i, j) - dot);
    }
  });
}

Var softmax_vec_canonical(const Var& e) {
  const Tensor& ev = e.value();
  if (ev.rank() != 1) throw std::invalid_argument("softmax_vec: rank-1 required");
  const long m = ev.dims[0];
  double mx = ev[0];
  for (long i = 1; i < m; ++i) mx = std::max(mx, ev[i]);
  std::vector<double> ex(static_cast<size_t>(m));
  for (long i = 0; i < m; ++i) ex[static_cast<size_t>(i)] = std::exp(ev[i] - mx);
  std::vector<double> sorted = ex;
  std::sort(sorted.begin(), sorted.end());
  double denom = 0.0;
  for (double v : sorted) denom += v;
  Tensor out({m});
  for (long i = 0; i < m; ++i) out[i] = ex[static_cast<size_t>(i)] / denom;
  return make_op(std::move(out), {e}, [m](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    double dot = 0.0;
    for (long i = 0; i < m; ++i) dot += self.grad[i] * self.val[i];
    for (long i = 0; i < m; ++i) p->grad[i] += self.val[i] * (self.grad[i] - dot);
  });
}

Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw std::invalid_argument("layernorm: rank-2 required");
  const long n = xv.dims[0], d = xv.dims[1];
  if (gamma.value().numel() != d || beta.value().numel() != d)
    throw std::invalid_argument("layernorm: gamma/beta size mismatch");
  Tensor out({n, d});
  Tensor xhat({n, d});
  std::vector<double> istd(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    double mu = 0.0;
    for (long j = 0; j < d; ++j) mu += xv.at2(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) {
      const double c = xv.at2(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    istd[static_cast<size_t>(i)] = is;
    for (long j = 0; j < d; ++j) {
      const double h = (xv.at2(i, j) - mu) * is;
      xhat.at2(i, j) = h;
      out.at2(i, j) = gamma.value()[j] * h + beta.value()[j];
    }
  }
  const bool rec = recording({&x, &gamma, &beta});
  if (!rec) return Var::constant(std::move(out));
  return make_op(std::move(out), {x, gamma, beta},
                 [n, d, xhat = std::move(xhat), istd = std::move(istd)](Node& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    const Tensor& gm = pg->val;
    if (pg->needs_grad) pg->ensure_grad();
    if (pb->needs_grad) pb->ensure_grad();
    if (px->needs_grad) px->ensure_grad();
    for (long i = 0; i < n; ++i) {
      double mean_h = 0.0, mean_hx = 0.0;
      for (long j = 0; j < d; ++j) {
        const double gy = self.grad.at2(i, j);
        const double h = gm[j] * gy;
        mean_h += h;
        mean_hx += h * xhat.at2(i, j);
        if (pg->needs_grad) pg->grad[j] += gy * xhat.at2(i, j);
        if (pb->needs_grad) pb->grad[j] += gy;
      }
      if (!px->needs_grad) continue;
      mean_h /= static_cast<double>(d);
      mean_hx /= static_cast<double>(d);
      const double is = istd[static_cast<size_t>(i)];
      for (long j = 0; j < d; ++j) {
        const double h = gm[j] * self.grad.at2(i, j);
        px->grad.at2(i, j) += is * (h - mean_h - xhat.at2(i, j) * mean_hx);
      }
    }
  });
}

// ---------------------------------------------------------------------- conv

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || wv.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
  const long ci = xv.dims[0], h = xv.dims[1], wd = xv.dims[2];
  const long co = wv.dims[0], kh = wv.dims[2], kw = wv.dims[3];
  if (wv.dims[1] != ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (bv.numel() != co) throw std::invalid_argument("conv2d: bias size mismatch");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const long oh = (h + 2 * pad - kh) / stride + 1;
  const long ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");

  const long krows = ci * kh * kw, onum = oh * ow;
  Tensor cols({krows, onum});
  for (long c = 0; c < ci; ++c)
    for (long u = 0; u < kh; ++u)
      for (long v = 0; v < kw; ++v) {
        const long row = (c * kh + u) * kw + v;
        for (long oy = 0; oy < oh; ++oy) {
          const long iy = oy * stride + u - pad;
          for (long ox = 0; ox < ow; ++ox) {
            const long ix = ox * stride + v - pad;
            cols.at2(row, oy * ow + ox) =
                (iy >= 0 && iy < h && ix >= 0 && ix < wd) ? xv.at3(c, iy, ix) : 0.0;
          }
        }
      }

  Tensor out({co, oh, ow});
  {
    MapC W(wv.data.data(), co, krows), C(cols.data.data(), krows, onum);
    MapM O(out.data.data(), co, onum);
    O.noalias() = W * C;
  }
  for (long c = 0; c < co; ++c)
    for (long j = 0; j < onum; ++j) out[c * onum + j] += bv[c];

  const bool rec = recording({&x, &w, &b});
  if (!rec) return Var::constant(std::move(out));
  return make_op(std::move(out), {x, w, b},
                 [ci, h, wd, co, kh, kw, stride, pad, oh, ow, krows, onum,
                  cols = std::move(cols)](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    MapC G(self.grad.data.data(), co, onum);
    if (pb->needs_grad) {
      pb->ensure_grad();
      for (long c = 0; c < co; ++c) {
        double acc = 0.0;
        for (long j = 0; j < onum; ++j) acc += self.grad[c * onum + j];
        pb->grad[c] += acc;
      }
    }
    if (pw->needs_grad) {
      pw->ensure_grad();
      MapC C(cols.data.data(), krows, onum);
      MapM GW(pw->grad.data.data(), co, krows);
      GW.noalias() += G * C.transpose();
    }
    if (px->needs_grad) {
      px->ensure_grad();
      Tensor gcols({krows, onum});
      MapC W(pw->val.data.data(), co, krows);
      MapM GC(gcols.data.data(), krows, onum);
      GC.noalias() = W.transpose() * G;
      for (long c = 0; c < ci; ++c)
        for (long u = 0; u < kh; ++u)
          for (long v = 0; v < kw; ++v) {
            const long row = (c * kh + u) * kw + v;
            for (long oy = 0; oy < oh; ++oy) {
              const long iy = oy * stride + u - pad;
              if (iy < 0 || iy >= h) continue;
              for (long ox = 0; ox < ow; ++ox) {
                const long ix = ox * stride + v - pad;
                if (ix < 0 || ix >= wd) continue;
                px->grad.at3(c, iy, ix) += gcols.at2(row, oy * ow + ox);
              }
            }
          }
    }
  });
}

Var upconv2x(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dims[2] != 2 || wv.dims[3] != 2)
    throw std::invalid_argument("upconv2x: expects x[C,H,W], w[Cin,Cout,2,2]");
  const long ci = xv.dims[0], h = xv.dims[1], wd = xv.dims[2];
  if (wv.dims[0] != ci) throw std::invalid_argument("upconv2x: channel mismatch");
  const long co = wv.dims[1];
  if (bv.numel() != co) throw std::invalid_argument("upconv2x: bias size mismatch");
  Tensor out({co, 2 * h, 2 * wd});
  for (long oc = 0; oc < co; ++oc)
    std::fill(out.data.begin() + oc * 4 * h * wd, out.data.begin() + (oc + 1) * 4 * h * wd, bv[oc]);
  for (long c = 0; c < ci; ++c)
    for (long oc = 0; oc < co; ++oc) {
      const double w00 = wv[((c * co + oc) * 2 + 0) * 2 + 0];
      const double w01 = wv[((c * co + oc) * 2 + 0) * 2 + 1];
      const double w10 = wv[((c * co + oc) * 2 + 1) * 2 + 0];
      const double w11 = wv[((c * co + oc) * 2 + 1) * 2 + 1];
      for (long i = 0; i < h; ++i)
        for (long j = 0; j < wd; ++j) {
          const double v = xv.at3(c, i, j);
          out.at3(oc, 2 * i, 2 * j) += v * w00;
          out.at3(oc, 2 * i, 2 * j + 1) += v * w01;
          out.at3(oc, 2 * i + 1, 2 * j) += v * w10;
          out.at3(oc, 2 * i + 1, 2 * j + 1) += v * w11;
        }
    }
  return make_op(std::move(out), {x, w, b}, [ci, co, h, wd](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    if (pb->needs_grad) {
      pb->ensure_grad();
      for (long oc = 0; oc < co; ++oc) {
        double acc = 0.0;
        const long base = oc * 4 * h * wd;
        for (long j = 0; j < 4 * h * wd; ++j) acc += self.grad[base + j];
        pb->grad[oc] += acc;
      }
    }
    if (px->needs_grad) px->ensure_grad();
    if (pw->needs_grad) pw->ensure_grad();
    for (long c = 0; c < ci; ++c)
      for (long oc = 0; oc < co; ++oc) {
        const long wbase = ((c * co + oc) * 2) * 2;
        const double w00 = pw->val[wbase + 0];
        const double w01 = pw->val[wbase + 1];
        const double w10 = pw->val[wbase + 2];
        const double w11 = pw->val[wbase + 3];
        double gw00 = 0, gw01 = 0, gw10 = 0, gw11 = 0;
        for (long i = 0; i < h; ++i)
          for (long j = 0; j < wd; ++j) {
            const double g00 = self.grad.at3(oc, 2 * i, 2 * j);
            const double g01 = self.grad.at3(oc, 2 * i, 2 * j + 1);
            const double g10 = self.grad.at3(oc, 2 * i + 1, 2 * j);
            const double g11 = self.grad.at3(oc, 2 * i + 1, 2 * j + 1);
            if (px->needs_grad)
              px->grad.at3(c, i, j) += g00 * w00 + g01 * w01 + g10 * w10 + g11 * w11;
            if (pw->needs_grad) {
              const double v = px->val.at3(c, i, j);
              gw00 += v * g00;
              gw01 += v * g01;
              gw10 += v * g10;
              gw11 += v * g11;
            }
          }
        if (pw->needs_grad) {
          pw->grad[wbase + 0] += gw00;
          pw->grad[wbase + 1] += gw01;
          pw->grad[wbase + 2] += gw10;
          pw->grad[wbase + 3] += gw11;
        }
      }
  });
}

namespace {
struct LerpAxis {
  std::vector<long> i0, i1;
  std::vector<double> w0, w1;
};
LerpAxis lerp_axis(long in, long out) {
  LerpAxis a;
  a.i0.resize(static_cast<size_t>(out));
  a.i1.resize(static_cast<size_t>(out));
  a.w0.resize(static_cast<size_t>(out));
  a.w1.resize(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (long o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    long lo = static_cast<long>(std::floor(src));
    double f = src - static_cast<double>(lo);
    long hi = lo + 1;
    lo = std::clamp(lo, 0L, in - 1);
    hi = std::clamp(hi, 0L, in - 1);
    a.i0[static_cast<size_t>(o)] = lo;
    a.i1[static_cast<size_t>(o)] = hi;
    a.w0[static_cast<size_t>(o)] = 1.0 - f;
    a.w1[static_cast<size_t>(o)] = f;
  }
  return a;
}
}  // namespace

Var upsample_bilinear(const Var& x, long out_h, long out_w) {
  const Tensor& xv = x.value();
  std::vector<long> odims;
  long c = 1, h = 0, w = 0;
  if (xv.rank() == 3) {
    c = xv.dims[0];
    h = xv.dims[1];
    w = xv.dims[2];
    odims = {c, out_h, out_w};
  } else if (xv.rank() == 2) {
    h = xv.dims[0];
    w = xv.dims[1];
    odims = {out_h, out_w};
  } else {
    throw std::invalid_argument("upsample_bilinear: rank-2 or rank-3 required");
  }
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("upsample_bilinear: bad output size");
  LerpAxis ay = lerp_axis(h, out_h), ax = lerp_axis(w, out_w);
  Tensor out(odims);
  for (long ch = 0; ch < c; ++ch) {
    const double* src = xv.data.data() + ch * h * w;
    double* dst = out.data.data() + ch * out_h * out_w;
    for (long oy = 0; oy < out_h; ++oy)
      for (long ox = 0; ox < out_w; ++ox) {
        const auto yo = static_cast<size_t>(oy), xo = static_cast<size_t>(ox);
        dst[oy * out_w + ox] =
            ay.w0[yo] * (ax.w0[xo] * src[ay.i0[yo] * w + ax.i0[xo]] +
                         ax.w1[xo] * src[ay.i0[yo] * w + ax.i1[xo]]) +
            ay.w1[yo] * (ax.w0[xo] * src[ay.i1[yo] * w + ax.i0[xo]] +
                         ax.w1[xo] * src[ay.i1[yo] * w + ax.i1[xo]]);
      }
  }
  return make_op(std::move(out), {x},
                 [c, h, w, out_h, out_w, ay = std::move(ay), ax = std::move(ax)](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    for (long ch = 0; ch < c; ++ch) {
      double* gsrc = p->grad.data.data() + ch * h * w;
      const double* gdst = self.grad.data.data() + ch * out_h * out_w;
      for (long oy = 0; oy < out_h; ++oy)
        for (long ox = 0; ox < out_w; ++ox) {
          const auto yo = static_cast<size_t>(oy), xo = static_cast<size_t>(ox);
          const double g = gdst[oy * out_w + ox];
          gsrc[ay.i0[yo] * w + ax.i0[xo]] += g * ay.w0[yo] * ax.w0[xo];
          gsrc[ay.i0[yo] * w + ax.i1[xo]] += g * ay.w0[yo] * ax.w1[xo];
          gsrc[ay.i1[yo] * w + ax.i0[xo]] += g * ay.w1[yo] * ax.w0[xo];
          gsrc[ay.i1[yo] * w + ax.i1[xo]] += g * ay.w1[yo] * ax.w1[xo];
        }
    }
  });
}

// -------------------------------------------------------------------- losses

Var bce_logits_mean(const Var& logits, const Tensor& target) {
  const Tensor& xv = logits.value();
  if (!xv.same_shape(target)) throw std::invalid_argument("bce: target shape mismatch");
  const long n = xv.numel();
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    const double x = xv[i], t = target[i];
    acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  return make_op(Tensor::scalar(acc / static_cast<double>(n)), {logits}, [target](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = p->val.numel();
    const double g = self.grad[0] / static_cast<double>(n);
    for (long i = 0; i < n; ++i) p->grad[i] += g * (sigmoid_d(p->val[i]) - target[i]);
  });
}

Var soft_dice_loss(const Var& logits, const Tensor& target, double eps) {
  const Tensor& xv = logits.value();
  if (!xv.same_shape(target)) throw std::invalid_argument("soft_dice: target shape mismatch");
  const long n = xv.numel();
  double s1 = 0.0, sp = 0.0, st = 0.0;
  for (long i = 0; i < n; ++i) {
    const double p = sigmoid_d(xv[i]);
    s1 += p * target[i];
    sp += p;
    st += target[i];
  }
  const double denom = sp + st + eps;
  const double loss = 1.0 - (2.0 * s1 + eps) / denom;
  return make_op(Tensor::scalar(loss), {logits}, [target, eps, s1, denom](Node& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    p->ensure_grad();
    const long n = p->val.numel();
    const double g = self.grad[0];
    const double num = 2.0 * s1 + eps;
    for (long i = 0; i < n; ++i) {
      const double pr = sigmoid_d(p->val[i]);
      const double dldp = -(2.0 * target[i] * denom - num) / (denom * denom);
      p->grad[i] += g * dldp * pr * (1.0 - pr);
    }
  });
}

Var fuse_convex(const Var& alpha, const std::vector<Var>& maps) {
  if (maps.empty()) throw std::invalid_argument("fuse: no feature maps");
  const long m = alpha.value().numel();
  if (alpha.value().rank() != 1 || m != static_cast<long>(maps.size()))
    throw std::invalid_argument("fuse: weight count must match modality count");
  if (m > 16) throw std::invalid_argument("fuse: at most 16 modalities supported");
  for (const Var& f : maps)
    if (!f.value().same_shape(maps[0].value()))
      throw std::invalid_argument("fuse: feature map shapes differ");
  const long n = maps[0].value().numel();
  Tensor out(maps[0].value().dims);
  double terms[16];
  for (long i = 0; i < n; ++i) {
    double lo = maps[0].value()[i], hi = lo;
    for (long k = 0; k < m; ++k) {
      const double f = maps[k].value()[i];
      lo = std::min(lo, f);
      hi = std::max(hi, f);
      terms[k] = alpha.value()[k] * f;
    }
    std::sort(terms, terms + m);
    double acc = 0.0;
    for (long k = 0; k < m; ++k) acc += terms[k];
    out[i] = std::clamp(acc, lo, hi);
  }
  std::vector<Var> parents{alpha};
  parents.insert(parents.end(), maps.begin(), maps.end());
  return make_op(std::move(out), std::move(parents), [m, n](Node& self) {
    auto& pa = self.parents[0];
    if (pa->needs_grad) {
      pa->ensure_grad();
      for (long k = 0; k < m; ++k) {
        const Tensor& f = self.parents[static_cast<size_t>(k + 1)]->val;
        double acc = 0.0;
        for (long i = 0; i < n; ++i) acc += f[i] * self.grad[i];
        pa->grad[k] += acc;
      }
    }
    for (long k = 0; k < m; ++k) {
      auto& pf = self.parents[static_cast<size_t>(k + 1)];
      if (!pf->needs_grad) continue;
      pf->ensure_grad();
      const double a = pa->val[k];
      for (long i = 0; i < n; ++i) pf->grad[i] += a * self.grad[i];
    }
  });
}

}  // namespace subseg::ad
