#include "sdcot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace sdcot {

namespace {

thread_local bool g_grad_mode = true;

void check_finite_throw(double v, const char* op) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(std::string(op) + ": non-finite value encountered");
  }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_to_string(a) +
                              " vs " + shape_to_string(b));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_to_string(t.shape()));
  }
}

}  // namespace

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_to_string(s));
    n *= d;
  }
  return n;
}

void TensorNode::ensure_grad() {
  if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_values(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values do not fill shape " + shape_to_string(shape));
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
int Tensor::dim(int i) const { return node_->shape.at(i); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_->values.size()); }

const std::vector<double>& Tensor::values() const { return node_->values; }
std::vector<double>& Tensor::mutable_values() { return node_->values; }

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
  }
  return node_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) throw std::invalid_argument("at(): rank mismatch");
  std::int64_t off = 0;
  std::size_t k = 0;
  for (int i : idx) {
    if (i < 0 || i >= s[k]) throw std::out_of_range("at(): index out of range");
    off = off * s[k] + i;
    ++k;
  }
  return node_->values[off];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool b) { node_->requires_grad = b; }
bool Tensor::grad_allocated() const { return node_->grad.size() == node_->values.size(); }

const std::vector<double>& Tensor::grad() const {
  if (!grad_allocated()) throw std::runtime_error("grad(): gradient not allocated");
  return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->values.size(), 0.0);
}

void Tensor::backward() const {
  if (!node_) throw std::runtime_error("backward(): undefined tensor");
  if (numel() != 1) throw std::invalid_argument("backward(): root must be scalar");

  // iterative post-order DFS for topological order
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* n;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (seen.insert(node_.get()).second) stack.push_back({node_.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next_parent++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// Builds an op node. In no-grad mode, or when no input needs gradients, the
// result is a detached constant.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backward_fn) {
  Tensor out = Tensor::from_values(std::move(shape), std::move(values), false);
  bool track = grad_mode_enabled();
  if (track) {
    bool any = false;
    for (const auto& t : inputs) {
      if (t.node()->requires_grad || !t.node()->parents.empty()) any = true;
    }
    track = any;
  }
  if (track) {
    auto n = out.node();
    n->requires_grad = true;
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const double s = av[i * k + l];
      if (s == 0.0) continue;
      const double* brow = &bv[static_cast<std::size_t>(l) * n];
      double* orow = &out[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& node) {
        const auto& g = node.grad;
        // dA += dC * B^T
        for (int i = 0; i < m; ++i) {
          for (int l = 0; l < k; ++l) {
            double acc = 0.0;
            const double* grow = &g[static_cast<std::size_t>(i) * n];
            const double* brow = &bn->values[static_cast<std::size_t>(l) * n];
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            an->grad[i * k + l] += acc;
          }
        }
        // dB += A^T * dC
        for (int l = 0; l < k; ++l) {
          for (int i = 0; i < m; ++i) {
            const double s = an->values[i * k + l];
            if (s == 0.0) continue;
            const double* grow = &g[static_cast<std::size_t>(i) * n];
            double* brow = &bn->grad[static_cast<std::size_t>(l) * n];
            for (int j = 0; j < n; ++j) brow[j] += s * grow[j];
          }
        }
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) shape_error("matmul_nt", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = &av[static_cast<std::size_t>(i) * k];
      const double* brow = &bv[static_cast<std::size_t>(j) * k];
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      out[static_cast<std::size_t>(i) * n + j] = acc;
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(
      {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& node) {
        const auto& g = node.grad;
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) {
            const double gij = g[static_cast<std::size_t>(i) * n + j];
            if (gij == 0.0) continue;
            double* arow = &an->grad[static_cast<std::size_t>(i) * k];
            double* brow = &bn->grad[static_cast<std::size_t>(j) * k];
            const double* avr = &an->values[static_cast<std::size_t>(i) * k];
            const double* bvr = &bn->values[static_cast<std::size_t>(j) * k];
            for (int l = 0; l < k; ++l) {
              arow[l] += gij * bvr[l];
              brow[l] += gij * avr[l];
            }
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      an->grad[i] += node.grad[i];
      bn->grad[i] += node.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      an->grad[i] += node.grad[i];
      bn->grad[i] -= node.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_result(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      an->grad[i] += node.grad[i] * bn->values[i];
      bn->grad[i] += node.grad[i] * an->values[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (auto& v : out) v *= c;
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an, c](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += c * node.grad[i];
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_matrix(a, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != a.dim(1)) shape_error("add_rowvec", a.shape(), v.shape());
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.values());
  const auto& vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += vv[j];
  auto an = a.node();
  auto vn = v.node();
  return make_op_result(a.shape(), std::move(out), {a, v}, [an, vn, m, n](TensorNode& node) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const double g = node.grad[static_cast<std::size_t>(i) * n + j];
        an->grad[static_cast<std::size_t>(i) * n + j] += g;
        vn->grad[j] += g;
      }
    }
  });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  require_matrix(a, "mul_rowvec");
  if (v.rank() != 1 || v.dim(0) != a.dim(1)) shape_error("mul_rowvec", a.shape(), v.shape());
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.values());
  const auto& vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] *= vv[j];
  auto an = a.node();
  auto vn = v.node();
  return make_op_result(a.shape(), std::move(out), {a, v}, [an, vn, m, n](TensorNode& node) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const std::size_t off = static_cast<std::size_t>(i) * n + j;
        an->grad[off] += node.grad[off] * vn->values[j];
        vn->grad[j] += node.grad[off] * an->values[off];
      }
    }
  });
}

Tensor sub_colvec(const Tensor& a, const Tensor& v) {
  require_matrix(a, "sub_colvec");
  if (v.rank() != 1 || v.dim(0) != a.dim(0)) shape_error("sub_colvec", a.shape(), v.shape());
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.values());
  const auto& vv = v.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] -= vv[i];
  auto an = a.node();
  auto vn = v.node();
  return make_op_result(a.shape(), std::move(out), {a, v}, [an, vn, m, n](TensorNode& node) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        const double g = node.grad[static_cast<std::size_t>(i) * n + j];
        an->grad[static_cast<std::size_t>(i) * n + j] += g;
        vn->grad[i] -= g;
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      if (an->values[i] > 0.0) an->grad[i] += node.grad[i];
    }
  });
}

Tensor exp_clamped(const Tensor& a, double lo, double hi) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = std::exp(std::clamp(v, lo, hi));
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an, lo, hi](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      const double x = an->values[i];
      if (x > lo && x < hi) an->grad[i] += node.grad[i] * node.values[i];
    }
  });
}

Tensor sqrt_guarded(const Tensor& a) {
  std::vector<double> out(a.values());
  for (auto& v : out) v = std::sqrt(v > 0.0 ? v : 0.0);
  auto an = a.node();
  return make_op_result(a.shape(), std::move(out), {a}, [an](TensorNode& node) {
    for (std::size_t i = 0; i < node.grad.size(); ++i) {
      if (an->values[i] > 1e-300) an->grad[i] += node.grad[i] * 0.5 / node.values[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto an = a.node();
  return make_op_result({}, {s}, {a}, [an](TensorNode& node) {
    const double g = node.grad[0];
    for (auto& v : an->grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double inv = 1.0 / static_cast<double>(a.numel());
  auto an = a.node();
  return make_op_result({}, {s * inv}, {a}, [an, inv](TensorNode& node) {
    const double g = node.grad[0] * inv;
    for (auto& v : an->grad) v += g;
  });
}

Tensor sum_rows(const Tensor& a) {
  require_matrix(a, "sum_rows");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m, 0.0);
  const auto& av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[i] += av[static_cast<std::size_t>(i) * n + j];
  auto an = a.node();
  return make_op_result({m}, std::move(out), {a}, [an, m, n](TensorNode& node) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        an->grad[static_cast<std::size_t>(i) * n + j] += node.grad[i];
  });
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  if (a.dim(1) == 0) throw std::invalid_argument("mean_rows: zero columns");
  return scale(sum_rows(a), 1.0 / a.dim(1));
}

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const int r = x.rank();
  if (r == 0) throw std::invalid_argument("softmax: scalar input");
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::int64_t len = s[axis];
  if (len == 0) throw std::invalid_argument("softmax: empty axis");

  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = xv[base];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      check_finite_throw(mx, "softmax");
      double z = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l * inner] - mx);
        out[base + l * inner] = e;
        z += e;
      }
      for (std::int64_t l = 0; l < len; ++l) out[base + l * inner] /= z;
    }
  }
  auto xn = x.node();
  return make_op_result(s, std::move(out), {x}, [xn, outer, inner, len](TensorNode& node) {
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::int64_t l = 0; l < len; ++l)
          dot += node.grad[base + l * inner] * node.values[base + l * inner];
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t off = base + l * inner;
          xn->grad[off] += node.values[off] * (node.grad[off] - dot);
        }
      }
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_matrix(x, "log_softmax_rows");
  const int m = x.dim(0), n = x.dim(1);
  if (n == 0) throw std::invalid_argument("log_softmax_rows: zero columns");
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (int i = 0; i < m; ++i) {
    const double* row = &xv[static_cast<std::size_t>(i) * n];
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    check_finite_throw(mx, "log_softmax_rows");
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] = row[j] - lse;
  }
  auto xn = x.node();
  return make_op_result(x.shape(), std::move(out), {x}, [xn, m, n](TensorNode& node) {
    for (int i = 0; i < m; ++i) {
      double gsum = 0.0;
      const std::size_t base = static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) gsum += node.grad[base + j];
      for (int j = 0; j < n; ++j) {
        xn->grad[base + j] += node.grad[base + j] - std::exp(node.values[base + j]) * gsum;
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1) {
    throw std::invalid_argument("cross_entropy: expected rank-1 logits, got " +
                                shape_to_string(logits.shape()));
  }
  const int n = logits.dim(0);
  if (target < 0 || target >= n) {
    throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                            " out of range for " + std::to_string(n) + " classes");
  }
  const auto& xv = logits.values();
  double mx = xv[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, xv[j]);
  check_finite_throw(mx, "cross_entropy");
  double z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(xv[j] - mx);
  const double loss = mx + std::log(z) - xv[target];
  auto xn = logits.node();
  return make_op_result({}, {loss}, {logits}, [xn, n, target, mx, z](TensorNode& node) {
    const double g = node.grad[0];
    for (int j = 0; j < n; ++j) {
      double p = std::exp(xn->values[j] - mx) / z;
      if (j == target) p -= 1.0;
      xn->grad[j] += g * p;
    }
  });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  require_matrix(logits, "cross_entropy_rows");
  const int m = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(targets.size()) != m) {
    throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(m) + " rows");
  }
  if (m == 0) return Tensor::scalar(0.0);
  const auto& xv = logits.values();
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const int t = targets[i];
    if (t < 0 || t >= n) throw std::out_of_range("cross_entropy_rows: target out of range");
    const double* row = &xv[static_cast<std::size_t>(i) * n];
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    check_finite_throw(mx, "cross_entropy_rows");
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[t];
  }
  auto xn = logits.node();
  auto tgt = targets;
  return make_op_result({}, {total / m}, {logits}, [xn, m, n, tgt](TensorNode& node) {
    const double g = node.grad[0] / m;
    for (int i = 0; i < m; ++i) {
      const double* row = &xn->values[static_cast<std::size_t>(i) * n];
      double mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
      for (int j = 0; j < n; ++j) {
        double p = std::exp(row[j] - mx) / z;
        if (j == tgt[i]) p -= 1.0;
        xn->grad[static_cast<std::size_t>(i) * n + j] += g * p;
      }
    }
  });
}

Tensor cross_entropy_rows_weighted(const Tensor& logits, const std::vector<int>& targets,
                                   const std::vector<double>& row_weights) {
  require_matrix(logits, "cross_entropy_rows_weighted");
  const int m = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(targets.size()) != m || static_cast<int>(row_weights.size()) != m) {
    throw std::invalid_argument("cross_entropy_rows_weighted: targets/weights must match rows");
  }
  if (m == 0) return Tensor::scalar(0.0);
  double wsum = 0.0;
  for (double w : row_weights) {
    if (w < 0.0) throw std::invalid_argument("cross_entropy_rows_weighted: negative weight");
    wsum += w;
  }
  if (wsum <= 0.0) return Tensor::scalar(0.0);
  const auto& xv = logits.values();
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const int t = targets[i];
    if (t < 0 || t >= n) throw std::out_of_range("cross_entropy_rows_weighted: target out of range");
    const double* row = &xv[static_cast<std::size_t>(i) * n];
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    check_finite_throw(mx, "cross_entropy_rows_weighted");
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    total += row_weights[i] * (mx + std::log(z) - row[t]);
  }
  auto xn = logits.node();
  auto tgt = targets;
  auto wts = row_weights;
  return make_op_result({}, {total / wsum}, {logits}, [xn, m, n, tgt, wts, wsum](TensorNode& node) {
    const double g = node.grad[0] / wsum;
    for (int i = 0; i < m; ++i) {
      if (wts[i] == 0.0) continue;
      const double* row = &xn->values[static_cast<std::size_t>(i) * n];
      double mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
      for (int j = 0; j < n; ++j) {
        double p = std::exp(row[j] - mx) / z;
        if (j == tgt[i]) p -= 1.0;
        xn->grad[static_cast<std::size_t>(i) * n + j] += g * wts[i] * p;
      }
    }
  });
}

Tensor huber(const Tensor& pred, const Tensor& target, double delta) {
  if (pred.shape() != target.shape()) shape_error("huber", pred.shape(), target.shape());
  if (delta <= 0.0) throw std::invalid_argument("huber: delta must be positive");
  const std::int64_t count = pred.numel();
  if (count == 0) return Tensor::scalar(0.0);
  const auto& pv = pred.values();
  const auto& tv = target.values();
  double total = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    const double r = pv[i] - tv[i];
    const double a = std::fabs(r);
    total += a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
  }
  auto pn = pred.node();
  auto tn = target.node();
  return make_op_result({}, {total / count}, {pred, target},
                        [pn, tn, delta, count](TensorNode& node) {
                          const double g = node.grad[0] / count;
                          for (std::int64_t i = 0; i < count; ++i) {
                            const double r = pn->values[i] - tn->values[i];
                            const double d = std::clamp(r, -delta, delta) * g;
                            pn->grad[i] += d;
                            tn->grad[i] -= d;
                          }
                        });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  require_matrix(a, "gather_rows");
  const int m = a.dim(0), n = a.dim(1);
  const int k = static_cast<int>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(k) * n);
  const auto& av = a.values();
  for (int r = 0; r < k; ++r) {
    const int i = idx[r];
    if (i < 0 || i >= m) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(&av[static_cast<std::size_t>(i) * n], n, &out[static_cast<std::size_t>(r) * n]);
  }
  auto an = a.node();
  auto ids = idx;
  return make_op_result({k, n}, std::move(out), {a}, [an, ids, n](TensorNode& node) {
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const std::size_t src = r * n;
      const std::size_t dst = static_cast<std::size_t>(ids[r]) * n;
      for (int j = 0; j < n; ++j) an->grad[dst + j] += node.grad[src + j];
    }
  });
}

Tensor gather_one_per_row(const Tensor& a, const std::vector<int>& cols) {
  require_matrix(a, "gather_one_per_row");
  const int m = a.dim(0), n = a.dim(1);
  if (static_cast<int>(cols.size()) != m) {
    throw std::invalid_argument("gather_one_per_row: need one column per row");
  }
  std::vector<double> out(m);
  const auto& av = a.values();
  for (int i = 0; i < m; ++i) {
    if (cols[i] < 0 || cols[i] >= n) {
      throw std::out_of_range("gather_one_per_row: column index out of range");
    }
    out[i] = av[static_cast<std::size_t>(i) * n + cols[i]];
  }
  auto an = a.node();
  auto cs = cols;
  return make_op_result({m}, std::move(out), {a}, [an, cs, n](TensorNode& node) {
    for (std::size_t i = 0; i < cs.size(); ++i) {
      an->grad[i * n + cs[i]] += node.grad[i];
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.dim(0) != b.dim(0)) shape_error("concat_cols", a.shape(), b.shape());
  const int m = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * (p + q));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    std::copy_n(&av[static_cast<std::size_t>(i) * p], p,
                &out[static_cast<std::size_t>(i) * (p + q)]);
    std::copy_n(&bv[static_cast<std::size_t>(i) * q], q,
                &out[static_cast<std::size_t>(i) * (p + q) + p]);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result({m, p + q}, std::move(out), {a, b}, [an, bn, m, p, q](TensorNode& node) {
    for (int i = 0; i < m; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * (p + q);
      for (int j = 0; j < p; ++j) an->grad[static_cast<std::size_t>(i) * p + j] += node.grad[base + j];
      for (int j = 0; j < q; ++j) bn->grad[static_cast<std::size_t>(i) * q + j] += node.grad[base + p + j];
    }
  });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_matrix(a, "slice_cols");
  const int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1) {
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + shape_to_string(a.shape()));
  }
  const int w = c1 - c0;
  std::vector<double> out(static_cast<std::size_t>(m) * w);
  const auto& av = a.values();
  for (int i = 0; i < m; ++i)
    std::copy_n(&av[static_cast<std::size_t>(i) * n + c0], w,
                &out[static_cast<std::size_t>(i) * w]);
  auto an = a.node();
  return make_op_result({m, w}, std::move(out), {a}, [an, m, n, c0, w](TensorNode& node) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        an->grad[static_cast<std::size_t>(i) * n + c0 + j] +=
            node.grad[static_cast<std::size_t>(i) * w + j];
  });
}

Tensor group_max(const Tensor& a, const std::vector<std::vector<int>>& groups) {
  require_matrix(a, "group_max");
  const int m = a.dim(0), n = a.dim(1);
  const int g = static_cast<int>(groups.size());
  std::vector<double> out(static_cast<std::size_t>(g) * n);
  std::vector<int> argmax(static_cast<std::size_t>(g) * n);
  const auto& av = a.values();
  for (int gi = 0; gi < g; ++gi) {
    const auto& rows = groups[gi];
    if (rows.empty()) throw std::invalid_argument("group_max: empty group");
    for (int j = 0; j < n; ++j) {
      double best = -1e308;
      int bi = -1;
      for (int r : rows) {
        if (r < 0 || r >= m) throw std::out_of_range("group_max: row index out of range");
        const double v = av[static_cast<std::size_t>(r) * n + j];
        if (v > best) {
          best = v;
          bi = r;
        }
      }
      out[static_cast<std::size_t>(gi) * n + j] = best;
      argmax[static_cast<std::size_t>(gi) * n + j] = bi;
    }
  }
  auto an = a.node();
  return make_op_result({g, n}, std::move(out), {a},
                        [an, n, g, argmax = std::move(argmax)](TensorNode& node) {
                          for (int gi = 0; gi < g; ++gi) {
                            for (int j = 0; j < n; ++j) {
                              const std::size_t off = static_cast<std::size_t>(gi) * n + j;
                              an->grad[static_cast<std::size_t>(argmax[off]) * n + j] +=
                                  node.grad[off];
                            }
                          }
                        });
}

Tensor group_rel_concat(const Tensor& feat, const Tensor& pos,
                        const std::vector<std::vector<int>>& groups,
                        const std::vector<int>& centers) {
  require_matrix(feat, "group_rel_concat");
  require_matrix(pos, "group_rel_concat");
  if (feat.dim(0) != pos.dim(0)) shape_error("group_rel_concat", feat.shape(), pos.shape());
  if (groups.size() != centers.size()) {
    throw std::invalid_argument("group_rel_concat: groups/centers size mismatch");
  }
  const int m = feat.dim(0), f = feat.dim(1), p = pos.dim(1);
  std::size_t rows = 0;
  for (const auto& gr : groups) rows += gr.size();
  std::vector<double> out(rows * (f + p));
  const auto& fv = feat.values();
  const auto& pv = pos.values();
  std::size_t r = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const int c = centers[gi];
    if (c < 0 || c >= m) throw std::out_of_range("group_rel_concat: center out of range");
    for (int j : groups[gi]) {
      if (j < 0 || j >= m) throw std::out_of_range("group_rel_concat: member out of range");
      double* orow = &out[r * (f + p)];
      std::copy_n(&fv[static_cast<std::size_t>(j) * f], f, orow);
      for (int d = 0; d < p; ++d)
        orow[f + d] = pv[static_cast<std::size_t>(j) * p + d] -
                      pv[static_cast<std::size_t>(c) * p + d];
      ++r;
    }
  }
  auto fn = feat.node();
  auto pn = pos.node();
  auto gcopy = groups;
  auto ccopy = centers;
  return make_op_result(
      {static_cast<int>(rows), f + p}, std::move(out), {feat, pos},
      [fn, pn, f, p, gcopy = std::move(gcopy), ccopy = std::move(ccopy)](TensorNode& node) {
        std::size_t r = 0;
        for (std::size_t gi = 0; gi < gcopy.size(); ++gi) {
          const int c = ccopy[gi];
          for (int j : gcopy[gi]) {
            const double* grow = &node.grad[r * (f + p)];
            for (int d = 0; d < f; ++d) fn->grad[static_cast<std::size_t>(j) * f + d] += grow[d];
            for (int d = 0; d < p; ++d) {
              pn->grad[static_cast<std::size_t>(j) * p + d] += grow[f + d];
              pn->grad[static_cast<std::size_t>(c) * p + d] -= grow[f + d];
            }
            ++r;
          }
        }
      });
}

}  // namespace sdcot
