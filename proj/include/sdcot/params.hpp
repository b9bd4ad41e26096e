#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sdcot/tensor.hpp"

namespace sdcot {

// Named trainable state. Iteration order is the lexicographic name order,
// which the text serialization preserves exactly.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Shape shape, std::vector<double> values);
  Tensor& replace(const std::string& name, Tensor t);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return params_.size(); }

  std::vector<std::string> names() const;

  // A frozen store takes no gradients: requires_grad is cleared on every
  // tensor, so backward passes never accumulate into it.
  void freeze_all();
  bool all_frozen() const;

  void zero_grads();
  std::int64_t total_elements() const;

  ParamStore clone() const;  // deep copy with fresh nodes

  // One line per parameter: `name shape_csv hex`, hex = concatenated
  // big-endian IEEE-754 bit patterns, 16 chars per double. Bit-exact.
  void save(std::ostream& os) const;
  static ParamStore load(std::istream& is);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

bool bitwise_equal(const ParamStore& a, const ParamStore& b);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Standard Adam with bias correction. Moment buffers are keyed by parameter
// name; gradients are zeroed after each step.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore& params);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
void ema_update(ParamStore& teacher, const ParamStore& student, double alpha);

// Max over trainable elements of |analytic - central difference| / max(1, |analytic|).
double grad_check(const std::function<Tensor(ParamStore&)>& fn, ParamStore& point,
                  double step = 1e-5);

}  // namespace sdcot
