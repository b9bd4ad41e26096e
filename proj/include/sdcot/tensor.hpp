#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sdcot {

using Shape = std::vector<int>;

std::string shape_to_string(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // pushes node.grad into parents

  void ensure_grad();
};

// Dense row-major tensor of 64-bit floats with reverse-mode differentiation.
// Ops record a tape while grad mode is on (the default); a NoGradGuard turns
// recording off for teacher/inference passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int i) const;
  std::int64_t numel() const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // parameter updates; leaf tensors only
  double item() const;                    // scalar tensors
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool b);
  bool grad_allocated() const;
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();

  // Reverse pass from a scalar root; accumulates into requires_grad leaves.
  void backward() const;

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;
  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(TensorNode&)>);
};

// Thread-local switch; ops built while disabled carry no tape.
bool grad_mode_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- elementwise / linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);   // [m,k]x[n,k]^T -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);         // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // [m,n] + [n]
Tensor mul_rowvec(const Tensor& a, const Tensor& v);  // [m,n] * [n]
Tensor sub_colvec(const Tensor& a, const Tensor& v);  // [m,n] - [m] per row
Tensor relu(const Tensor& a);
Tensor exp_clamped(const Tensor& a, double lo, double hi);
Tensor sqrt_guarded(const Tensor& a);  // sqrt(max(x,0)); zero slope at 0

// --- reductions / softmax / losses ---
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_rows(const Tensor& a);                     // [m,n] -> [m]
Tensor mean_rows(const Tensor& a);                    // [m,n] -> [m]
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax_rows(const Tensor& x);             // [m,n]
Tensor cross_entropy(const Tensor& logits, int target);  // [n] -> scalar
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);  // mean
// weighted mean: sum(w_i * ce_i) / sum(w_i)
Tensor cross_entropy_rows_weighted(const Tensor& logits, const std::vector<int>& targets,
                                   const std::vector<double>& row_weights);
Tensor huber(const Tensor& pred, const Tensor& target, double delta = 1.0);  // mean

// --- shuffling / grouping ---
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor gather_one_per_row(const Tensor& a, const std::vector<int>& cols);  // [m,n] -> [m]
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, int c0, int c1);
// out[g] = per-column max over rows listed in groups[g]; groups must be non-empty
Tensor group_max(const Tensor& a, const std::vector<std::vector<int>>& groups);
// For group g with center row c_g: one output row per member j,
// [feat[j], pos[j]-pos[c_g]]. Row order: groups in order, members in order.
Tensor group_rel_concat(const Tensor& feat, const Tensor& pos,
                        const std::vector<std::vector<int>>& groups,
                        const std::vector<int>& centers);

}  // namespace sdcot
