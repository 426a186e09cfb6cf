#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace capdet {

class Rng;

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  // Scalar reductions stash their float64 accumulation here so verification
  // code can read the loss without the final float32 rounding.
  double hi = std::numeric_limits<double>::quiet_NaN();
  bool requires_grad = false;
  std::vector<float> grad;  // sized lazily, same length as data
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void()> backprop;  // empty for leaves
};

// Value-semantic handle to a shared tensor node. Copies alias the same
// storage; tensors are treated as immutable once they enter the tape,
// except parameter updates between steps and gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<float> data,
                     bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  static Tensor randn(const Shape& shape, Rng& rng, float stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t size(int64_t axis) const { return impl_->shape[axis]; }

  const std::vector<float>& values() const { return impl_->data; }
  std::vector<float>& mutable_values() { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  const std::vector<float>* grad() const;
  void zero_grad();

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_op(Shape shape, std::vector<float> data,
                        const std::vector<Tensor>& parents,
                        const std::function<std::function<void()>(TensorImpl*)>& make_backprop);
};

// Leaf gradients can be routed into an external map instead of the tensor's
// own grad buffer (used for deterministic parallel batch accumulation).
using GradMap = std::unordered_map<const TensorImpl*, std::vector<float>>;

class GradSinkScope {
 public:
  explicit GradSinkScope(GradMap* sink);
  ~GradSinkScope();

 private:
  GradMap* prev_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();

 private:
  bool prev_;
};

bool grad_enabled();

// Reverse-mode sweep from a scalar loss. Populates grads of every
// requires_grad leaf reachable through the tape (or the active sink).
void backward(const Tensor& loss);

// --- differentiable kernels -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowvec(const Tensor& m, const Tensor& v);   // [T×d] + [d]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, float s);
Tensor matmul(const Tensor& a, const Tensor& b);       // [m×k]·[k×n]
Tensor transpose(const Tensor& a);                     // 2-D
Tensor gelu(const Tensor& a);
Tensor softmax_stable(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  float eps = 1e-5f);                  // per row of [T×d]
Tensor reshape(const Tensor& a, const Shape& shape);  // same numel
Tensor slice_cols(const Tensor& a, int64_t start, int64_t n);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor sum_all(const Tensor& a);      // scalar, float64 accumulation
Tensor mean_all(const Tensor& a);
Tensor mean_rows(const Tensor& a);    // [T×d] -> [d]
Tensor dropout(const Tensor& a, float p, Rng& rng);  // inverted dropout
Tensor sigmoid(const Tensor& a);

// Mean over non-ignored positions of -log softmax(logits)[target].
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets,
                            int ignore_id);

// Mean binary cross-entropy of sigmoid(logits) against targets in {0,1}.
Tensor bce_with_logits(const Tensor& logits, const std::vector<float>& targets);

// Scalar value at the highest precision available (float64 for reductions).
double scalar_value(const Tensor& t);

// Patch/window extraction for convolutions: [C×H×W] -> [P×(C·k·k)], where P
// walks output positions row-major. Out-of-bounds taps read zero.
struct Im2ColPlan {
  int channels, height, width, kernel, stride, pad;
  int out_h, out_w;
  std::vector<int64_t> src_index;  // per output element, -1 for pad taps

  static Im2ColPlan make(int channels, int height, int width, int kernel,
                         int stride, int pad);
};
Tensor im2col(const Tensor& x, const Im2ColPlan& plan);

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

// Central-difference check of backward() gradients for a scalar function of
// one tensor. Throws if f is detected to be non-deterministic.
FiniteDiffReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                   const Tensor& x, double h, double tol);

}  // namespace capdet
