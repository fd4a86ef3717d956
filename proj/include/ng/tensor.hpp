#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ng/common.hpp"

namespace ng {

struct TensorImpl;

// One recorded primitive operation. `backward` receives the adjoint of the
// node's output and accumulates adjoints onto the saved inputs.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::weak_ptr<TensorImpl> output;
  std::function<void(const std::vector<double>&)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // producer, when recorded on a tape

  int64_t size() const { return int64_t(data.size()); }
  void accumulate(std::span<const double> g);
  void add_grad_at(int64_t i, double v) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += v;
  }
};

// Dense N-d array of doubles with value semantics over a shared buffer.
// Copies alias the same storage, like the usual array-handle designs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return int(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[size_t(i)]; }
  int64_t size() const { return impl_->size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> raw() { return impl_->data; }
  double operator[](int64_t i) const { return impl_->data[size_t(i)]; }
  double value() const;  // scalar only

  Tensor& set_requires_grad(bool flag = true) {
    impl_->requires_grad = flag;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }
  bool has_node() const { return impl_->node != nullptr; }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of the primitive operations reaching a root tensor, in
// execution (topological) order. Reversing it replays the adjoints.
class Tape {
 public:
  static Tape from_root(const Tensor& root);
  void run_backward(TensorImpl& root);
  size_t node_count() const { return order_.size(); }
  const std::vector<std::shared_ptr<Node>>& nodes() const { return order_; }

 private:
  std::vector<std::shared_ptr<Node>> order_;
};

// While alive on a thread, ops on that thread are not recorded.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Populates grads of all reachable requires_grad leaves. `loss` must be
// scalar. Repeated calls accumulate; zero_grad resets.
void backward(const Tensor& loss);

enum class Elementwise { add, sub, mul, div, neg, relu, sigmoid, tanh_, exp_, log_, sqrt_, power, abs_ };

// Binary kinds accept equal shapes or scalar-with-tensor on either side.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b, double exponent = 0.0);
Tensor elementwise(Elementwise kind, const Tensor& a);

Tensor make_scalar(double value);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor pow_t(const Tensor& a, double exponent);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);           // rank-2
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // x[m,n] + bias[n] per row
Tensor diag(const Tensor& v);                // [n] -> [n,n]

enum class Reduce { sum, mean, max };
Tensor reduce(Reduce kind, const Tensor& x);            // over all elements -> scalar
Tensor reduce(Reduce kind, const Tensor& x, int axis);  // over one axis
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);
Tensor l2_normalize(const Tensor& x, int axis);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor detach(const Tensor& x);

// 3-d convolution, cross-correlation semantics. x is [Cin,W,H,D], kernels
// [Cout,Cin,k,k,k], optional bias [Cout]. Output [Cout,W',H',D'] with
// W' = floor((W + 2*pad - k)/stride) + 1.
Tensor conv3d(const Tensor& x, const Tensor& kernels, int stride, int padding);
Tensor conv3d(const Tensor& x, const Tensor& kernels, const Tensor& bias, int stride, int padding);

Tensor pool3d(const Tensor& x, int factor = 2);      // channel-wise max pool
Tensor upsample3d(const Tensor& x, int factor = 2);  // nearest neighbour

bool all_finite(const Tensor& x);

// Hook for composite differentiable ops defined outside this translation
// unit. `bwd` receives the output adjoint and accumulates into the inputs;
// it is retained only when recording is active.
Tensor custom_op(const char* op, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs,
                 std::function<void(const std::vector<double>&)> bwd);

int worker_threads();  // NEUROGRAPH_THREADS, default 1

}  // namespace ng
