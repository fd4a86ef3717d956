#include "ng/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <unordered_set>

namespace ng {

namespace {

thread_local int g_no_grad_depth = 0;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void record(const char* op, const std::shared_ptr<TensorImpl>& out,
            std::vector<std::shared_ptr<TensorImpl>> inputs,
            std::function<void(const std::vector<double>&)> bwd) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->output = out;
  node->backward = std::move(bwd);
  out->node = std::move(node);
}

bool wants_grad(const Tensor& t) { return t.impl()->requires_grad; }

std::vector<double>& grad_buf(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

void split_axis(const Shape& shape, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  NG_CHECK(axis >= 0 && axis < int(shape.size()), "axis ", axis, " out of range for ", shape_str(shape));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[size_t(i)];
  n = shape[size_t(axis)];
  for (int i = axis + 1; i < int(shape.size()); ++i) inner *= shape[size_t(i)];
}

}  // namespace

void TensorImpl::accumulate(std::span<const double> g) {
  NG_CHECK(g.size() == data.size(), "adjoint size ", g.size(), " vs tensor size ", data.size());
  auto& gr = grad_buf(*this);
  for (size_t i = 0; i < g.size(); ++i) gr[i] += g[i];
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(make_impl(shape, std::vector<double>(size_t(numel(shape)), 0.0)));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(make_impl(shape, std::vector<double>(size_t(numel(shape)), value)));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> values) {
  NG_CHECK(int64_t(values.size()) == numel(shape), "data size ", values.size(),
           " does not fill shape ", shape_str(shape));
  return Tensor(make_impl(shape, std::move(values)));
}

Tensor Tensor::scalar(double value) { return make_scalar(value); }

Tensor make_scalar(double value) { return Tensor(make_impl({}, {value})); }

double Tensor::value() const {
  NG_CHECK(impl_ && impl_->size() == 1, "value() needs a scalar, got ",
           impl_ ? shape_str(impl_->shape) : "undefined");
  return impl_->data[0];
}

Tape Tape::from_root(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.impl()->node) return tape;
  std::unordered_set<const Node*> seen;
  struct Frame {
    std::shared_ptr<Node> node;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl()->node});
  seen.insert(root.impl()->node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->inputs.size()) {
      auto& child = f.node->inputs[f.next++]->node;
      if (child && seen.insert(child.get()).second) stack.push_back({child});
    } else {
      tape.order_.push_back(f.node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::run_backward(TensorImpl& root) {
  for (auto& node : order_) {
    if (auto out = node->output.lock()) out->grad.clear();
  }
  grad_buf(root)[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto out = (*it)->output.lock();
    if (!out || out->grad.empty()) continue;
    (*it)->backward(out->grad);
  }
}

void backward(const Tensor& loss) {
  NG_CHECK(loss.defined() && loss.size() == 1, "backward needs a scalar, got ",
           loss.defined() ? shape_str(loss.shape()) : "undefined");
  NoGradGuard guard;
  Tape tape = Tape::from_root(loss);
  tape.run_backward(*loss.impl());
}

Tensor custom_op(const char* op, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs,
                 std::function<void(const std::vector<double>&)> bwd) {
  auto out = make_impl(std::move(shape), std::move(data));
  bool rec = grad_enabled() &&
             std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return wants_grad(t); });
  if (rec) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> ins;
    ins.reserve(inputs.size());
    for (auto& t : inputs) ins.push_back(t.impl());
    record(op, out, std::move(ins), std::move(bwd));
  }
  return Tensor(out);
}

namespace {

const char* ew_name(Elementwise k) {
  switch (k) {
    case Elementwise::add: return "add";
    case Elementwise::sub: return "sub";
    case Elementwise::mul: return "mul";
    case Elementwise::div: return "div";
    case Elementwise::neg: return "neg";
    case Elementwise::relu: return "relu";
    case Elementwise::sigmoid: return "sigmoid";
    case Elementwise::tanh_: return "tanh";
    case Elementwise::exp_: return "exp";
    case Elementwise::log_: return "log";
    case Elementwise::sqrt_: return "sqrt";
    case Elementwise::power: return "power";
    case Elementwise::abs_: return "abs";
  }
  return "?";
}

Tensor binary_op(Elementwise kind, const Tensor& a, const Tensor& b) {
  auto ai = a.impl();
  auto bi = b.impl();
  bool a_scalar = ai->size() == 1;
  bool b_scalar = bi->size() == 1;
  NG_CHECK(ai->shape == bi->shape || a_scalar || b_scalar, ew_name(kind), ": shapes ",
           shape_str(ai->shape), " and ", shape_str(bi->shape),
           " differ and neither is scalar");
  const auto& big = (a_scalar && !b_scalar) ? bi : ai;
  int64_t n = big->size();
  std::vector<double> out(static_cast<size_t>(n));
  const double* pa = ai->data.data();
  const double* pb = bi->data.data();
  int64_t sa = a_scalar ? 0 : 1;
  int64_t sb = b_scalar ? 0 : 1;
  switch (kind) {
    case Elementwise::add:
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i * sa] + pb[i * sb];
      break;
    case Elementwise::sub:
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i * sa] - pb[i * sb];
      break;
    case Elementwise::mul:
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i * sa] * pb[i * sb];
      break;
    case Elementwise::div:
      for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i * sa] / pb[i * sb];
      break;
    default:
      fail("not a binary op: ", ew_name(kind));
  }
  auto result = make_impl(big->shape, std::move(out));
  if (grad_enabled() && (ai->requires_grad || bi->requires_grad)) {
    result->requires_grad = true;
    record(ew_name(kind), result, {ai, bi}, [kind, ai, bi, sa, sb, n](const std::vector<double>& g) {
      const double* pa = ai->data.data();
      const double* pb = bi->data.data();
      if (ai->requires_grad) {
        auto& ga = grad_buf(*ai);
        for (int64_t i = 0; i < n; ++i) {
          double v = g[size_t(i)];
          switch (kind) {
            case Elementwise::add: break;
            case Elementwise::sub: break;
            case Elementwise::mul: v *= pb[i * sb]; break;
            case Elementwise::div: v /= pb[i * sb]; break;
            default: break;
          }
          ga[size_t(i * sa)] += v;
        }
      }
      if (bi->requires_grad) {
        auto& gb = grad_buf(*bi);
        for (int64_t i = 0; i < n; ++i) {
          double v = g[size_t(i)];
          switch (kind) {
            case Elementwise::add: break;
            case Elementwise::sub: v = -v; break;
            case Elementwise::mul: v *= pa[i * sa]; break;
            case Elementwise::div: {
              double bv = pb[i * sb];
              v *= -pa[i * sa] / (bv * bv);
              break;
            }
            default: break;
          }
          gb[size_t(i * sb)] += v;
        }
      }
    });
  }
  return Tensor(result);
}

Tensor unary_op(Elementwise kind, const Tensor& a, double exponent) {
  auto ai = a.impl();
  int64_t n = ai->size();
  std::vector<double> out(static_cast<size_t>(n));
  const double* px = ai->data.data();
  for (int64_t i = 0; i < n; ++i) {
    double x = px[i];
    double y = 0.0;
    switch (kind) {
      case Elementwise::neg: y = -x; break;
      case Elementwise::relu: y = x > 0.0 ? x : 0.0; break;
      case Elementwise::sigmoid: y = 1.0 / (1.0 + std::exp(-x)); break;
      case Elementwise::tanh_: y = std::tanh(x); break;
      case Elementwise::exp_: y = std::exp(x); break;
      case Elementwise::log_: y = std::log(x); break;
      case Elementwise::sqrt_: y = std::sqrt(x); break;
      case Elementwise::power: y = std::pow(x, exponent); break;
      case Elementwise::abs_: y = std::fabs(x); break;
      default: fail("not a unary op: ", ew_name(kind));
    }
    out[size_t(i)] = y;
  }
  auto result = make_impl(ai->shape, std::move(out));
  if (grad_enabled() && ai->requires_grad) {
    result->requires_grad = true;
    std::weak_ptr<TensorImpl> wout = result;
    record(ew_name(kind), result, {ai}, [kind, ai, wout, exponent, n](const std::vector<double>& g) {
      auto out = wout.lock();
      if (!out) return;
      const double* px = ai->data.data();
      const double* py = out->data.data();
      auto& ga = grad_buf(*ai);
      for (int64_t i = 0; i < n; ++i) {
        double d = 0.0;
        switch (kind) {
          case Elementwise::neg: d = -1.0; break;
          case Elementwise::relu: d = px[i] > 0.0 ? 1.0 : 0.0; break;
          case Elementwise::sigmoid: d = py[i] * (1.0 - py[i]); break;
          case Elementwise::tanh_: d = 1.0 - py[i] * py[i]; break;
          case Elementwise::exp_: d = py[i]; break;
          case Elementwise::log_: d = 1.0 / px[i]; break;
          case Elementwise::sqrt_: d = 0.5 / py[i]; break;
          case Elementwise::power: d = exponent * std::pow(px[i], exponent - 1.0); break;
          case Elementwise::abs_: d = px[i] > 0.0 ? 1.0 : (px[i] < 0.0 ? -1.0 : 0.0); break;
          default: break;
        }
        ga[size_t(i)] += g[size_t(i)] * d;
      }
    });
  }
  return Tensor(result);
}

}  // namespace

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b, double exponent) {
  (void)exponent;
  return binary_op(kind, a, b);
}

Tensor elementwise(Elementwise kind, const Tensor& a) { return unary_op(kind, a, 0.0); }

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(Elementwise::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(Elementwise::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(Elementwise::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(Elementwise::div, a, b); }
Tensor neg(const Tensor& a) { return unary_op(Elementwise::neg, a, 0.0); }
Tensor relu(const Tensor& a) { return unary_op(Elementwise::relu, a, 0.0); }
Tensor sigmoid(const Tensor& a) { return unary_op(Elementwise::sigmoid, a, 0.0); }
Tensor tanh_t(const Tensor& a) { return unary_op(Elementwise::tanh_, a, 0.0); }
Tensor exp_t(const Tensor& a) { return unary_op(Elementwise::exp_, a, 0.0); }
Tensor log_t(const Tensor& a) { return unary_op(Elementwise::log_, a, 0.0); }
Tensor sqrt_t(const Tensor& a) { return unary_op(Elementwise::sqrt_, a, 0.0); }
Tensor abs_t(const Tensor& a) { return unary_op(Elementwise::abs_, a, 0.0); }
Tensor pow_t(const Tensor& a, double exponent) { return unary_op(Elementwise::power, a, exponent); }

Tensor mul_scalar(const Tensor& a, double s) { return binary_op(Elementwise::mul, a, make_scalar(s)); }
Tensor add_scalar(const Tensor& a, double s) { return binary_op(Elementwise::add, a, make_scalar(s)); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto ai = a.impl();
  auto bi = b.impl();
  NG_CHECK(ai->shape.size() == 2 && bi->shape.size() == 2, "matmul needs rank-2 inputs, got ",
           shape_str(ai->shape), " and ", shape_str(bi->shape));
  int64_t m = ai->shape[0], k = ai->shape[1], k2 = bi->shape[0], n = bi->shape[1];
  NG_CHECK(k == k2, "matmul inner dims differ: ", shape_str(ai->shape), " vs ", shape_str(bi->shape));
  std::vector<double> out(size_t(m * n), 0.0);
  const double* pa = ai->data.data();
  const double* pb = bi->data.data();
  for (int64_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  auto result = make_impl({int(m), int(n)}, std::move(out));
  if (grad_enabled() && (ai->requires_grad || bi->requires_grad)) {
    result->requires_grad = true;
    record("matmul", result, {ai, bi}, [ai, bi, m, k, n](const std::vector<double>& g) {
      const double* pa = ai->data.data();
      const double* pb = bi->data.data();
      if (ai->requires_grad) {
        auto& ga = grad_buf(*ai);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            const double* grow = g.data() + i * n;
            const double* brow = pb + p * n;
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[size_t(i * k + p)] += s;
          }
      }
      if (bi->requires_grad) {
        auto& gb = grad_buf(*bi);
        for (int64_t p = 0; p < k; ++p) {
          double* gbrow = gb.data() + p * n;
          for (int64_t i = 0; i < m; ++i) {
            double av = pa[i * k + p];
            const double* grow = g.data() + i * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return Tensor(result);
}

Tensor transpose(const Tensor& a) {
  auto ai = a.impl();
  NG_CHECK(ai->shape.size() == 2, "transpose needs rank 2, got ", shape_str(ai->shape));
  int64_t m = ai->shape[0], n = ai->shape[1];
  std::vector<double> out(size_t(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[size_t(j * m + i)] = ai->data[size_t(i * n + j)];
  auto result = make_impl({int(n), int(m)}, std::move(out));
  if (grad_enabled() && ai->requires_grad) {
    result->requires_grad = true;
    record("transpose", result, {ai}, [ai, m, n](const std::vector<double>& g) {
      auto& ga = grad_buf(*ai);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ga[size_t(i * n + j)] += g[size_t(j * m + i)];
    });
  }
  return Tensor(result);
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  auto xi = x.impl();
  auto bi = bias.impl();
  NG_CHECK(xi->shape.size() == 2 && bi->shape.size() == 1 && xi->shape[1] == bi->shape[0],
           "add_row_bias: ", shape_str(xi->shape), " with bias ", shape_str(bi->shape));
  int64_t m = xi->shape[0], n = xi->shape[1];
  std::vector<double> out(size_t(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[size_t(i * n + j)] = xi->data[size_t(i * n + j)] + bi->data[size_t(j)];
  auto result = make_impl(xi->shape, std::move(out));
  if (grad_enabled() && (xi->requires_grad || bi->requires_grad)) {
    result->requires_grad = true;
    record("add_row_bias", result, {xi, bi}, [xi, bi, m, n](const std::vector<double>& g) {
      if (xi->requires_grad) xi->accumulate(g);
      if (bi->requires_grad) {
        auto& gb = grad_buf(*bi);
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) gb[size_t(j)] += g[size_t(i * n + j)];
      }
    });
  }
  return Tensor(result);
}

Tensor diag(const Tensor& v) {
  auto vi = v.impl();
  NG_CHECK(vi->shape.size() == 1, "diag needs rank 1, got ", shape_str(vi->shape));
  int64_t n = vi->shape[0];
  std::vector<double> out(size_t(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) out[size_t(i * n + i)] = vi->data[size_t(i)];
  auto result = make_impl({int(n), int(n)}, std::move(out));
  if (grad_enabled() && vi->requires_grad) {
    result->requires_grad = true;
    record("diag", result, {vi}, [vi, n](const std::vector<double>& g) {
      auto& gv = grad_buf(*vi);
      for (int64_t i = 0; i < n; ++i) gv[size_t(i)] += g[size_t(i * n + i)];
    });
  }
  return Tensor(result);
}

Tensor reduce(Reduce kind, const Tensor& x) {
  auto xi = x.impl();
  int64_t n = xi->size();
  NG_CHECK(n > 0, "reduce over empty tensor");
  double v = 0.0;
  int64_t arg = 0;
  switch (kind) {
    case Reduce::sum:
    case Reduce::mean: {
      for (int64_t i = 0; i < n; ++i) v += xi->data[size_t(i)];
      if (kind == Reduce::mean) v /= double(n);
      break;
    }
    case Reduce::max: {
      v = xi->data[0];
      for (int64_t i = 1; i < n; ++i)
        if (xi->data[size_t(i)] > v) { v = xi->data[size_t(i)]; arg = i; }
      break;
    }
  }
  auto result = make_impl({}, {v});
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    record("reduce", result, {xi}, [kind, xi, n, arg](const std::vector<double>& g) {
      auto& gx = grad_buf(*xi);
      double gv = g[0];
      switch (kind) {
        case Reduce::sum:
          for (int64_t i = 0; i < n; ++i) gx[size_t(i)] += gv;
          break;
        case Reduce::mean: {
          double s = gv / double(n);
          for (int64_t i = 0; i < n; ++i) gx[size_t(i)] += s;
          break;
        }
        case Reduce::max:
          gx[size_t(arg)] += gv;
          break;
      }
    });
  }
  return Tensor(result);
}

Tensor reduce(Reduce kind, const Tensor& x, int axis) {
  auto xi = x.impl();
  int64_t outer, n, inner;
  split_axis(xi->shape, axis, outer, n, inner);
  Shape oshape;
  for (int i = 0; i < int(xi->shape.size()); ++i)
    if (i != axis) oshape.push_back(xi->shape[size_t(i)]);
  std::vector<double> out(size_t(outer * inner), 0.0);
  std::vector<int64_t> args;
  if (kind == Reduce::max) args.assign(size_t(outer * inner), 0);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      int64_t oi = o * inner + in;
      if (kind == Reduce::max) {
        double best = xi->data[size_t(o * n * inner + in)];
        int64_t barg = 0;
        for (int64_t i = 1; i < n; ++i) {
          double v = xi->data[size_t((o * n + i) * inner + in)];
          if (v > best) { best = v; barg = i; }
        }
        out[size_t(oi)] = best;
        args[size_t(oi)] = barg;
      } else {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += xi->data[size_t((o * n + i) * inner + in)];
        out[size_t(oi)] = kind == Reduce::mean ? s / double(n) : s;
      }
    }
  auto result = make_impl(std::move(oshape), std::move(out));
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    record("reduce_axis", result, {xi},
           [kind, xi, outer, n, inner, args = std::move(args)](const std::vector<double>& g) {
             auto& gx = grad_buf(*xi);
             for (int64_t o = 0; o < outer; ++o)
               for (int64_t in = 0; in < inner; ++in) {
                 int64_t oi = o * inner + in;
                 double gv = g[size_t(oi)];
                 switch (kind) {
                   case Reduce::sum:
                     for (int64_t i = 0; i < n; ++i) gx[size_t((o * n + i) * inner + in)] += gv;
                     break;
                   case Reduce::mean:
                     for (int64_t i = 0; i < n; ++i) gx[size_t((o * n + i) * inner + in)] += gv / double(n);
                     break;
                   case Reduce::max:
                     gx[size_t((o * n + args[size_t(oi)]) * inner + in)] += gv;
                     break;
                 }
               }
           });
  }
  return Tensor(result);
}

Tensor sum(const Tensor& x) { return reduce(Reduce::sum, x); }
Tensor mean(const Tensor& x) { return reduce(Reduce::mean, x); }

Tensor softmax(const Tensor& x, int axis) {
  auto xi = x.impl();
  int64_t outer, n, inner;
  split_axis(xi->shape, axis, outer, n, inner);
  std::vector<double> out(size_t(xi->size()));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      double m = xi->data[size_t(o * n * inner + in)];
      for (int64_t i = 1; i < n; ++i) m = std::max(m, xi->data[size_t((o * n + i) * inner + in)]);
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        double e = std::exp(xi->data[size_t((o * n + i) * inner + in)] - m);
        out[size_t((o * n + i) * inner + in)] = e;
        s += e;
      }
      for (int64_t i = 0; i < n; ++i) out[size_t((o * n + i) * inner + in)] /= s;
    }
  auto result = make_impl(xi->shape, std::move(out));
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    std::weak_ptr<TensorImpl> wout = result;
    record("softmax", result, {xi}, [xi, wout, outer, n, inner](const std::vector<double>& g) {
      auto out = wout.lock();
      if (!out) return;
      auto& gx = grad_buf(*xi);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          double dot = 0.0;
          for (int64_t i = 0; i < n; ++i) {
            size_t idx = size_t((o * n + i) * inner + in);
            dot += g[idx] * out->data[idx];
          }
          for (int64_t i = 0; i < n; ++i) {
            size_t idx = size_t((o * n + i) * inner + in);
            gx[idx] += out->data[idx] * (g[idx] - dot);
          }
        }
    });
  }
  return Tensor(result);
}

Tensor l2_normalize(const Tensor& x, int axis) {
  constexpr double kEps = 1e-12;
  auto xi = x.impl();
  int64_t outer, n, inner;
  split_axis(xi->shape, axis, outer, n, inner);
  std::vector<double> out(size_t(xi->size()));
  std::vector<double> norms(size_t(outer * inner));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        double v = xi->data[size_t((o * n + i) * inner + in)];
        s += v * v;
      }
      double norm = std::max(std::sqrt(s), kEps);
      norms[size_t(o * inner + in)] = norm;
      for (int64_t i = 0; i < n; ++i)
        out[size_t((o * n + i) * inner + in)] = xi->data[size_t((o * n + i) * inner + in)] / norm;
    }
  auto result = make_impl(xi->shape, std::move(out));
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    record("l2_normalize", result, {xi},
           [xi, outer, n, inner, norms = std::move(norms)](const std::vector<double>& g) {
             auto& gx = grad_buf(*xi);
             for (int64_t o = 0; o < outer; ++o)
               for (int64_t in = 0; in < inner; ++in) {
                 double norm = norms[size_t(o * inner + in)];
                 bool clamped = norm <= kEps;
                 double dot = 0.0;
                 if (!clamped)
                   for (int64_t i = 0; i < n; ++i) {
                     size_t idx = size_t((o * n + i) * inner + in);
                     dot += g[idx] * xi->data[idx];
                   }
                 for (int64_t i = 0; i < n; ++i) {
                   size_t idx = size_t((o * n + i) * inner + in);
                   if (clamped)
                     gx[idx] += g[idx] / norm;
                   else
                     gx[idx] += g[idx] / norm - xi->data[idx] * dot / (norm * norm * norm);
                 }
               }
           });
  }
  return Tensor(result);
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  auto xi = x.impl();
  NG_CHECK(numel(shape) == xi->size(), "reshape ", shape_str(xi->shape), " to ", shape_str(shape),
           " changes element count");
  auto result = make_impl(shape, xi->data);
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    record("reshape", result, {xi}, [xi](const std::vector<double>& g) {
      if (xi->requires_grad) xi->accumulate(g);
    });
  }
  return Tensor(result);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  NG_CHECK(!parts.empty(), "concat of zero tensors");
  const Shape& base = parts[0].shape();
  int rank = int(base.size());
  NG_CHECK(axis >= 0 && axis < rank, "concat axis ", axis, " out of range for ", shape_str(base));
  int total = 0;
  for (auto& p : parts) {
    NG_CHECK(int(p.shape().size()) == rank, "concat rank mismatch: ", shape_str(base), " vs ",
             shape_str(p.shape()));
    for (int i = 0; i < rank; ++i)
      NG_CHECK(i == axis || p.shape()[size_t(i)] == base[size_t(i)], "concat shape mismatch on axis ", i,
               ": ", shape_str(base), " vs ", shape_str(p.shape()));
    total += p.shape()[size_t(axis)];
  }
  Shape oshape = base;
  oshape[size_t(axis)] = total;
  int64_t outer, nOut, inner;
  split_axis(oshape, axis, outer, nOut, inner);
  std::vector<double> out(size_t(numel(oshape)));
  int64_t off = 0;
  for (auto& p : parts) {
    int64_t n = p.shape()[size_t(axis)];
    const double* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(src + o * n * inner, n * inner, out.data() + (o * nOut + off) * inner);
    off += n;
  }
  auto result = make_impl(std::move(oshape), std::move(out));
  bool rec = grad_enabled() &&
             std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return wants_grad(t); });
  if (rec) {
    result->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> ins;
    std::vector<int64_t> sizes;
    for (auto& p : parts) {
      ins.push_back(p.impl());
      sizes.push_back(p.shape()[size_t(axis)]);
    }
    record("concat", result, ins,
           [ins, sizes, outer, nOut, inner](const std::vector<double>& g) {
             int64_t off = 0;
             for (size_t k = 0; k < ins.size(); ++k) {
               int64_t n = sizes[k];
               if (ins[k]->requires_grad) {
                 auto& gp = grad_buf(*ins[k]);
                 for (int64_t o = 0; o < outer; ++o) {
                   const double* src = g.data() + (o * nOut + off) * inner;
                   double* dst = gp.data() + o * n * inner;
                   for (int64_t i = 0; i < n * inner; ++i) dst[i] += src[i];
                 }
               }
               off += n;
             }
           });
  }
  return Tensor(result);
}

Tensor detach(const Tensor& x) {
  return Tensor(make_impl(x.shape(), {x.data().begin(), x.data().end()}));
}

Tensor pool3d(const Tensor& x, int factor) {
  auto xi = x.impl();
  NG_CHECK(xi->shape.size() == 4, "pool3d needs [C,W,H,D], got ", shape_str(xi->shape));
  int C = xi->shape[0], W = xi->shape[1], H = xi->shape[2], D = xi->shape[3];
  NG_CHECK(factor > 0 && W % factor == 0 && H % factor == 0 && D % factor == 0,
           "pool3d: dims ", shape_str(xi->shape), " not divisible by ", factor);
  int Wo = W / factor, Ho = H / factor, Do = D / factor;
  std::vector<double> out(size_t(C) * Wo * Ho * Do);
  std::vector<int64_t> args(out.size());
  const double* px = xi->data.data();
  int64_t oi = 0;
  for (int c = 0; c < C; ++c)
    for (int ox = 0; ox < Wo; ++ox)
      for (int oy = 0; oy < Ho; ++oy)
        for (int oz = 0; oz < Do; ++oz, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t barg = 0;
          for (int dx = 0; dx < factor; ++dx)
            for (int dy = 0; dy < factor; ++dy)
              for (int dz = 0; dz < factor; ++dz) {
                int64_t idx = ((int64_t(c) * W + ox * factor + dx) * H + oy * factor + dy) * D +
                              oz * factor + dz;
                if (px[idx] > best) { best = px[idx]; barg = idx; }
              }
          out[size_t(oi)] = best;
          args[size_t(oi)] = barg;
        }
  auto result = make_impl({C, Wo, Ho, Do}, std::move(out));
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    record("pool3d", result, {xi}, [xi, args = std::move(args)](const std::vector<double>& g) {
      auto& gx = grad_buf(*xi);
      for (size_t i = 0; i < g.size(); ++i) gx[size_t(args[i])] += g[i];
    });
  }
  return Tensor(result);
}

Tensor upsample3d(const Tensor& x, int factor) {
  auto xi = x.impl();
  NG_CHECK(xi->shape.size() == 4, "upsample3d needs [C,W,H,D], got ", shape_str(xi->shape));
  NG_CHECK(factor > 0, "upsample3d factor must be positive");
  int C = xi->shape[0], W = xi->shape[1], H = xi->shape[2], D = xi->shape[3];
  int Wo = W * factor, Ho = H * factor, Do = D * factor;
  std::vector<double> out(size_t(C) * Wo * Ho * Do);
  const double* px = xi->data.data();
  int64_t oi = 0;
  for (int c = 0; c < C; ++c)
    for (int ox = 0; ox < Wo; ++ox)
      for (int oy = 0; oy < Ho; ++oy)
        for (int oz = 0; oz < Do; ++oz, ++oi)
          out[size_t(oi)] =
              px[((int64_t(c) * W + ox / factor) * H + oy / factor) * D + oz / factor];
  auto result = make_impl({C, Wo, Ho, Do}, std::move(out));
  if (grad_enabled() && xi->requires_grad) {
    result->requires_grad = true;
    record("upsample3d", result, {xi}, [xi, C, W, H, D, factor](const std::vector<double>& g) {
      auto& gx = grad_buf(*xi);
      int Wo = W * factor, Ho = H * factor, Do = D * factor;
      int64_t oi = 0;
      for (int c = 0; c < C; ++c)
        for (int ox = 0; ox < Wo; ++ox)
          for (int oy = 0; oy < Ho; ++oy)
            for (int oz = 0; oz < Do; ++oz, ++oi)
              gx[size_t(((int64_t(c) * W + ox / factor) * H + oy / factor) * D + oz / factor)] +=
                  g[size_t(oi)];
    });
  }
  return Tensor(result);
}

bool all_finite(const Tensor& x) {
  for (double v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

int worker_threads() {
  static int n = [] {
    const char* env = std::getenv("NEUROGRAPH_THREADS");
    if (!env || !*env) return 1;
    int v = std::atoi(env);
    return v > 0 ? v : 1;
  }();
  return n;
}

}  // namespace ng
