#include "ng/losses.hpp"

namespace ng {

namespace {

constexpr double kClamp = 1e-12;

// max(x, c) with the gradient vanishing on the clamped side.
Tensor clamp_min(const Tensor& x, double c) {
  return add_scalar(relu(add_scalar(x, -c)), c);
}

}  // namespace

Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target) {
  NG_CHECK(pred.shape() == target.shape(), "binary_cross_entropy shapes differ: ",
           shape_str(pred.shape()), " vs ", shape_str(target.shape()));
  auto one = Tensor::scalar(1.0);
  auto pos = mul(target, log_t(clamp_min(pred, kClamp)));
  auto negp = mul(sub(one, target), log_t(clamp_min(sub(one, pred), kClamp)));
  return neg(mean(add(pos, negp)));
}

Tensor cross_entropy(const Tensor& pred, const Tensor& target, int class_axis) {
  NG_CHECK(pred.shape() == target.shape(), "cross_entropy shapes differ: ",
           shape_str(pred.shape()), " vs ", shape_str(target.shape()));
  NG_CHECK(class_axis >= 0 && class_axis < pred.rank(), "cross_entropy class axis ", class_axis,
           " out of range for ", shape_str(pred.shape()));
  int64_t positions = pred.size() / pred.dim(class_axis);
  auto nll = neg(sum(mul(target, log_t(clamp_min(pred, kClamp)))));
  return mul_scalar(nll, 1.0 / double(positions));
}

Tensor similarity_loss(const Tensor& warped, const Tensor& target, Similarity kind) {
  NG_CHECK(warped.shape() == target.shape(), "similarity_loss shapes differ: ",
           shape_str(warped.shape()), " vs ", shape_str(target.shape()));
  if (kind == Similarity::mse) {
    auto d = sub(warped, target);
    return mean(mul(d, d));
  }
  auto a = sub(warped, mean(warped));
  auto b = sub(target, mean(target));
  auto va = sum(mul(a, a));
  auto vb = sum(mul(b, b));
  NG_CHECK(va.value() > 1e-24, "similarity_loss: warped image has zero variance");
  NG_CHECK(vb.value() > 1e-24, "similarity_loss: target image has zero variance");
  return neg(div(sum(mul(a, b)), mul(sqrt_t(va), sqrt_t(vb))));
}

std::pair<Tensor, LossReport> joint_loss(const JointLossInputs& out, const JointLossTargets& tgt,
                                         const LossWeights& w, Similarity kind) {
  NG_CHECK(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0,
           "loss weights must be non-negative, got ", w.alpha, ", ", w.beta, ", ", w.gamma);
  auto cls = cross_entropy(out.cls_probs, tgt.cls_onehot, 0);
  auto ext = binary_cross_entropy(out.ext_mask, tgt.ext_target);
  auto sim = similarity_loss(out.warped, tgt.template_img, kind);
  auto seg = cross_entropy(out.seg_probs, detach(out.seg_target), 0);
  auto total = add(add(cls, mul_scalar(ext, w.alpha)),
                   add(mul_scalar(sim, w.beta), mul_scalar(seg, w.gamma)));
  LossReport report;
  report.cls = cls.value();
  report.ext = ext.value();
  report.sim = sim.value();
  report.seg = seg.value();
  report.total = total.value();
  return {total, report};
}

}  // namespace ng
