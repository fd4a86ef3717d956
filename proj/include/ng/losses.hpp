#pragma once

#include <utility>

#include "ng/tensor.hpp"

namespace ng {

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
};

enum class Similarity { ncc, mse };

// Mean of -[t log p + (1-t) log(1-p)], probabilities clamped at 1e-12.
Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target);

// Mean over positions of -sum_class t log p along class_axis.
Tensor cross_entropy(const Tensor& pred, const Tensor& target, int class_axis);

// ncc: negative global normalized cross-correlation; mse: mean squared diff.
Tensor similarity_loss(const Tensor& warped, const Tensor& target,
                       Similarity kind = Similarity::ncc);

struct LossReport {
  double total = 0.0;
  double cls = 0.0;
  double ext = 0.0;
  double sim = 0.0;
  double seg = 0.0;
};

struct JointLossInputs {
  Tensor cls_probs;   // softmax class probabilities
  Tensor ext_mask;    // predicted extraction mask, soft
  Tensor warped;      // registered image
  Tensor seg_probs;   // voxelwise class softmax
  Tensor seg_target;  // warped atlas segmentation, detached inside
};

struct JointLossTargets {
  Tensor cls_onehot;
  Tensor ext_target;
  Tensor template_img;
};

std::pair<Tensor, LossReport> joint_loss(const JointLossInputs& out, const JointLossTargets& tgt,
                                         const LossWeights& w,
                                         Similarity kind = Similarity::ncc);

}  // namespace ng
