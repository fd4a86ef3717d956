#pragma once

#include <cstdint>
#include <vector>

#include "ng/geometry.hpp"
#include "ng/tensor.hpp"

namespace ng {

// Synthetic dataset: a labeled template plus randomly perturbed subjects with
// known ground-truth transforms, so every pipeline stage has an exact target.
struct PhantomSpec {
  int dims = 24;
  int tissue_classes = 4;  // segmentation channels, background is channel 0
  int parcels = 8;
  int subjects = 40;
  double class_effect = 0.4;  // parcel-0 intensity attenuation for class 1
  double noise_sigma = 0.05;
  double max_rotation_deg = 15.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translation_vox = 2.0;  // hard ceiling 5
  double max_shear = 0.1;
  std::uint64_t seed = 0;
  bool identity_perturbation = false;  // test hook: skip the random draw

  void validate() const;
};

struct PhantomTemplate {
  Tensor T;  // [d,d,d] intensity volume, skull-stripped
  Tensor B;  // [C,d,d,d] one-hot tissue mask, channel 0 = background
  Tensor P;  // [K,d,d,d] one-hot parcel mask, covers exactly the brain
};

struct PhantomSubject {
  int index = 0;
  Tensor S;  // [d,d,d] skull + warped brain + noise
  Tensor M;  // [d,d,d] binary brain support
  int y = 0;
  AffineTransform A_true;  // realigns subject to template, held out
  // Evaluation-only label masks, subject space. One-hot in the interior with
  // partial-volume fractions in the one-voxel boundary shell.
  Tensor true_seg;   // [C,d,d,d]
  Tensor true_parc;  // [K,d,d,d]
};

struct PhantomDataset {
  PhantomTemplate tmpl;
  std::vector<PhantomSubject> train, val, test;
};

PhantomTemplate make_template(const PhantomSpec& spec);
PhantomSubject make_subject(const PhantomTemplate& tmpl, const PhantomSpec& spec, int index);
PhantomDataset make_dataset(const PhantomSpec& spec);

}  // namespace ng
