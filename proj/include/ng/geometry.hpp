#pragma once

#include <array>
#include <vector>

#include "ng/tensor.hpp"

namespace ng {

// Homogeneous 4x4 map from normalized output coordinates to normalized
// source sampling coordinates (pull warping). Bottom row pinned to 0,0,0,1.
class AffineTransform {
 public:
  AffineTransform();
  explicit AffineTransform(const std::array<double, 16>& m);

  static AffineTransform identity() { return AffineTransform(); }
  static AffineTransform translate(double tx, double ty, double tz);
  static AffineTransform scale(double sx, double sy, double sz);
  static AffineTransform rotate(int axis, double radians);
  static AffineTransform shear(double xy, double xz, double yx, double yz, double zx, double zy);

  const std::array<double, 16>& m() const { return m_; }
  double at(int r, int c) const { return m_[size_t(r * 4 + c)]; }
  double& at(int r, int c) { return m_[size_t(r * 4 + c)]; }
  double det3() const;
  std::array<double, 3> apply(const std::array<double, 3>& p) const;

 private:
  std::array<double, 16> m_;
};

AffineTransform compose(const AffineTransform& a, const AffineTransform& b);
AffineTransform inverse(const AffineTransform& a);

Tensor to_tensor(const AffineTransform& a);
AffineTransform from_tensor(const Tensor& A);

// Voxel index i of an n-long axis sits at -1 + 2i/(n-1) (align corners).
inline double to_normalized(int i, int n) { return n == 1 ? 0.0 : -1.0 + 2.0 * i / (n - 1); }
inline double to_voxel(double x, int n) { return n == 1 ? 0.0 : (x + 1.0) * 0.5 * (n - 1); }

// Identity plus twelve head outputs filling the top 3x4 rows.
Tensor affine_from_params(const Tensor& p);

// Closed-form inverse of an affine [4,4] tensor; differentiable.
Tensor affine_inverse(const Tensor& A);

// Trilinear pull-resampling of [W,H,D] or [C,W,H,D] through A ([4,4] tensor).
// Samples outside the cube read zero. Differentiable in source and A.
Tensor affine_resample(const Tensor& source, const Tensor& A, const Shape& out_dims);
Tensor affine_resample(const Tensor& source, const AffineTransform& a, const Shape& out_dims);

// Channel-wise resample at unchanged dims, the label-mask counterpart of
// affine_resample. Values stay soft; harden only for metrics and outputs.
Tensor warp_mask(const Tensor& mask, const Tensor& A);
Tensor warp_mask(const Tensor& mask, const AffineTransform& a);

// Implicit-background hardening: 0 where the channel sum < 0.5, else argmax+1.
std::vector<int> harden_mask(const Tensor& soft);
// Covering-mask hardening (an explicit background channel 0): plain argmax.
std::vector<int> harden_labels(const Tensor& soft);
// Threshold a single [W,H,D] volume to {0,1}.
std::vector<int> harden_binary(const Tensor& m, double threshold = 0.5);

}  // namespace ng
