#include "ng/geometry.hpp"

#include <cmath>

namespace ng {

namespace {

constexpr double kDetGuard = 1e-6;

void assert_bottom_row(const std::array<double, 16>& m) {
  NG_CHECK(m[12] == 0.0 && m[13] == 0.0 && m[14] == 0.0 && m[15] == 1.0,
           "affine bottom row must be 0,0,0,1, got ", m[12], ",", m[13], ",", m[14], ",", m[15]);
}

// Inverse of [M t; 0 1] is [M^-1, -M^-1 t; 0 1] via the 3x3 adjugate.
std::array<double, 16> invert_affine(const std::array<double, 16>& m, double det) {
  auto a = [&](int r, int c) { return m[size_t(r * 4 + c)]; };
  std::array<double, 9> inv3;
  inv3[0] = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) / det;
  inv3[1] = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) / det;
  inv3[2] = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) / det;
  inv3[3] = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) / det;
  inv3[4] = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) / det;
  inv3[5] = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) / det;
  inv3[6] = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) / det;
  inv3[7] = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) / det;
  inv3[8] = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) / det;
  std::array<double, 16> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[size_t(r * 4 + c)] = inv3[size_t(r * 3 + c)];
    double t = 0.0;
    for (int c = 0; c < 3; ++c) t += inv3[size_t(r * 3 + c)] * a(c, 3);
    out[size_t(r * 4 + 3)] = -t;
  }
  out[15] = 1.0;
  return out;
}

double det3_of(const std::array<double, 16>& m) {
  auto a = [&](int r, int c) { return m[size_t(r * 4 + c)]; };
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

}  // namespace

AffineTransform::AffineTransform() : m_{} {
  m_[0] = m_[5] = m_[10] = m_[15] = 1.0;
}

AffineTransform::AffineTransform(const std::array<double, 16>& m) : m_(m) {
  assert_bottom_row(m_);
}

AffineTransform AffineTransform::translate(double tx, double ty, double tz) {
  AffineTransform a;
  a.at(0, 3) = tx;
  a.at(1, 3) = ty;
  a.at(2, 3) = tz;
  return a;
}

AffineTransform AffineTransform::scale(double sx, double sy, double sz) {
  AffineTransform a;
  a.at(0, 0) = sx;
  a.at(1, 1) = sy;
  a.at(2, 2) = sz;
  return a;
}

AffineTransform AffineTransform::rotate(int axis, double radians) {
  NG_CHECK(axis >= 0 && axis < 3, "rotation axis must be 0, 1 or 2, got ", axis);
  AffineTransform a;
  int u = (axis + 1) % 3, v = (axis + 2) % 3;
  double c = std::cos(radians), s = std::sin(radians);
  a.at(u, u) = c;
  a.at(u, v) = -s;
  a.at(v, u) = s;
  a.at(v, v) = c;
  return a;
}

AffineTransform AffineTransform::shear(double xy, double xz, double yx, double yz, double zx,
                                       double zy) {
  AffineTransform a;
  a.at(0, 1) = xy;
  a.at(0, 2) = xz;
  a.at(1, 0) = yx;
  a.at(1, 2) = yz;
  a.at(2, 0) = zx;
  a.at(2, 1) = zy;
  return a;
}

double AffineTransform::det3() const { return det3_of(m_); }

std::array<double, 3> AffineTransform::apply(const std::array<double, 3>& p) const {
  std::array<double, 3> out;
  for (int r = 0; r < 3; ++r)
    out[size_t(r)] = at(r, 0) * p[0] + at(r, 1) * p[1] + at(r, 2) * p[2] + at(r, 3);
  return out;
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  std::array<double, 16> out{};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a.at(r, k) * b.at(k, c);
      out[size_t(r * 4 + c)] = s;
    }
  out[12] = out[13] = out[14] = 0.0;
  out[15] = 1.0;
  return AffineTransform(out);
}

AffineTransform inverse(const AffineTransform& a) {
  double det = a.det3();
  NG_CHECK(std::fabs(det) >= kDetGuard, "near-singular affine, det=", det);
  return AffineTransform(invert_affine(a.m(), det));
}

Tensor to_tensor(const AffineTransform& a) {
  return Tensor::from_data({4, 4}, {a.m().begin(), a.m().end()});
}

AffineTransform from_tensor(const Tensor& A) {
  NG_CHECK((A.shape() == Shape{4, 4}), "affine tensor must be (4,4), got ", shape_str(A.shape()));
  std::array<double, 16> m;
  for (int i = 0; i < 16; ++i) m[size_t(i)] = A[i];
  for (int i = 12; i < 15; ++i) {
    NG_CHECK(std::fabs(m[size_t(i)]) <= 1e-9, "affine tensor bottom row entry ", i - 12, " is ",
             m[size_t(i)]);
    m[size_t(i)] = 0.0;
  }
  NG_CHECK(std::fabs(m[15] - 1.0) <= 1e-9, "affine tensor corner is ", m[15]);
  m[15] = 1.0;
  return AffineTransform(m);
}

Tensor affine_from_params(const Tensor& p) {
  NG_CHECK(p.size() == 12, "affine head must emit 12 values, got ", shape_str(p.shape()));
  std::vector<double> m(16, 0.0);
  m[0] = m[5] = m[10] = m[15] = 1.0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) m[size_t(r * 4 + c)] += p[r * 4 + c];
  auto pi = p.impl();
  return custom_op("affine_from_params", {4, 4}, std::move(m), {p},
                   [pi](const std::vector<double>& g) {
                     if (!pi->requires_grad) return;
                     if (pi->grad.empty()) pi->grad.assign(12, 0.0);
                     for (int i = 0; i < 12; ++i) pi->grad[size_t(i)] += g[size_t(i)];
                   });
}

Tensor affine_inverse(const Tensor& A) {
  NG_CHECK((A.shape() == Shape{4, 4}), "affine_inverse needs (4,4), got ", shape_str(A.shape()));
  std::array<double, 16> m;
  for (int i = 0; i < 16; ++i) m[size_t(i)] = A[i];
  assert_bottom_row(m);
  double det = det3_of(m);
  NG_CHECK(std::fabs(det) >= kDetGuard, "near-singular affine, det=", det);
  auto inv = invert_affine(m, det);
  std::vector<double> y(inv.begin(), inv.end());
  auto ai = A.impl();
  // dY = -Y dA Y, so gA = -Yt G Yt.
  return custom_op("affine_inverse", {4, 4}, std::move(y), {A},
                   [ai, inv](const std::vector<double>& g) {
                     if (!ai->requires_grad) return;
                     if (ai->grad.empty()) ai->grad.assign(16, 0.0);
                     std::array<double, 16> gy{};
                     for (int r = 0; r < 4; ++r)
                       for (int c = 0; c < 4; ++c) {
                         double s = 0.0;
                         for (int k = 0; k < 4; ++k) s += inv[size_t(k * 4 + r)] * g[size_t(k * 4 + c)];
                         gy[size_t(r * 4 + c)] = s;
                       }
                     for (int r = 0; r < 4; ++r)
                       for (int c = 0; c < 4; ++c) {
                         double s = 0.0;
                         for (int k = 0; k < 4; ++k) s += gy[size_t(r * 4 + k)] * inv[size_t(c * 4 + k)];
                         ai->grad[size_t(r * 4 + c)] -= s;
                       }
                   });
}

namespace {

struct ResampleDims {
  int C, W, H, D;
  int Wo, Ho, Do;
  bool had_channel;
};

ResampleDims resample_dims(const Tensor& source, const Shape& out_dims) {
  const Shape& s = source.shape();
  NG_CHECK(s.size() == 3 || s.size() == 4, "resample source must be rank 3 or 4, got ",
           shape_str(s));
  NG_CHECK(out_dims.size() == 3, "out_dims must list three extents, got ", shape_str(out_dims));
  for (int d : out_dims) NG_CHECK(d >= 1, "out_dims must be positive, got ", shape_str(out_dims));
  ResampleDims r;
  r.had_channel = s.size() == 4;
  r.C = r.had_channel ? s[0] : 1;
  r.W = s[size_t(r.had_channel ? 1 : 0)];
  r.H = s[size_t(r.had_channel ? 2 : 1)];
  r.D = s[size_t(r.had_channel ? 3 : 2)];
  r.Wo = out_dims[0];
  r.Ho = out_dims[1];
  r.Do = out_dims[2];
  return r;
}

bool corner_ok(const ResampleDims& d, int cu, int cv, int cw) {
  return cu >= 0 && cu < d.W && cv >= 0 && cv < d.H && cw >= 0 && cw < d.D;
}

template <class F>
void for_each_sample(const ResampleDims& d, const double* m, F&& visit) {
  for (int i = 0; i < d.Wo; ++i) {
    double x = to_normalized(i, d.Wo);
    for (int j = 0; j < d.Ho; ++j) {
      double y = to_normalized(j, d.Ho);
      for (int k = 0; k < d.Do; ++k) {
        double z = to_normalized(k, d.Do);
        double sx = m[0] * x + m[1] * y + m[2] * z + m[3];
        double sy = m[4] * x + m[5] * y + m[6] * z + m[7];
        double sz = m[8] * x + m[9] * y + m[10] * z + m[11];
        double u = to_voxel(sx, d.W), v = to_voxel(sy, d.H), w = to_voxel(sz, d.D);
        int u0 = int(std::floor(u)), v0 = int(std::floor(v)), w0 = int(std::floor(w));
        visit(i, j, k, x, y, z, u0, v0, w0, u - u0, v - v0, w - w0);
      }
    }
  }
}

}  // namespace

Tensor affine_resample(const Tensor& source, const Tensor& A, const Shape& out_dims) {
  NG_CHECK((A.shape() == Shape{4, 4}), "resample transform must be (4,4), got ", shape_str(A.shape()));
  ResampleDims d = resample_dims(source, out_dims);
  auto si = source.impl();
  auto ai = A.impl();
  const double* m = ai->data.data();
  const double* src = si->data.data();
  const int64_t splane = int64_t(d.W) * d.H * d.D;
  const int64_t oplane = int64_t(d.Wo) * d.Ho * d.Do;
  std::vector<double> out(size_t(d.C * oplane), 0.0);

  for_each_sample(d, m, [&](int i, int j, int k, double, double, double, int u0, int v0, int w0,
                            double fu, double fv, double fw) {
    int64_t oidx = (int64_t(i) * d.Ho + j) * d.Do + k;
    for (int du = 0; du < 2; ++du)
      for (int dv = 0; dv < 2; ++dv)
        for (int dw = 0; dw < 2; ++dw) {
          int cu = u0 + du, cv = v0 + dv, cw = w0 + dw;
          if (!corner_ok(d, cu, cv, cw)) continue;
          double wt = (du ? fu : 1.0 - fu) * (dv ? fv : 1.0 - fv) * (dw ? fw : 1.0 - fw);
          if (wt == 0.0) continue;
          int64_t sidx = (int64_t(cu) * d.H + cv) * d.D + cw;
          for (int c = 0; c < d.C; ++c)
            out[size_t(c * oplane + oidx)] += wt * src[c * splane + sidx];
        }
  });

  Shape oshape = d.had_channel ? Shape{d.C, d.Wo, d.Ho, d.Do} : Shape{d.Wo, d.Ho, d.Do};
  auto bwd = [si, ai, d, splane, oplane](const std::vector<double>& g) {
    const double* src = si->data.data();
    bool need_src = si->requires_grad;
    bool need_a = ai->requires_grad;
    if (need_src && si->grad.empty()) si->grad.assign(si->data.size(), 0.0);
    if (need_a && ai->grad.empty()) ai->grad.assign(16, 0.0);
    double* gs = need_src ? si->grad.data() : nullptr;
    double* ga = need_a ? ai->grad.data() : nullptr;
    double su = d.W == 1 ? 0.0 : 0.5 * (d.W - 1);
    double sv = d.H == 1 ? 0.0 : 0.5 * (d.H - 1);
    double sw = d.D == 1 ? 0.0 : 0.5 * (d.D - 1);
    for_each_sample(d, ai->data.data(), [&](int i, int j, int k, double x, double y, double z,
                                            int u0, int v0, int w0, double fu, double fv,
                                            double fw) {
      int64_t oidx = (int64_t(i) * d.Ho + j) * d.Do + k;
      double dLdu = 0.0, dLdv = 0.0, dLdw = 0.0;
      for (int du = 0; du < 2; ++du)
        for (int dv = 0; dv < 2; ++dv)
          for (int dw = 0; dw < 2; ++dw) {
            int cu = u0 + du, cv = v0 + dv, cw = w0 + dw;
            if (!corner_ok(d, cu, cv, cw)) continue;
            double wu = du ? fu : 1.0 - fu;
            double wv = dv ? fv : 1.0 - fv;
            double ww = dw ? fw : 1.0 - fw;
            int64_t sidx = (int64_t(cu) * d.H + cv) * d.D + cw;
            for (int c = 0; c < d.C; ++c) {
              double go = g[size_t(c * oplane + oidx)];
              if (go == 0.0) continue;
              double sval = src[c * splane + sidx];
              if (gs) gs[c * splane + sidx] += go * wu * wv * ww;
              if (ga) {
                dLdu += go * sval * (du ? 1.0 : -1.0) * wv * ww;
                dLdv += go * sval * wu * (dv ? 1.0 : -1.0) * ww;
                dLdw += go * sval * wu * wv * (dw ? 1.0 : -1.0);
              }
            }
          }
      if (ga) {
        double gx = dLdu * su, gy = dLdv * sv, gz = dLdw * sw;
        ga[0] += gx * x; ga[1] += gx * y; ga[2] += gx * z; ga[3] += gx;
        ga[4] += gy * x; ga[5] += gy * y; ga[6] += gy * z; ga[7] += gy;
        ga[8] += gz * x; ga[9] += gz * y; ga[10] += gz * z; ga[11] += gz;
      }
    });
  };
  return custom_op("affine_resample", std::move(oshape), std::move(out), {source, A},
                   std::move(bwd));
}

Tensor affine_resample(const Tensor& source, const AffineTransform& a, const Shape& out_dims) {
  return affine_resample(source, to_tensor(a), out_dims);
}

Tensor warp_mask(const Tensor& mask, const Tensor& A) {
  NG_CHECK(mask.rank() == 4, "warp_mask needs [L,W,H,D], got ", shape_str(mask.shape()));
  return affine_resample(mask, A, {mask.dim(1), mask.dim(2), mask.dim(3)});
}

Tensor warp_mask(const Tensor& mask, const AffineTransform& a) {
  return warp_mask(mask, to_tensor(a));
}

std::vector<int> harden_mask(const Tensor& soft) {
  NG_CHECK(soft.rank() == 4, "harden_mask needs [L,W,H,D], got ", shape_str(soft.shape()));
  int L = soft.dim(0);
  int64_t voxels = int64_t(soft.dim(1)) * soft.dim(2) * soft.dim(3);
  std::vector<int> labels(size_t(voxels), 0);
  for (int64_t v = 0; v < voxels; ++v) {
    double best = -1.0, total = 0.0;
    int arg = 0;
    for (int c = 0; c < L; ++c) {
      double val = soft[c * voxels + v];
      total += val;
      if (val > best) { best = val; arg = c; }
    }
    if (total >= 0.5) labels[size_t(v)] = arg + 1;
  }
  return labels;
}

std::vector<int> harden_labels(const Tensor& soft) {
  NG_CHECK(soft.rank() == 4, "harden_labels needs [L,W,H,D], got ", shape_str(soft.shape()));
  int L = soft.dim(0);
  int64_t voxels = int64_t(soft.dim(1)) * soft.dim(2) * soft.dim(3);
  std::vector<int> labels(size_t(voxels), 0);
  for (int64_t v = 0; v < voxels; ++v) {
    double best = soft[v];
    int arg = 0;
    for (int c = 1; c < L; ++c) {
      double val = soft[c * voxels + v];
      if (val > best) { best = val; arg = c; }
    }
    labels[size_t(v)] = arg;
  }
  return labels;
}

std::vector<int> harden_binary(const Tensor& m, double threshold) {
  std::vector<int> labels(size_t(m.size()), 0);
  for (int64_t i = 0; i < m.size(); ++i) labels[size_t(i)] = m[i] >= threshold ? 1 : 0;
  return labels;
}

}  // namespace ng
