#include "ng/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "ng/common.hpp"
#include "ng/rng.hpp"

namespace ng {
namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr std::uint64_t kSubjectStream = 12;  // keeps subject draws off the dataset-level stream

// Ellipsoid semi-axes in normalized coordinates. Kept a little under a third
// of the field of view per axis so perturbed subjects stay inside the volume.
constexpr double kAxes[3] = {0.70, 0.66, 0.62};
constexpr double kSkullInner = 1.03;
constexpr double kSkullOuter = 1.16;
constexpr double kSkullIntensity = 1.3;
constexpr double kSupport = 0.75;  // subsample cube half-extent, in voxels

double smoothstep(double e0, double e1, double x) {
  double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

struct BrainModel {
  int tissues;  // C, shells are 1..C-1
  int parcels;  // K

  double rho(const std::array<double, 3>& u) const {
    double qx = u[0] / kAxes[0], qy = u[1] / kAxes[1], qz = u[2] / kAxes[2];
    return std::sqrt(qx * qx + qy * qy + qz * qz);
  }

  int shell_of(double r) const {
    if (r > 1.0) return 0;
    int s = static_cast<int>(std::floor(r * (tissues - 1))) + 1;
    return std::min(s, tissues - 1);
  }

  // Azimuth sectors around the z axis. Boundaries sit half a sector off the
  // grid axes so voxel centers near the axis keep a solid angular margin.
  int sector_of(const std::array<double, 3>& u) const {
    double frac = (std::atan2(u[1], u[0]) + kPi) * parcels / (2.0 * kPi);
    int k = static_cast<int>(std::floor(frac + 0.5)) % parcels;
    return std::clamp(k, 0, parcels - 1);
  }

  double shell_base(int s) const {
    if (tissues == 2) return 1.0;
    return 1.0 - 0.4 * (s - 1) / static_cast<double>(tissues - 2);
  }

  // Plateau per shell with smooth ramps at the internal boundaries; the
  // outer edge at rho = 1 stays sharp so extraction has real contrast.
  double intensity(double r) const {
    if (r > 1.0) return 0.0;
    double w = std::min(0.12, 0.5 / (tissues - 1));
    double v = shell_base(1);
    for (int j = 1; j <= tissues - 2; ++j) {
      double rj = static_cast<double>(j) / (tissues - 1);
      double t = smoothstep(rj - 0.5 * w, rj + 0.5 * w, r);
      v = v + t * (shell_base(j + 1) - v);
    }
    return v;
  }

  double skull(double r) const {
    if (r <= 1.0 || r >= kSkullOuter + 0.02) return 0.0;
    double rise = smoothstep(kSkullInner - 0.02, kSkullInner + 0.02, r);
    double fall = 1.0 - smoothstep(kSkullOuter - 0.03, kSkullOuter + 0.01, r);
    return kSkullIntensity * rise * fall;
  }
};

AffineTransform draw_perturbation(const PhantomSpec& spec, Rng& rng) {
  if (spec.identity_perturbation) return AffineTransform::identity();
  double rmax = spec.max_rotation_deg * kPi / 180.0;
  double tmax = 2.0 * spec.max_translation_vox / (spec.dims - 1);
  double margin = 1.0 / (spec.dims - 1);  // half a voxel
  for (int attempt = 0; attempt < 10; ++attempt) {
    double th[3], sh[6], tr[3];
    for (double& v : th) v = rng.uniform(-rmax, rmax);
    double s = rng.uniform(spec.min_scale, spec.max_scale);
    for (double& v : sh) v = rng.uniform(-spec.max_shear, spec.max_shear);
    for (double& v : tr) v = rng.uniform(-tmax, tmax);
    auto a = compose(AffineTransform::translate(tr[0], tr[1], tr[2]),
                     AffineTransform::rotate(2, th[2]));
    a = compose(a, AffineTransform::rotate(1, th[1]));
    a = compose(a, AffineTransform::rotate(0, th[0]));
    a = compose(a, AffineTransform::shear(sh[0], sh[1], sh[2], sh[3], sh[4], sh[5]));
    a = compose(a, AffineTransform::scale(s, s, s));
    if (std::abs(a.det3()) < 1e-6) continue;

    // The subject brain is the image of the template ellipsoid under A; its
    // bounding box must stay inside the field of view or we redraw.
    bool contained = true;
    for (int i = 0; i < 3 && contained; ++i) {
      double half = 0.0;
      for (int j = 0; j < 3; ++j) half += a.at(i, j) * kAxes[j] * a.at(i, j) * kAxes[j];
      half = std::sqrt(half);
      contained = std::abs(a.at(i, 3)) + half <= 1.0 - margin;
    }
    if (contained) return a;
  }
  fail("make_subject: no contained perturbation after 10 attempts, "
       "reduce translation or scale ranges");
}

}  // namespace

void PhantomSpec::validate() const {
  NG_CHECK(dims >= 16, "phantom spec: dims must be >= 16, got ", dims);
  NG_CHECK(tissue_classes >= 2, "phantom spec: tissue_classes must be >= 2, got ", tissue_classes);
  NG_CHECK(parcels >= 2, "phantom spec: parcels must be >= 2, got ", parcels);
  NG_CHECK(class_effect >= 0.0 && class_effect <= 1.0, "phantom spec: class_effect must be in [0,1], got ",
           class_effect);
  NG_CHECK(noise_sigma >= 0.0, "phantom spec: noise_sigma must be >= 0, got ", noise_sigma);
  NG_CHECK(max_rotation_deg >= 0.0 && max_rotation_deg <= 15.0,
           "phantom spec: max_rotation_deg must be in [0,15], got ", max_rotation_deg);
  NG_CHECK(min_scale >= 0.9 && max_scale <= 1.1 && min_scale <= max_scale,
           "phantom spec: scale range must sit inside [0.9,1.1]");
  NG_CHECK(max_translation_vox >= 0.0 && max_translation_vox <= 5.0,
           "phantom spec: max_translation_vox must be in [0,5], got ", max_translation_vox);
  NG_CHECK(max_shear >= 0.0 && max_shear <= 0.1, "phantom spec: max_shear must be in [0,0.1], got ",
           max_shear);
}

PhantomTemplate make_template(const PhantomSpec& spec) {
  spec.validate();
  int d = spec.dims, C = spec.tissue_classes, K = spec.parcels;
  BrainModel model{C, K};
  PhantomTemplate out;
  out.T = Tensor::zeros({d, d, d});
  out.B = Tensor::zeros({C, d, d, d});
  out.P = Tensor::zeros({K, d, d, d});
  double* tv = out.T.raw().data();
  double* bv = out.B.raw().data();
  double* pv = out.P.raw().data();
  std::vector<int> parcel_count(K, 0);
  int vol = d * d * d;
  int idx = 0;
  for (int ix = 0; ix < d; ++ix)
    for (int iy = 0; iy < d; ++iy)
      for (int iz = 0; iz < d; ++iz, ++idx) {
        std::array<double, 3> u = {to_normalized(ix, d), to_normalized(iy, d),
                                   to_normalized(iz, d)};
        double r = model.rho(u);
        if (r <= 1.0) {
          tv[idx] = model.intensity(r);
          bv[model.shell_of(r) * vol + idx] = 1.0;
          int k = model.sector_of(u);
          pv[k * vol + idx] = 1.0;
          ++parcel_count[k];
        } else {
          bv[idx] = 1.0;
        }
      }
  for (int k = 0; k < K; ++k)
    NG_CHECK(parcel_count[k] > 0, "make_template: parcel ", k, " is empty, dims=", d,
             " too small for ", K, " sectors");
  return out;
}

PhantomSubject make_subject(const PhantomTemplate& tmpl, const PhantomSpec& spec, int index) {
  spec.validate();
  NG_CHECK(index >= 0, "make_subject: index must be >= 0, got ", index);
  int d = spec.dims, C = spec.tissue_classes, K = spec.parcels;
  NG_CHECK(tmpl.T.shape() == (Shape{d, d, d}), "make_subject: template dims do not match spec");
  BrainModel model{C, K};
  Rng rng(mix_seed(spec.seed ^ kSubjectStream, static_cast<std::uint64_t>(index)));

  PhantomSubject sub;
  sub.index = index;
  sub.y = rng.bernoulli(0.5) ? 1 : 0;
  sub.A_true = draw_perturbation(spec, rng);
  AffineTransform to_template = inverse(sub.A_true);

  sub.S = Tensor::zeros({d, d, d});
  sub.M = Tensor::zeros({d, d, d});
  sub.true_seg = Tensor::zeros({C, d, d, d});
  sub.true_parc = Tensor::zeros({K, d, d, d});
  double* sv = sub.S.raw().data();
  double* mv = sub.M.raw().data();
  double* segv = sub.true_seg.raw().data();
  double* parcv = sub.true_parc.raw().data();
  double attenuation = 1.0 - spec.class_effect;
  int vol = d * d * d;

  // Template-space offsets of the voxel corners and of a 4x4x4 sub-grid, for
  // partial-volume rendering of the label masks at boundary voxels.
  double half = 1.0 / (d - 1);
  std::array<std::array<double, 3>, 3> cols;
  for (int j = 0; j < 3; ++j)
    for (int r = 0; r < 3; ++r) cols[j][r] = to_template.at(r, j);
  auto offset = [&](const std::array<double, 3>& u, double dx, double dy, double dz) {
    std::array<double, 3> o;
    for (int r = 0; r < 3; ++r) o[r] = u[r] + dx * cols[0][r] + dy * cols[1][r] + dz * cols[2][r];
    return o;
  };
  // label = shell * K + sector inside the brain, -1 outside
  auto classify = [&](const std::array<double, 3>& u) {
    double r = model.rho(u);
    if (r > 1.0) return -1;
    return model.shell_of(r) * K + model.sector_of(u);
  };

  int idx = 0;
  for (int ix = 0; ix < d; ++ix)
    for (int iy = 0; iy < d; ++iy)
      for (int iz = 0; iz < d; ++iz, ++idx) {
        std::array<double, 3> x = {to_normalized(ix, d), to_normalized(iy, d),
                                   to_normalized(iz, d)};
        auto u = to_template.apply(x);
        double r = model.rho(u);
        double v = model.intensity(r);
        if (r <= 1.0) {
          if (sub.y == 1 && model.sector_of(u) == 0) v *= attenuation;
          mv[idx] = 1.0;
        } else {
          v += model.skull(r);
        }
        sv[idx] = v;

        int center = classify(u);
        bool uniform = true;
        double cr = 2.0 * kSupport * half;
        for (int c = 0; c < 8 && uniform; ++c)
          uniform = classify(offset(u, (c & 1 ? cr : -cr), (c & 2 ? cr : -cr),
                                    (c & 4 ? cr : -cr))) == center;
        if (uniform) {
          if (center < 0)
            segv[idx] = 1.0;
          else {
            segv[(center / K) * vol + idx] = 1.0;
            parcv[(center % K) * vol + idx] = 1.0;
          }
        } else {
          for (int sx = 0; sx < 4; ++sx)
            for (int sy = 0; sy < 4; ++sy)
              for (int sz = 0; sz < 4; ++sz) {
                int lbl = classify(offset(u, (sx - 1.5) * kSupport * half, (sy - 1.5) * kSupport * half,
                                          (sz - 1.5) * kSupport * half));
                if (lbl < 0)
                  segv[idx] += 1.0 / 64.0;
                else {
                  segv[(lbl / K) * vol + idx] += 1.0 / 64.0;
                  parcv[(lbl % K) * vol + idx] += 1.0 / 64.0;
                }
              }
        }
      }
  if (spec.noise_sigma > 0.0)
    for (int i = 0; i < vol; ++i) sv[i] += spec.noise_sigma * rng.normal();
  return sub;
}

PhantomDataset make_dataset(const PhantomSpec& spec) {
  spec.validate();
  NG_CHECK(spec.subjects >= 10, "make_dataset: need at least 10 subjects, got ", spec.subjects);
  PhantomDataset ds;
  ds.tmpl = make_template(spec);
  int z = spec.subjects;
  int n_val = z / 10, n_test = z / 10;
  int n_train = z - n_val - n_test;
  for (int i = 0; i < z; ++i) {
    auto sub = make_subject(ds.tmpl, spec, i);
    if (i < n_train)
      ds.train.push_back(std::move(sub));
    else if (i < n_train + n_val)
      ds.val.push_back(std::move(sub));
    else
      ds.test.push_back(std::move(sub));
  }
  const char* names[3] = {"train", "val", "test"};
  const std::vector<PhantomSubject>* splits[3] = {&ds.train, &ds.val, &ds.test};
  for (int s = 0; s < 3; ++s) {
    int ones = 0;
    for (const auto& sub : *splits[s]) ones += sub.y;
    NG_CHECK(ones > 0 && ones < static_cast<int>(splits[s]->size()),
             "make_dataset: ", names[s], " split has a single class, use a different seed");
  }
  return ds;
}

}  // namespace ng
