#include <array>
#include <cmath>
#include <vector>

#include <doctest.h>

#include "ng/geometry.hpp"
#include "ng/metrics.hpp"
#include "ng/rng.hpp"
#include "ng/tensor.hpp"
#include "test_util.hpp"

using namespace ng;
using ngtest::check_grads;
using ngtest::random_tensor;

namespace {

AffineTransform random_affine(Rng& rng, double magnitude = 1.0) {
  double r = 0.3 * magnitude, sh = 0.1 * magnitude, t = 0.2 * magnitude, sc = 0.1 * magnitude;
  auto a = AffineTransform::rotate(0, rng.uniform(-r, r));
  a = compose(a, AffineTransform::rotate(1, rng.uniform(-r, r)));
  a = compose(a, AffineTransform::rotate(2, rng.uniform(-r, r)));
  double s = rng.uniform(1.0 - sc, 1.0 + sc);
  a = compose(a, AffineTransform::scale(s, s, s));
  a = compose(a, AffineTransform::shear(rng.uniform(-sh, sh), rng.uniform(-sh, sh),
                                        rng.uniform(-sh, sh), rng.uniform(-sh, sh),
                                        rng.uniform(-sh, sh), rng.uniform(-sh, sh)));
  a = compose(a, AffineTransform::translate(rng.uniform(-t, t), rng.uniform(-t, t),
                                            rng.uniform(-t, t)));
  return a;
}

double max_abs_diff(const AffineTransform& a, const AffineTransform& b) {
  double m = 0.0;
  for (int i = 0; i < 16; ++i) m = std::max(m, std::fabs(a.m()[size_t(i)] - b.m()[size_t(i)]));
  return m;
}

// A smooth blob, near zero at the cube faces so zero padding and the
// composed transform agree away from interpolation blur.
Tensor smooth_volume(int n) {
  std::vector<double> v(size_t(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        double x = to_normalized(i, n), y = to_normalized(j, n), z = to_normalized(k, n);
        double r2 = x * x + y * y + z * z;
        v[size_t((int64_t(i) * n + j) * n + k)] =
            std::exp(-3.0 * r2) * (1.0 + 0.2 * std::sin(2.0 * x + y));
      }
  return Tensor::from_data({n, n, n}, std::move(v));
}

Tensor ellipsoid_mask(int n, double ax, double ay, double az) {
  std::vector<double> v(size_t(n) * n * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        double x = to_normalized(i, n), y = to_normalized(j, n), z = to_normalized(k, n);
        double r2 = x * x / (ax * ax) + y * y / (ay * ay) + z * z / (az * az);
        if (r2 <= 1.0) v[size_t((int64_t(i) * n + j) * n + k)] = 1.0;
      }
  return Tensor::from_data({1, n, n, n}, std::move(v));
}

}  // namespace

TEST_CASE("affine constructors and invariants") {
  AffineTransform id;
  CHECK(id.det3() == 1.0);
  CHECK(max_abs_diff(compose(id, id), id) == 0.0);

  auto t = AffineTransform::translate(0.3, -0.2, 0.1);
  CHECK(max_abs_diff(compose(t, AffineTransform::translate(-0.3, 0.2, -0.1)), id) <= 1e-15);

  std::array<double, 16> bad{};
  bad[15] = 2.0;
  CHECK_THROWS(AffineTransform(bad));
}

TEST_CASE("compose matches direct 4x4 product") {
  Rng rng(31);
  auto a = random_affine(rng);
  auto b = random_affine(rng);
  auto got = compose(a, b);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      double want = 0.0;
      for (int k = 0; k < 4; ++k) want += a.at(r, k) * b.at(k, c);
      CHECK(got.at(r, c) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("inverse composes to identity") {
  CHECK(max_abs_diff(inverse(AffineTransform::identity()), AffineTransform::identity()) == 0.0);
  auto half = inverse(AffineTransform::scale(2, 2, 2));
  CHECK(half.at(0, 0) == doctest::Approx(0.5));
  CHECK(half.at(1, 1) == doctest::Approx(0.5));

  Rng rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = random_affine(rng);
    CHECK(max_abs_diff(compose(a, inverse(a)), AffineTransform::identity()) <= 1e-10);
    CHECK(max_abs_diff(compose(inverse(a), a), AffineTransform::identity()) <= 1e-10);
  }

  auto degenerate = AffineTransform::scale(1e-4, 1e-4, 1e-4);
  try {
    inverse(degenerate);
    FAIL("expected determinant guard");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("det") != std::string::npos);
  }
}

TEST_CASE("identity resample is exact") {
  Rng rng(33);
  auto vol = random_tensor({6, 7, 5}, rng);
  auto out = affine_resample(vol, AffineTransform::identity(), {6, 7, 5});
  for (int64_t i = 0; i < vol.size(); ++i) CHECK(std::fabs(out[i] - vol[i]) <= 1e-12);

  auto chan = random_tensor({3, 4, 4, 4}, rng);
  auto out4 = affine_resample(chan, AffineTransform::identity(), {4, 4, 4});
  for (int64_t i = 0; i < chan.size(); ++i) CHECK(std::fabs(out4[i] - chan[i]) <= 1e-12);
}

TEST_CASE("midpoint sampling interpolates linearly") {
  auto vol = Tensor::from_data({1, 2, 1, 1}, {0.0, 1.0});
  auto out = affine_resample(vol, AffineTransform::identity(), {3, 1, 1});
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(0.5));
  CHECK(out[2] == doctest::Approx(1.0));
}

TEST_CASE("integer translation matches array shift") {
  int n = 8;
  Rng rng(34);
  auto vol = random_tensor({n, n, n}, rng);
  int shift = 2;
  // Sampling map adds +shift voxels along x: output(i) = input(i+shift).
  auto t = AffineTransform::translate(2.0 * shift / (n - 1), 0, 0);
  auto out = affine_resample(vol, t, {n, n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        double want = i + shift < n ? vol[(int64_t(i + shift) * n + j) * n + k] : 0.0;
        CHECK(std::fabs(out[(int64_t(i) * n + j) * n + k] - want) <= 1e-12);
      }
}

TEST_CASE("composition consistency on smooth volumes") {
  // Rotation-dominant transforms: large translations leak zero padding into
  // the two-step path near the faces, which is padding policy, not blur.
  int n = 16;
  auto vol = smooth_volume(n);
  auto a1 = compose(compose(AffineTransform::rotate(0, 0.25), AffineTransform::rotate(1, -0.2)),
                    AffineTransform::translate(0.05, -0.03, 0.02));
  auto a2 = compose(compose(AffineTransform::rotate(2, 0.3), AffineTransform::rotate(0, -0.15)),
                    AffineTransform::translate(-0.04, 0.05, -0.02));
  auto two_step = affine_resample(affine_resample(vol, a1, {n, n, n}), a2, {n, n, n});
  auto one_step = affine_resample(vol, compose(a1, a2), {n, n, n});
  double linf = 0.0;
  for (int64_t i = 0; i < vol.size(); ++i) linf = std::max(linf, std::fabs(two_step[i] - one_step[i]));
  CHECK(linf <= 0.05);
}

TEST_CASE("mass bound under volume-preserving in-range transform") {
  int n = 12;
  auto vol = smooth_volume(n);
  for (auto& v : vol.raw()) v = std::max(v, 0.0);
  auto rot = AffineTransform::rotate(2, 0.2);
  auto out = affine_resample(vol, rot, {n, n, n});
  double s_in = 0.0, s_out = 0.0;
  for (int64_t i = 0; i < vol.size(); ++i) {
    s_in += vol[i];
    s_out += out[i];
  }
  CHECK(s_out <= s_in * (1.0 + 1e-6));
}

TEST_CASE("resample gradients match finite differences") {
  Rng rng(36);
  auto vol = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  auto params = random_tensor({12}, rng, -0.05, 0.05);
  check_grads(
      [&] {
        auto A = affine_from_params(params);
        auto out = affine_resample(vol, A, {8, 8, 8});
        return sum(mul(out, out));
      },
      {vol, params});
}

TEST_CASE("affine_inverse gradients match finite differences") {
  Rng rng(37);
  auto params = random_tensor({12}, rng, -0.1, 0.1);
  auto probe = random_tensor({4, 4}, rng);
  check_grads(
      [&] {
        auto inv = affine_inverse(affine_from_params(params));
        return sum(mul(inv, probe));
      },
      {params});
}

TEST_CASE("affine_from_params starts at identity") {
  auto A = affine_from_params(Tensor::zeros({12}));
  auto id = to_tensor(AffineTransform::identity());
  for (int i = 0; i < 16; ++i) CHECK(A[i] == id[i]);
  CHECK_THROWS(affine_inverse(Tensor::zeros({4, 4})));
}

TEST_CASE("warp_mask keeps convex channel sums") {
  int n = 12;
  auto mask = ellipsoid_mask(n, 0.6, 0.5, 0.4);
  Rng rng(38);
  auto a = random_affine(rng);
  auto warped = warp_mask(mask, to_tensor(a));
  CHECK(warped.shape() == mask.shape());
  for (int64_t i = 0; i < warped.size(); ++i) {
    CHECK(warped[i] >= -1e-12);
    CHECK(warped[i] <= 1.0 + 1e-9);
  }
  auto same = warp_mask(mask, AffineTransform::identity());
  for (int64_t i = 0; i < mask.size(); ++i) CHECK(std::fabs(same[i] - mask[i]) <= 1e-12);
}

TEST_CASE("warp then inverse-warp recovers a smooth mask") {
  int n = 24;
  auto mask = ellipsoid_mask(n, 0.65, 0.55, 0.5);
  Rng rng(39);
  auto a = random_affine(rng);
  auto fwd = warp_mask(mask, to_tensor(a));
  auto rt = warp_mask(fwd, to_tensor(inverse(a)));
  auto got = harden_mask(rt);
  auto want = harden_mask(mask);
  CHECK(dice(got, want) >= 0.95);
}

TEST_CASE("hardening rules") {
  auto soft = Tensor::from_data({2, 1, 1, 3}, {0.7, 0.2, 0.1, 0.1, 0.6, 0.3});
  auto lbl = harden_mask(soft);
  CHECK(lbl == std::vector<int>{1, 2, 0});

  auto split = Tensor::from_data({2, 1, 1, 1}, {0.4, 0.45});
  CHECK(harden_mask(split) == std::vector<int>{2});

  auto cover = Tensor::from_data({2, 1, 1, 2}, {0.7, 0.2, 0.3, 0.8});
  CHECK(harden_labels(cover) == std::vector<int>{0, 1});

  auto vol = Tensor::from_data({1, 1, 2}, {0.4, 0.6});
  CHECK(harden_binary(vol) == std::vector<int>{0, 1});
}

TEST_CASE("round trip voxel to normalized coordinates") {
  for (int n : {2, 5, 24}) {
    for (int i = 0; i < n; ++i) {
      double x = to_normalized(i, n);
      CHECK(to_voxel(x, n) == doctest::Approx(double(i)).epsilon(1e-14));
      CHECK(x >= -1.0);
      CHECK(x <= 1.0);
    }
  }
}
