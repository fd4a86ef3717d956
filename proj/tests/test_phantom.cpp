#include "ng/phantom.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "ng/geometry.hpp"
#include "ng/metrics.hpp"
#include "ng/tensor.hpp"

using namespace ng;

namespace {

PhantomSpec default_spec() { return PhantomSpec{}; }

std::vector<const PhantomSubject*> all_subjects(const PhantomDataset& ds) {
  std::vector<const PhantomSubject*> out;
  for (const auto& s : ds.train) out.push_back(&s);
  for (const auto& s : ds.val) out.push_back(&s);
  for (const auto& s : ds.test) out.push_back(&s);
  return out;
}

double parcel_mean(const PhantomSubject& sub, int k) {
  int vol = sub.S.size();
  auto s = sub.S.data();
  auto p = sub.true_parc.data();
  double acc = 0.0;
  int count = 0;
  for (int i = 0; i < vol; ++i)
    if (p[k * vol + i] > 0.5) {
      acc += s[i];
      ++count;
    }
  REQUIRE(count > 0);
  return acc / count;
}

}  // namespace

TEST_CASE("template masks partition the volume") {
  auto spec = default_spec();
  auto tmpl = make_template(spec);
  int d = spec.dims, C = spec.tissue_classes, K = spec.parcels;
  int vol = d * d * d;
  REQUIRE(tmpl.T.shape() == (Shape{d, d, d}));
  REQUIRE(tmpl.B.shape() == (Shape{C, d, d, d}));
  REQUIRE(tmpl.P.shape() == (Shape{K, d, d, d}));

  auto b = tmpl.B.data();
  auto p = tmpl.P.data();
  auto t = tmpl.T.data();
  std::vector<int> parcel_count(K, 0);
  for (int i = 0; i < vol; ++i) {
    double bsum = 0.0;
    for (int c = 0; c < C; ++c) {
      CHECK((b[c * vol + i] == 0.0 || b[c * vol + i] == 1.0));
      bsum += b[c * vol + i];
    }
    CHECK(bsum == 1.0);
    double psum = 0.0;
    for (int k = 0; k < K; ++k) {
      CHECK((p[k * vol + i] == 0.0 || p[k * vol + i] == 1.0));
      if (p[k * vol + i] == 1.0) ++parcel_count[k];
      psum += p[k * vol + i];
    }
    double brain = 1.0 - b[i];
    CHECK(psum == brain);
    if (brain == 0.0) CHECK(t[i] == 0.0);
    if (brain == 1.0) CHECK(t[i] > 0.0);
  }
  for (int k = 0; k < K; ++k) CHECK(parcel_count[k] > 0);

  int center = (d / 2 * d + d / 2) * d + d / 2;
  CHECK(b[1 * vol + center] == 1.0);
  CHECK(t[center] == 1.0);
}

TEST_CASE("template rejects bad specs") {
  auto spec = default_spec();
  spec.dims = 8;
  CHECK_THROWS(make_template(spec));
  spec = default_spec();
  spec.tissue_classes = 1;
  CHECK_THROWS(make_template(spec));
  spec = default_spec();
  spec.parcels = 1;
  CHECK_THROWS(make_template(spec));
  spec = default_spec();
  spec.dims = 16;
  spec.parcels = 400;
  CHECK_THROWS_WITH_AS(make_template(spec), doctest::Contains("empty"), std::runtime_error);
  spec = default_spec();
  spec.max_translation_vox = 6.0;
  CHECK_THROWS(make_template(spec));
}

TEST_CASE("identity perturbation with zero noise reproduces the template brain") {
  auto spec = default_spec();
  spec.identity_perturbation = true;
  spec.noise_sigma = 0.0;
  spec.class_effect = 0.0;
  auto tmpl = make_template(spec);
  auto sub = make_subject(tmpl, spec, 3);
  int vol = spec.dims * spec.dims * spec.dims;

  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(sub.A_true.at(r, c) == (r == c ? 1.0 : 0.0));

  auto s = sub.S.data();
  auto m = sub.M.data();
  auto t = tmpl.T.data();
  auto b = tmpl.B.data();
  for (int i = 0; i < vol; ++i) {
    CHECK(m[i] == 1.0 - b[i]);
    CHECK(s[i] * m[i] == t[i]);
  }

  // Label masks agree with the template atlas wherever they are integral;
  // the boundary shell carries partial-volume fractions instead.
  auto seg = sub.true_seg.data();
  auto parc = sub.true_parc.data();
  auto p = tmpl.P.data();
  int soft = 0;
  for (int i = 0; i < vol; ++i) {
    bool integral = true;
    for (int c = 0; c < spec.tissue_classes && integral; ++c) {
      double v = seg[c * vol + i];
      integral = v == 0.0 || v == 1.0;
    }
    for (int k = 0; k < spec.parcels && integral; ++k) {
      double v = parc[k * vol + i];
      integral = v == 0.0 || v == 1.0;
    }
    if (!integral) {
      ++soft;
      continue;
    }
    for (int c = 0; c < spec.tissue_classes; ++c) CHECK(seg[c * vol + i] == b[c * vol + i]);
    for (int k = 0; k < spec.parcels; ++k) CHECK(parc[k * vol + i] == p[k * vol + i]);
  }
  CHECK(soft > 0);
  CHECK(soft < vol / 4);
}

TEST_CASE("subject perturbations stay in range and keep the brain inside") {
  auto spec = default_spec();
  auto tmpl = make_template(spec);
  int d = spec.dims;
  double tmax = 2.0 * spec.max_translation_vox / (d - 1);
  for (int i = 0; i < 10; ++i) {
    auto sub = make_subject(tmpl, spec, i);
    CHECK(sub.A_true.det3() > 1e-6);
    for (int r = 0; r < 3; ++r) CHECK(std::abs(sub.A_true.at(r, 3)) <= tmax + 1e-12);

    auto m = sub.M.data();
    double edge = 0.0;
    for (int ix = 0; ix < d; ++ix)
      for (int iy = 0; iy < d; ++iy)
        for (int iz = 0; iz < d; ++iz)
          if (ix == 0 || iy == 0 || iz == 0 || ix == d - 1 || iy == d - 1 || iz == d - 1)
            edge += m[(ix * d + iy) * d + iz];
    CHECK(edge == 0.0);
  }
}

TEST_CASE("realigning a masked subject recovers the template") {
  auto spec = default_spec();
  auto tmpl = make_template(spec);
  for (int i = 0; i < 4; ++i) {
    auto sub = make_subject(tmpl, spec, i);
    auto masked = mul(sub.S, sub.M);
    auto realigned = affine_resample(masked, sub.A_true, {spec.dims, spec.dims, spec.dims});
    double cc = correlation(realigned.data(), tmpl.T.data());
    INFO("subject ", i);
    CHECK(cc >= 0.95);
  }
}

TEST_CASE("ground-truth parcels warp back onto the template atlas") {
  auto spec = default_spec();
  auto tmpl = make_template(spec);
  auto ref = harden_mask(tmpl.P);
  for (int i = 0; i < 4; ++i) {
    auto sub = make_subject(tmpl, spec, i);
    auto warped = warp_mask(sub.true_parc, sub.A_true);
    auto got = harden_mask(warped);
    for (int k = 1; k <= spec.parcels; ++k) {
      std::vector<int> a(got.size()), b(ref.size());
      for (size_t j = 0; j < got.size(); ++j) {
        a[j] = got[j] == k;
        b[j] = ref[j] == k;
      }
      INFO("subject ", i, " parcel ", k - 1);
      CHECK(dice(a, b) >= 0.9);
    }
  }
}

TEST_CASE("class effect lands on parcel 0 and nowhere else") {
  auto spec = default_spec();
  auto ds = make_dataset(spec);
  auto subs = all_subjects(ds);
  int K = spec.parcels;
  std::vector<double> mean_by_class[2];
  mean_by_class[0].assign(K, 0.0);
  mean_by_class[1].assign(K, 0.0);
  int count[2] = {0, 0};
  for (const auto* sub : subs) {
    for (int k = 0; k < K; ++k) mean_by_class[sub->y][k] += parcel_mean(*sub, k);
    ++count[sub->y];
  }
  REQUIRE(count[0] > 0);
  REQUIRE(count[1] > 0);
  for (int k = 0; k < K; ++k) {
    double diff = std::abs(mean_by_class[0][k] / count[0] - mean_by_class[1][k] / count[1]);
    INFO("parcel ", k, " class-mean gap ", diff);
    if (k == 0)
      CHECK(diff >= spec.class_effect / 2.0);
    else
      CHECK(diff <= spec.noise_sigma);
  }
}

TEST_CASE("dataset splits are deterministic and balanced") {
  auto spec = default_spec();
  auto ds1 = make_dataset(spec);
  auto ds2 = make_dataset(spec);
  CHECK(ds1.train.size() == 32);
  CHECK(ds1.val.size() == 4);
  CHECK(ds1.test.size() == 4);

  auto s1 = all_subjects(ds1);
  auto s2 = all_subjects(ds2);
  REQUIRE(s1.size() == s2.size());
  for (size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i]->y == s2[i]->y);
    CHECK(s1[i]->index == s2[i]->index);
    CHECK(std::memcmp(s1[i]->S.data().data(), s2[i]->S.data().data(),
                      sizeof(double) * s1[i]->S.size()) == 0);
    CHECK(std::memcmp(s1[i]->M.data().data(), s2[i]->M.data().data(),
                      sizeof(double) * s1[i]->M.size()) == 0);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) CHECK(s1[i]->A_true.at(r, c) == s2[i]->A_true.at(r, c));
  }

  const std::vector<PhantomSubject>* splits[3] = {&ds1.train, &ds1.val, &ds1.test};
  for (const auto* split : splits) {
    double ones = 0;
    for (const auto& sub : *split) ones += sub.y;
    double frac = ones / split->size();
    CHECK(std::abs(frac - 0.5) <= 0.2);
  }
}

TEST_CASE("dataset rejects tiny cohorts and mismatched templates") {
  auto spec = default_spec();
  spec.subjects = 9;
  CHECK_THROWS_WITH_AS(make_dataset(spec), doctest::Contains("10"), std::runtime_error);

  auto small = default_spec();
  auto tmpl = make_template(small);
  auto big = default_spec();
  big.dims = 32;
  CHECK_THROWS(make_subject(tmpl, big, 0));
}
