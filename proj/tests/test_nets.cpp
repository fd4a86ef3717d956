#include "ng/nets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <doctest.h>

#include "ng/geometry.hpp"
#include "ng/losses.hpp"
#include "ng/rng.hpp"
#include "test_util.hpp"

using namespace ng;
using ngtest::check_grads;
using ngtest::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dims = 8;
  cfg.tissue_classes = 3;
  cfg.parcels = 4;
  cfg.unet_base = 2;
  cfg.unet_depth = 2;
  cfg.reg_ladder = {2, 4};
  cfg.stages = 2;
  cfg.roi_hidden = 4;
  cfg.roi_features = 4;
  cfg.gcn_widths = {4};
  cfg.classes = 2;
  return cfg;
}

void zero_params(Conv3dLayer& l) {
  std::fill(l.w.raw().begin(), l.w.raw().end(), 0.0);
  std::fill(l.b.raw().begin(), l.b.raw().end(), 0.0);
}

void perturb(Tensor& t, Rng& rng, double sd) {
  for (double& v : t.raw()) v += rng.normal(0.0, sd);
}

std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& entry : named) out.push_back(entry.second);
  return out;
}

}  // namespace

TEST_CASE("zeroed heads give the neutral outputs") {
  ModelParams p = ModelParams::create(tiny_config(), 5);
  Rng rng(101);
  Tensor s = random_tensor({8, 8, 8}, rng, 0.0, 1.0);

  zero_params(p.ext.head);
  Tensor mhat = extract(p.ext, s);
  CHECK(mhat.shape() == s.shape());
  for (int64_t i = 0; i < mhat.size(); ++i) CHECK(std::fabs(mhat[i] - 0.5) <= 1e-12);

  zero_params(p.seg.head);
  Tensor r = segment(p.seg, s);
  CHECK(r.shape() == Shape{3, 8, 8, 8});
  for (int64_t i = 0; i < r.size(); ++i) CHECK(std::fabs(r[i] - 1.0 / 3.0) <= 1e-12);
}

TEST_CASE("segmentation channels sum to one") {
  ModelParams p = ModelParams::create(tiny_config(), 6);
  Rng rng(102);
  Tensor s = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  Tensor r = segment(p.seg, s);
  int64_t voxels = 8 * 8 * 8;
  for (int64_t v = 0; v < voxels; ++v) {
    double total = 0.0;
    for (int c = 0; c < 3; ++c) total += r[c * voxels + v];
    CHECK(std::fabs(total - 1.0) <= 1e-12);
  }
  Tensor mhat = extract(p.ext, s);
  for (int64_t i = 0; i < mhat.size(); ++i) {
    CHECK(mhat[i] > 0.0);
    CHECK(mhat[i] < 1.0);
  }
}

TEST_CASE("unet rejects dims that do not divide by the pool factor") {
  ModelParams p = ModelParams::create(tiny_config(), 7);
  Rng rng(103);
  Tensor bad = random_tensor({6, 6, 6}, rng);
  CHECK_THROWS_WITH_AS(extract(p.ext, bad), doctest::Contains("divisible"), std::runtime_error);
  CHECK_THROWS(segment(p.seg, bad));
}

TEST_CASE("overlay matches the elementwise oracle") {
  Rng rng(104);
  Tensor s = random_tensor({4, 5, 3}, rng, 0.0, 1.0);
  Tensor m = random_tensor({4, 5, 3}, rng, 0.0, 1.0);

  Tensor prod = overlay(s, m);
  for (int64_t i = 0; i < s.size(); ++i) CHECK(prod[i] == s[i] * m[i]);

  Tensor ones = Tensor::full({4, 5, 3}, 1.0);
  Tensor same = overlay(s, ones);
  for (int64_t i = 0; i < s.size(); ++i) CHECK(same[i] == s[i]);
  Tensor zeros = Tensor::zeros({4, 5, 3});
  Tensor none = overlay(s, zeros);
  for (int64_t i = 0; i < s.size(); ++i) CHECK(none[i] == 0.0);

  Tensor parcels = random_tensor({3, 4, 5, 3}, rng, 0.0, 1.0);
  Tensor f = overlay(s, parcels);
  CHECK(f.shape() == Shape{3, 4, 5, 3});
  for (int k = 0; k < 3; ++k)
    for (int64_t v = 0; v < s.size(); ++v)
      CHECK(f[k * s.size() + v] == s[v] * parcels[k * s.size() + v]);

  CHECK_THROWS(overlay(s, random_tensor({3, 3, 3}, rng)));
  CHECK_THROWS(overlay(s, random_tensor({3, 4, 5, 4}, rng)));
}

TEST_CASE("zero-initialized registration is the identity") {
  ModelParams p = ModelParams::create(tiny_config(), 8);
  Rng rng(105);
  Tensor moving = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  Tensor target = random_tensor({8, 8, 8}, rng, 0.0, 1.0);

  RegistrationResult res = register_volumes(p.reg, moving, target);
  AffineTransform ident = AffineTransform::identity();
  for (int i = 0; i < 16; ++i) CHECK(res.A[i] == ident.m()[size_t(i)]);
  CHECK(res.per_stage.size() == 2);
  for (const auto& a : res.per_stage)
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) CHECK(a.at(r, c) == ident.at(r, c));
  for (int64_t i = 0; i < moving.size(); ++i) CHECK(std::fabs(res.warped[i] - moving[i]) <= 1e-12);
}

TEST_CASE("per-stage transforms compose to the total") {
  ModelParams p = ModelParams::create(tiny_config(), 9);
  Rng rng(106);
  perturb(p.reg.head.w, rng, 1e-4);
  perturb(p.reg.head.b, rng, 0.02);

  Tensor moving = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  Tensor target = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  RegistrationResult res = register_volumes(p.reg, moving, target);

  CHECK(res.per_stage.size() == 2);
  double stage_gap = 0.0;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      stage_gap = std::max(stage_gap,
                           std::fabs(res.per_stage[0].at(r, c) - res.per_stage[1].at(r, c)));
  CHECK(stage_gap > 0.0);

  std::vector<AffineTransform> stages(res.per_stage.rbegin(), res.per_stage.rend());
  AffineTransform total = stages[0];
  for (size_t i = 1; i < stages.size(); ++i) total = compose(total, stages[i]);
  for (int i = 0; i < 16; ++i) CHECK(std::fabs(res.A[i] - total.m()[size_t(i)]) <= 1e-10);
}

TEST_CASE("registration rejects a collapsed stage transform") {
  ModelParams p = ModelParams::create(tiny_config(), 10);
  p.reg.head.b.raw()[0] = -1.0;
  Rng rng(107);
  Tensor moving = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  Tensor target = random_tensor({8, 8, 8}, rng, 0.0, 1.0);
  CHECK_THROWS_WITH_AS(register_volumes(p.reg, moving, target),
                       doctest::Contains("singular"), std::runtime_error);

  Tensor small = random_tensor({4, 4, 4}, rng);
  CHECK_THROWS(register_volumes(p.reg, small, small));
}

TEST_CASE("roi features share weights across regions") {
  Rng rng(108);
  RoiMlp mlp = RoiMlp::create({27, 5, 4}, rng);
  Tensor f = random_tensor({3, 3, 3, 3}, rng);
  Tensor h = mlp.forward(f);
  CHECK(h.shape() == Shape{3, 4});

  std::vector<double> swapped(f.data().begin(), f.data().end());
  for (int64_t v = 0; v < 27; ++v) std::swap(swapped[size_t(v)], swapped[size_t(2 * 27 + v)]);
  Tensor h2 = mlp.forward(Tensor::from_data({3, 3, 3, 3}, std::move(swapped)));
  for (int n = 0; n < 4; ++n) {
    CHECK(h2[0 * 4 + n] == h[2 * 4 + n]);
    CHECK(h2[1 * 4 + n] == h[1 * 4 + n]);
    CHECK(h2[2 * 4 + n] == h[0 * 4 + n]);
  }
}

TEST_CASE("empty regions map to the bias-determined row") {
  Rng rng(109);
  RoiMlp mlp = RoiMlp::create({8, 3, 2}, rng);
  perturb(mlp.l1.b, rng, 0.5);
  perturb(mlp.l2.b, rng, 0.5);
  std::vector<double> data(size_t(3 * 8), 0.0);
  Rng fill(110);
  for (int64_t v = 0; v < 8; ++v) data[size_t(2 * 8 + v)] = fill.uniform(-1.0, 1.0);
  Tensor h = mlp.forward(Tensor::from_data({3, 2, 2, 2}, std::move(data)));

  std::vector<double> expected(2, 0.0);
  for (int n = 0; n < 2; ++n) {
    double acc = mlp.l2.b[n];
    for (int j = 0; j < 3; ++j) acc += std::max(0.0, mlp.l1.b[j]) * mlp.l2.w[j * 2 + n];
    expected[size_t(n)] = acc;
  }
  for (int n = 0; n < 2; ++n) {
    CHECK(std::fabs(h[0 * 2 + n] - expected[size_t(n)]) <= 1e-12);
    CHECK(h[0 * 2 + n] == h[1 * 2 + n]);
  }
}

TEST_CASE("graph build matches the cosine oracle") {
  Rng rng(111);
  Tensor h = random_tensor({5, 4}, rng);
  BrainGraph g = graph_build(h);
  CHECK(g.C.shape() == Shape{5, 5});

  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (int n = 0; n < 4; ++n) {
        dot += h[i * 4 + n] * h[j * 4 + n];
        ni += h[i * 4 + n] * h[i * 4 + n];
        nj += h[j * 4 + n] * h[j * 4 + n];
      }
      double want = dot / std::sqrt(ni * nj);
      CHECK(std::fabs(g.C[i * 5 + j] - want) <= 1e-12);
      CHECK(g.C[i * 5 + j] == g.C[j * 5 + i]);
      CHECK(g.C[i * 5 + j] >= -1.0 - 1e-12);
      CHECK(g.C[i * 5 + j] <= 1.0 + 1e-12);
    }
    CHECK(std::fabs(g.C[i * 5 + i] - 1.0) <= 1e-12);
  }
}

TEST_CASE("graph build handles special rows") {
  Tensor ortho = Tensor::from_data({3, 3}, {2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 7.0});
  BrainGraph g = graph_build(ortho);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(std::fabs(g.C[i * 3 + j] - (i == j ? 1.0 : 0.0)) <= 1e-12);

  Tensor twin = Tensor::from_data({2, 3}, {0.3, -0.4, 0.5, 0.3, -0.4, 0.5});
  BrainGraph t = graph_build(twin);
  CHECK(std::fabs(t.C[1] - 1.0) <= 1e-12);

  Tensor hollow = Tensor::from_data({2, 2}, {1.0, 1.0, 0.0, 0.0});
  BrainGraph z = graph_build(hollow);
  for (int64_t i = 0; i < z.C.size(); ++i) CHECK(std::isfinite(z.C[i]));
}

TEST_CASE("gcn layer matches a hand computation") {
  Rng rng(112);
  GraphClassifier net = GraphClassifier::create({{2}, 2, 2}, rng);
  std::fill(net.layers[0].w.raw().begin(), net.layers[0].w.raw().end(), 0.0);
  net.layers[0].w.raw()[0] = 1.0;
  net.layers[0].w.raw()[3] = 1.0;

  // With C = I the normalized adjacency is exactly I: degrees are all 2 and
  // (1/sqrt(2)) * 2 * (1/sqrt(2)) = 1. So one layer with W = I keeps H.
  Tensor h = Tensor::from_data({3, 2}, {1.0, 2.0, 3.0, 4.0, 0.5, 0.25});
  Tensor c = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor logits = net.forward({h, c});
  CHECK(logits.shape() == Shape{2});
  for (int cls = 0; cls < 2; ++cls) {
    double want = net.head.b[cls];
    for (int n = 0; n < 2; ++n) {
      double pooled = (h[0 * 2 + n] + h[1 * 2 + n] + h[2 * 2 + n]) / 3.0;
      want += pooled * net.head.w[n * 2 + cls];
    }
    CHECK(std::fabs(logits[cls] - want) <= 1e-12);
  }
}

TEST_CASE("gcn propagation matches a dense loop oracle") {
  Rng rng(113);
  GraphClassifier net = GraphClassifier::create({{3}, 2, 4}, rng);
  Tensor h = random_tensor({3, 4}, rng);
  BrainGraph g = graph_build(h);
  Tensor logits = net.forward(g);

  int k = 3;
  std::vector<double> deg(size_t(k), 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) deg[size_t(i)] += std::fabs(g.C[i * k + j] + (i == j ? 1.0 : 0.0));
  std::vector<double> h1(size_t(k * 3), 0.0);
  for (int i = 0; i < k; ++i) {
    for (int m = 0; m < 3; ++m) {
      double acc = net.layers[0].b[m];
      for (int j = 0; j < k; ++j) {
        double chat = (g.C[i * k + j] + (i == j ? 1.0 : 0.0)) /
                      std::sqrt(deg[size_t(i)] * deg[size_t(j)]);
        double proj = 0.0;
        for (int n = 0; n < 4; ++n) proj += g.H[j * 4 + n] * net.layers[0].w[n * 3 + m];
        acc += chat * proj;
      }
      h1[size_t(i * 3 + m)] = std::max(0.0, acc);
    }
  }
  for (int cls = 0; cls < 2; ++cls) {
    double want = net.head.b[cls];
    for (int m = 0; m < 3; ++m) {
      double pooled = (h1[size_t(m)] + h1[size_t(3 + m)] + h1[size_t(6 + m)]) / 3.0;
      want += pooled * net.head.w[m * 2 + cls];
    }
    CHECK(std::fabs(logits[cls] - want) <= 1e-12);
  }
}

TEST_CASE("classifier is invariant under joint node permutation") {
  Rng rng(114);
  GraphClassifier net = GraphClassifier::create({{4}, 3, 4}, rng);
  Tensor h = random_tensor({6, 4}, rng);
  BrainGraph g = graph_build(h);
  Tensor base = net.forward(g);

  std::vector<int> perm = {2, 0, 3, 1, 5, 4};
  std::vector<double> hp(size_t(6 * 4)), cp(size_t(6 * 6));
  for (int i = 0; i < 6; ++i) {
    for (int n = 0; n < 4; ++n) hp[size_t(i * 4 + n)] = g.H[perm[size_t(i)] * 4 + n];
    for (int j = 0; j < 6; ++j)
      cp[size_t(i * 6 + j)] = g.C[perm[size_t(i)] * 6 + perm[size_t(j)]];
  }
  Tensor permuted = net.forward(
      {Tensor::from_data({6, 4}, std::move(hp)), Tensor::from_data({6, 6}, std::move(cp))});
  CHECK(permuted.shape() == Shape{3});
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(permuted[i] - base[i]) <= 1e-10);
}

TEST_CASE("config errors are rejected") {
  Rng rng(115);
  CHECK_THROWS(UNet3d::create({1, 2, 0, 1}, rng));
  CHECK_THROWS(RegEncoder::create({{}, 2, 8}, rng));
  CHECK_THROWS(RegEncoder::create({{2, 4}, 0, 8}, rng));
  CHECK_THROWS(GraphClassifier::create({{4}, 1, 4}, rng));
  RoiMlp mlp = RoiMlp::create({27, 4, 3}, rng);
  CHECK_THROWS(mlp.forward(random_tensor({3, 2, 2, 2}, rng)));
  GraphClassifier net = GraphClassifier::create({{4}, 2, 4}, rng);
  Tensor h = random_tensor({3, 5}, rng);
  CHECK_THROWS(net.forward({h, random_tensor({3, 3}, rng)}));
}

TEST_CASE("model parameters are named, sorted, and reproducible") {
  ModelConfig cfg = tiny_config();
  ModelParams a = ModelParams::create(cfg, 3);
  ModelParams b = ModelParams::create(cfg, 3);
  ModelParams c = ModelParams::create(cfg, 4);

  NamedTensors na = a.named_parameters();
  NamedTensors nb = b.named_parameters();
  NamedTensors nc = c.named_parameters();
  CHECK(na.size() == nb.size());
  CHECK(na.size() == nc.size());
  bool differs = false;
  for (size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].first == nb[i].first);
    if (i > 0) CHECK(na[i - 1].first < na[i].first);
    CHECK(na[i].second.shape() == nb[i].second.shape());
    for (int64_t j = 0; j < na[i].second.size(); ++j) {
      CHECK(na[i].second[j] == nb[i].second[j]);
      if (na[i].second[j] != nc[i].second[j]) differs = true;
    }
  }
  CHECK(differs);
}

TEST_CASE("small unet gradients match finite differences") {
  Rng rng(116);
  UNet3d net = UNet3d::create({1, 2, 1, 1}, rng);
  Tensor s = random_tensor({4, 4, 4}, rng, 0.0, 1.0);
  NamedTensors named;
  net.collect("ext", named);
  std::vector<Tensor> leaves = tensors_of(named);
  leaves.push_back(s);
  check_grads(
      [&]() {
        Tensor m = extract(net, s);
        return sum(mul(m, m));
      },
      leaves, 1e-4);
}

TEST_CASE("registration gradients match finite differences") {
  Rng rng(117);
  RegEncoder net = RegEncoder::create({{2}, 2, 4}, rng);
  perturb(net.head.w, rng, 0.01);
  perturb(net.head.b, rng, 0.01);
  Tensor moving = random_tensor({4, 4, 4}, rng, 0.0, 1.0);
  Tensor target = random_tensor({4, 4, 4}, rng, 0.0, 1.0);
  NamedTensors named;
  net.collect("reg", named);
  std::vector<Tensor> leaves = tensors_of(named);
  leaves.push_back(moving);
  check_grads(
      [&]() {
        RegistrationResult res = register_volumes(net, moving, target);
        return add(sum(mul(res.warped, res.warped)), sum(mul(res.A, res.A)));
      },
      leaves, 1e-3);
}

TEST_CASE("roi graph classifier gradients match finite differences") {
  Rng rng(118);
  RoiMlp mlp = RoiMlp::create({8, 3, 3}, rng);
  GraphClassifier net = GraphClassifier::create({{3}, 2, 3}, rng);
  Tensor f = random_tensor({3, 2, 2, 2}, rng, 0.0, 1.0);
  NamedTensors named;
  mlp.collect("roi", named);
  net.collect("gcn", named);
  std::vector<Tensor> leaves = tensors_of(named);
  leaves.push_back(f);
  check_grads(
      [&]() {
        Tensor logits = net.forward(graph_build(mlp.forward(f)));
        return sum(mul(logits, logits));
      },
      leaves, 1e-3);
}

TEST_CASE("every parameter receives a finite gradient from the joint loss") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::create(cfg, 11);
  Rng rng(119);
  perturb(p.reg.head.w, rng, 1e-4);
  perturb(p.reg.head.b, rng, 0.01);

  int d = cfg.dims;
  Tensor s = random_tensor({d, d, d}, rng, 0.0, 1.0);
  Tensor tmpl = random_tensor({d, d, d}, rng, 0.0, 1.0);
  Tensor atlas_seg = softmax(random_tensor({cfg.tissue_classes, d, d, d}, rng), 0);
  Tensor atlas_parc = random_tensor({cfg.parcels, d, d, d}, rng, 0.0, 1.0);
  std::vector<double> ext_target(size_t(d * d * d), 0.0);
  for (size_t i = 0; i < ext_target.size(); i += 3) ext_target[i] = 1.0;

  Tensor mhat = extract(p.ext, s);
  Tensor e = overlay(s, mhat);
  RegistrationResult res = register_volumes(p.reg, e, tmpl);
  Tensor back = affine_inverse(res.A);
  Tensor v = warp_mask(atlas_seg, back);
  Tensor u = warp_mask(atlas_parc, back);
  Tensor f = overlay(s, u);
  Tensor logits = p.gcn.forward(graph_build(p.roi.forward(f)));

  JointLossInputs in;
  in.cls_probs = softmax(logits, 0);
  in.ext_mask = mhat;
  in.warped = res.warped;
  in.seg_probs = segment(p.seg, s);
  in.seg_target = v;
  JointLossTargets tgt;
  tgt.cls_onehot = Tensor::from_data({2}, {1.0, 0.0});
  tgt.ext_target = Tensor::from_data({d, d, d}, std::move(ext_target));
  tgt.template_img = tmpl;

  auto [loss, report] = joint_loss(in, tgt, {1.0, 1.0, 1.0});
  CHECK(std::isfinite(report.total));
  backward(loss);

  std::map<std::string, double> subnet_peak;
  for (const auto& [name, t] : p.named_parameters()) {
    INFO("parameter ", name);
    REQUIRE(!t.grad().empty());
    double peak = 0.0;
    for (double g : t.grad()) {
      CHECK(std::isfinite(g));
      peak = std::max(peak, std::fabs(g));
    }
    subnet_peak[name.substr(0, name.find('.'))] =
        std::max(subnet_peak[name.substr(0, name.find('.'))], peak);
  }
  for (const char* prefix : {"ext", "reg", "seg", "roi", "gcn"}) {
    INFO("subnet ", prefix);
    CHECK(subnet_peak[prefix] > 0.0);
  }
}
