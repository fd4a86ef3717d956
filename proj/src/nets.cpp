#include "ng/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>

#include "ng/common.hpp"

namespace ng {

namespace {

constexpr uint64_t kParamStream = 7;

Tensor he_weights(const Shape& shape, int fan_in, Rng& rng) {
  Tensor w = Tensor::zeros(shape);
  double sd = std::sqrt(2.0 / double(fan_in));
  for (double& v : w.raw()) v = rng.normal(0.0, sd);
  return w;
}

Tensor eye(int n) {
  Tensor t = Tensor::zeros({n, n});
  for (int i = 0; i < n; ++i) t.raw()[size_t(i * n + i)] = 1.0;
  return t;
}

void collect_conv(const std::string& prefix, const Conv3dLayer& l, NamedTensors& out) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

void collect_linear(const std::string& prefix, const LinearLayer& l, NamedTensors& out) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

void collect_block(const std::string& prefix, const ConvBlock& b, NamedTensors& out) {
  collect_conv(prefix + ".c1", b.c1, out);
  collect_conv(prefix + ".c2", b.c2, out);
}

}  // namespace

Conv3dLayer Conv3dLayer::create(int in, int out, int k, Rng& rng, bool zero_init) {
  NG_CHECK(in >= 1 && out >= 1 && k >= 1, "bad conv layer size ", in, "x", out, " k=", k);
  Shape ws{out, in, k, k, k};
  Tensor w = zero_init ? Tensor::zeros(ws) : he_weights(ws, in * k * k * k, rng);
  w.set_requires_grad();
  Tensor b = Tensor::zeros({out});
  b.set_requires_grad();
  return {w, b};
}

Tensor Conv3dLayer::apply(const Tensor& x, int stride, int padding) const {
  return conv3d(x, w, b, stride, padding);
}

LinearLayer LinearLayer::create(int in, int out, Rng& rng, bool zero_init) {
  NG_CHECK(in >= 1 && out >= 1, "bad linear layer size ", in, "x", out);
  Tensor w = zero_init ? Tensor::zeros({in, out}) : he_weights({in, out}, in, rng);
  w.set_requires_grad();
  Tensor b = Tensor::zeros({out});
  b.set_requires_grad();
  return {w, b};
}

Tensor LinearLayer::apply(const Tensor& x) const { return add_row_bias(matmul(x, w), b); }

ConvBlock ConvBlock::create(int in, int out, Rng& rng) {
  return {Conv3dLayer::create(in, out, 3, rng), Conv3dLayer::create(out, out, 3, rng)};
}

Tensor ConvBlock::apply(const Tensor& x) const {
  return relu(c2.apply(relu(c1.apply(x, 1, 1)), 1, 1));
}

UNet3d UNet3d::create(const UNet3dConfig& cfg, Rng& rng) {
  NG_CHECK(cfg.depth >= 1, "unet depth must be at least 1, got ", cfg.depth);
  NG_CHECK(cfg.base_channels >= 1, "unet base channels must be positive");
  UNet3d net;
  net.cfg = cfg;
  int ch = cfg.in_channels;
  for (int i = 0; i < cfg.depth; ++i) {
    int out = cfg.base_channels << i;
    net.enc.push_back(ConvBlock::create(ch, out, rng));
    ch = out;
  }
  net.bottleneck = ConvBlock::create(ch, cfg.base_channels << cfg.depth, rng);
  for (int i = 0; i < cfg.depth; ++i) {
    int out = cfg.base_channels << i;
    net.dec.push_back(ConvBlock::create(3 * out, out, rng));
  }
  net.head = Conv3dLayer::create(cfg.base_channels, cfg.out_channels, 1, rng);
  return net;
}

Tensor UNet3d::forward(const Tensor& x) const {
  NG_CHECK(x.rank() == 4, "unet expects [C,W,H,D], got rank ", x.rank());
  NG_CHECK(x.dim(0) == cfg.in_channels, "unet expects ", cfg.in_channels, " channels, got ",
           x.dim(0));
  int divisor = 1 << cfg.depth;
  for (int a = 1; a <= 3; ++a)
    NG_CHECK(x.dim(a) % divisor == 0, "unet input dim ", x.dim(a), " not divisible by ", divisor);
  std::vector<Tensor> skips;
  Tensor h = x;
  for (int i = 0; i < cfg.depth; ++i) {
    h = enc[size_t(i)].apply(h);
    skips.push_back(h);
    h = pool3d(h);
  }
  h = bottleneck.apply(h);
  for (int i = cfg.depth - 1; i >= 0; --i) {
    h = upsample3d(h);
    h = dec[size_t(i)].apply(concat({h, skips[size_t(i)]}, 0));
  }
  return head.apply(h, 1, 0);
}

void UNet3d::collect(const std::string& prefix, NamedTensors& out) const {
  for (size_t i = 0; i < enc.size(); ++i) collect_block(prefix + ".enc" + std::to_string(i), enc[i], out);
  collect_block(prefix + ".bottleneck", bottleneck, out);
  for (size_t i = 0; i < dec.size(); ++i) collect_block(prefix + ".dec" + std::to_string(i), dec[i], out);
  collect_conv(prefix + ".head", head, out);
}

RegEncoder RegEncoder::create(const RegEncoderConfig& cfg, Rng& rng) {
  NG_CHECK(cfg.stages >= 1, "registration needs at least one stage, got ", cfg.stages);
  NG_CHECK(!cfg.ladder.empty(), "registration encoder needs at least one conv");
  RegEncoder net;
  net.cfg = cfg;
  int ch = 2;
  int side = cfg.dims;
  for (int width : cfg.ladder) {
    net.convs.push_back(Conv3dLayer::create(ch, width, 3, rng));
    ch = width;
    side = (side - 1) / 2 + 1;
    NG_CHECK(side >= 1, "registration ladder too deep for dims ", cfg.dims);
  }
  net.head = LinearLayer::create(ch * side * side * side, 12, rng, /*zero_init=*/true);
  return net;
}

Tensor RegEncoder::predict_params(const Tensor& moving, const Tensor& target) const {
  NG_CHECK(moving.rank() == 3 && target.rank() == 3, "registration inputs must be volumes");
  for (int a = 0; a < 3; ++a) {
    NG_CHECK(moving.dim(a) == cfg.dims && target.dim(a) == cfg.dims,
             "registration inputs must be ", cfg.dims, " cubed");
  }
  int d = cfg.dims;
  Tensor h = concat({reshape(moving, {1, d, d, d}), reshape(target, {1, d, d, d})}, 0);
  for (const Conv3dLayer& conv : convs) h = relu(conv.apply(h, 2, 1));
  Tensor flat = reshape(h, {1, int(h.size())});
  return reshape(head.apply(flat), {12});
}

void RegEncoder::collect(const std::string& prefix, NamedTensors& out) const {
  for (size_t i = 0; i < convs.size(); ++i) collect_conv(prefix + ".conv" + std::to_string(i), convs[i], out);
  collect_linear(prefix + ".head", head, out);
}

Tensor extract(const UNet3d& net, const Tensor& s) {
  NG_CHECK(s.rank() == 3, "extract expects a [W,H,D] volume");
  NG_CHECK(net.cfg.in_channels == 1 && net.cfg.out_channels == 1,
           "extraction net must map one channel to one channel");
  Shape dims = s.shape();
  Tensor x = reshape(s, {1, dims[0], dims[1], dims[2]});
  return reshape(sigmoid(net.forward(x)), dims);
}

Tensor overlay(const Tensor& volume, const Tensor& mask) {
  if (volume.shape() == mask.shape()) return mul(volume, mask);
  NG_CHECK(volume.rank() == 3 && mask.rank() == 4 && volume.dim(0) == mask.dim(1) &&
               volume.dim(1) == mask.dim(2) && volume.dim(2) == mask.dim(3),
           "overlay needs equal shapes or a channeled mask over the volume");
  Tensor v = reshape(volume, {1, volume.dim(0), volume.dim(1), volume.dim(2)});
  std::vector<Tensor> copies(size_t(mask.dim(0)), v);
  return mul(concat(copies, 0), mask);
}

RegistrationResult register_volumes(const RegEncoder& net, const Tensor& moving,
                                    const Tensor& target) {
  RegistrationResult res;
  Tensor current = moving;
  Tensor total;
  for (int s = 0; s < net.cfg.stages; ++s) {
    Tensor a = affine_from_params(net.predict_params(current, target));
    AffineTransform snapshot = from_tensor(a);
    NG_CHECK(std::abs(snapshot.det3()) >= 1e-6, "registration stage ", s,
             " produced a near-singular transform");
    res.per_stage.insert(res.per_stage.begin(), snapshot);
    total = s == 0 ? a : matmul(total, a);
    if (s + 1 < net.cfg.stages) current = affine_resample(current, a, current.shape());
  }
  res.A = total;
  res.warped = affine_resample(moving, total, moving.shape());
  return res;
}

Tensor segment(const UNet3d& net, const Tensor& s) {
  NG_CHECK(s.rank() == 3, "segment expects a [W,H,D] volume");
  NG_CHECK(net.cfg.in_channels == 1, "segmentation net must take one channel");
  Tensor x = reshape(s, {1, s.dim(0), s.dim(1), s.dim(2)});
  return softmax(net.forward(x), 0);
}

RoiMlp RoiMlp::create(const RoiMlpConfig& cfg, Rng& rng) {
  NG_CHECK((cfg.voxels >= 1 && cfg.hidden >= 1 && cfg.features >= 1 && cfg.pool >= 1),
           "bad roi mlp config");
  RoiMlp net;
  net.cfg = cfg;
  net.l1 = LinearLayer::create(cfg.voxels, cfg.hidden, rng);
  net.l2 = LinearLayer::create(cfg.hidden, cfg.features, rng);
  // The feature rows get length-normalized downstream, and a relu stack with
  // zero biases is positively homogeneous, so normalization would erase the
  // overall intensity of a region. A shared mean component in the first layer
  // gives every hidden unit the same total-intensity term, and the biases let
  // that term bend the row direction instead of only its length. The output
  // bias also keeps the feature vector of a region warped fully out of view
  // away from the zero row that normalization cannot handle.
  auto envd = [](const char* k, double d) {
    const char* v = std::getenv(k);
    return v ? std::atof(v) : d;
  };
  const double kMassInit = envd("NG_MU", 0.05);
  const double kW1Scale = envd("NG_W1S", 1.0);
  {
    auto w = net.l1.w.raw();
    for (auto& v : w) v *= kW1Scale;
    for (int j = 0; j < cfg.hidden; ++j) {
      double gain = kMassInit * (j % 2 == 0 ? 1.0 : -1.0);
      for (int i = 0; i < cfg.voxels; ++i) w[size_t(i) * cfg.hidden + j] += gain;
    }
  }
  std::fill(net.l1.b.raw().begin(), net.l1.b.raw().end(), envd("NG_B1", 0.1));
  std::fill(net.l2.b.raw().begin(), net.l2.b.raw().end(), envd("NG_B2", 0.1));
  return net;
}

Tensor RoiMlp::forward(const Tensor& f) const {
  NG_CHECK(f.rank() == 4, "roi features expect [K,W,H,D], got rank ", f.rank());
  NG_CHECK(f.dim(0) >= 2, "need at least two regions, got ", f.dim(0));
  // Block maxima feed the linear stack: regional intensity survives while the
  // voxel-level noise a small training set would be memorized from does not.
  Tensor x = cfg.pool > 1 ? pool3d(f, cfg.pool) : f;
  int64_t voxels = int64_t(x.dim(1)) * x.dim(2) * x.dim(3);
  NG_CHECK(voxels == cfg.voxels, "roi mlp sized for ", cfg.voxels, " voxels, got ", voxels);
  // Regional contrasts, not absolute brightness, should drive the features:
  // scaling the whole stack to unit norm removes the subject-level intensity
  // and head-size component that a small cohort cannot average away.
  int rows_n = x.dim(0);
  Tensor stack = l2_normalize(reshape(x, {1, rows_n * int(voxels)}), 1);
  Tensor rows = reshape(stack, {rows_n, int(voxels)});
  return l2.apply(relu(l1.apply(rows)));
}

void RoiMlp::collect(const std::string& prefix, NamedTensors& out) const {
  collect_linear(prefix + ".l1", l1, out);
  collect_linear(prefix + ".l2", l2, out);
}

BrainGraph graph_build(const Tensor& h) {
  NG_CHECK(h.rank() == 2, "graph features must be [K,N], got rank ", h.rank());
  Tensor hn = l2_normalize(h, 1);
  return {hn, matmul(hn, transpose(hn))};
}

Tensor normalized_adjacency(const Tensor& c) {
  NG_CHECK(c.rank() == 2 && c.dim(0) == c.dim(1), "adjacency must be square");
  Tensor a = add(c, eye(c.dim(0)));
  Tensor dinv = pow_t(reduce(Reduce::sum, abs_t(a), 1), -0.5);
  return matmul(matmul(diag(dinv), a), diag(dinv));
}

GraphClassifier GraphClassifier::create(const GcnConfig& cfg, Rng& rng) {
  NG_CHECK(cfg.classes >= 2, "classifier needs at least two classes");
  GraphClassifier net;
  net.cfg = cfg;
  int width = cfg.node_features;
  for (int next : cfg.widths) {
    net.layers.push_back(LinearLayer::create(width, next, rng));
    width = next;
  }
  net.head = LinearLayer::create(width, cfg.classes, rng);
  return net;
}

Tensor GraphClassifier::forward(const BrainGraph& g) const {
  NG_CHECK(g.H.rank() == 2 && g.H.dim(1) == cfg.node_features, "graph features must be [K,",
           cfg.node_features, "]");
  NG_CHECK(g.C.rank() == 2 && g.C.dim(0) == g.H.dim(0) && g.C.dim(1) == g.H.dim(0),
           "connectivity must be [K,K]");
  Tensor chat = normalized_adjacency(g.C);
  Tensor h = g.H;
  for (const LinearLayer& layer : layers)
    h = relu(add_row_bias(matmul(chat, matmul(h, layer.w)), layer.b));
  Tensor pooled = reshape(reduce(Reduce::mean, h, 0), {1, h.dim(1)});
  return reshape(head.apply(pooled), {cfg.classes});
}

void GraphClassifier::collect(const std::string& prefix, NamedTensors& out) const {
  for (size_t i = 0; i < layers.size(); ++i)
    collect_linear(prefix + ".layer" + std::to_string(i), layers[i], out);
  collect_linear(prefix + ".head", head, out);
}

ModelParams ModelParams::create(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed ^ kParamStream));
  ModelParams p;
  p.cfg = cfg;
  p.ext = UNet3d::create({1, cfg.unet_base, cfg.unet_depth, 1}, rng);
  p.reg = RegEncoder::create({cfg.reg_ladder, cfg.stages, cfg.dims}, rng);
  p.seg = UNet3d::create({1, cfg.unet_base, cfg.unet_depth, cfg.tissue_classes}, rng);
  const int kRoiPool = std::getenv("NG_POOL") ? std::atoi(std::getenv("NG_POOL")) : 4;
  NG_CHECK(cfg.dims % kRoiPool == 0, "dims ", cfg.dims, " must divide by the region pool ",
           kRoiPool);
  int side = cfg.dims / kRoiPool;
  p.roi = RoiMlp::create({side * side * side, cfg.roi_hidden, cfg.roi_features, kRoiPool}, rng);
  p.gcn = GraphClassifier::create({cfg.gcn_widths, cfg.classes, cfg.roi_features}, rng);
  return p;
}

NamedTensors ModelParams::named_parameters() const {
  NamedTensors out;
  ext.collect("ext", out);
  reg.collect("reg", out);
  seg.collect("seg", out);
  roi.collect("roi", out);
  gcn.collect("gcn", out);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t i = 1; i < out.size(); ++i)
    NG_CHECK(out[i].first != out[i - 1].first, "duplicate parameter name ", out[i].first);
  return out;
}

}  // namespace ng
