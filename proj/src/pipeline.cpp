#include "ng/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "ng/metrics.hpp"

namespace ng {

const std::vector<std::string> kTrainLogHeader = {
    "epoch", "loss_total", "loss_cls", "loss_ext", "loss_sim", "loss_seg", "val_acc", "val_auc"};

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

int64_t parse_int(const std::string& key, const std::string& s) {
  errno = 0;
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  NG_CHECK((end != s.c_str() && *end == '\0' && errno == 0), "config value for ", key,
           " is not an integer: ", s);
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  errno = 0;
  char* end = nullptr;
  unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  NG_CHECK((end != s.c_str() && *end == '\0' && errno == 0 && s[0] != '-'),
           "config value for ", key, " is not an unsigned integer: ", s);
  return v;
}

double parse_double(const std::string& key, const std::string& s) {
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  NG_CHECK((end != s.c_str() && *end == '\0' && errno == 0), "config value for ", key,
           " is not a number: ", s);
  return v;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& s) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(int(parse_int(key, s.substr(pos, comma - pos))));
    pos = comma + 1;
  }
  return out;
}

void check_finite(const Tensor& t, const char* stage) {
  NG_CHECK(all_finite(t), "non-finite values after ", stage);
}

// Structural guarantees of the similarity graph, checked on every forward.
void check_graph(const Tensor& c) {
  const int k = c.dim(0);
  auto v = c.data();
  for (int i = 0; i < k; ++i) {
    NG_CHECK(std::abs(v[size_t(i * k + i)] - 1.0) <= 1e-12,
             "graph diagonal drifted from 1 at node ", i);
    for (int j = 0; j < k; ++j) {
      double e = v[size_t(i * k + j)];
      NG_CHECK(std::abs(e) <= 1.0 + 1e-12, "graph entry ", i, ",", j, " outside [-1,1]: ", e);
      NG_CHECK(std::abs(e - v[size_t(j * k + i)]) <= 1e-12, "graph asymmetry at ", i, ",", j);
    }
  }
}

Tensor class_onehot(int y, int classes) {
  NG_CHECK(y >= 0 && y < classes, "label ", y, " outside ", classes, " classes");
  std::vector<double> v(static_cast<size_t>(classes), 0.0);
  v[size_t(y)] = 1.0;
  return Tensor::from_data({classes}, std::move(v));
}

ForwardOverrides make_overrides(const OracleInjection& inject, const PhantomSubject& subj) {
  ForwardOverrides ov;
  if (inject.true_mask) ov.mask = &subj.M;
  if (inject.true_transform) ov.transform = &subj.A_true;
  return ov;
}

// Marks matching parameters untrainable and returns the rest.
NamedTensors apply_freeze(ModelParams& params, const std::vector<std::string>& freeze) {
  std::vector<std::string> prefixes;
  for (const std::string& f : freeze) prefixes.push_back(f.back() == '.' ? f : f + ".");
  std::vector<bool> used(prefixes.size(), false);
  NamedTensors trainable;
  for (auto& [name, t] : params.named_parameters()) {
    bool frozen = false;
    for (size_t i = 0; i < prefixes.size(); ++i)
      if (name.rfind(prefixes[i], 0) == 0) {
        frozen = true;
        used[i] = true;
      }
    t.set_requires_grad(!frozen);
    if (!frozen) trainable.emplace_back(name, t);
  }
  for (size_t i = 0; i < prefixes.size(); ++i)
    NG_CHECK(used[i], "freeze prefix ", freeze[i], " matches no parameters");
  NG_CHECK(!trainable.empty(), "every parameter is frozen");
  return trainable;
}

void unfreeze_all(ModelParams& params) {
  for (auto& [name, t] : params.named_parameters()) t.set_requires_grad(true);
}

struct ClsMetrics {
  double acc = 0.0, auc = 0.0;
};

ClsMetrics classification_metrics(const ModelParams& params,
                                  const std::vector<PhantomSubject>& split,
                                  const PhantomTemplate& tmpl, const OracleInjection& inject) {
  NoGradGuard guard;
  std::vector<double> scores;
  std::vector<int> preds, labels;
  for (const PhantomSubject& subj : split) {
    ForwardOverrides ov = make_overrides(inject, subj);
    ForwardOutputs out = forward(params, subj.S, tmpl, &ov);
    Tensor probs = softmax(out.logits, 0);
    scores.push_back(probs[1]);
    preds.push_back(probs[1] > probs[0] ? 1 : 0);
    labels.push_back(subj.y);
  }
  return {accuracy(preds, labels), auc_roc(scores, labels)};
}

struct EpochOutcome {
  LossReport mean;
  bool ok = true;
};

// One pass of batched updates in dataset order. Loss averaging happens by
// scaling each subject's contribution before backward. A non-finite loss or
// an error raised mid-step reports failure so the caller can roll back.
template <class LossFn>
EpochOutcome run_epoch(const std::vector<PhantomSubject>& subjects, int batch, Optimizer& opt,
                       LossFn&& loss_fn) {
  LossReport sum;
  int counted = 0;
  for (size_t start = 0; start < subjects.size(); start += size_t(batch)) {
    size_t stop = std::min(subjects.size(), start + size_t(batch));
    opt.zero_grad();
    for (size_t i = start; i < stop; ++i) {
      try {
        auto [loss, report] = loss_fn(i, subjects[i]);
        if (!std::isfinite(report.total)) return {LossReport{}, false};
        backward(mul_scalar(loss, 1.0 / double(stop - start)));
        sum.total += report.total;
        sum.cls += report.cls;
        sum.ext += report.ext;
        sum.sim += report.sim;
        sum.seg += report.seg;
        ++counted;
      } catch (const std::runtime_error&) {
        return {LossReport{}, false};
      }
    }
    opt.step();
  }
  LossReport mean;
  mean.total = sum.total / counted;
  mean.cls = sum.cls / counted;
  mean.ext = sum.ext / counted;
  mean.sim = sum.sim / counted;
  mean.seg = sum.seg / counted;
  return {mean, true};
}

std::vector<double> log_row(int epoch, const LossReport& r, const ClsMetrics& v) {
  return {double(epoch), r.total, r.cls, r.ext, r.sim, r.seg, v.acc, v.auc};
}

}  // namespace

void TrainConfig::validate() const {
  NG_CHECK(epochs >= 1, "epochs must be at least 1, got ", epochs);
  NG_CHECK(batch >= 1, "batch size must be at least 1, got ", batch);
  NG_CHECK((std::isfinite(lr) && lr > 0.0), "learning rate must be positive, got ", lr);
  NG_CHECK((adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0),
           "adam betas must sit in [0,1)");
  NG_CHECK((momentum >= 0.0 && momentum < 1.0), "momentum must sit in [0,1)");
  NG_CHECK((std::isfinite(weight_decay) && weight_decay >= 0.0),
           "weight decay must be finite and non-negative, got ", weight_decay);
  NG_CHECK((std::isfinite(weights.alpha) && std::isfinite(weights.beta) &&
            std::isfinite(weights.gamma) && weights.alpha >= 0.0 && weights.beta >= 0.0 &&
            weights.gamma >= 0.0),
           "loss weights must be finite and non-negative");
  NG_CHECK(model.classes == 2, "the classifier is binary, got ", model.classes, " classes");
  NG_CHECK(model.dims >= 4, "dims must be at least 4, got ", model.dims);
  NG_CHECK(model.dims % 4 == 0, "dims ", model.dims, " must divide by 4 for the region pooling");
  int stride = 1 << model.unet_depth;
  NG_CHECK((model.unet_depth >= 1 && model.dims % stride == 0), "dims ", model.dims,
           " must divide by 2^depth = ", stride);
}

std::vector<std::pair<std::string, std::string>> train_config_kv(const TrainConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("mode", c.mode == TrainMode::joint ? "joint" : "staged");
  kv.emplace_back("optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd");
  kv.emplace_back("epochs", std::to_string(c.epochs));
  kv.emplace_back("batch", std::to_string(c.batch));
  kv.emplace_back("lr", fmt17(c.lr));
  kv.emplace_back("adam_beta1", fmt17(c.adam_beta1));
  kv.emplace_back("adam_beta2", fmt17(c.adam_beta2));
  kv.emplace_back("momentum", fmt17(c.momentum));
  kv.emplace_back("weight_decay", fmt17(c.weight_decay));
  kv.emplace_back("alpha", fmt17(c.weights.alpha));
  kv.emplace_back("beta", fmt17(c.weights.beta));
  kv.emplace_back("gamma", fmt17(c.weights.gamma));
  kv.emplace_back("similarity", c.similarity == Similarity::ncc ? "ncc" : "mse");
  kv.emplace_back("seed", std::to_string(c.seed));
  kv.emplace_back("dims", std::to_string(c.model.dims));
  kv.emplace_back("tissue_classes", std::to_string(c.model.tissue_classes));
  kv.emplace_back("parcels", std::to_string(c.model.parcels));
  kv.emplace_back("unet_base", std::to_string(c.model.unet_base));
  kv.emplace_back("unet_depth", std::to_string(c.model.unet_depth));
  kv.emplace_back("reg_ladder", join_ints(c.model.reg_ladder));
  kv.emplace_back("stages", std::to_string(c.model.stages));
  kv.emplace_back("roi_hidden", std::to_string(c.model.roi_hidden));
  kv.emplace_back("roi_features", std::to_string(c.model.roi_features));
  kv.emplace_back("gcn_widths", join_ints(c.model.gcn_widths));
  kv.emplace_back("classes", std::to_string(c.model.classes));
  return kv;
}

TrainConfig train_config_from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  TrainConfig c;
  std::vector<std::string> seen;
  for (const auto& [key, value] : kv) {
    NG_CHECK(std::find(seen.begin(), seen.end(), key) == seen.end(), "duplicate config key ",
             key);
    seen.push_back(key);
    if (key == "mode") {
      NG_CHECK((value == "joint" || value == "staged"), "mode must be joint or staged, got ",
               value);
      c.mode = value == "joint" ? TrainMode::joint : TrainMode::staged;
    } else if (key == "optimizer") {
      NG_CHECK((value == "adam" || value == "sgd"), "optimizer must be adam or sgd, got ", value);
      c.optimizer = value == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
    } else if (key == "epochs") {
      c.epochs = int(parse_int(key, value));
    } else if (key == "batch") {
      c.batch = int(parse_int(key, value));
    } else if (key == "lr") {
      c.lr = parse_double(key, value);
    } else if (key == "adam_beta1") {
      c.adam_beta1 = parse_double(key, value);
    } else if (key == "adam_beta2") {
      c.adam_beta2 = parse_double(key, value);
    } else if (key == "momentum") {
      c.momentum = parse_double(key, value);
    } else if (key == "weight_decay") {
      c.weight_decay = parse_double(key, value);
    } else if (key == "alpha") {
      c.weights.alpha = parse_double(key, value);
    } else if (key == "beta") {
      c.weights.beta = parse_double(key, value);
    } else if (key == "gamma") {
      c.weights.gamma = parse_double(key, value);
    } else if (key == "similarity") {
      NG_CHECK((value == "ncc" || value == "mse"), "similarity must be ncc or mse, got ", value);
      c.similarity = value == "ncc" ? Similarity::ncc : Similarity::mse;
    } else if (key == "seed") {
      c.seed = parse_u64(key, value);
    } else if (key == "dims") {
      c.model.dims = int(parse_int(key, value));
    } else if (key == "tissue_classes") {
      c.model.tissue_classes = int(parse_int(key, value));
    } else if (key == "parcels") {
      c.model.parcels = int(parse_int(key, value));
    } else if (key == "unet_base") {
      c.model.unet_base = int(parse_int(key, value));
    } else if (key == "unet_depth") {
      c.model.unet_depth = int(parse_int(key, value));
    } else if (key == "reg_ladder") {
      c.model.reg_ladder = parse_int_list(key, value);
    } else if (key == "stages") {
      c.model.stages = int(parse_int(key, value));
    } else if (key == "roi_hidden") {
      c.model.roi_hidden = int(parse_int(key, value));
    } else if (key == "roi_features") {
      c.model.roi_features = int(parse_int(key, value));
    } else if (key == "gcn_widths") {
      c.model.gcn_widths = parse_int_list(key, value);
    } else if (key == "classes") {
      c.model.classes = int(parse_int(key, value));
    } else {
      fail("unknown config key ", key);
    }
  }
  c.validate();
  return c;
}

ForwardOutputs forward(const ModelParams& params, const Tensor& s, const PhantomTemplate& tmpl,
                       const ForwardOverrides* overrides) {
  NG_CHECK(s.rank() == 3, "forward expects a [W,H,D] subject volume, got rank ", s.rank());
  NG_CHECK(s.shape() == tmpl.T.shape(), "subject ", shape_str(s.shape()),
           " does not match the template ", shape_str(tmpl.T.shape()));
  const int d = params.cfg.dims;
  NG_CHECK((s.shape() == Shape{d, d, d}), "subject ", shape_str(s.shape()),
           " does not match the model dims ", d);
  ForwardOutputs o;
  if (overrides && overrides->mask) {
    NG_CHECK(overrides->mask->shape() == s.shape(), "mask override shape mismatch");
    o.mask = *overrides->mask;
  } else {
    o.mask = extract(params.ext, s);
  }
  check_finite(o.mask, "extraction");
  o.extracted = overlay(s, o.mask);
  if (overrides && overrides->transform) {
    o.per_stage = {*overrides->transform};
    o.affine = to_tensor(*overrides->transform);
    o.warped = affine_resample(o.extracted, o.affine, o.extracted.shape());
  } else {
    RegistrationResult reg = register_volumes(params.reg, o.extracted, tmpl.T);
    o.affine = std::move(reg.A);
    o.warped = std::move(reg.warped);
    o.per_stage = std::move(reg.per_stage);
  }
  check_finite(o.affine, "registration");
  check_finite(o.warped, "registration");
  Tensor inv = affine_inverse(o.affine);
  o.atlas_seg = warp_mask(tmpl.B, inv);
  o.atlas_parc = warp_mask(tmpl.P, inv);
  check_finite(o.atlas_seg, "atlas warping");
  check_finite(o.atlas_parc, "atlas warping");
  o.seg = segment(params.seg, s);
  check_finite(o.seg, "segmentation");
  o.roi_input = overlay(s, o.atlas_parc);
  Tensor h = params.roi.forward(o.roi_input);
  check_finite(h, "region features");
  BrainGraph g = graph_build(h);
  o.features = g.H;
  o.adjacency = g.C;
  check_finite(o.adjacency, "graph construction");
  check_graph(o.adjacency);
  o.logits = params.gcn.forward(g);
  check_finite(o.logits, "classification");
  return o;
}

std::pair<Tensor, LossReport> subject_loss(const ForwardOutputs& out, const PhantomSubject& subj,
                                           const PhantomTemplate& tmpl, const TrainConfig& cfg) {
  JointLossInputs in;
  in.cls_probs = softmax(out.logits, 0);
  in.ext_mask = out.mask;
  in.warped = out.warped;
  in.seg_probs = out.seg;
  in.seg_target = out.atlas_seg;
  JointLossTargets tgt;
  tgt.cls_onehot = class_onehot(subj.y, cfg.model.classes);
  tgt.ext_target = subj.M;
  tgt.template_img = tmpl.T;
  return joint_loss(in, tgt, cfg.weights, cfg.similarity);
}

Optimizer::Optimizer(NamedTensors params, const TrainConfig& cfg)
    : params_(std::move(params)),
      kind_(cfg.optimizer),
      lr_(cfg.lr),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      momentum_(cfg.momentum),
      decay_(cfg.weight_decay) {
  NG_CHECK(!params_.empty(), "optimizer needs at least one parameter");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(size_t(params_[i].second.size()), 0.0);
    if (kind_ == OptimizerKind::adam) v_[i].assign(size_t(params_[i].second.size()), 0.0);
  }
}

void Optimizer::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void Optimizer::step() {
  ++t_;
  constexpr double kEps = 1e-8;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].second.grad();
    if (g.empty()) continue;
    auto w = params_[i].second.raw();
    auto& m = m_[i];
    if (kind_ == OptimizerKind::adam) {
      // Decay is decoupled from the adaptive step so its strength does not
      // depend on the per-coordinate gradient history.
      auto& v = v_[i];
      for (size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps) + lr_ * decay_ * w[j];
      }
    } else {
      for (size_t j = 0; j < w.size(); ++j) {
        m[j] = momentum_ * m[j] + g[j] + decay_ * w[j];
        w[j] -= lr_ * m[j];
      }
    }
  }
}

ParamState capture(const ModelParams& params) {
  ParamState st;
  for (const auto& [name, t] : params.named_parameters()) {
    st.names.push_back(name);
    st.values.emplace_back(t.data().begin(), t.data().end());
  }
  return st;
}

void restore(ModelParams& params, const ParamState& state) {
  NamedTensors named = params.named_parameters();
  NG_CHECK(named.size() == state.names.size(), "parameter state holds ", state.names.size(),
           " tensors, the model has ", named.size());
  for (size_t i = 0; i < named.size(); ++i) {
    NG_CHECK(named[i].first == state.names[i], "parameter state mismatch at ", state.names[i]);
    NG_CHECK(size_t(named[i].second.size()) == state.values[i].size(),
             "parameter size mismatch at ", state.names[i]);
    std::copy(state.values[i].begin(), state.values[i].end(), named[i].second.raw().begin());
  }
}

TrainResult train_joint(const TrainConfig& cfg, const PhantomDataset& ds,
                        const TrainOverrides* overrides) {
  cfg.validate();
  NG_CHECK(!ds.train.empty(), "training split is empty");
  NG_CHECK(!ds.val.empty(), "validation split is empty");
  TrainOverrides none;
  const TrainOverrides& ov = overrides ? *overrides : none;
  ModelParams params = ModelParams::create(cfg.model, cfg.seed);
  NamedTensors trainable = apply_freeze(params, ov.freeze);
  {
    // Surfaces configuration and shape errors before the training loop, which
    // treats runtime errors as divergence.
    NoGradGuard guard;
    ForwardOverrides fov = make_overrides(ov.inject, ds.train.front());
    forward(params, ds.train.front().S, ds.tmpl, &fov);
  }
  Optimizer opt(std::move(trainable), cfg);
  Csv log;
  log.header = kTrainLogHeader;
  ParamState stable = capture(params);
  ParamState best = capture(params);
  double best_acc = -1.0;
  int best_epoch = 0;
  bool diverged = false;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochOutcome e = run_epoch(ds.train, cfg.batch, opt, [&](size_t, const PhantomSubject& subj) {
      ForwardOverrides fov = make_overrides(ov.inject, subj);
      ForwardOutputs out = forward(params, subj.S, ds.tmpl, &fov);
      return subject_loss(out, subj, ds.tmpl, cfg);
    });
    if (!e.ok) {
      diverged = true;
      break;
    }
    ClsMetrics vm;
    try {
      vm = classification_metrics(params, ds.val, ds.tmpl, ov.inject);
    } catch (const std::runtime_error&) {
      diverged = true;
      break;
    }
    log.rows.push_back(log_row(epoch, e.mean, vm));
    stable = capture(params);
    if (vm.acc >= best_acc) {
      best_acc = vm.acc;
      best_epoch = epoch;
      best = capture(params);
    }
  }
  restore(params, diverged ? stable : best);
  unfreeze_all(params);
  TrainResult res;
  res.params = std::move(params);
  res.log = std::move(log);
  res.diverged = diverged;
  res.best_epoch = best_epoch;
  res.best_val_acc = best_acc < 0.0 ? 0.0 : best_acc;
  return res;
}

TrainResult train_staged(const TrainConfig& cfg, const PhantomDataset& ds, int start_stage,
                         const ParamState* prior) {
  cfg.validate();
  NG_CHECK((start_stage >= 1 && start_stage <= 4), "stage must lie in 1..4, got ", start_stage);
  NG_CHECK((start_stage == 1 || prior != nullptr), "stage ", start_stage,
           " needs the parameters saved by stage ", start_stage - 1);
  NG_CHECK(!ds.train.empty(), "training split is empty");
  NG_CHECK(!ds.val.empty(), "validation split is empty");
  ModelParams params = ModelParams::create(cfg.model, cfg.seed);
  if (prior) restore(params, *prior);
  {
    NoGradGuard guard;
    forward(params, ds.train.front().S, ds.tmpl);
  }
  // Same total budget as joint training, split evenly with the remainder
  // going to the classification stage.
  const int per = cfg.epochs / 4;
  const std::array<int, 4> budget = {per, per, per, cfg.epochs - 3 * per};
  static const std::array<std::vector<std::string>, 4> kFrozen = {{
      {"reg", "seg", "roi", "gcn"},
      {"ext", "seg", "roi", "gcn"},
      {"ext", "reg", "roi", "gcn"},
      {"ext", "reg", "seg"},
  }};
  Csv log;
  log.header = kTrainLogHeader;
  ParamState stable = capture(params);
  ParamState best = capture(params);
  double best_acc = -1.0;
  int best_epoch = 0;
  bool diverged = false;
  int epoch = 0;
  for (int s = 1; s < start_stage; ++s) epoch += budget[size_t(s - 1)];
  TrainResult res;
  for (int stage = start_stage; stage <= 4 && !diverged; ++stage) {
    NamedTensors trainable = apply_freeze(params, kFrozen[size_t(stage - 1)]);
    Optimizer opt(std::move(trainable), cfg);
    // Upstream nets are frozen, so their per-subject outputs are constants
    // for the whole stage and can be computed once.
    std::vector<Tensor> cache(ds.train.size());
    {
      NoGradGuard guard;
      for (size_t i = 0; i < ds.train.size(); ++i) {
        const PhantomSubject& subj = ds.train[i];
        if (stage == 2)
          cache[i] = overlay(subj.S, extract(params.ext, subj.S));
        else if (stage == 3)
          cache[i] = forward(params, subj.S, ds.tmpl).atlas_seg;
        else if (stage == 4)
          cache[i] = forward(params, subj.S, ds.tmpl).roi_input;
      }
    }
    auto stage_loss = [&](size_t i, const PhantomSubject& subj) {
      Tensor loss;
      LossReport r;
      if (stage == 1) {
        loss = binary_cross_entropy(extract(params.ext, subj.S), subj.M);
        r.ext = loss.value();
      } else if (stage == 2) {
        RegistrationResult reg = register_volumes(params.reg, cache[i], ds.tmpl.T);
        loss = similarity_loss(reg.warped, ds.tmpl.T, cfg.similarity);
        r.sim = loss.value();
      } else if (stage == 3) {
        loss = cross_entropy(segment(params.seg, subj.S), cache[i], 0);
        r.seg = loss.value();
      } else {
        Tensor logits = params.gcn.forward(graph_build(params.roi.forward(cache[i])));
        loss = cross_entropy(softmax(logits, 0), class_onehot(subj.y, cfg.model.classes), 0);
        r.cls = loss.value();
      }
      r.total = loss.value();
      return std::make_pair(loss, r);
    };
    for (int k = 0; k < budget[size_t(stage - 1)]; ++k) {
      ++epoch;
      EpochOutcome e = run_epoch(ds.train, cfg.batch, opt, stage_loss);
      if (!e.ok) {
        diverged = true;
        break;
      }
      ClsMetrics vm;
      try {
        vm = classification_metrics(params, ds.val, ds.tmpl, OracleInjection{});
      } catch (const std::runtime_error&) {
        diverged = true;
        break;
      }
      log.rows.push_back(log_row(epoch, e.mean, vm));
      stable = capture(params);
      // Validation accuracy is meaningless until the classifier trains, so
      // checkpoint selection only watches the final stage.
      if (stage == 4 && vm.acc >= best_acc) {
        best_acc = vm.acc;
        best_epoch = epoch;
        best = capture(params);
      }
    }
    if (!diverged) res.stage_states.push_back(capture(params));
  }
  if (diverged)
    restore(params, stable);
  else if (best_epoch > 0)
    restore(params, best);
  unfreeze_all(params);
  res.params = std::move(params);
  res.log = std::move(log);
  res.diverged = diverged;
  res.best_epoch = best_epoch;
  res.best_val_acc = best_acc < 0.0 ? 0.0 : best_acc;
  return res;
}

MetricTable evaluate(const ModelParams& params, const std::vector<PhantomSubject>& split,
                     const PhantomTemplate& tmpl, const OracleInjection* inject) {
  NG_CHECK(!split.empty(), "evaluate needs a non-empty split");
  NG_CHECK(params.cfg.classes == 2, "evaluate assumes binary labels");
  OracleInjection none;
  const OracleInjection& inj = inject ? *inject : none;
  MetricTable table;
  table.metrics = {"ext_dice", "ext_jaccard", "reg_cc",    "reg_mi",       "seg_dice",
                   "seg_jaccard", "parc_dice", "parc_jaccard", "acc",      "auc"};
  NoGradGuard guard;
  std::vector<double> scores;
  std::vector<int> labels;
  for (const PhantomSubject& subj : split) {
    ForwardOverrides ov = make_overrides(inj, subj);
    ForwardOutputs out = forward(params, subj.S, tmpl, &ov);
    std::vector<int> mask_pred = harden_binary(out.mask);
    std::vector<int> mask_true = harden_binary(subj.M);
    std::vector<int> seg_pred = harden_labels(out.seg);
    std::vector<int> seg_true = harden_labels(subj.true_seg);
    std::vector<int> parc_pred = harden_mask(out.atlas_parc);
    std::vector<int> parc_true = harden_mask(subj.true_parc);
    Tensor probs = softmax(out.logits, 0);
    double score = probs[1];
    int pred = probs[1] > probs[0] ? 1 : 0;
    scores.push_back(score);
    labels.push_back(subj.y);
    table.subjects.push_back(subj.index);
    table.rows.push_back({dice(mask_pred, mask_true), jaccard(mask_pred, mask_true),
                          correlation(out.warped.data(), tmpl.T.data()),
                          mutual_information(out.warped.data(), tmpl.T.data()),
                          dice_multiclass(seg_pred, seg_true, params.cfg.tissue_classes),
                          jaccard_multiclass(seg_pred, seg_true, params.cfg.tissue_classes),
                          dice_multiclass(parc_pred, parc_true, params.cfg.parcels + 1),
                          jaccard_multiclass(parc_pred, parc_true, params.cfg.parcels + 1),
                          pred == subj.y ? 1.0 : 0.0, score});
  }
  const size_t n = table.rows.size(), m = table.metrics.size();
  table.mean.assign(m, 0.0);
  table.stddev.assign(m, 0.0);
  for (size_t c = 0; c < m; ++c) {
    double s = 0.0;
    for (size_t r = 0; r < n; ++r) s += table.rows[r][c];
    double mu = s / double(n);
    double sq = 0.0;
    for (size_t r = 0; r < n; ++r) sq += (table.rows[r][c] - mu) * (table.rows[r][c] - mu);
    table.mean[c] = mu;
    table.stddev[c] = std::sqrt(sq / double(n));
  }
  table.mean[m - 1] = auc_roc(scores, labels);
  table.stddev[m - 1] = 0.0;
  return table;
}

void save_model(const std::string& path, const ModelParams& params, const TrainConfig& cfg) {
  save_checkpoint(path, params.named_parameters(), format_kv(train_config_kv(cfg)));
}

std::pair<ModelParams, TrainConfig> load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  TrainConfig cfg = train_config_from_kv(parse_kv(ck.config));
  ModelParams params = ModelParams::create(cfg.model, cfg.seed);
  NamedTensors named = params.named_parameters();
  NG_CHECK(ck.tensors.size() == named.size(), "checkpoint holds ", ck.tensors.size(),
           " tensors, the config implies ", named.size());
  for (size_t i = 0; i < named.size(); ++i) {
    NG_CHECK(ck.tensors[i].first == named[i].first, "checkpoint tensor ", ck.tensors[i].first,
             " does not match parameter ", named[i].first);
    NG_CHECK(ck.tensors[i].second.shape() == named[i].second.shape(), "checkpoint tensor ",
             named[i].first, " has shape ", shape_str(ck.tensors[i].second.shape()),
             ", expected ", shape_str(named[i].second.shape()));
    auto src = ck.tensors[i].second.data();
    std::copy(src.begin(), src.end(), named[i].second.raw().begin());
  }
  return {std::move(params), cfg};
}

}  // namespace ng
