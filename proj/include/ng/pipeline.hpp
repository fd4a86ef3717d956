#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ng/io.hpp"
#include "ng/losses.hpp"
#include "ng/nets.hpp"
#include "ng/phantom.hpp"

namespace ng {

enum class TrainMode { joint, staged };
enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  Similarity similarity = Similarity::ncc;
  TrainMode mode = TrainMode::joint;
  OptimizerKind optimizer = OptimizerKind::adam;
  int epochs = 200;
  int batch = 4;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Flat key=value form, lossless both ways. Doubles are written at 17
// significant digits so a round trip is bit-exact.
std::vector<std::pair<std::string, std::string>> train_config_kv(const TrainConfig& cfg);
TrainConfig train_config_from_kv(const std::vector<std::pair<std::string, std::string>>& kv);

// One subject pushed through the whole chain. Masks stay soft end to end so
// the graph is differentiable; harden only for metrics and file outputs.
struct ForwardOutputs {
  Tensor mask;        // predicted brain mask, (0,1) per voxel
  Tensor extracted;   // subject volume with the mask applied
  Tensor affine;      // [4,4] total subject-to-template transform
  std::vector<AffineTransform> per_stage;  // last stage first
  Tensor warped;      // extracted volume resampled through affine
  Tensor atlas_seg;   // template tissue mask pulled into subject space
  Tensor atlas_parc;  // template parcel mask pulled into subject space
  Tensor seg;         // segmentation net output, channel softmax
  Tensor roi_input;   // subject volume overlaid with each soft parcel mask
  Tensor features;    // [K,N] region features, rows l2-normalized
  Tensor adjacency;   // [K,K] cosine similarity graph
  Tensor logits;      // [classes]
};

// Ground-truth substitutes. A set mask bypasses the extraction net, a set
// transform bypasses the registration net.
struct ForwardOverrides {
  const Tensor* mask = nullptr;
  const AffineTransform* transform = nullptr;
};

ForwardOutputs forward(const ModelParams& params, const Tensor& s, const PhantomTemplate& tmpl,
                       const ForwardOverrides* overrides = nullptr);

// Per-subject training loss over the forward outputs.
std::pair<Tensor, LossReport> subject_loss(const ForwardOutputs& out, const PhantomSubject& subj,
                                           const PhantomTemplate& tmpl, const TrainConfig& cfg);

// Adam or momentum SGD over an explicit parameter list; state is positional,
// updates run in list order, so identical histories give identical weights.
class Optimizer {
 public:
  Optimizer(NamedTensors params, const TrainConfig& cfg);
  void zero_grad();
  void step();

 private:
  NamedTensors params_;
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, momentum_, decay_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

// Flat snapshot of every parameter, keyed by the sorted names.
struct ParamState {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;
};
ParamState capture(const ModelParams& params);
void restore(ModelParams& params, const ParamState& state);

struct OracleInjection {
  bool true_mask = false;       // substitute each subject's ground-truth mask
  bool true_transform = false;  // substitute each subject's ground-truth transform
};

struct TrainOverrides {
  OracleInjection inject;
  std::vector<std::string> freeze;  // parameter name prefixes left untrained
};

struct TrainResult {
  ModelParams params;  // best-validation-accuracy weights; last stable ones on divergence
  Csv log;             // one row per epoch: losses plus validation acc/auc
  bool diverged = false;
  int best_epoch = 0;
  double best_val_acc = 0.0;
  std::vector<ParamState> stage_states;  // staged mode: snapshot after each stage
};

extern const std::vector<std::string> kTrainLogHeader;

TrainResult train_joint(const TrainConfig& cfg, const PhantomDataset& ds,
                        const TrainOverrides* overrides = nullptr);

// Sequential baseline: extraction, registration, segmentation, classification,
// each stage training only its own nets with everything upstream frozen. The
// total epoch budget matches train_joint. Entering at stage k > 1 requires the
// parameters left by stage k-1.
TrainResult train_staged(const TrainConfig& cfg, const PhantomDataset& ds, int start_stage = 1,
                         const ParamState* prior = nullptr);

// Per-subject metric rows plus mean and spread per column. The acc column is
// the subject's 0/1 correctness; the auc column holds its class-1 score, and
// the auc summary is the split-level ranking statistic with zero spread.
struct MetricTable {
  std::vector<std::string> metrics;
  std::vector<int> subjects;
  std::vector<std::vector<double>> rows;
  std::vector<double> mean, stddev;
};

MetricTable evaluate(const ModelParams& params, const std::vector<PhantomSubject>& split,
                     const PhantomTemplate& tmpl, const OracleInjection* inject = nullptr);

void save_model(const std::string& path, const ModelParams& params, const TrainConfig& cfg);
std::pair<ModelParams, TrainConfig> load_model(const std::string& path);

}  // namespace ng
