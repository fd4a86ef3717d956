#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ng/geometry.hpp"
#include "ng/rng.hpp"
#include "ng/tensor.hpp"

namespace ng {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Conv3dLayer {
  Tensor w;  // [out,in,k,k,k]
  Tensor b;  // [out]
  static Conv3dLayer create(int in, int out, int k, Rng& rng, bool zero_init = false);
  Tensor apply(const Tensor& x, int stride, int padding) const;
};

struct LinearLayer {
  Tensor w;  // [in,out]
  Tensor b;  // [out]
  static LinearLayer create(int in, int out, Rng& rng, bool zero_init = false);
  Tensor apply(const Tensor& x) const;  // [rows,in] -> [rows,out]
};

// Two conv3+relu layers at constant width.
struct ConvBlock {
  Conv3dLayer c1, c2;
  static ConvBlock create(int in, int out, Rng& rng);
  Tensor apply(const Tensor& x) const;
};

struct UNet3dConfig {
  int in_channels = 1;
  int base_channels = 8;
  int depth = 2;  // pool levels; input dims must divide by 2^depth
  int out_channels = 1;
};

struct UNet3d {
  UNet3dConfig cfg;
  std::vector<ConvBlock> enc;
  ConvBlock bottleneck;
  std::vector<ConvBlock> dec;  // dec[i] consumes the level-i skip
  Conv3dLayer head;            // 1x1x1 projection
  static UNet3d create(const UNet3dConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x) const;  // [Cin,W,H,D] -> [Cout,W,H,D]
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct RegEncoderConfig {
  std::vector<int> ladder = {8, 16, 32};  // stride-2 conv widths
  int stages = 2;
  int dims = 24;
};

// Predicts 12 affine parameters from a (moving, target) volume pair. The head
// starts at zero so an untrained encoder yields the identity transform.
struct RegEncoder {
  RegEncoderConfig cfg;
  std::vector<Conv3dLayer> convs;
  LinearLayer head;
  static RegEncoder create(const RegEncoderConfig& cfg, Rng& rng);
  Tensor predict_params(const Tensor& moving, const Tensor& target) const;  // [12]
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct RegistrationResult {
  Tensor A;       // [4,4], total transform, differentiable
  Tensor warped;  // resample(E, A)
  std::vector<AffineTransform> per_stage;  // last stage first
};

Tensor extract(const UNet3d& net, const Tensor& s);                      // [d,d,d] in (0,1)
Tensor overlay(const Tensor& volume, const Tensor& mask);                // elementwise, or per mask channel
RegistrationResult register_volumes(const RegEncoder& net, const Tensor& moving,
                                    const Tensor& target);
Tensor segment(const UNet3d& net, const Tensor& s);                      // [C,d,d,d], softmax over channels

struct RoiMlpConfig {
  int voxels = 6 * 6 * 6;
  int hidden = 32;
  int features = 16;  // N
  int pool = 1;       // block max-pool factor applied before flattening
};

// Shared two-layer MLP applied to every flattened ROI volume.
struct RoiMlp {
  RoiMlpConfig cfg;
  LinearLayer l1, l2;
  static RoiMlp create(const RoiMlpConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& f) const;  // [K,W,H,D] -> [K,N]
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BrainGraph {
  Tensor H;  // [K,N], rows l2-normalized
  Tensor C;  // [K,K] cosine similarities
};

BrainGraph graph_build(const Tensor& h);

struct GcnConfig {
  std::vector<int> widths = {16};
  int classes = 2;
  int node_features = 16;  // must equal N
};

// D^{-1/2} (C+I) D^{-1/2} with degrees from |C+I| row sums, so the
// normalization stays real for negative similarities.
Tensor normalized_adjacency(const Tensor& c);

struct GraphClassifier {
  GcnConfig cfg;
  std::vector<LinearLayer> layers;
  LinearLayer head;
  static GraphClassifier create(const GcnConfig& cfg, Rng& rng);
  Tensor forward(const BrainGraph& g) const;  // logits [classes]
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct ModelConfig {
  int dims = 24;
  int tissue_classes = 4;
  int parcels = 8;
  int unet_base = 8;
  int unet_depth = 2;
  std::vector<int> reg_ladder = {8, 16, 32};
  int stages = 2;
  int roi_hidden = 32;
  int roi_features = 16;
  std::vector<int> gcn_widths = {16};
  int classes = 2;
};

struct ModelParams {
  ModelConfig cfg;
  UNet3d ext;
  RegEncoder reg;
  UNet3d seg;
  RoiMlp roi;
  GraphClassifier gcn;
  static ModelParams create(const ModelConfig& cfg, std::uint64_t seed);
  NamedTensors named_parameters() const;  // sorted by name
};

}  // namespace ng
