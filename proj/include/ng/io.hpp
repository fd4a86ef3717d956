#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ng/geometry.hpp"
#include "ng/nets.hpp"
#include "ng/phantom.hpp"
#include "ng/tensor.hpp"

namespace ng {

enum class VoxelType { f32, u8 };

// NIfTI-1 single-file subset: fixed 348-byte little-endian header, data at
// byte 352, datatypes uint8/float32/float64, dim[0] of 3 or 4. Tensor dims
// map to dim[1..] in order with the last axis fastest.
void write_volume(const std::string& path, const Tensor& t, VoxelType type = VoxelType::f32);
Tensor read_volume(const std::string& path);

// 16 row-major values at 17 significant digits on one line.
void write_transform(const std::string& path, const AffineTransform& a);
AffineTransform read_transform(const std::string& path);

struct Checkpoint {
  std::string config;    // flat key=value text
  NamedTensors tensors;  // sorted by name
};

void save_checkpoint(const std::string& path, const NamedTensors& tensors,
                     const std::string& config);
Checkpoint load_checkpoint(const std::string& path);

// Flat key=value lines; blank lines and '#' comments are skipped.
std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text);
std::string format_kv(const std::vector<std::pair<std::string, std::string>>& kv);
std::vector<std::pair<std::string, std::string>> read_kv(const std::string& path);
void write_kv(const std::string& path, const std::vector<std::pair<std::string, std::string>>& kv);

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Numeric CSV, 12 significant digits, '.' decimal point, '\n' line endings.
void write_csv(const std::string& path, const Csv& csv);
Csv read_csv(const std::string& path);
std::string format_g12(double v);

// Dataset directory: manifest.txt, template{,_seg,_parc}.nii, labels.csv,
// s{i}.nii + m{i}.nii per subject, truth/{a{i}.txt, seg{i}.nii, parc{i}.nii}.
void save_dataset(const std::string& dir, const PhantomDataset& ds, const PhantomSpec& spec);

struct LoadedDataset {
  PhantomDataset data;
  PhantomSpec spec;
};
LoadedDataset load_dataset(const std::string& dir);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace ng
