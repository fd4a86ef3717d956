#include "ng/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ng/common.hpp"

namespace ng {

namespace {

constexpr int64_t kDataOffset = 352;
constexpr char kCheckpointMagic[6] = {'N', 'G', 'C', 'K', 'P', 'T'};
constexpr int32_t kCheckpointVersion = 1;

void put_u16(std::string& out, size_t off, uint16_t v) {
  out[off] = char(v & 0xff);
  out[off + 1] = char(v >> 8);
}

void put_u32(std::string& out, size_t off, uint32_t v) {
  for (int i = 0; i < 4; ++i) out[off + size_t(i)] = char((v >> (8 * i)) & 0xff);
}

void put_f32(std::string& out, size_t off, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, off, bits);
}

uint16_t get_u16(const std::string& b, size_t off) {
  return uint16_t(uint8_t(b[off])) | uint16_t(uint16_t(uint8_t(b[off + 1])) << 8);
}

uint32_t get_u32(const std::string& b, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(b[off + size_t(i)])) << (8 * i);
  return v;
}

uint64_t get_u64(const std::string& b, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(b[off + size_t(i)])) << (8 * i);
  return v;
}

float get_f32(const std::string& b, size_t off) {
  uint32_t bits = get_u32(b, off);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

double get_f64(const std::string& b, size_t off) {
  uint64_t bits = get_u64(b, off);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

void append_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void append_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  append_u64(out, bits);
}

std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string load_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  NG_CHECK(in.good(), "cannot open ", path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

void store_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  NG_CHECK(out.good(), "cannot write ", path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  NG_CHECK(out.good(), "short write to ", path);
}

}  // namespace

std::string read_text_file(const std::string& path) { return load_bytes(path); }

void write_text_file(const std::string& path, const std::string& text) {
  store_bytes(path, text);
}

void write_volume(const std::string& path, const Tensor& t, VoxelType type) {
  NG_CHECK(t.rank() == 3 || t.rank() == 4, "volume must be rank 3 or 4, got rank ", t.rank());
  std::string bytes(size_t(kDataOffset), '\0');
  put_u32(bytes, 0, 348);
  put_u16(bytes, 40, uint16_t(t.rank()));
  for (int i = 0; i < 7; ++i) {
    int d = i < t.rank() ? t.dim(i) : 1;
    NG_CHECK(d >= 1 && d <= 32767, "volume dim ", i, " out of range: ", d);
    put_u16(bytes, size_t(42 + 2 * i), uint16_t(d));
  }
  put_u16(bytes, 70, type == VoxelType::f32 ? 16 : 2);
  put_u16(bytes, 72, type == VoxelType::f32 ? 32 : 8);
  for (int i = 1; i <= t.rank(); ++i) put_f32(bytes, size_t(76 + 4 * i), 1.0f);
  put_f32(bytes, 108, float(kDataOffset));
  bytes[344] = 'n';
  bytes[345] = '+';
  bytes[346] = '1';
  bytes[347] = '\0';

  auto vals = t.data();
  if (type == VoxelType::f32) {
    bytes.resize(size_t(kDataOffset) + size_t(t.size()) * 4);
    for (int64_t i = 0; i < t.size(); ++i)
      put_f32(bytes, size_t(kDataOffset + i * 4), float(vals[size_t(i)]));
  } else {
    bytes.reserve(size_t(kDataOffset) + size_t(t.size()));
    for (int64_t i = 0; i < t.size(); ++i) {
      double v = vals[size_t(i)];
      NG_CHECK(v == std::floor(v) && v >= 0.0 && v <= 255.0,
               "uint8 volume needs integer voxels in [0,255], got ", v);
      bytes.push_back(char(uint8_t(v)));
    }
  }
  store_bytes(path, bytes);
}

Tensor read_volume(const std::string& path) {
  std::string bytes = load_bytes(path);
  NG_CHECK(int64_t(bytes.size()) >= kDataOffset, "truncated nifti header in ", path);
  NG_CHECK(get_u32(bytes, 0) == 348, "bad nifti header size in ", path, " (sizeof_hdr must be 348)");
  NG_CHECK(bytes[344] == 'n' && bytes[345] == '+' && bytes[346] == '1' && bytes[347] == '\0',
           "bad nifti magic in ", path);

  int rank = int(int16_t(get_u16(bytes, 40)));
  NG_CHECK(rank == 3 || rank == 4, "unsupported nifti rank ", rank, " in ", path);
  Shape shape;
  int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    int d = int(int16_t(get_u16(bytes, size_t(42 + 2 * i))));
    NG_CHECK(d >= 1, "bad nifti dim ", i, " in ", path);
    shape.push_back(d);
    numel *= d;
  }

  int dtype = int(int16_t(get_u16(bytes, 70)));
  int bitpix = int(int16_t(get_u16(bytes, 72)));
  int width = dtype == 2 ? 8 : dtype == 16 ? 32 : dtype == 64 ? 64 : 0;
  NG_CHECK(width != 0, "unsupported nifti datatype ", dtype, " in ", path);
  NG_CHECK(bitpix == width, "nifti bitpix ", bitpix, " does not match datatype ", dtype, " in ",
           path);

  double off_f = double(get_f32(bytes, 108));
  NG_CHECK(off_f >= double(kDataOffset) && off_f == std::floor(off_f), "bad nifti vox_offset ",
           off_f, " in ", path);
  int64_t offset = int64_t(off_f);
  int64_t need = offset + numel * (width / 8);
  NG_CHECK(int64_t(bytes.size()) >= need, "truncated nifti data in ", path);

  std::vector<double> vals(static_cast<size_t>(numel));
  for (int64_t i = 0; i < numel; ++i) {
    size_t at = size_t(offset + i * (width / 8));
    if (dtype == 2)
      vals[size_t(i)] = double(uint8_t(bytes[at]));
    else if (dtype == 16)
      vals[size_t(i)] = double(get_f32(bytes, at));
    else
      vals[size_t(i)] = get_f64(bytes, at);
  }
  return Tensor::from_data(shape, std::move(vals));
}

void write_transform(const std::string& path, const AffineTransform& a) {
  std::string line;
  for (int i = 0; i < 16; ++i) {
    if (i) line += ' ';
    line += format_g17(a.m()[size_t(i)]);
  }
  line += '\n';
  store_bytes(path, line);
}

AffineTransform read_transform(const std::string& path) {
  std::istringstream in(load_bytes(path));
  std::array<double, 16> m{};
  for (int i = 0; i < 16; ++i)
    NG_CHECK(bool(in >> m[size_t(i)]), "transform file ", path, " needs 16 values");
  std::string extra;
  NG_CHECK(!(in >> extra), "transform file ", path, " has trailing content");
  NG_CHECK(m[12] == 0.0 && m[13] == 0.0 && m[14] == 0.0 && m[15] == 1.0,
           "transform file ", path, " has a bad bottom row");
  return AffineTransform(m);
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors,
                     const std::string& config) {
  NamedTensors sorted = tensors;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  append_u32(out, uint32_t(kCheckpointVersion));
  append_u64(out, config.size());
  out += config;
  append_u32(out, uint32_t(sorted.size()));
  for (const auto& [name, t] : sorted) {
    append_u32(out, uint32_t(name.size()));
    out += name;
    append_u32(out, uint32_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) append_u32(out, uint32_t(t.dim(i)));
    for (double v : t.data()) append_f64(out, v);
  }
  store_bytes(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes = load_bytes(path);
  size_t pos = 0;
  auto need = [&](size_t n, const std::string& what) {
    NG_CHECK(bytes.size() - pos >= n, "checkpoint ", path, " truncated in ", what);
  };
  need(sizeof kCheckpointMagic + 4, "header");
  NG_CHECK(std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) == 0,
           path, " is not a checkpoint file");
  pos = sizeof kCheckpointMagic;
  int32_t version = int32_t(get_u32(bytes, pos));
  pos += 4;
  NG_CHECK(version == kCheckpointVersion, "unsupported checkpoint version ", version, " in ",
           path);

  Checkpoint ck;
  need(8, "config length");
  uint64_t cfg_len = get_u64(bytes, pos);
  pos += 8;
  need(size_t(cfg_len), "config blob");
  ck.config = bytes.substr(pos, size_t(cfg_len));
  pos += size_t(cfg_len);

  need(4, "tensor count");
  uint32_t count = get_u32(bytes, pos);
  pos += 4;
  for (uint32_t i = 0; i < count; ++i) {
    need(4, "tensor name length");
    uint32_t name_len = get_u32(bytes, pos);
    pos += 4;
    NG_CHECK(name_len >= 1 && name_len <= 4096, "corrupt tensor name length in ", path);
    need(name_len, "tensor name");
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    need(4, "rank of tensor " + name);
    uint32_t rank = get_u32(bytes, pos);
    pos += 4;
    NG_CHECK(rank <= 8, "corrupt rank for tensor ", name, " in ", path);
    Shape shape;
    int64_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      need(4, "dims of tensor " + name);
      uint32_t d = get_u32(bytes, pos);
      pos += 4;
      NG_CHECK(d >= 1 && numel * d <= (int64_t(1) << 40), "corrupt dim for tensor ", name,
               " in ", path);
      shape.push_back(int(d));
      numel *= d;
    }
    need(size_t(numel) * 8, "data of tensor " + name);
    std::vector<double> vals(static_cast<size_t>(numel));
    for (int64_t j = 0; j < numel; ++j) vals[size_t(j)] = get_f64(bytes, pos + size_t(j) * 8);
    pos += size_t(numel) * 8;
    ck.tensors.emplace_back(std::move(name), Tensor::from_data(shape, std::move(vals)));
  }
  NG_CHECK(pos == bytes.size(), "checkpoint ", path, " has trailing bytes");
  return ck;
}

std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream in(text);
  std::string line;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    NG_CHECK(eq != std::string::npos, "config line missing '=': ", line);
    kv.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return kv;
}

std::string format_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_kv(const std::string& path) {
  return parse_kv(load_bytes(path));
}

void write_kv(const std::string& path,
              const std::vector<std::pair<std::string, std::string>>& kv) {
  store_bytes(path, format_kv(kv));
}

std::string format_g12(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void write_csv(const std::string& path, const Csv& csv) {
  NG_CHECK(!csv.header.empty(), "csv needs a header row");
  std::string out;
  for (size_t i = 0; i < csv.header.size(); ++i) {
    if (i) out += ',';
    out += csv.header[i];
  }
  out += '\n';
  for (const auto& row : csv.rows) {
    NG_CHECK(row.size() == csv.header.size(), "csv row has ", row.size(), " cells, header has ",
             csv.header.size());
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += format_g12(row[i]);
    }
    out += '\n';
  }
  store_bytes(path, out);
}

Csv read_csv(const std::string& path) {
  std::istringstream in(load_bytes(path));
  std::string line;
  NG_CHECK(bool(std::getline(in, line)), "csv ", path, " is empty");
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      size_t comma = s.find(',', start);
      if (comma == std::string::npos) {
        cells.push_back(s.substr(start));
        return cells;
      }
      cells.push_back(s.substr(start, comma - start));
      start = comma + 1;
    }
  };
  Csv csv;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  csv.header = split(line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    NG_CHECK(cells.size() == csv.header.size(), "csv ", path, " line ", lineno, " has ",
             cells.size(), " cells, header has ", csv.header.size());
    std::vector<double> row(cells.size());
    for (size_t i = 0; i < cells.size(); ++i) {
      char* end = nullptr;
      row[i] = std::strtod(cells[i].c_str(), &end);
      NG_CHECK(end && *end == '\0' && end != cells[i].c_str(), "csv ", path, " line ", lineno,
               " cell '", cells[i], "' is not numeric");
    }
    csv.rows.push_back(std::move(row));
  }
  return csv;
}

namespace {

std::vector<std::pair<std::string, std::string>> spec_kv(const PhantomSpec& spec) {
  return {
      {"format", "phantom-v1"},
      {"dims", std::to_string(spec.dims)},
      {"tissue_classes", std::to_string(spec.tissue_classes)},
      {"parcels", std::to_string(spec.parcels)},
      {"subjects", std::to_string(spec.subjects)},
      {"class_effect", format_g17(spec.class_effect)},
      {"noise_sigma", format_g17(spec.noise_sigma)},
      {"max_rotation_deg", format_g17(spec.max_rotation_deg)},
      {"min_scale", format_g17(spec.min_scale)},
      {"max_scale", format_g17(spec.max_scale)},
      {"max_translation_vox", format_g17(spec.max_translation_vox)},
      {"max_shear", format_g17(spec.max_shear)},
      {"seed", std::to_string(spec.seed)},
      {"identity_perturbation", spec.identity_perturbation ? "1" : "0"},
  };
}

const std::string& kv_get(const std::vector<std::pair<std::string, std::string>>& kv,
                          const std::string& key) {
  for (const auto& [k, v] : kv)
    if (k == key) return v;
  fail("manifest is missing key ", key);
}

double kv_double(const std::vector<std::pair<std::string, std::string>>& kv,
                 const std::string& key) {
  const std::string& s = kv_get(kv, key);
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  NG_CHECK(end && *end == '\0' && end != s.c_str(), "manifest value for ", key,
           " is not numeric: ", s);
  return v;
}

}  // namespace

void save_dataset(const std::string& dir, const PhantomDataset& ds, const PhantomSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "truth");
  auto at = [&](const std::string& name) { return (fs::path(dir) / name).string(); };

  write_kv(at("manifest.txt"), spec_kv(spec));
  write_volume(at("template.nii"), ds.tmpl.T);
  write_volume(at("template_seg.nii"), ds.tmpl.B);
  write_volume(at("template_parc.nii"), ds.tmpl.P);

  Csv labels;
  labels.header = {"subject", "label"};
  const std::vector<PhantomSubject>* splits[3] = {&ds.train, &ds.val, &ds.test};
  for (const auto* split : splits) {
    for (const auto& sub : *split) {
      labels.rows.push_back({double(sub.index), double(sub.y)});
      std::string n = std::to_string(sub.index);
      write_volume(at("s" + n + ".nii"), sub.S);
      write_volume(at("m" + n + ".nii"), sub.M, VoxelType::u8);
      write_transform(at("truth/a" + n + ".txt"), sub.A_true);
      write_volume(at("truth/seg" + n + ".nii"), sub.true_seg);
      write_volume(at("truth/parc" + n + ".nii"), sub.true_parc);
    }
  }
  write_csv(at("labels.csv"), labels);
}

LoadedDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  auto at = [&](const std::string& name) { return (fs::path(dir) / name).string(); };

  auto kv = read_kv(at("manifest.txt"));
  NG_CHECK(kv_get(kv, "format") == "phantom-v1", "unsupported dataset format in ", dir);
  LoadedDataset out;
  PhantomSpec& spec = out.spec;
  spec.dims = int(kv_double(kv, "dims"));
  spec.tissue_classes = int(kv_double(kv, "tissue_classes"));
  spec.parcels = int(kv_double(kv, "parcels"));
  spec.subjects = int(kv_double(kv, "subjects"));
  spec.class_effect = kv_double(kv, "class_effect");
  spec.noise_sigma = kv_double(kv, "noise_sigma");
  spec.max_rotation_deg = kv_double(kv, "max_rotation_deg");
  spec.min_scale = kv_double(kv, "min_scale");
  spec.max_scale = kv_double(kv, "max_scale");
  spec.max_translation_vox = kv_double(kv, "max_translation_vox");
  spec.max_shear = kv_double(kv, "max_shear");
  spec.seed = uint64_t(kv_double(kv, "seed"));
  spec.identity_perturbation = kv_get(kv, "identity_perturbation") == "1";
  spec.validate();

  PhantomDataset& ds = out.data;
  ds.tmpl.T = read_volume(at("template.nii"));
  ds.tmpl.B = read_volume(at("template_seg.nii"));
  ds.tmpl.P = read_volume(at("template_parc.nii"));
  int d = spec.dims;
  NG_CHECK((ds.tmpl.T.shape() == Shape{d, d, d}), "template volume does not match manifest dims");
  NG_CHECK((ds.tmpl.B.shape() == Shape{spec.tissue_classes, d, d, d}),
           "template segmentation does not match manifest");
  NG_CHECK((ds.tmpl.P.shape() == Shape{spec.parcels, d, d, d}),
           "template parcellation does not match manifest");

  Csv labels = read_csv(at("labels.csv"));
  NG_CHECK((labels.header == std::vector<std::string>{"subject", "label"}),
           "labels.csv has an unexpected header");
  NG_CHECK(int(labels.rows.size()) == spec.subjects, "labels.csv row count ",
           labels.rows.size(), " does not match manifest subjects ", spec.subjects);

  int z = spec.subjects;
  int n_val = z / 10, n_test = z / 10;
  int n_train = z - n_val - n_test;
  std::vector<int> label_of(size_t(z), -1);
  for (const auto& row : labels.rows) {
    int idx = int(row[0]);
    NG_CHECK(idx >= 0 && idx < z && label_of[size_t(idx)] == -1,
             "labels.csv has a bad or repeated subject index");
    NG_CHECK(row[1] == 0.0 || row[1] == 1.0, "labels.csv label must be 0 or 1");
    label_of[size_t(idx)] = int(row[1]);
  }

  for (int i = 0; i < z; ++i) {
    PhantomSubject sub;
    sub.index = i;
    sub.y = label_of[size_t(i)];
    std::string n = std::to_string(i);
    sub.S = read_volume(at("s" + n + ".nii"));
    sub.M = read_volume(at("m" + n + ".nii"));
    sub.A_true = read_transform(at("truth/a" + n + ".txt"));
    sub.true_seg = read_volume(at("truth/seg" + n + ".nii"));
    sub.true_parc = read_volume(at("truth/parc" + n + ".nii"));
    NG_CHECK((sub.S.shape() == Shape{d, d, d} && sub.M.shape() == Shape{d, d, d}),
             "subject ", i, " volume does not match manifest dims");
    if (i < n_train)
      ds.train.push_back(std::move(sub));
    else if (i < n_train + n_val)
      ds.val.push_back(std::move(sub));
    else
      ds.test.push_back(std::move(sub));
  }
  return out;
}

}  // namespace ng
