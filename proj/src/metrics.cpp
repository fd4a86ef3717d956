#include "ng/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ng/common.hpp"

namespace ng {

namespace {

struct Overlap {
  int64_t inter = 0, a = 0, b = 0;
};

Overlap count_overlap(std::span<const int> a, std::span<const int> b, int cls) {
  NG_CHECK(a.size() == b.size(), "mask sizes differ: ", a.size(), " vs ", b.size());
  Overlap o;
  for (size_t i = 0; i < a.size(); ++i) {
    bool ia = cls < 0 ? a[i] != 0 : a[i] == cls;
    bool ib = cls < 0 ? b[i] != 0 : b[i] == cls;
    o.a += ia;
    o.b += ib;
    o.inter += ia && ib;
  }
  return o;
}

double dice_of(const Overlap& o) {
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * double(o.inter) / double(o.a + o.b);
}

double jaccard_of(const Overlap& o) {
  int64_t uni = o.a + o.b - o.inter;
  if (uni == 0) return 1.0;
  return double(o.inter) / double(uni);
}

}  // namespace

double dice(std::span<const int> a, std::span<const int> b) {
  return dice_of(count_overlap(a, b, -1));
}

double jaccard(std::span<const int> a, std::span<const int> b) {
  return jaccard_of(count_overlap(a, b, -1));
}

double dice_multiclass(std::span<const int> a, std::span<const int> b, int num_classes) {
  NG_CHECK(num_classes >= 2, "multiclass dice needs at least 2 classes, got ", num_classes);
  double s = 0.0;
  for (int c = 1; c < num_classes; ++c) s += dice_of(count_overlap(a, b, c));
  return s / double(num_classes - 1);
}

double jaccard_multiclass(std::span<const int> a, std::span<const int> b, int num_classes) {
  NG_CHECK(num_classes >= 2, "multiclass jaccard needs at least 2 classes, got ", num_classes);
  double s = 0.0;
  for (int c = 1; c < num_classes; ++c) s += jaccard_of(count_overlap(a, b, c));
  return s / double(num_classes - 1);
}

double mutual_information(std::span<const double> x, std::span<const double> y, int bins) {
  NG_CHECK(x.size() == y.size() && !x.empty(), "mutual_information needs equal non-empty inputs");
  NG_CHECK(bins >= 1, "mutual_information needs at least one bin, got ", bins);
  auto bin_of = [bins](double v, double lo, double hi) {
    if (hi <= lo) return 0;
    int b = int((v - lo) / (hi - lo) * bins);
    return std::clamp(b, 0, bins - 1);
  };
  auto [xlo, xhi] = std::minmax_element(x.begin(), x.end());
  auto [ylo, yhi] = std::minmax_element(y.begin(), y.end());
  std::vector<double> joint(size_t(bins) * bins, 0.0);
  std::vector<double> px(size_t(bins), 0.0), py(size_t(bins), 0.0);
  double n = double(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    int bx = bin_of(x[i], *xlo, *xhi);
    int by = bin_of(y[i], *ylo, *yhi);
    joint[size_t(bx * bins + by)] += 1.0 / n;
    px[size_t(bx)] += 1.0 / n;
    py[size_t(by)] += 1.0 / n;
  }
  double mi = 0.0;
  for (int bx = 0; bx < bins; ++bx)
    for (int by = 0; by < bins; ++by) {
      double pj = joint[size_t(bx * bins + by)];
      if (pj > 0.0) mi += pj * std::log(pj / (px[size_t(bx)] * py[size_t(by)]));
    }
  return std::max(mi, 0.0);
}

double correlation(std::span<const double> x, std::span<const double> y) {
  NG_CHECK(x.size() == y.size() && x.size() >= 2, "correlation needs equal inputs of size >= 2");
  double n = double(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  NG_CHECK(sxx > 0.0, "correlation: first input has zero variance");
  NG_CHECK(syy > 0.0, "correlation: second input has zero variance");
  return sxy / std::sqrt(sxx * syy);
}

double accuracy(std::span<const int> pred, std::span<const int> label) {
  NG_CHECK(pred.size() == label.size() && !pred.empty(), "accuracy needs equal non-empty inputs");
  int64_t hit = 0;
  for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == label[i];
  return double(hit) / double(pred.size());
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
  NG_CHECK(scores.size() == labels.size() && !scores.empty(), "auc_roc needs equal non-empty inputs");
  int64_t npos = 0, nneg = 0;
  for (int l : labels) (l != 0 ? npos : nneg)++;
  NG_CHECK(npos > 0 && nneg > 0, "auc_roc needs both classes present, got ", npos, " positive / ",
           nneg, " negative");
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    double mid = 0.5 * double(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double rpos = 0.0;
  for (size_t k = 0; k < labels.size(); ++k)
    if (labels[k] != 0) rpos += rank[k];
  return (rpos - 0.5 * double(npos) * double(npos + 1)) / (double(npos) * double(nneg));
}

}  // namespace ng
