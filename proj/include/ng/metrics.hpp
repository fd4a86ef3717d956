#pragma once

#include <span>
#include <vector>

namespace ng {

// Hard-mask overlap on nonzero voxels; both empty counts as perfect.
double dice(std::span<const int> a, std::span<const int> b);
double jaccard(std::span<const int> a, std::span<const int> b);

// Unweighted mean over classes 1..num_classes-1 (0 is background).
double dice_multiclass(std::span<const int> a, std::span<const int> b, int num_classes);
double jaccard_multiclass(std::span<const int> a, std::span<const int> b, int num_classes);

// Histogram mutual information, equal-width bins per image, natural log.
double mutual_information(std::span<const double> x, std::span<const double> y, int bins = 32);

double correlation(std::span<const double> x, std::span<const double> y);

double accuracy(std::span<const int> pred, std::span<const int> label);

// Mann-Whitney rank statistic; ties contribute one half.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

}  // namespace ng
