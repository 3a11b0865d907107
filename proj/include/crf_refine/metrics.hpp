#pragma once

// Overlap scoring: confusion tallies, Dice, per-case (volumetric) pooling,
// fold summaries and a paired significance test.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crf_refine/tensor.hpp"

namespace crf_refine {

struct FoldAssignment;

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct CaseScore {
  std::string case_id;
  double dsc = 0.0;
  ConfusionCounts counts;
};

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& truth,
                          std::uint8_t positive_label = 1);

// 2 tp / (2 tp + fp + fn); 1.0 when both masks are empty (tp = fp = fn = 0).
double dice(const ConfusionCounts& counts) noexcept;

// tp / (tp + fp + fn), same empty-empty convention.
double iou(const ConfusionCounts& counts) noexcept;

struct SlicePair {
  const LabelMask* pred;
  const LabelMask* truth;
};

// Pools confusion counts over every slice of the case, then scores once.
CaseScore case_dice(std::string case_id, std::span<const SlicePair> slices,
                    std::uint8_t positive_label = 1);

struct SummaryStats {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1) standard deviation; 0 when n < 2
};

SummaryStats summarize(std::span<const double> values);

struct FoldReport {
  std::vector<SummaryStats> folds;  // indexed by fold
  SummaryStats overall;             // over all cases, not over fold means
};

FoldReport fold_report(std::span<const CaseScore> scores, const FoldAssignment& assignment);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-tailed
  std::size_t n = 0;
};

// Paired two-tailed t-test on a[k] - b[k]; Student's t with n - 1 dof.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace crf_refine
