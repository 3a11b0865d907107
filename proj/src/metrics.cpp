#include "crf_refine/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/students_t.hpp>

#include "crf_refine/error.hpp"
#include "crf_refine/experiment.hpp"

namespace crf_refine {

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& truth,
                          std::uint8_t positive_label) {
  if (pred.height() != truth.height() || pred.width() != truth.width())
    throw InvalidInput("confusion: prediction is " + std::to_string(pred.height()) + "x" +
                       std::to_string(pred.width()) + " but truth is " +
                       std::to_string(truth.height()) + "x" + std::to_string(truth.width()));
  ConfusionCounts c;
  const auto p = pred.values();
  const auto t = truth.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pp = p[i] == positive_label;
    const bool tp = t[i] == positive_label;
    if (pp && tp)
      ++c.tp;
    else if (pp)
      ++c.fp;
    else if (tp)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double dice(const ConfusionCounts& c) noexcept {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double iou(const ConfusionCounts& c) noexcept {
  const std::uint64_t denom = c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(c.tp) / static_cast<double>(denom);
}

CaseScore case_dice(std::string case_id, std::span<const SlicePair> slices,
                    std::uint8_t positive_label) {
  if (slices.empty()) throw InvalidInput("case '" + case_id + "' has no slices");
  CaseScore score{std::move(case_id), 0.0, {}};
  for (const SlicePair& s : slices) score.counts += confusion(*s.pred, *s.truth, positive_label);
  score.dsc = dice(score.counts);
  return score;
}

SummaryStats summarize(std::span<const double> values) {
  SummaryStats s;
  s.n = values.size();
  if (s.n == 0) return s;
  // Identical values are reported exactly rather than through a rounded sum.
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values[0]; })) {
    s.mean = values[0];
    return s;
  }
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n < 2) return s;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  return s;
}

FoldReport fold_report(std::span<const CaseScore> scores, const FoldAssignment& assignment) {
  std::vector<std::vector<double>> per_fold(assignment.k);
  std::vector<double> all;
  all.reserve(scores.size());
  for (const CaseScore& s : scores) {
    const auto it = assignment.mapping.find(s.case_id);
    if (it == assignment.mapping.end())
      throw InvalidInput("case '" + s.case_id + "' has no fold assignment");
    per_fold.at(it->second).push_back(s.dsc);
    all.push_back(s.dsc);
  }
  FoldReport report;
  for (const auto& f : per_fold) report.folds.push_back(summarize(f));
  report.overall = summarize(all);
  return report;
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw InvalidInput("paired_t_test: samples have different lengths");
  const std::size_t n = a.size();
  if (n < 2) throw UndefinedTest("paired t-test needs at least two pairs");
  std::vector<double> diff(n);
  for (std::size_t k = 0; k < n; ++k) diff[k] = a[k] - b[k];
  const SummaryStats s = summarize(diff);
  // Differences equal up to rounding count as zero variance.
  if (!(s.std > 1e-12 * std::max(1.0, std::abs(s.mean))))
    throw UndefinedTest("paired t-test undefined: differences have zero variance");

  TTestResult r;
  r.n = n;
  r.t = s.mean / (s.std / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace crf_refine
