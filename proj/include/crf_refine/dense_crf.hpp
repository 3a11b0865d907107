#pragma once

// Fully connected CRF over one 2-D slice: unaries from upstream class
// probabilities, a Potts pairwise term built from Gaussian kernels, and
// parallel mean-field inference.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "crf_refine/crf_params.hpp"
#include "crf_refine/tensor.hpp"

namespace crf_refine {

inline constexpr double kDefaultProbabilityFloor = 1e-8;

// u[pixel * labels + label] = -ln(max(p, floor)); finite and >= 0.
class UnaryField {
 public:
  UnaryField(std::size_t height, std::size_t width, std::size_t labels, std::vector<float> u);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t labels() const noexcept { return labels_; }
  std::size_t pixel_count() const noexcept { return height_ * width_; }
  std::span<const float> values() const noexcept { return u_; }
  float at(std::size_t pixel, std::size_t label) const { return u_[pixel * labels_ + label]; }

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t labels_;
  std::vector<float> u_;
};

UnaryField unary_from_probabilities(const ProbabilityMap& prob,
                                    double floor = kDefaultProbabilityFloor);

struct EnergyOptions {
  // Exact evaluation is O(N^2); grids with more pixels than this are refused.
  std::size_t max_pixels = 64 * 64;
};

// E(x) = sum_i u_i(x_i) + sum_{i<j, x_i != x_j} [w1 k_app(i, j) + w2 k_smooth(i, j)]
double energy(const LabelMask& labels, const UnaryField& unary, const SliceImage& image,
              const CrfParams& params, const EnergyOptions& options = {});

enum class FilterMode { Lattice, BruteForce };

struct MeanFieldOptions {
  FilterMode mode = FilterMode::Lattice;
  // Stop once max |Q_new - Q_old| falls below this; 0 disables early stopping.
  double early_stop_tolerance = 0.0;
  // Called with every iterate (after the update of iteration `iteration`,
  // counting from 1). Q is pixel-major with labels innermost.
  std::function<void(std::size_t iteration, std::span<const float> q)> observer;
};

// Q0 = softmax(-u); each iteration filters Q per label with every active
// kernel, drops the self-contribution, applies the Potts compatibility and
// renormalizes. All pixels update from the previous iterate.
ProbabilityMap mean_field_infer(const UnaryField& unary, const SliceImage& image,
                                const CrfParams& params, const MeanFieldOptions& options = {});

struct RefineOptions {
  double floor = kDefaultProbabilityFloor;
  MeanFieldOptions inference{};
};

LabelMask refine_segmentation(const ProbabilityMap& prob, const SliceImage& image,
                              const CrfParams& params, const RefineOptions& options = {});

// Tracks distribution validity across observed iterates.
struct IterateAudit {
  std::size_t labels = 0;
  std::size_t iterates = 0;
  double max_sum_error = 0.0;
  float min_entry = std::numeric_limits<float>::infinity();
  float max_entry = -std::numeric_limits<float>::infinity();

  explicit IterateAudit(std::size_t label_count) : labels(label_count) {}

  void observe(std::span<const float> q);
  bool valid(double sum_tolerance = 1e-6) const {
    return iterates > 0 && max_sum_error <= sum_tolerance && min_entry >= 0.0f &&
           max_entry <= 1.0f;
  }
  // Observer suitable for MeanFieldOptions; the audit must outlive the call.
  std::function<void(std::size_t, std::span<const float>)> observer();
};

}  // namespace crf_refine
