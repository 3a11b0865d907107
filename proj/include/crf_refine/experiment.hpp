#pragma once

// Evaluation protocol: seeded case-level folds, intensity windowing, synthetic
// slice fixtures and CRF parameter sweeps.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crf_refine/crf_params.hpp"
#include "crf_refine/dense_crf.hpp"
#include "crf_refine/metrics.hpp"
#include "crf_refine/tensor.hpp"

namespace crf_refine {

// SplitMix64; used to expand seeds.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() noexcept;

 private:
  std::uint64_t state_;
};

// xoshiro256** seeded by four SplitMix64 draws. Fixed here so that fold
// assignments and fixtures reproduce independently of the standard library.
class Xoshiro256 {
 public:
  explicit Xoshiro256(std::uint64_t seed);
  std::uint64_t next() noexcept;
  // Top 53 bits as a double in [0, 1).
  double uniform() noexcept;
  // next() % bound; bound >= 1.
  std::uint64_t below(std::uint64_t bound) noexcept;
  // Box-Muller, one draw per call (the sine half is discarded).
  double normal(double mean, double stddev) noexcept;

 private:
  std::uint64_t s_[4];
};

struct FoldAssignment {
  std::size_t k = 5;
  std::map<std::string, std::size_t> mapping;  // case_id -> fold in [0, k)

  std::vector<std::vector<std::string>> folds() const;
};

// Sorts the ids, Fisher-Yates shuffles them with Xoshiro256(seed) (for
// i = n-1 .. 1, swap i with below(i + 1)), then deals them round-robin:
// shuffled position p goes to fold p % k.
FoldAssignment assign_folds(std::vector<std::string> case_ids, std::size_t k, std::uint64_t seed);

struct HuWindow {
  double center = -500.0;  // lung window
  double width = 1500.0;
};

// Clamps HU to [center - width/2, center + width/2] and maps affinely to [0, 255].
SliceImage hu_window(std::size_t height, std::size_t width, std::span<const float> raw_hu,
                     const HuWindow& window = {});

struct Fixture {
  SliceImage image;
  ProbabilityMap prob;
  LabelMask truth;
  std::string case_id;
  std::size_t slice_index = 0;
};

struct FixtureConfig {
  double lung_intensity = 30.0;
  double body_intensity = 180.0;
  double intensity_noise = 10.0;
  std::size_t slices_per_case = 1;
};

// Fixture `index` of the corpus generated from `seed`; depends only on
// (seed, index, shape, noise, config).
Fixture synth_fixture(std::uint64_t seed, std::size_t index, std::size_t height,
                      std::size_t width, double noise_level, const FixtureConfig& config = {});

std::vector<Fixture> synth_fixtures(std::uint64_t seed, std::size_t count, std::size_t height,
                                    std::size_t width, double noise_level,
                                    const FixtureConfig& config = {});

struct SweepGrid {
  std::vector<double> w1{3.0};
  std::vector<double> w2{0.0};
  std::vector<double> sigma_alpha{5.0};
  std::vector<double> sigma_beta{26.0};
  std::vector<double> sigma_gamma{3.0};
  std::vector<std::size_t> iterations{10};

  // Cartesian product, w1 varying slowest and iterations fastest.
  std::vector<CrfParams> points() const;
};

struct SweepOptions {
  double floor = kDefaultProbabilityFloor;
  FilterMode mode = FilterMode::Lattice;
  std::size_t threads = 1;
};

struct SweepEntry {
  CrfParams params;
  double mean_dsc = 0.0;
  std::size_t grid_index = 0;
};

// Per-case scores (case ids ascending) for predictions aligned with `fixtures`.
std::vector<CaseScore> score_fixtures(std::span<const Fixture> fixtures,
                                      std::span<const LabelMask> predictions,
                                      std::uint8_t positive_label = 1);

// Refines every fixture at every grid point; returns entries ranked by mean
// case Dice, descending, ties kept in grid order.
std::vector<SweepEntry> sweep(const SweepGrid& grid, std::span<const Fixture> fixtures,
                              std::uint8_t positive_label = 1, const SweepOptions& options = {});

}  // namespace crf_refine
