#include "crf_refine/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include "crf_refine/error.hpp"
#include "crf_refine/parallel.hpp"

namespace crf_refine {

// ----------------------------------------------------------------------- rng

std::uint64_t SplitMix64::next() noexcept {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {
constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
}  // namespace

Xoshiro256::Xoshiro256(std::uint64_t seed) {
  SplitMix64 sm(seed);
  for (auto& s : s_) s = sm.next();
}

std::uint64_t Xoshiro256::next() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Xoshiro256::uniform() noexcept {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

std::uint64_t Xoshiro256::below(std::uint64_t bound) noexcept { return next() % bound; }

double Xoshiro256::normal(double mean, double stddev) noexcept {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// --------------------------------------------------------------------- folds

std::vector<std::vector<std::string>> FoldAssignment::folds() const {
  std::vector<std::vector<std::string>> out(k);
  for (const auto& [id, fold] : mapping) out.at(fold).push_back(id);
  return out;
}

FoldAssignment assign_folds(std::vector<std::string> case_ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InvalidParameter("fold count must be >= 2");
  if (case_ids.size() < k)
    throw InvalidInput("need at least " + std::to_string(k) + " cases for " + std::to_string(k) +
                       " folds, got " + std::to_string(case_ids.size()));
  std::sort(case_ids.begin(), case_ids.end());
  const auto dup = std::adjacent_find(case_ids.begin(), case_ids.end());
  if (dup != case_ids.end()) throw InvalidInput("duplicate case id '" + *dup + "'");

  Xoshiro256 rng(seed);
  for (std::size_t i = case_ids.size() - 1; i > 0; --i)
    std::swap(case_ids[i], case_ids[rng.below(i + 1)]);

  FoldAssignment a;
  a.k = k;
  for (std::size_t p = 0; p < case_ids.size(); ++p) a.mapping.emplace(case_ids[p], p % k);
  return a;
}

// ----------------------------------------------------------------- windowing

SliceImage hu_window(std::size_t height, std::size_t width, std::span<const float> raw_hu,
                     const HuWindow& window) {
  if (!(window.width > 0.0)) throw InvalidParameter("HU window width must be > 0");
  if (raw_hu.size() != height * width) throw InvalidInput("raw HU field size mismatch");
  const double lo = window.center - window.width / 2.0;
  const double hi = window.center + window.width / 2.0;
  std::vector<float> out(raw_hu.size());
  for (std::size_t i = 0; i < raw_hu.size(); ++i) {
    if (!std::isfinite(raw_hu[i])) throw InvalidInput("raw HU values must be finite");
    const double v = std::clamp(static_cast<double>(raw_hu[i]), lo, hi);
    out[i] = static_cast<float>((v - lo) / window.width * 255.0);
  }
  return SliceImage(height, width, std::move(out));
}

// ------------------------------------------------------------------ fixtures

namespace {

struct Ellipse {
  double cy, cx, ry, rx;
  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry;
    const double dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

}  // namespace

Fixture synth_fixture(std::uint64_t seed, std::size_t index, std::size_t height,
                      std::size_t width, double noise_level, const FixtureConfig& config) {
  if (height < 16 || width < 16) throw InvalidParameter("fixture dimensions must be >= 16");
  if (!(noise_level >= 0.0 && noise_level <= 1.0))
    throw InvalidParameter("noise level must lie in [0, 1]");
  if (config.slices_per_case == 0) throw InvalidParameter("slices_per_case must be >= 1");

  SplitMix64 mix(seed);
  const std::uint64_t base = mix.next();
  Xoshiro256 rng(base ^ (0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1)));

  const double h = static_cast<double>(height);
  const double w = static_cast<double>(width);
  const std::size_t blob_count = 1 + rng.below(2);
  std::vector<Ellipse> blobs;
  for (std::size_t b = 0; b < blob_count; ++b) {
    // One blob sits near the centre; a pair sits left and right like two lungs.
    const double anchor = blob_count == 1 ? 0.5 : (b == 0 ? 0.3 : 0.7);
    Ellipse e{};
    e.cy = h * (0.4 + 0.2 * rng.uniform());
    e.cx = w * (anchor + 0.1 * (rng.uniform() - 0.5));
    e.ry = h * (0.15 + 0.12 * rng.uniform());
    e.rx = w * (blob_count == 1 ? 0.15 + 0.12 * rng.uniform() : 0.08 + 0.08 * rng.uniform());
    blobs.push_back(e);
  }

  const std::size_t n = height * width;
  std::vector<std::uint8_t> truth(n);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double y = static_cast<double>(r) + 0.5;
      const double x = static_cast<double>(c) + 0.5;
      truth[r * width + c] = std::any_of(blobs.begin(), blobs.end(),
                                         [&](const Ellipse& e) { return e.contains(y, x); });
    }

  // Confidence in the true label falls off near boundaries: 3x3 binomial
  // weights (edge-clamped) give the fraction of the neighbourhood sharing the
  // pixel's label, mapped to [0.575, 0.95].
  static constexpr double kTap[3] = {0.25, 0.5, 0.25};
  std::vector<float> prob(n * 2);
  std::vector<float> image(n);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      double agree = 0.0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const auto rr = static_cast<std::size_t>(
              std::clamp<long long>(static_cast<long long>(r) + dr, 0, static_cast<long long>(height) - 1));
          const auto cc = static_cast<std::size_t>(
              std::clamp<long long>(static_cast<long long>(c) + dc, 0, static_cast<long long>(width) - 1));
          if (truth[rr * width + cc] == truth[i]) agree += kTap[dr + 1] * kTap[dc + 1];
        }
      double own = 0.55 + 0.4 * agree;
      if (rng.uniform() < noise_level) own = 1.0 - own;
      const auto own_f = static_cast<float>(own);
      prob[i * 2 + truth[i]] = own_f;
      prob[i * 2 + (1 - truth[i])] = 1.0f - own_f;

      const double mean = truth[i] ? config.lung_intensity : config.body_intensity;
      image[i] = static_cast<float>(
          std::clamp(rng.normal(mean, config.intensity_noise), 0.0, 255.0));
    }
  }

  char id[32];
  std::snprintf(id, sizeof id, "case_%04zu", index / config.slices_per_case);
  return Fixture{SliceImage(height, width, std::move(image)),
                 ProbabilityMap::normalized(height, width, 2, std::move(prob)),
                 LabelMask(height, width, 2, std::move(truth)), id,
                 index % config.slices_per_case};
}

std::vector<Fixture> synth_fixtures(std::uint64_t seed, std::size_t count, std::size_t height,
                                    std::size_t width, double noise_level,
                                    const FixtureConfig& config) {
  if (count == 0) throw InvalidParameter("fixture count must be >= 1");
  std::vector<Fixture> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(synth_fixture(seed, k, height, width, noise_level, config));
  return out;
}

// --------------------------------------------------------------------- sweep

std::vector<CrfParams> SweepGrid::points() const {
  if (w1.empty() || w2.empty() || sigma_alpha.empty() || sigma_beta.empty() ||
      sigma_gamma.empty() || iterations.empty())
    throw InvalidParameter("every sweep grid axis needs at least one value");
  std::vector<CrfParams> out;
  for (double a : w1)
    for (double b : w2)
      for (double sa : sigma_alpha)
        for (double sb : sigma_beta)
          for (double sg : sigma_gamma)
            for (std::size_t it : iterations) {
              CrfParams p{a, b, sa, sb, sg, it};
              p.validate();
              out.push_back(p);
            }
  return out;
}

std::vector<CaseScore> score_fixtures(std::span<const Fixture> fixtures,
                                      std::span<const LabelMask> predictions,
                                      std::uint8_t positive_label) {
  if (fixtures.size() != predictions.size())
    throw InvalidInput("one prediction per fixture required");
  std::map<std::string, std::vector<SlicePair>> by_case;
  for (std::size_t k = 0; k < fixtures.size(); ++k)
    by_case[fixtures[k].case_id].push_back({&predictions[k], &fixtures[k].truth});
  std::vector<CaseScore> scores;
  for (const auto& [id, slices] : by_case) scores.push_back(case_dice(id, slices, positive_label));
  return scores;
}

std::vector<SweepEntry> sweep(const SweepGrid& grid, std::span<const Fixture> fixtures,
                              std::uint8_t positive_label, const SweepOptions& options) {
  if (fixtures.empty()) throw InvalidInput("sweep needs a non-empty corpus");
  const std::vector<CrfParams> points = grid.points();
  const std::size_t nf = fixtures.size();

  std::vector<std::optional<LabelMask>> masks(points.size() * nf);
  RefineOptions refine;
  refine.floor = options.floor;
  refine.inference.mode = options.mode;
  parallel_for(masks.size(), options.threads, [&](std::size_t job) {
    const Fixture& f = fixtures[job % nf];
    masks[job] = refine_segmentation(f.prob, f.image, points[job / nf], refine);
  });

  std::vector<SweepEntry> entries;
  for (std::size_t g = 0; g < points.size(); ++g) {
    std::vector<LabelMask> preds;
    preds.reserve(nf);
    for (std::size_t k = 0; k < nf; ++k) preds.push_back(std::move(*masks[g * nf + k]));
    const auto scores = score_fixtures(fixtures, preds, positive_label);
    std::vector<double> dsc;
    for (const auto& s : scores) dsc.push_back(s.dsc);
    entries.push_back({points[g], summarize(dsc).mean, g});
  }
  std::stable_sort(entries.begin(), entries.end(), [](const SweepEntry& a, const SweepEntry& b) {
    return a.mean_dsc > b.mean_dsc;
  });
  return entries;
}

}  // namespace crf_refine
