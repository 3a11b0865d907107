#include "crf_refine/dense_crf.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "crf_refine/error.hpp"
#include "crf_refine/gaussian_filter.hpp"

namespace crf_refine {

UnaryField::UnaryField(std::size_t height, std::size_t width, std::size_t labels,
                       std::vector<float> u)
    : height_(height), width_(width), labels_(labels), u_(std::move(u)) {
  if (height_ == 0 || width_ == 0) throw InvalidInput("unary field dimensions must be >= 1");
  if (labels_ < 2 || labels_ > 256) throw InvalidInput("unary field needs 2..256 labels");
  if (u_.size() != height_ * width_ * labels_)
    throw InvalidInput("unary field size does not match height * width * labels");
  for (float v : u_)
    if (!std::isfinite(v) || v < 0.0f) throw InvalidInput("unaries must be finite and >= 0");
}

UnaryField unary_from_probabilities(const ProbabilityMap& prob, double floor) {
  if (!(floor > 0.0 && floor < 1.0))
    throw InvalidParameter("probability floor must lie in (0, 1)");
  const auto p = prob.values();
  std::vector<float> u(p.size());
  for (std::size_t k = 0; k < p.size(); ++k)
    u[k] = static_cast<float>(-std::log(std::max(static_cast<double>(p[k]), floor)));
  // -ln(1) may come out as -0.0f
  for (float& v : u)
    if (!(v > 0.0f)) v = 0.0f;
  return UnaryField(prob.height(), prob.width(), prob.labels(), std::move(u));
}

double energy(const LabelMask& labels, const UnaryField& unary, const SliceImage& image,
              const CrfParams& params, const EnergyOptions& options) {
  params.validate();
  if (labels.height() != unary.height() || labels.width() != unary.width() ||
      image.height() != unary.height() || image.width() != unary.width())
    throw InvalidInput("energy: mask, unary and image shapes disagree");
  const std::size_t n = unary.pixel_count();
  if (n > options.max_pixels)
    throw SizeError("exact energy refused for " + std::to_string(n) + " pixels (cap " +
                    std::to_string(options.max_pixels) + ")");

  const auto x = labels.values();
  for (std::uint8_t l : x)
    if (l >= unary.labels()) throw InvalidInput("mask label outside the unary label range");

  double e = 0.0;
  for (std::size_t i = 0; i < n; ++i) e += unary.at(i, x[i]);
  if (params.w1 == 0.0 && params.w2 == 0.0) return e;

  const std::size_t w = image.width();
  const double inv_a = 1.0 / (2.0 * params.sigma_alpha * params.sigma_alpha);
  const double inv_b = 1.0 / (2.0 * params.sigma_beta * params.sigma_beta);
  const double inv_g = 1.0 / (2.0 * params.sigma_gamma * params.sigma_gamma);
  const auto intensity = image.intensity();
  double pairwise = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ri = static_cast<double>(i / w);
    const double ci = static_cast<double>(i % w);
    for (std::size_t j = i + 1; j < n; ++j) {
      if (x[i] == x[j]) continue;
      const double dr = ri - static_cast<double>(j / w);
      const double dc = ci - static_cast<double>(j % w);
      const double dp2 = dr * dr + dc * dc;
      const double di = static_cast<double>(intensity[i]) - intensity[j];
      if (params.w1 != 0.0) pairwise += params.w1 * std::exp(-dp2 * inv_a - di * di * inv_b);
      if (params.w2 != 0.0) pairwise += params.w2 * std::exp(-dp2 * inv_g);
    }
  }
  return e + pairwise;
}

namespace {

// One Gaussian kernel of the pairwise term, bound to a slice.
class PairwiseKernel {
 public:
  PairwiseKernel(FeatureField features, double weight, FilterMode mode)
      : features_(std::move(features)), weight_(weight) {
    if (mode == FilterMode::Lattice) lattice_.emplace(features_);
  }

  double weight() const noexcept { return weight_; }

  // Kernel sum over every other pixel: the filtered value minus the pixel's
  // own contribution, which is exactly q for brute force and the lattice's
  // self-response estimate otherwise.
  void message(std::span<const float> q, std::size_t labels, std::vector<float>& out) const {
    if (lattice_) {
      out.resize(q.size());
      lattice_->apply(q, labels, out);
      const auto self = lattice_->self_response();
      for (std::size_t i = 0; i < self.size(); ++i)
        for (std::size_t l = 0; l < labels; ++l) out[i * labels + l] -= self[i] * q[i * labels + l];
    } else {
      out = brute_force_filter(features_, q, labels);
      for (std::size_t k = 0; k < q.size(); ++k) out[k] -= q[k];
    }
  }

 private:
  FeatureField features_;
  double weight_;
  std::optional<LatticeFilter> lattice_;
};

// Overwrites `logits` with the unnormalized exponentials.
void softmax_row(std::span<double> logits, std::span<float> out) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - top);
    sum += v;
  }
  const double inv = 1.0 / sum;
  for (std::size_t l = 0; l < logits.size(); ++l) out[l] = static_cast<float>(logits[l] * inv);
}

}  // namespace

ProbabilityMap mean_field_infer(const UnaryField& unary, const SliceImage& image,
                                const CrfParams& params, const MeanFieldOptions& options) {
  params.validate();
  if (image.height() != unary.height() || image.width() != unary.width())
    throw InvalidInput("mean_field_infer: unary and image shapes disagree");

  const std::size_t n = unary.pixel_count();
  const std::size_t labels = unary.labels();
  const auto u = unary.values();

  std::vector<PairwiseKernel> kernels;
  if (params.w1 > 0.0)
    kernels.emplace_back(build_features(image, KernelKind::Appearance, params), params.w1,
                         options.mode);
  if (params.w2 > 0.0)
    kernels.emplace_back(build_features(image, KernelKind::Smoothness, params), params.w2,
                         options.mode);

  std::vector<float> q(n * labels);
  std::vector<double> logits(labels);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < labels; ++l) logits[l] = -static_cast<double>(u[i * labels + l]);
    softmax_row(logits, std::span<float>(q).subspan(i * labels, labels));
  }

  std::vector<float> next(q.size());
  std::vector<double> message(q.size());
  std::vector<float> pair_sum;
  for (std::size_t it = 1; it <= params.iterations; ++it) {
    std::fill(message.begin(), message.end(), 0.0);
    for (const auto& kernel : kernels) {
      kernel.message(q, labels, pair_sum);
      for (std::size_t k = 0; k < q.size(); ++k) message[k] += kernel.weight() * pair_sum[k];
    }

    // Potts: the penalty for label l is the message mass on every other label.
    double max_change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t l = 0; l < labels; ++l) total += message[i * labels + l];
      for (std::size_t l = 0; l < labels; ++l)
        logits[l] = -static_cast<double>(u[i * labels + l]) - (total - message[i * labels + l]);
      softmax_row(logits, std::span<float>(next).subspan(i * labels, labels));
      for (std::size_t l = 0; l < labels; ++l)
        max_change = std::max(max_change,
                              std::abs(static_cast<double>(next[i * labels + l]) - q[i * labels + l]));
    }
    q.swap(next);
    if (options.observer) options.observer(it, q);
    if (options.early_stop_tolerance > 0.0 && max_change < options.early_stop_tolerance) break;
  }

  return ProbabilityMap(unary.height(), unary.width(), labels, std::move(q));
}

LabelMask refine_segmentation(const ProbabilityMap& prob, const SliceImage& image,
                              const CrfParams& params, const RefineOptions& options) {
  if (prob.height() != image.height() || prob.width() != image.width())
    throw InvalidInput("refine_segmentation: probability map is " +
                       std::to_string(prob.height()) + "x" + std::to_string(prob.width()) +
                       " but image is " + std::to_string(image.height()) + "x" +
                       std::to_string(image.width()));
  const UnaryField unary = unary_from_probabilities(prob, options.floor);
  return argmax_labels(mean_field_infer(unary, image, params, options.inference));
}

void IterateAudit::observe(std::span<const float> q) {
  ++iterates;
  for (std::size_t i = 0; i + labels <= q.size(); i += labels) {
    double sum = 0.0;
    for (std::size_t l = 0; l < labels; ++l) {
      const float v = q[i + l];
      sum += v;
      min_entry = std::min(min_entry, v);
      max_entry = std::max(max_entry, v);
    }
    max_sum_error = std::max(max_sum_error, std::abs(sum - 1.0));
  }
}

std::function<void(std::size_t, std::span<const float>)> IterateAudit::observer() {
  return [this](std::size_t, std::span<const float> q) { observe(q); };
}

}  // namespace crf_refine
