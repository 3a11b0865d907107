#pragma once

// Gaussian filtering of per-point value vectors in a bandwidth-scaled feature
// space. Both filters compute (approximately, for the lattice)
//
//   out_i = sum_j exp(-|f_i - f_j|^2 / 2) * v_j      (j = i included)
//
// with unit bandwidth; kernel bandwidths are folded into the features.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "crf_refine/crf_params.hpp"
#include "crf_refine/tensor.hpp"

namespace crf_refine {

enum class KernelKind { Appearance, Smoothness };

// Row-major (point, dimension) feature matrix. Dimension is 2 (smoothness:
// x, y) or 3 (appearance: x, y, intensity).
class FeatureField {
 public:
  FeatureField(std::size_t n_points, std::size_t dim, std::vector<float> feat);

  std::size_t n_points() const noexcept { return n_points_; }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const float> values() const noexcept { return feat_; }
  std::span<const float> point(std::size_t i) const {
    return std::span<const float>(feat_).subspan(i * dim_, dim_);
  }

 private:
  std::size_t n_points_;
  std::size_t dim_;
  std::vector<float> feat_;
};

// appearance: (col / sigma_alpha, row / sigma_alpha, I / sigma_beta)
// smoothness: (col / sigma_gamma, row / sigma_gamma)
FeatureField build_features(const SliceImage& image, KernelKind kind, const CrfParams& params);

// Unit-bandwidth Gaussian kernel between two feature vectors.
double gaussian_kernel(std::span<const float> a, std::span<const float> b);

// Exact O(N^2) summation, accumulated in double. `values` is point-major with
// `value_width` entries per point.
std::vector<float> brute_force_filter(const FeatureField& features, std::span<const float> values,
                                      std::size_t value_width);

// Permutohedral-lattice approximation of brute_force_filter: splat each point
// onto the vertices of its enclosing simplex, blur along the d + 1 lattice
// axes, slice back with the same barycentric weights. Output is rescaled so
// that it estimates the raw (unnormalized) kernel sum.
//
// Immutable once built; apply() may be called concurrently.
class LatticeFilter {
 public:
  explicit LatticeFilter(const FeatureField& features);

  std::size_t n_points() const noexcept { return n_points_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t vertex_count() const noexcept { return vertex_count_; }

  std::vector<float> apply(std::span<const float> values, std::size_t value_width) const;

  // Same as apply() writing into caller storage; `out` must have the size of `values`.
  void apply(std::span<const float> values, std::size_t value_width, std::span<float> out) const;

  // Estimated weight of each point's own value in its output, i.e. the
  // lattice's stand-in for the unit self-kernel.
  std::span<const float> self_response() const noexcept { return self_response_; }

 private:
  template <std::size_t D>
  void build(const FeatureField& features);

  std::size_t n_points_ = 0;
  std::size_t dim_ = 0;
  std::size_t vertex_count_ = 0;
  double output_scale_ = 1.0;
  // (dim + 1) enclosing-simplex vertices and barycentric weights per point.
  std::vector<std::uint32_t> splat_vertex_;
  std::vector<float> splat_weight_;
  std::vector<float> self_response_;
  // Two neighbours per (axis, vertex), axis-major; vertex_count_ (a zero
  // vertex) when absent.
  std::vector<std::uint32_t> neighbours_;
};

std::vector<float> lattice_filter(const LatticeFilter& filter, std::span<const float> values,
                                  std::size_t value_width);

}  // namespace crf_refine
