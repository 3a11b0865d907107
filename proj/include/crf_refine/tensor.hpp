#pragma once

// Dense row-major grids and the slice-level views built on them.

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

namespace crf_refine {

enum class DType : std::uint8_t { Float32 = 0x01, UInt8 = 0x02, UInt16 = 0x03 };

std::size_t dtype_size(DType dtype) noexcept;
const char* dtype_name(DType dtype) noexcept;

// Row-major tensor, outermost extent first. Equality is bitwise on the payload,
// so NaN payloads compare equal to themselves and -0.0f != +0.0f.
class DenseTensor {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<std::uint8_t>,
                               std::vector<std::uint16_t>>;

  DenseTensor(std::vector<std::size_t> dims, Storage data);

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t element_count() const noexcept;
  DType dtype() const noexcept;

  // Throws InvalidInput if T does not match the stored element type.
  template <typename T>
  std::span<const T> values() const;

  const Storage& storage() const noexcept { return data_; }

  friend bool operator==(const DenseTensor& a, const DenseTensor& b);

 private:
  std::vector<std::size_t> dims_;
  Storage data_;
};

extern template std::span<const float> DenseTensor::values<float>() const;
extern template std::span<const std::uint8_t> DenseTensor::values<std::uint8_t>() const;
extern template std::span<const std::uint16_t> DenseTensor::values<std::uint16_t>() const;

// Grayscale slice, intensities expected on the 0..255 scale.
class SliceImage {
 public:
  SliceImage(std::size_t height, std::size_t width, std::vector<float> intensity);

  // Accepts a 2-D tensor of any dtype; values are converted to float.
  static SliceImage from_tensor(const DenseTensor& t);
  DenseTensor to_tensor() const;

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t pixel_count() const noexcept { return intensity_.size(); }
  std::span<const float> intensity() const noexcept { return intensity_; }
  float at(std::size_t row, std::size_t col) const { return intensity_[row * width_ + col]; }

  friend bool operator==(const SliceImage&, const SliceImage&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::vector<float> intensity_;
};

// Per-pixel label distribution, labels innermost: prob[pixel * labels + label].
class ProbabilityMap {
 public:
  static constexpr double kIngestTolerance = 1e-5;

  // Validates range and per-pixel sums (within kIngestTolerance) without
  // modifying values.
  ProbabilityMap(std::size_t height, std::size_t width, std::size_t labels,
                 std::vector<float> prob);

  // Validates as above, then renormalizes every pixel to sum to one.
  static ProbabilityMap normalized(std::size_t height, std::size_t width, std::size_t labels,
                                   std::vector<float> prob);

  // H x W x L float32 tensor.
  static ProbabilityMap from_tensor(const DenseTensor& t);
  DenseTensor to_tensor() const;

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t labels() const noexcept { return labels_; }
  std::size_t pixel_count() const noexcept { return height_ * width_; }
  std::span<const float> values() const noexcept { return prob_; }
  std::span<const float> pixel(std::size_t i) const {
    return std::span<const float>(prob_).subspan(i * labels_, labels_);
  }

  friend bool operator==(const ProbabilityMap&, const ProbabilityMap&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t labels_;
  std::vector<float> prob_;
};

// Hard label assignment. Label 0 is background; label 1 is the foreground
// (lung) class in two-class use.
class LabelMask {
 public:
  LabelMask(std::size_t height, std::size_t width, std::size_t labels,
            std::vector<std::uint8_t> label);

  // 2-D uint8 tensor; `labels` defaults to max(value) + 1, at least 2.
  static LabelMask from_tensor(const DenseTensor& t, std::size_t labels = 0);
  DenseTensor to_tensor() const;

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t labels() const noexcept { return labels_; }
  std::size_t pixel_count() const noexcept { return label_.size(); }
  std::span<const std::uint8_t> values() const noexcept { return label_; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return label_[row * width_ + col]; }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t labels_;
  std::vector<std::uint8_t> label_;
};

// Numerically stable per-pixel softmax. `scores` is pixel-major, labels innermost.
ProbabilityMap softmax_normalize(std::size_t height, std::size_t width, std::size_t labels,
                                 std::span<const float> scores);

// Per-pixel argmax; ties go to the lowest label index.
LabelMask argmax_labels(const ProbabilityMap& prob);

// Affine map of [min, max] onto [0, 255], rounded half-up. A constant field maps to 0.
std::vector<std::uint8_t> rescale_to_byte_range(std::span<const float> field);

}  // namespace crf_refine
