#include "crf_refine/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "crf_refine/error.hpp"

namespace crf_refine {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw InvalidInput("tensor extent must be >= 1");
    if (n > std::numeric_limits<std::size_t>::max() / d)
      throw InvalidInput("tensor element count overflows");
    n *= d;
  }
  return n;
}

void check_labels(std::size_t labels) {
  if (labels < 2 || labels > 256)
    throw InvalidInput("label count must be in [2, 256], got " + std::to_string(labels));
}

void check_plane(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw InvalidInput("slice dimensions must be >= 1");
}

}  // namespace

std::size_t dtype_size(DType dtype) noexcept {
  switch (dtype) {
    case DType::Float32: return 4;
    case DType::UInt8: return 1;
    case DType::UInt16: return 2;
  }
  return 0;
}

const char* dtype_name(DType dtype) noexcept {
  switch (dtype) {
    case DType::Float32: return "float32";
    case DType::UInt8: return "uint8";
    case DType::UInt16: return "uint16";
  }
  return "?";
}

// ---------------------------------------------------------------- DenseTensor

DenseTensor::DenseTensor(std::vector<std::size_t> dims, Storage data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (dims_.empty()) throw InvalidInput("tensor must have at least one dimension");
  const std::size_t n = checked_product(dims_);
  const std::size_t stored = std::visit([](const auto& v) { return v.size(); }, data_);
  if (n != stored)
    throw InvalidInput("tensor dims describe " + std::to_string(n) + " elements but data has " +
                       std::to_string(stored));
}

std::size_t DenseTensor::element_count() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, data_);
}

DType DenseTensor::dtype() const noexcept {
  switch (data_.index()) {
    case 0: return DType::Float32;
    case 1: return DType::UInt8;
    default: return DType::UInt16;
  }
}

template <typename T>
std::span<const T> DenseTensor::values() const {
  const auto* v = std::get_if<std::vector<T>>(&data_);
  if (v == nullptr)
    throw InvalidInput(std::string("tensor holds ") + dtype_name(dtype()) +
                       ", requested another element type");
  return *v;
}

template std::span<const float> DenseTensor::values<float>() const;
template std::span<const std::uint8_t> DenseTensor::values<std::uint8_t>() const;
template std::span<const std::uint16_t> DenseTensor::values<std::uint16_t>() const;

bool operator==(const DenseTensor& a, const DenseTensor& b) {
  if (a.dims_ != b.dims_ || a.data_.index() != b.data_.index()) return false;
  return std::visit(
      [&](const auto& av) {
        using Vec = std::decay_t<decltype(av)>;
        const auto& bv = std::get<Vec>(b.data_);
        return av.size() == bv.size() &&
               (av.empty() ||
                std::memcmp(av.data(), bv.data(), av.size() * sizeof(typename Vec::value_type)) ==
                    0);
      },
      a.data_);
}

// ----------------------------------------------------------------- SliceImage

SliceImage::SliceImage(std::size_t height, std::size_t width, std::vector<float> intensity)
    : height_(height), width_(width), intensity_(std::move(intensity)) {
  check_plane(height, width);
  if (intensity_.size() != height * width)
    throw InvalidInput("image has " + std::to_string(intensity_.size()) + " values, expected " +
                       std::to_string(height * width));
  for (float v : intensity_)
    if (!std::isfinite(v)) throw InvalidInput("image intensities must be finite");
}

SliceImage SliceImage::from_tensor(const DenseTensor& t) {
  if (t.rank() != 2) throw InvalidInput("image tensor must be 2-D (H x W)");
  std::vector<float> out(t.element_count());
  std::visit(
      [&](const auto& v) { std::transform(v.begin(), v.end(), out.begin(), [](auto x) {
                             return static_cast<float>(x);
                           }); },
      t.storage());
  return SliceImage(t.dims()[0], t.dims()[1], std::move(out));
}

DenseTensor SliceImage::to_tensor() const { return DenseTensor({height_, width_}, intensity_); }

// ------------------------------------------------------------- ProbabilityMap

ProbabilityMap::ProbabilityMap(std::size_t height, std::size_t width, std::size_t labels,
                               std::vector<float> prob)
    : height_(height), width_(width), labels_(labels), prob_(std::move(prob)) {
  check_plane(height, width);
  check_labels(labels);
  if (prob_.size() != height * width * labels)
    throw InvalidInput("probability map has " + std::to_string(prob_.size()) +
                       " values, expected " + std::to_string(height * width * labels));
  for (std::size_t i = 0; i < height * width; ++i) {
    double sum = 0.0;
    for (std::size_t l = 0; l < labels; ++l) {
      const float p = prob_[i * labels + l];
      if (!(p >= 0.0f && p <= 1.0f))
        throw InvalidInput("probability at pixel " + std::to_string(i) + " outside [0, 1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kIngestTolerance)
      throw InvalidInput("probabilities at pixel " + std::to_string(i) + " sum to " +
                         std::to_string(sum));
  }
}

ProbabilityMap ProbabilityMap::normalized(std::size_t height, std::size_t width,
                                          std::size_t labels, std::vector<float> prob) {
  ProbabilityMap map(height, width, labels, std::move(prob));
  for (std::size_t i = 0; i < map.pixel_count(); ++i) {
    float* px = map.prob_.data() + i * labels;
    double sum = 0.0;
    for (std::size_t l = 0; l < labels; ++l) sum += px[l];
    for (std::size_t l = 0; l < labels; ++l) px[l] = static_cast<float>(px[l] / sum);
  }
  return map;
}

ProbabilityMap ProbabilityMap::from_tensor(const DenseTensor& t) {
  if (t.rank() != 3) throw InvalidInput("probability tensor must be 3-D (H x W x L)");
  const auto v = t.values<float>();
  return normalized(t.dims()[0], t.dims()[1], t.dims()[2], {v.begin(), v.end()});
}

DenseTensor ProbabilityMap::to_tensor() const {
  return DenseTensor({height_, width_, labels_}, prob_);
}

// ------------------------------------------------------------------ LabelMask

LabelMask::LabelMask(std::size_t height, std::size_t width, std::size_t labels,
                     std::vector<std::uint8_t> label)
    : height_(height), width_(width), labels_(labels), label_(std::move(label)) {
  check_plane(height, width);
  check_labels(labels);
  if (label_.size() != height * width)
    throw InvalidInput("mask has " + std::to_string(label_.size()) + " values, expected " +
                       std::to_string(height * width));
  for (std::uint8_t v : label_)
    if (v >= labels)
      throw InvalidInput("mask value " + std::to_string(v) + " is not a valid label below " +
                         std::to_string(labels));
}

LabelMask LabelMask::from_tensor(const DenseTensor& t, std::size_t labels) {
  if (t.rank() != 2) throw InvalidInput("mask tensor must be 2-D (H x W)");
  const auto v = t.values<std::uint8_t>();
  if (labels == 0) {
    const std::size_t max_value = *std::max_element(v.begin(), v.end());
    labels = std::max<std::size_t>(2, max_value + 1);
  }
  return LabelMask(t.dims()[0], t.dims()[1], labels, {v.begin(), v.end()});
}

DenseTensor LabelMask::to_tensor() const { return DenseTensor({height_, width_}, label_); }

// ----------------------------------------------------------------- operations

ProbabilityMap softmax_normalize(std::size_t height, std::size_t width, std::size_t labels,
                                 std::span<const float> scores) {
  check_plane(height, width);
  check_labels(labels);
  if (scores.size() != height * width * labels)
    throw InvalidInput("score field size does not match height * width * labels");
  std::vector<float> out(scores.size());
  std::vector<double> e(labels);
  for (std::size_t i = 0; i < height * width; ++i) {
    const auto px = scores.subspan(i * labels, labels);
    double top = -std::numeric_limits<double>::infinity();
    for (float s : px) {
      if (!std::isfinite(s)) throw InvalidInput("scores must be finite");
      top = std::max(top, static_cast<double>(s));
    }
    double sum = 0.0;
    for (std::size_t l = 0; l < labels; ++l) {
      e[l] = std::exp(static_cast<double>(px[l]) - top);
      sum += e[l];
    }
    for (std::size_t l = 0; l < labels; ++l) out[i * labels + l] = static_cast<float>(e[l] / sum);
  }
  return ProbabilityMap(height, width, labels, std::move(out));
}

LabelMask argmax_labels(const ProbabilityMap& prob) {
  std::vector<std::uint8_t> out(prob.pixel_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto px = prob.pixel(i);
    // max_element returns the first maximum, which is the lowest-index tie-break.
    out[i] = static_cast<std::uint8_t>(std::max_element(px.begin(), px.end()) - px.begin());
  }
  return LabelMask(prob.height(), prob.width(), prob.labels(), std::move(out));
}

std::vector<std::uint8_t> rescale_to_byte_range(std::span<const float> field) {
  std::vector<std::uint8_t> out(field.size(), 0);
  if (field.empty()) return out;
  for (float v : field)
    if (!std::isfinite(v)) throw InvalidInput("field must be finite");
  const auto [lo_it, hi_it] = std::minmax_element(field.begin(), field.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (hi == lo) return out;
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double scaled = (field[i] - lo) / (hi - lo) * 255.0;
    out[i] = static_cast<std::uint8_t>(std::clamp(std::floor(scaled + 0.5), 0.0, 255.0));
  }
  return out;
}

}  // namespace crf_refine
