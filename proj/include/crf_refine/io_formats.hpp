#pragma once

// On-disk formats.
//
// DTEN v1 tensor container (all integers little-endian, no padding):
//
//   offset  size       field
//   0       4          magic "DTEN"
//   4       1          version = 0x01
//   5       1          dtype: 0x01 float32, 0x02 uint8, 0x03 uint16
//   6       1          ndim (>= 1)
//   7       4 * ndim   extents, uint32 each, outermost first (each >= 1)
//   7+4n    ...        row-major payload, product(extents) * sizeof(dtype) bytes
//
// Masks travel as binary PGM (P5, maxval 255): 0 is background, >= 128 is
// foreground, anything in between is rejected. Overlays are binary PPM (P6).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crf_refine/error.hpp"
#include "crf_refine/experiment.hpp"
#include "crf_refine/tensor.hpp"

namespace crf_refine {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------- DTEN

struct TensorHeader {
  DType dtype;
  std::vector<std::size_t> dims;
  std::size_t payload_offset;
};

Bytes encode_tensor(const DenseTensor& t);
TensorHeader decode_tensor_header(std::span<const std::uint8_t> bytes);
DenseTensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const DenseTensor& t, const std::filesystem::path& path);
DenseTensor read_tensor(const std::filesystem::path& path);

// ----------------------------------------------------------------- PGM / PPM

struct PnmHeader {
  char kind;  // '5' for P5, '6' for P6
  std::size_t width;
  std::size_t height;
  std::size_t maxval;
  std::size_t payload_offset;
};

PnmHeader decode_pnm_header(std::span<const std::uint8_t> bytes);

Bytes encode_pgm_mask(const LabelMask& mask);
LabelMask decode_pgm_mask(std::span<const std::uint8_t> bytes);
void write_pgm_mask(const LabelMask& mask, const std::filesystem::path& path);
LabelMask read_pgm_mask(const std::filesystem::path& path);

// 8- or 16-bit grayscale P5 read as intensities.
SliceImage decode_pgm_image(std::span<const std::uint8_t> bytes);

Bytes encode_ppm(std::size_t height, std::size_t width, std::span<const std::uint8_t> rgb);

// Slice inputs by file extension: ".dten" or ".pgm".
SliceImage load_slice_image(const std::filesystem::path& path);
ProbabilityMap load_probability_map(const std::filesystem::path& path);
LabelMask load_label_mask(const std::filesystem::path& path);

// ------------------------------------------------------------------ manifest

inline constexpr int kManifestSchemaVersion = 1;

struct SliceEntry {
  std::string image_path;  // as written, relative to the manifest directory
  std::string prob_path;
  std::optional<std::string> truth_path;
};

struct CaseEntry {
  std::string case_id;
  std::vector<SliceEntry> slices;
};

struct CaseManifest {
  int schema_version = kManifestSchemaVersion;
  std::vector<CaseEntry> cases;
  std::optional<FoldAssignment> folds;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::string& relative) const;
  std::vector<std::string> case_ids() const;
};

struct ManifestIssue {
  std::string json_path;  // e.g. /cases/0/slices/2/prob_path
  std::string message;
  std::size_t case_index;
  std::size_t slice_index;
};

class ManifestError : public ParseError {
 public:
  ManifestError(std::vector<ManifestIssue> issues);
  const std::vector<ManifestIssue>& issues() const noexcept { return issues_; }

 private:
  std::vector<ManifestIssue> issues_;
};

struct ManifestOptions {
  // Open every referenced file, checking existence and that image, probability
  // and truth shapes agree. Problems are collected and thrown together.
  bool check_files = true;
};

CaseManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir,
                            const ManifestOptions& options = {});
CaseManifest read_manifest(const std::filesystem::path& path, const ManifestOptions& options = {});

// File-level problems for every slice, without throwing.
std::vector<ManifestIssue> check_manifest_files(const CaseManifest& manifest);

// Serialized with a fixed key order; identical manifests give identical bytes.
std::string manifest_to_json(const CaseManifest& manifest);
void write_manifest(const CaseManifest& manifest, const std::filesystem::path& path);

}  // namespace crf_refine
