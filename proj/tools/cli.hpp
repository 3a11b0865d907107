#pragma once

// Batch command-line surface. Every command is a thin wrapper over the
// library; outputs depend only on inputs, configuration and seed.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "crf_refine/crf_params.hpp"
#include "crf_refine/dense_crf.hpp"
#include "crf_refine/experiment.hpp"
#include "crf_refine/io_formats.hpp"

namespace crf_refine::cli {

enum ExitCode : int { kSuccess = 0, kDataFailure = 1, kUsageError = 2 };

// Resolved settings. Precedence, lowest first: built-in defaults,
// CRF_REFINE_THREADS (threads only), the --config JSON file, command-line flags.
struct RunConfig {
  CrfParams crf{};
  double floor = kDefaultProbabilityFloor;
  bool apply_window = false;
  HuWindow window{};
  SweepGrid grid{};
  std::uint64_t seed = 42;
  std::size_t threads = 1;
  std::filesystem::path out_dir = "out";
  FilterMode filter = FilterMode::Lattice;
  std::uint8_t positive_label = 1;
};

// Thrown for malformed config files and invalid flag combinations.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig default_config();
// Overlays the keys present in `json_text` onto `config`; unknown keys are errors.
void apply_config_json(RunConfig& config, const std::string& json_text);

// Where refine writes, and eval looks up, the prediction for one slice.
std::filesystem::path prediction_path(const std::filesystem::path& dir, const std::string& case_id,
                                      std::size_t slice_index, std::size_t labels = 2);

struct SliceData {
  SliceImage image;
  ProbabilityMap prob;
  std::optional<LabelMask> truth;
};

SliceData load_slice(const CaseManifest& manifest, std::size_t case_index, std::size_t slice_index,
                     const RunConfig& config);

// Returns 0 / 1 / 2 as documented in ExitCode.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace crf_refine::cli
