#pragma once

// Configuration and command implementations behind the `evtforce` CLI.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "evtforce/frame_builder.hpp"
#include "evtforce/synth_gripper.hpp"
#include "evtforce/train_eval.hpp"
#include "evtforce/vit_model.hpp"
#include "json.hpp"

namespace evtforce::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kIo = 3,
  kInternal = 4,
};

/// A configuration value that failed validation; what() names the key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Recording generation settings that sit beside the scene geometry.
struct SynthSettings {
  int recordings = 25;
  double trial_seconds = 4.0;
  double rate_hz = 10.0;
  int substeps = 1;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  synth::GripperScene scene = synth::default_scene();
  SynthSettings synth;
  FrameSpec frame;
  vit::ViTConfig model;
  train::TrainConfig train;

  /// Runs every module's validation; throws ConfigError naming the key.
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);

/// Builds a config from defaults, then `file` (when given), then `overrides`
/// ("section.key" -> JSON or bare string), later sources winning.
PipelineConfig load_config(const std::optional<std::filesystem::path>& file,
                           const std::vector<std::pair<std::string, std::string>>& overrides = {},
                           std::optional<std::uint64_t> seed = std::nullopt);

/// Stable 64-bit hash of the canonical JSON form.
std::uint64_t config_hash(const PipelineConfig& config);

/// Named sub-seed derived from the pipeline seed.
std::uint64_t sub_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0);

/// Loads every `<id>.labels.json` in `dir` with its `<id>.evb` or `<id>.csv`
/// event file, sorted by id. Recording duration is (samples - 1) periods.
std::vector<Recording> load_recordings(const std::filesystem::path& dir);

nlohmann::json frame_spec_json(const FrameSpec& spec);

int cmd_synth(const PipelineConfig& config, const std::filesystem::path& out_dir, int n,
              EventFormat format, std::ostream& out);
int cmd_convert(const PipelineConfig& config, const std::filesystem::path& in_dir,
                const std::filesystem::path& out_file, std::ostream& out);
int cmd_train(const PipelineConfig& config, const std::filesystem::path& dataset,
              const std::filesystem::path& out_prefix, std::ostream& out);
int cmd_eval(const PipelineConfig& config, const std::filesystem::path& checkpoint,
             const std::filesystem::path& dataset, const std::string& split, std::ostream& out);
int cmd_predict(const PipelineConfig& config, const std::filesystem::path& checkpoint,
                const std::filesystem::path& input, std::optional<std::int64_t> duration_us,
                std::ostream& out);
int cmd_bench(const PipelineConfig& config, const std::filesystem::path& events,
              double min_seconds, std::ostream& out);

/// Full command-line entry point; never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace evtforce::cli
