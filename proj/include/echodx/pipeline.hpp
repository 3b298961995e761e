#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "echodx/metrics.hpp"
#include "echodx/run_config.hpp"

namespace echodx {

/// A runtime failure attributed to one pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

namespace fs = std::filesystem;

/// `sample_id subset` lines.
void write_split(const fs::path& path, const std::vector<ManifestRecord>& records, const std::vector<Subset>& split);
std::map<std::string, Subset> read_split(const fs::path& path);

/// Records whose subset matches `subset` ("train", "val", "test" or "all").
std::vector<ManifestRecord> select_subset(const std::vector<ManifestRecord>& records,
                                          const std::map<std::string, Subset>& split, const std::string& subset);

struct RankEntry {
  std::string sample_id;
  double p_normal = 0.0;
  int label = 0;
};

struct AttributionSummary {
  std::string sample_id;
  int target_class = 0;
  double delta_logit = 0.0;
  double attribution_sum = 0.0;
  /// Share of positive attribution inside the ground-truth mask, if one exists.
  std::optional<double> mask_fraction;
  std::optional<double> mask_area;
};

/// Share of positive attribution mass falling in a [H, W] mask, over all frames.
double positive_mass_fraction(const Tensor& attribution, const Tensor& mask);

std::vector<ManifestRecord> run_synth(const RunConfig& config, const fs::path& out_dir);
std::vector<Subset> run_split(const RunConfig& config, const fs::path& manifest, const fs::path& out_path);
void run_preprocess(const RunConfig& config, const fs::path& manifest, const fs::path& out_dir);
TrainResult run_train(const RunConfig& config, const fs::path& manifest, const fs::path& run_dir, std::ostream* progress);
MetricsReport run_eval(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                       const fs::path& out_dir, const std::string& subset, const fs::path& reference);
Embedding run_embed(const RunConfig& config, const std::optional<fs::path>& checkpoint, const fs::path& manifest,
                    const fs::path& out_dir, const std::string& subset, const fs::path& reference);
std::vector<RankEntry> run_rank_normal(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                                       const fs::path& out_path, const std::string& subset, const fs::path& reference);
AttributionSummary run_attribute(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                                 const std::string& sample_id, const fs::path& out_dir, const fs::path& reference);

/// synth -> split -> train -> eval -> embed -> rank -> attribute under out_dir.
void run_all(const RunConfig& config, const fs::path& out_dir, std::ostream* progress);

/// Sibling file of a checkpoint (reference.ect, split.tsv, config.txt).
fs::path run_file(const fs::path& checkpoint, const char* name);

}  // namespace echodx
