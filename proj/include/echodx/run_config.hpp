#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "echodx/network.hpp"
#include "echodx/phantom.hpp"
#include "echodx/train.hpp"
#include "echodx/tsne.hpp"

namespace echodx {

/// Raised for malformed or unknown configuration keys (usage errors).
class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Flat key=value run configuration. Defaults give a desk-scale phantom run.
struct RunConfig {
  std::uint64_t seed = 7;

  // phantom data
  std::size_t per_class = 60;
  std::string task = "lv";
  double noise_sigma = 8.0;

  // network
  std::vector<std::size_t> stages{8, 8, 8, 8};
  std::vector<std::size_t> blocks{1, 1, 1, 1};
  std::size_t stem_midplane = 16;

  // preprocessing
  double sector_apex_row = 0.0;
  double sector_apex_col = 55.5;
  double sector_radius = 115.0;
  double sector_half_angle = 50.0;
  bool zero_static_bright = true;
  bool augment = true;
  double max_shift = 8.0;
  double max_rotation = 10.0;

  // training
  double lr = 0.001;
  std::size_t batch = 16;
  std::size_t patience = 50;
  std::size_t max_epochs = 40;
  double split_train = 0.7;
  double split_val = 0.1;
  double split_test = 0.2;

  // embedding
  double perplexity = 30.0;
  std::size_t tsne_iters = 1000;
  std::string embed_source = "features";

  // attribution
  std::string baseline = "zero";
  int target_class = 0;

  /// Applies one `key=value` assignment; unknown keys throw UsageError.
  void set(const std::string& key, const std::string& value);
  /// Parses config text: `key=value` lines, `#` comments, blank lines.
  void parse(const std::string& text);
  void load(const std::filesystem::path& path);
  /// Canonical text with every key, in a fixed order.
  std::string render() const;
  void validate() const;

  static const std::vector<std::string>& keys();

  NetworkConfig network() const;
  PreprocessOptions preprocess() const;
  TrainOptions training() const;
  PhantomParams phantom() const;
  TsneOptions tsne() const;
  std::array<double, 3> fractions() const { return {split_train, split_val, split_test}; }
};

}  // namespace echodx
