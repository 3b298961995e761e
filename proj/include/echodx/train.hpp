#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "echodx/network.hpp"
#include "echodx/preprocess.hpp"

namespace echodx {

enum class Subset { Train, Val, Test };

const char* subset_name(Subset s);

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  friend bool operator==(const SplitCounts&, const SplitCounts&) = default;
};

/// n_train = round_half_even(f_train * n), n_val = round_half_even(f_val * n),
/// remainder to test. Fractions are resolved to millionths so ties are exact.
SplitCounts split_counts(std::size_t n, const std::array<double, 3>& fractions = {0.7, 0.1, 0.2});

/// Per-sample subset assignment, stratified by label via a seeded shuffle.
std::vector<Subset> stratified_split(std::span<const int> labels, const std::array<double, 3>& fractions,
                                     std::uint64_t seed);

template <typename T>
class Adam {
 public:
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  Adam() = default;
  explicit Adam(double learning_rate) : lr(learning_rate) {}

  /// Bias-corrected update from each parameter's accumulated gradient.
  void step(const std::vector<Parameter<T>*>& params);

  std::size_t steps() const { return t_; }

 private:
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

/// Validation-loss early stopping with a snapshot of the best weights.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 50, double min_delta = 1e-6)
      : patience_(patience), min_delta_(min_delta) {}

  /// Records one epoch; returns true when training should stop. On improvement
  /// `snapshot` is called and its result kept.
  bool observe(double val_loss, std::size_t epoch, const std::function<NamedTensors()>& snapshot);

  double best_loss() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t since_improvement() const { return since_; }
  const NamedTensors& best_state() const { return state_; }
  bool has_snapshot() const { return !state_.empty(); }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t since_ = 0;
  NamedTensors state_;
};

/// Labeled clip held in memory.
struct Sample {
  CineLoop clip;
  int label = 0;

  const std::string& id() const { return clip.sample_id; }
};

std::vector<Sample> load_samples(const std::vector<ManifestRecord>& records);

/// Pooled in-sector histogram of the given samples.
ReferenceHistogram build_reference(std::span<const Sample> samples, const PreprocessOptions& options);

struct TrainOptions {
  double lr = 0.001;
  std::size_t batch = 16;
  std::size_t patience = 50;
  std::size_t max_epochs = 500;
  std::uint64_t seed = 0;
  bool augment = true;
  PreprocessOptions preprocess;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
};

/// Deterministic eval-mode inputs for a set of samples, [30, 112, 112] each.
std::vector<Tensor> eval_inputs(std::span<const Sample> samples, const ReferenceHistogram& reference,
                                const PreprocessOptions& options);

/// Stacks clips [30, 112, 112] into a network batch [N, 1, 30, 112, 112].
Tensor stack_batch(std::span<const Tensor> clips);

/// Number of optimizer steps for one epoch.
inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

/// One shuffled pass with an Adam step per batch; returns the mean loss.
double train_epoch(Network& net, Adam<float>& adam, std::span<const Sample> train, const ReferenceHistogram& reference,
                   const TrainOptions& options, std::size_t epoch);

/// Same pass over samples whose eval-mode inputs are already built
/// (`prepared[i]` from eval_inputs for `train[i]`).
double train_epoch(Network& net, Adam<float>& adam, std::span<const Sample> train, std::span<const Tensor> prepared,
                   const TrainOptions& options, std::size_t epoch);

/// Mean cross-entropy over pre-built inputs in inference mode.
double evaluate_loss(Network& net, std::span<const Tensor> inputs, std::span<const int> labels, std::size_t batch);

/// Infer-mode logits for pre-built inputs, [n, classes].
Tensor predict_logits(Network& net, std::span<const Tensor> inputs, std::size_t batch);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Epoch loop with early stopping; on return `net` holds the best weights.
TrainResult fit(Network& net, std::span<const Sample> train, std::span<const Sample> val,
                const ReferenceHistogram& reference, const TrainOptions& options, const EpochCallback& on_epoch = {});

}  // namespace echodx
