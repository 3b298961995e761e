#include "echodx/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "echodx/ops.hpp"
#include "echodx/parallel.hpp"

namespace echodx {

namespace {

constexpr std::uint64_t kMillion = 1000000;

std::uint64_t micro(double f) {
  if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
  return static_cast<std::uint64_t>(std::llround(f * static_cast<double>(kMillion)));
}

/// round_half_even(n * f / 1e6) in integers.
std::size_t scaled_round(std::size_t n, std::uint64_t f) {
  const std::uint64_t x = static_cast<std::uint64_t>(n) * f;
  std::uint64_t q = x / kMillion;
  const std::uint64_t r = x % kMillion;
  if (2 * r > kMillion || (2 * r == kMillion && q % 2 == 1)) ++q;
  return static_cast<std::size_t>(q);
}

}  // namespace

const char* subset_name(Subset s) {
  switch (s) {
    case Subset::Train: return "train";
    case Subset::Val: return "val";
    case Subset::Test: return "test";
  }
  return "?";
}

SplitCounts split_counts(std::size_t n, const std::array<double, 3>& fractions) {
  if (n < 3) throw ConfigError("a class needs at least 3 samples to split, got " + std::to_string(n));
  const auto ft = micro(fractions[0]), fv = micro(fractions[1]), fs = micro(fractions[2]);
  if (ft + fv + fs != kMillion) throw ConfigError("split fractions must sum to 1");
  SplitCounts c;
  c.train = scaled_round(n, ft);
  c.val = scaled_round(n, fv);
  if (c.train + c.val > n) throw ConfigError("split fractions leave no room for the test subset");
  c.test = n - c.train - c.val;
  return c;
}

std::vector<Subset> stratified_split(std::span<const int> labels, const std::array<double, 3>& fractions,
                                     std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<Subset> out(labels.size(), Subset::Test);
  for (auto& [label, idx] : by_class) {
    const auto counts = split_counts(idx.size(), fractions);
    Rng rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(label) + 1)));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    for (std::size_t i = 0; i < idx.size(); ++i)
      out[idx[i]] = i < counts.train ? Subset::Train : i < counts.train + counts.val ? Subset::Val : Subset::Test;
  }
  return out;
}

template <typename T>
void Adam<T>::step(const std::vector<Parameter<T>*>& params) {
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (m_[k].size() != params[k]->value.size() || params[k]->grad.size() != params[k]->value.size())
      throw ShapeError("moment/parameter shape mismatch for " + params[k]->name);
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] = static_cast<T>(p.value[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

bool EarlyStopping::observe(double val_loss, std::size_t epoch, const std::function<NamedTensors()>& snapshot) {
  if (val_loss < best_ - min_delta_) {
    best_ = val_loss;
    best_epoch_ = epoch;
    since_ = 0;
    if (snapshot) state_ = snapshot();
    return false;
  }
  ++since_;
  return since_ >= patience_;
}

std::vector<Sample> load_samples(const std::vector<ManifestRecord>& records) {
  std::vector<Sample> out(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    out[i].clip = load_cine(records[i]);
    out[i].label = records[i].label;
  });
  return out;
}

ReferenceHistogram build_reference(std::span<const Sample> samples, const PreprocessOptions& options) {
  std::vector<ReferenceHistogram> parts(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto cycle = masked_cycle(samples[i].clip, options);
    parts[i].add(cycle, options.geometry.mask(cycle.dim(1), cycle.dim(2)));
  });
  std::vector<double> counts(kLevels, 0.0);
  for (const auto& p : parts)
    for (std::size_t u = 0; u < kLevels; ++u) counts[u] += p.counts()[u];
  return ReferenceHistogram(std::move(counts));
}

std::vector<Tensor> eval_inputs(std::span<const Sample> samples, const ReferenceHistogram& reference,
                                const PreprocessOptions& options) {
  std::vector<Tensor> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    out[i] = preprocess_clip(samples[i].clip, reference, options, SampleMode::Eval, 0, 0);
  });
  return out;
}

Tensor stack_batch(std::span<const Tensor> clips) {
  if (clips.empty()) throw ShapeError("cannot stack an empty batch");
  const auto& first = clips.front().shape();
  Shape shape{clips.size(), 1};
  shape.insert(shape.end(), first.begin(), first.end());
  Tensor batch(shape);
  const auto each = clips.front().size();
  for (std::size_t i = 0; i < clips.size(); ++i) {
    require_shape(clips[i].shape(), first, "batch member");
    std::copy(clips[i].ptr(), clips[i].ptr() + each, batch.ptr() + i * each);
  }
  return batch;
}

double train_epoch(Network& net, Adam<float>& adam, std::span<const Sample> train, const ReferenceHistogram& reference,
                   const TrainOptions& options, std::size_t epoch) {
  if (train.empty()) throw ConfigError("training set is empty");
  const auto prepared = eval_inputs(train, reference, options.preprocess);
  return train_epoch(net, adam, train, prepared, options, epoch);
}

double train_epoch(Network& net, Adam<float>& adam, std::span<const Sample> train, std::span<const Tensor> prepared,
                   const TrainOptions& options, std::size_t epoch) {
  if (train.empty()) throw ConfigError("training set is empty");
  if (prepared.size() != train.size()) throw ShapeError("prepared inputs do not match the training set");
  if (options.batch == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(splitmix64(splitmix64(options.seed) ^ (epoch + 1)));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

  const auto params = net.parameters();
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += options.batch) {
    const auto n = std::min(options.batch, order.size() - start);
    std::vector<Tensor> clips(n);
    std::vector<int> labels(n);
    parallel_for(n, [&](std::size_t i) {
      const auto k = order[start + i];
      clips[i] = options.augment
                     ? randomize_clip(prepared[k], train[k].clip.sample_id, options.preprocess, options.seed, epoch)
                     : prepared[k];
    });
    for (std::size_t i = 0; i < n; ++i) labels[i] = train[order[start + i]].label;

    net.zero_grad();
    Tape<float> tape;
    const auto logits = net.forward_logits(tape, tape.constant(stack_batch(clips)), Mode::Train);
    const auto loss = softmax_cross_entropy(tape, logits, std::span<const int>(labels));
    const double value = tape.value(loss)[0];
    if (!std::isfinite(value))
      throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                  std::to_string(start));
    tape.backward(loss);
    adam.step(params);
    total += value * static_cast<double>(n);
  }
  return total / static_cast<double>(train.size());
}

Tensor predict_logits(Network& net, std::span<const Tensor> inputs, std::size_t batch) {
  const auto k = net.config().num_classes;
  Tensor out(Shape{inputs.size(), k});
  for (std::size_t start = 0; start < inputs.size(); start += batch) {
    const auto n = std::min(batch, inputs.size() - start);
    const auto logits = net.logits(stack_batch(inputs.subspan(start, n)));
    std::copy(logits.ptr(), logits.ptr() + n * k, out.ptr() + start * k);
  }
  return out;
}

double evaluate_loss(Network& net, std::span<const Tensor> inputs, std::span<const int> labels, std::size_t batch) {
  if (inputs.empty()) throw ConfigError("validation set is empty");
  const auto logits = predict_logits(net, inputs, batch);
  const auto k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const float* row = logits.ptr() + i * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    total += std::log(s) + mx - row[labels[i]];
  }
  return total / static_cast<double>(inputs.size());
}

TrainResult fit(Network& net, std::span<const Sample> train, std::span<const Sample> val,
                const ReferenceHistogram& reference, const TrainOptions& options, const EpochCallback& on_epoch) {
  if (train.empty() || val.empty()) throw ConfigError("training and validation sets must be non-empty");
  const auto val_inputs = eval_inputs(val, reference, options.preprocess);
  const auto train_inputs = eval_inputs(train, reference, options.preprocess);
  std::vector<int> val_labels;
  for (const auto& s : val) val_labels.push_back(s.label);

  Adam<float> adam(options.lr);
  EarlyStopping stopper(options.patience);
  TrainResult result;
  for (std::size_t epoch = 1; epoch <= options.max_epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = train_epoch(net, adam, train, train_inputs, options, epoch);
    entry.val_loss = evaluate_loss(net, val_inputs, val_labels, options.batch);
    if (!std::isfinite(entry.val_loss)) throw Error("non-finite validation loss at epoch " + std::to_string(epoch));
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (stopper.observe(entry.val_loss, epoch, [&] { return net.state(); })) {
      result.early_stopped = true;
      break;
    }
  }
  if (stopper.has_snapshot()) net.load_state(stopper.best_state());
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

}  // namespace echodx
