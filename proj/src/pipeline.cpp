#include "echodx/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "echodx/checkpoint.hpp"
#include "echodx/deeplift.hpp"
#include "echodx/ect_io.hpp"
#include "echodx/ops.hpp"
#include "echodx/parallel.hpp"

namespace echodx {

namespace {

const std::vector<std::string> kClassNames{"normal", "mild", "severe"};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<ManifestRecord> load_manifest(const fs::path& manifest) {
  if (!fs::exists(manifest)) throw IoError("manifest not found: " + manifest.string());
  auto records = read_manifest(manifest);
  if (records.empty()) throw IoError("manifest has no records: " + manifest.string());
  return records;
}

std::vector<int> labels_of(const std::vector<ManifestRecord>& records) {
  std::vector<int> out;
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

ReferenceHistogram load_reference(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("reference histogram not found: " + path.string());
  return ReferenceHistogram::from_tensor(load_ect(path));
}

/// Subset of the manifest named by the run's split file; all records when the
/// split file is absent and `subset` is "all".
std::vector<ManifestRecord> records_for(const fs::path& checkpoint, const fs::path& manifest,
                                        const std::string& subset) {
  auto records = load_manifest(manifest);
  if (subset == "all") return records;
  const auto split_path = run_file(checkpoint, "split.tsv");
  if (!fs::exists(split_path)) throw IoError("split file not found: " + split_path.string());
  auto chosen = select_subset(records, read_split(split_path), subset);
  if (chosen.empty()) throw IoError("subset '" + subset + "' is empty");
  return chosen;
}

std::vector<Tensor> inputs_for(const std::vector<Sample>& samples, const ReferenceHistogram& reference,
                               const RunConfig& config) {
  return eval_inputs(samples, reference, config.preprocess());
}

}  // namespace

fs::path run_file(const fs::path& checkpoint, const char* name) { return checkpoint.parent_path() / name; }

void write_split(const fs::path& path, const std::vector<ManifestRecord>& records, const std::vector<Subset>& split) {
  std::string text = "# sample_id\tsubset\n";
  for (std::size_t i = 0; i < records.size(); ++i)
    text += records[i].sample_id() + "\t" + subset_name(split[i]) + "\n";
  write_text(path, text);
}

std::map<std::string, Subset> read_split(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read split " + path.string());
  std::map<std::string, Subset> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("malformed split line: " + line);
    const auto name = line.substr(tab + 1);
    Subset s;
    if (name == "train") {
      s = Subset::Train;
    } else if (name == "val") {
      s = Subset::Val;
    } else if (name == "test") {
      s = Subset::Test;
    } else {
      throw IoError("unknown subset '" + name + "' in " + path.string());
    }
    out[line.substr(0, tab)] = s;
  }
  return out;
}

std::vector<ManifestRecord> select_subset(const std::vector<ManifestRecord>& records,
                                          const std::map<std::string, Subset>& split, const std::string& subset) {
  if (subset == "all") return records;
  if (subset != "train" && subset != "val" && subset != "test") throw UsageError("unknown subset '" + subset + "'");
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    const auto it = split.find(r.sample_id());
    if (it == split.end()) throw IoError("sample " + r.sample_id() + " is missing from the split");
    if (subset == subset_name(it->second)) out.push_back(r);
  }
  return out;
}

double positive_mass_fraction(const Tensor& attribution, const Tensor& mask) {
  const auto plane = mask.size();
  if (plane == 0 || attribution.size() % plane != 0) throw ShapeError("mask does not tile the attribution map");
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < attribution.size(); ++i) {
    const double v = attribution[i];
    if (v <= 0.0) continue;
    total += v;
    if (mask[i % plane] > 0.5f) inside += v;
  }
  return total > 0.0 ? inside / total : 0.0;
}

std::vector<ManifestRecord> run_synth(const RunConfig& config, const fs::path& out_dir) {
  config.validate();
  return generate_dataset(config.per_class, config.phantom(), out_dir, config.seed);
}

std::vector<Subset> run_split(const RunConfig& config, const fs::path& manifest, const fs::path& out_path) {
  const auto records = load_manifest(manifest);
  const auto labels = labels_of(records);
  const auto split = stratified_split(labels, config.fractions(), config.seed);
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  write_split(out_path, records, split);
  return split;
}

void run_preprocess(const RunConfig& config, const fs::path& manifest, const fs::path& out_dir) {
  const auto records = load_manifest(manifest);
  const auto split = stratified_split(labels_of(records), config.fractions(), config.seed);
  ensure_dir(out_dir);
  const auto samples = load_samples(records);
  std::vector<Sample> train;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (split[i] == Subset::Train) train.push_back(samples[i]);
  const auto reference = build_reference(train, config.preprocess());
  save_ect(out_dir / "reference.ect", reference.to_tensor());
  write_split(out_dir / "split.tsv", records, split);
  const auto inputs = inputs_for(samples, reference, config);
  std::vector<ManifestRecord> out(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    out[i] = records[i];
    out[i].path = records[i].sample_id() + ".ect";
    out[i].cycle_start = 0;
    out[i].cycle_len = kClipFrames;
    save_ect(out_dir / out[i].path, inputs[i]);
  });
  write_manifest(out_dir / "manifest.tsv", out);
}

TrainResult run_train(const RunConfig& config, const fs::path& manifest, const fs::path& run_dir,
                      std::ostream* progress) {
  config.validate();
  const auto records = load_manifest(manifest);
  const auto split = stratified_split(labels_of(records), config.fractions(), config.seed);
  ensure_dir(run_dir);
  write_text(run_dir / "config.txt", config.render());
  write_split(run_dir / "split.tsv", records, split);

  const auto samples = load_samples(records);
  std::vector<Sample> train, val, test;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& dst = split[i] == Subset::Train ? train : split[i] == Subset::Val ? val : test;
    dst.push_back(samples[i]);
  }
  const auto options = config.training();
  const auto reference = build_reference(train, options.preprocess);
  save_ect(run_dir / "reference.ect", reference.to_tensor());

  auto net = Network::build(config.network(), config.seed);
  std::string log = "epoch\ttrain_loss\tval_loss\n";
  const auto result = fit(net, train, val, reference, options, [&](const EpochLog& e) {
    log += std::to_string(e.epoch) + "\t" + num(e.train_loss) + "\t" + num(e.val_loss) + "\n";
    write_text(run_dir / "log.tsv", log);
    if (progress)
      *progress << "epoch " << e.epoch << " train_loss " << num(e.train_loss) << " val_loss " << num(e.val_loss)
                << std::endl;
  });
  checkpoint_save(net, run_dir / "best.ckpt");

  const auto test_inputs = inputs_for(test, reference, config);
  const auto logits = predict_logits(net, test_inputs, options.batch);
  std::vector<int> truth, pred;
  for (std::size_t i = 0; i < test.size(); ++i) {
    truth.push_back(test[i].label);
    const float* row = logits.ptr() + i * logits.dim(1);
    pred.push_back(static_cast<int>(std::max_element(row, row + logits.dim(1)) - row));
  }
  write_metrics(run_dir, evaluate(truth, pred, config.network().num_classes), kClassNames);
  return result;
}

MetricsReport run_eval(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                       const fs::path& out_dir, const std::string& subset, const fs::path& reference) {
  auto net = checkpoint_load(checkpoint);
  const auto ref = load_reference(reference);
  const auto records = records_for(checkpoint, manifest, subset);
  const auto samples = load_samples(records);
  const auto logits = predict_logits(net, inputs_for(samples, ref, config), config.batch);
  std::vector<int> truth, pred;
  std::string predictions = "sample_id\tlabel\tpredicted\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const float* row = logits.ptr() + i * logits.dim(1);
    const int p = static_cast<int>(std::max_element(row, row + logits.dim(1)) - row);
    truth.push_back(samples[i].label);
    pred.push_back(p);
    predictions += samples[i].id() + "\t" + std::to_string(samples[i].label) + "\t" + std::to_string(p) + "\n";
  }
  const auto report = evaluate(truth, pred, net.config().num_classes);
  ensure_dir(out_dir);
  write_metrics(out_dir, report, kClassNames);
  write_text(out_dir / "predictions.tsv", predictions);
  return report;
}

Embedding run_embed(const RunConfig& config, const std::optional<fs::path>& checkpoint, const fs::path& manifest,
                    const fs::path& out_dir, const std::string& subset, const fs::path& reference) {
  const bool features = config.embed_source == "features";
  if (features && !checkpoint) throw UsageError("features embedding needs a checkpoint");
  std::vector<ManifestRecord> records;
  if (checkpoint) {
    records = records_for(*checkpoint, manifest, subset);
  } else {
    if (subset != "all") throw UsageError("subset selection needs a checkpoint run directory");
    records = load_manifest(manifest);
  }
  const auto ref = load_reference(reference);
  const auto samples = load_samples(records);
  const auto inputs = inputs_for(samples, ref, config);

  DataMatrix data;
  data.rows = samples.size();
  if (features) {
    auto net = checkpoint_load(*checkpoint);
    const auto dim = net.config().feature_dim();
    data.cols = dim;
    data.values.resize(data.rows * dim);
    for (std::size_t start = 0; start < inputs.size(); start += config.batch) {
      const auto n = std::min(config.batch, inputs.size() - start);
      const auto f = net.features(stack_batch(std::span<const Tensor>(inputs).subspan(start, n)));
      std::copy(f.ptr(), f.ptr() + n * dim, data.values.begin() + static_cast<std::ptrdiff_t>(start * dim));
    }
  } else {
    data.cols = inputs.front().size();
    data.values.reserve(data.rows * data.cols);
    for (const auto& x : inputs) data.values.insert(data.values.end(), x.ptr(), x.ptr() + x.size());
  }
  const double perplexity = std::min(config.perplexity, static_cast<double>(data.rows - 1) / 3.0);
  const auto affinities = calibrate_affinities(data, perplexity);
  const auto embedding = tsne_optimize(affinities, config.seed, config.tsne());
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& s : samples) {
    ids.push_back(s.id());
    labels.push_back(s.label);
  }
  ensure_dir(out_dir);
  write_embedding_tsv(out_dir / "embedding.tsv", ids, embedding, labels);
  return embedding;
}

std::vector<RankEntry> run_rank_normal(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                                       const fs::path& out_path, const std::string& subset,
                                       const fs::path& reference) {
  auto net = checkpoint_load(checkpoint);
  const auto ref = load_reference(reference);
  const auto samples = load_samples(records_for(checkpoint, manifest, subset));
  const auto probs = softmax(predict_logits(net, inputs_for(samples, ref, config), config.batch));
  std::vector<RankEntry> ranking;
  for (std::size_t i = 0; i < samples.size(); ++i)
    ranking.push_back({samples[i].id(), probs[i * probs.dim(1)], samples[i].label});
  std::stable_sort(ranking.begin(), ranking.end(), [](const RankEntry& a, const RankEntry& b) {
    return a.p_normal != b.p_normal ? a.p_normal > b.p_normal : a.sample_id < b.sample_id;
  });
  std::string text = "rank\tsample_id\tp_normal\tlabel\n";
  for (std::size_t i = 0; i < ranking.size(); ++i)
    text += std::to_string(i + 1) + "\t" + ranking[i].sample_id + "\t" + num(ranking[i].p_normal) + "\t" +
            std::to_string(ranking[i].label) + "\n";
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  write_text(out_path, text);
  return ranking;
}

AttributionSummary run_attribute(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest,
                                 const std::string& sample_id, const fs::path& out_dir, const fs::path& reference) {
  auto net = checkpoint_load(checkpoint);
  const auto ref = load_reference(reference);
  const auto records = load_manifest(manifest);
  const auto it = std::find_if(records.begin(), records.end(),
                               [&](const ManifestRecord& r) { return r.sample_id() == sample_id; });
  if (it == records.end()) throw IoError("sample '" + sample_id + "' is not in the manifest");
  const auto samples = load_samples({*it});
  auto x = eval_inputs(samples, ref, config.preprocess()).front();
  const auto& shape = x.shape();
  x = x.reshaped({1, shape[0], shape[1], shape[2]});

  auto map = deeplift_attribute(net, x, config.target_class);
  map.sample_id = sample_id;
  export_heatmaps(map, out_dir);

  AttributionSummary s;
  s.sample_id = sample_id;
  s.target_class = config.target_class;
  s.delta_logit = map.delta_logit;
  for (float v : map.values.data()) s.attribution_sum += v;
  const auto mask_path = mask_path_for(it->path);
  if (fs::exists(mask_path)) {
    const auto mask = load_ect(mask_path);
    s.mask_fraction = positive_mass_fraction(map.values, mask);
    double area = 0.0;
    for (float v : mask.data()) area += v > 0.5f ? 1.0 : 0.0;
    s.mask_area = area / static_cast<double>(mask.size());
  }
  std::string text = "key\tvalue\nsample_id\t" + sample_id + "\ntarget_class\t" + std::to_string(s.target_class) +
                     "\nbaseline\t" + map.baseline_id + "\ndelta_logit\t" + num(s.delta_logit) + "\nattribution_sum\t" +
                     num(s.attribution_sum) + "\n";
  if (s.mask_fraction)
    text += "mask_positive_fraction\t" + num(*s.mask_fraction) + "\nmask_area_fraction\t" + num(*s.mask_area) + "\n";
  write_text(out_dir / "summary.tsv", text);
  return s;
}

void run_all(const RunConfig& config, const fs::path& out_dir, std::ostream* progress) {
  auto stage = [&](const char* name, auto&& fn) {
    if (progress) *progress << "== " << name << std::endl;
    try {
      fn();
    } catch (const StageError&) {
      throw;
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  };
  const auto data = out_dir / "data";
  const auto manifest = data / "manifest.tsv";
  const auto run = out_dir / "run";
  const auto ckpt = run / "best.ckpt";
  const auto ref = run / "reference.ect";
  std::vector<RankEntry> ranking;
  stage("synth", [&] { run_synth(config, data); });
  stage("split", [&] { run_split(config, manifest, out_dir / "split" / "split.tsv"); });
  stage("train", [&] { run_train(config, manifest, run, progress); });
  stage("eval", [&] { run_eval(config, ckpt, manifest, out_dir / "eval", "test", ref); });
  stage("embed", [&] { run_embed(config, ckpt, manifest, out_dir / "embed", "all", ref); });
  stage("rank-normal", [&] { ranking = run_rank_normal(config, ckpt, manifest, out_dir / "rank.tsv", "test", ref); });
  stage("attribute", [&] {
    const auto top = std::find_if(ranking.begin(), ranking.end(), [](const RankEntry& r) { return r.label == 0; });
    if (top == ranking.end()) throw Error("no normal-class sample in the ranking");
    const auto s = run_attribute(config, ckpt, manifest, top->sample_id, out_dir / "attribution", ref);
    if (progress && s.mask_fraction)
      *progress << "attribution " << s.sample_id << " mask_positive_fraction " << num(*s.mask_fraction) << std::endl;
  });
}

}  // namespace echodx
