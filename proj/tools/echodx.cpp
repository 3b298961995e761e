#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "echodx/pipeline.hpp"

namespace fs = std::filesystem;
using namespace echodx;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "flat key=value config file");
  cmd->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "random seed");
}

RunConfig resolve(const Common& c, const std::optional<fs::path>& checkpoint = std::nullopt) {
  RunConfig cfg;
  if (c.config_path.empty() && checkpoint) {
    const auto saved = run_file(*checkpoint, "config.txt");
    if (fs::exists(saved)) cfg.load(saved);
  }
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
    cfg.load(c.config_path);
  }
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

fs::path reference_or_default(const std::string& given, const fs::path& checkpoint) {
  return given.empty() ? run_file(checkpoint, "reference.ect") : fs::path(given);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // keep freed activation buffers mapped between training steps
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"echodx: echocardiogram cine-loop classification, attribution and embedding pipeline"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 1 runtime failure, 2 usage error. ECHODX_THREADS caps worker threads.");

  Common common;
  std::string out, manifest, checkpoint, reference, subset, sample, source, task;
  std::optional<std::size_t> per_class, max_epochs;
  std::optional<int> target;

  auto* synth = app.add_subcommand("synth", "generate labeled phantom cine-loops and a manifest");
  add_common(synth, common);
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--per-class", per_class, "clips per class");
  synth->add_option("--task", task, "class axis: lv or valve");

  auto* preprocess = app.add_subcommand("preprocess", "write eval-mode 30x112x112 clips and the reference histogram");
  add_common(preprocess, common);
  preprocess->add_option("--manifest", manifest, "input manifest")->required();
  preprocess->add_option("--out", out, "output directory")->required();

  auto* split = app.add_subcommand("split", "stratified train/val/test assignment");
  add_common(split, common);
  split->add_option("--manifest", manifest, "input manifest")->required();
  split->add_option("--out", out, "output split.tsv path")->required();

  auto* train = app.add_subcommand("train", "train a model into a run directory");
  add_common(train, common);
  train->add_option("--manifest", manifest, "input manifest")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--max-epochs", max_epochs, "epoch cap");

  auto* eval = app.add_subcommand("eval", "confusion matrix and per-class metrics");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  eval->add_option("--manifest", manifest, "input manifest")->required();
  eval->add_option("--out", out, "output directory")->required();
  eval->add_option("--subset", subset, "train, val, test or all")->default_val("test");
  eval->add_option("--reference", reference, "reference histogram (default: next to the checkpoint)");

  auto* embed = app.add_subcommand("embed", "tSNE embedding of clips or extracted features");
  add_common(embed, common);
  embed->add_option("--manifest", manifest, "input manifest")->required();
  embed->add_option("--out", out, "output directory")->required();
  embed->add_option("--checkpoint", checkpoint, "trained checkpoint (features mode)");
  embed->add_option("--source", source, "features or pixels");
  embed->add_option("--subset", subset, "train, val, test or all")->default_val("all");
  embed->add_option("--reference", reference, "reference histogram");

  auto* attribute = app.add_subcommand("attribute", "DeepLIFT heatmaps for one sample");
  add_common(attribute, common);
  attribute->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  attribute->add_option("--manifest", manifest, "input manifest")->required();
  attribute->add_option("--sample", sample, "sample id")->required();
  attribute->add_option("--out", out, "output directory")->required();
  attribute->add_option("--target", target, "target class");
  attribute->add_option("--reference", reference, "reference histogram");

  auto* rank = app.add_subcommand("rank-normal", "rank samples by predicted normal-class probability");
  add_common(rank, common);
  rank->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  rank->add_option("--manifest", manifest, "input manifest")->required();
  rank->add_option("--out", out, "output ranking.tsv path")->required();
  rank->add_option("--subset", subset, "train, val, test or all")->default_val("test");
  rank->add_option("--reference", reference, "reference histogram");

  auto* all = app.add_subcommand("all", "synth, split, train, eval, embed, rank-normal and attribute");
  add_common(all, common);
  all->add_option("--out", out, "output directory")->required();
  all->add_option("--per-class", per_class, "clips per class");
  all->add_option("--max-epochs", max_epochs, "epoch cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  try {
    const std::optional<fs::path> ckpt = checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint);
    auto cfg = resolve(common, ckpt);
    if (per_class) cfg.per_class = *per_class;
    if (max_epochs) cfg.max_epochs = *max_epochs;
    if (!task.empty()) cfg.set("task", task);
    if (!source.empty()) cfg.set("embed_source", source);
    if (target) cfg.target_class = *target;
    cfg.validate();

    if (name == "synth") {
      run_synth(cfg, out);
    } else if (name == "preprocess") {
      run_preprocess(cfg, manifest, out);
    } else if (name == "split") {
      run_split(cfg, manifest, out);
    } else if (name == "train") {
      run_train(cfg, manifest, out, &std::cerr);
    } else if (name == "eval") {
      const auto report = run_eval(cfg, checkpoint, manifest, out, subset, reference_or_default(reference, checkpoint));
      std::cout << "accuracy " << format_2dp(report.accuracy) << "\n";
    } else if (name == "embed") {
      if (!ckpt && reference.empty()) throw UsageError("embed without --checkpoint needs --reference");
      run_embed(cfg, ckpt, manifest, out, subset, ckpt ? reference_or_default(reference, *ckpt) : fs::path(reference));
    } else if (name == "attribute") {
      const auto s = run_attribute(cfg, checkpoint, manifest, sample, out, reference_or_default(reference, checkpoint));
      std::cout << "delta_logit " << s.delta_logit << " attribution_sum " << s.attribution_sum << "\n";
    } else if (name == "rank-normal") {
      run_rank_normal(cfg, checkpoint, manifest, out, subset, reference_or_default(reference, checkpoint));
    } else if (name == "all") {
      run_all(cfg, out, &std::cerr);
    }
  } catch (const UsageError& e) {
    std::cerr << "echodx: usage error: " << e.what() << "\n";
    return 2;
  } catch (const StageError& e) {
    std::cerr << "echodx: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "echodx: stage '" << name << "' failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
