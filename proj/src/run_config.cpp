#include "echodx/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace echodx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty())
    throw UsageError("invalid value '" + text + "' for key " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "yes") return true;
  if (text == "0" || text == "false" || text == "no") return false;
  throw UsageError("invalid boolean '" + text + "' for key " + key);
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw UsageError("empty list for key " + key);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define ECHODX_FIELD(name, parse, show)                                                        \
  Field {                                                                                      \
    #name, [](RunConfig& c, const std::string& k, const std::string& v) { c.name = parse; },   \
        [](const RunConfig& c) -> std::string { return show; }                                 \
  }
#define ECHODX_NUM(name, type) ECHODX_FIELD(name, parse_number<type>(k, v), std::to_string(c.name))
#define ECHODX_REAL(name) ECHODX_FIELD(name, parse_number<double>(k, v), fmt(c.name))
#define ECHODX_BOOL(name) ECHODX_FIELD(name, parse_bool(k, v), c.name ? "1" : "0")
#define ECHODX_LIST(name) ECHODX_FIELD(name, parse_list(k, v), fmt_list(c.name))
#define ECHODX_TEXT(name) ECHODX_FIELD(name, ((void)k, v), c.name)

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      ECHODX_NUM(seed, std::uint64_t),
      ECHODX_NUM(per_class, std::size_t),
      ECHODX_TEXT(task),
      ECHODX_REAL(noise_sigma),
      ECHODX_LIST(stages),
      ECHODX_LIST(blocks),
      ECHODX_NUM(stem_midplane, std::size_t),
      ECHODX_REAL(sector_apex_row),
      ECHODX_REAL(sector_apex_col),
      ECHODX_REAL(sector_radius),
      ECHODX_REAL(sector_half_angle),
      ECHODX_BOOL(zero_static_bright),
      ECHODX_BOOL(augment),
      ECHODX_REAL(max_shift),
      ECHODX_REAL(max_rotation),
      ECHODX_REAL(lr),
      ECHODX_NUM(batch, std::size_t),
      ECHODX_NUM(patience, std::size_t),
      ECHODX_NUM(max_epochs, std::size_t),
      ECHODX_REAL(split_train),
      ECHODX_REAL(split_val),
      ECHODX_REAL(split_test),
      ECHODX_REAL(perplexity),
      ECHODX_NUM(tsne_iters, std::size_t),
      ECHODX_TEXT(embed_source),
      ECHODX_TEXT(baseline),
      ECHODX_NUM(target_class, int),
  };
  return table;
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.emplace_back(f.key);
    return out;
  }();
  return k;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(*this, key, value);
      return;
    }
  throw UsageError("unknown config key '" + key + "'");
}

void RunConfig::parse(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + " is not key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  parse(ss.str());
}

std::string RunConfig::render() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  try {
    network().validate();
    phantom().validate();
  } catch (const UsageError&) {
    throw;
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (task != "lv" && task != "valve") throw UsageError("task must be lv or valve");
  if (embed_source != "features" && embed_source != "pixels") throw UsageError("embed_source must be features or pixels");
  if (baseline != "zero") throw UsageError("baseline must be zero");
  if (batch == 0) throw UsageError("batch must be positive");
  if (!(lr > 0.0)) throw UsageError("lr must be positive");
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= 3) throw UsageError("target_class out of range");
  const double sum = split_train + split_val + split_test;
  if (split_train <= 0.0 || split_val < 0.0 || split_test <= 0.0 || std::abs(sum - 1.0) > 1e-9)
    throw UsageError("split fractions must be non-negative and sum to 1");
}

NetworkConfig RunConfig::network() const {
  NetworkConfig c;
  c.stage_channels = stages;
  c.blocks_per_stage = blocks;
  c.stem_midplane = stem_midplane;
  c.num_classes = 3;
  return c;
}

PreprocessOptions RunConfig::preprocess() const {
  PreprocessOptions p;
  p.geometry = {sector_apex_row, sector_apex_col, sector_radius, sector_half_angle};
  p.zero_static_bright = zero_static_bright;
  p.max_shift = max_shift;
  p.max_rotation_deg = max_rotation;
  return p;
}

TrainOptions RunConfig::training() const {
  TrainOptions t;
  t.lr = lr;
  t.batch = batch;
  t.patience = patience;
  t.max_epochs = max_epochs;
  t.seed = seed;
  t.augment = augment;
  t.preprocess = preprocess();
  return t;
}

PhantomParams RunConfig::phantom() const {
  PhantomParams p;
  p.noise_sigma = noise_sigma;
  p.task = task == "valve" ? PhantomTask::Valve : PhantomTask::Lv;
  p.sector = preprocess().geometry;
  return p;
}

TsneOptions RunConfig::tsne() const {
  TsneOptions t;
  t.iterations = tsne_iters;
  return t;
}

}  // namespace echodx
