#include "echodx/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "echodx/tensor.hpp"

namespace echodx {

CountMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  if (truth.size() != predicted.size())
    throw ShapeError("label vectors differ in length: " + std::to_string(truth.size()) + " vs " +
                     std::to_string(predicted.size()));
  CountMatrix counts(classes, std::vector<long>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= classes || static_cast<std::size_t>(p) >= classes)
      throw ConfigError("label out of range [0, " + std::to_string(classes) + ")");
    ++counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return counts;
}

std::vector<std::vector<double>> normalize_rows(const CountMatrix& counts) {
  std::vector<std::vector<double>> out;
  for (const auto& row : counts) {
    long sum = 0;
    for (long v : row) sum += v;
    std::vector<double> r(row.size(), 0.0);
    if (sum > 0)
      for (std::size_t j = 0; j < row.size(); ++j) r[j] = static_cast<double>(row[j]) / static_cast<double>(sum);
    out.push_back(std::move(r));
  }
  return out;
}

double f1_score(double precision, double recall, bool* undefined) {
  const double denom = precision + recall;
  if (undefined) *undefined = denom == 0.0;
  if (denom == 0.0) return 0.0;
  return 2.0 * precision * recall / denom;
}

std::vector<ClassMetrics> per_class_prf1(const CountMatrix& counts) {
  const auto k = counts.size();
  std::vector<ClassMetrics> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c].size() != k) throw ShapeError("confusion matrix must be square");
    long row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += counts[c][j];
      col += counts[j][c];
    }
    const double tp = static_cast<double>(counts[c][c]);
    auto& m = out[c];
    m.recall_undefined = row == 0;
    m.precision_undefined = col == 0;
    m.recall = row ? tp / static_cast<double>(row) : 0.0;
    m.precision = col ? tp / static_cast<double>(col) : 0.0;
    m.f1 = f1_score(m.precision, m.recall, &m.f1_undefined);
  }
  return out;
}

double overall_accuracy(const CountMatrix& counts) {
  long total = 0, diag = 0;
  for (std::size_t i = 0; i < counts.size(); ++i)
    for (std::size_t j = 0; j < counts[i].size(); ++j) {
      total += counts[i][j];
      if (i == j) diag += counts[i][j];
    }
  if (total == 0) throw ConfigError("accuracy of an empty confusion matrix");
  return static_cast<double>(diag) / static_cast<double>(total);
}

double round_half_even(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double s = value * scale;
  const double lo = std::floor(s);
  const double frac = s - lo;
  double q;
  // treat values within representation error of .5 as exact ties
  if (std::abs(frac - 0.5) < 1e-9) {
    q = std::fmod(lo, 2.0) == 0.0 ? lo : lo + 1.0;
  } else {
    q = std::round(s);
  }
  return q / scale;
}

std::string format_2dp(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", round_half_even(value, 2));
  return buf;
}

MetricsReport evaluate(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  MetricsReport r;
  r.counts = confusion_matrix(truth, predicted, classes);
  r.normalized = normalize_rows(r.counts);
  r.classes = per_class_prf1(r.counts);
  r.accuracy = overall_accuracy(r.counts);
  return r;
}

std::string render_metrics_tsv(const MetricsReport& report, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "class\trecall\tprecision\tf1\tflags\n";
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    const auto& m = report.classes[c];
    std::string flags;
    auto flag = [&](bool on, const char* name) {
      if (!on) return;
      if (!flags.empty()) flags += ',';
      flags += name;
    };
    flag(m.recall_undefined, "recall_undefined");
    flag(m.precision_undefined, "precision_undefined");
    flag(m.f1_undefined, "f1_undefined");
    if (flags.empty()) flags = "-";
    const auto name = c < class_names.size() ? class_names[c] : std::to_string(c);
    out << name << '\t' << format_2dp(m.recall) << '\t' << format_2dp(m.precision) << '\t' << format_2dp(m.f1) << '\t'
        << flags << '\n';
  }
  out << "accuracy\t" << format_2dp(report.accuracy) << "\t\t\t-\n";
  return out.str();
}

std::string render_confusion_tsv(const CountMatrix& counts) {
  std::ostringstream out;
  out << "true\\pred";
  for (std::size_t j = 0; j < counts.size(); ++j) out << '\t' << j;
  out << '\n';
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out << i;
    for (long v : counts[i]) out << '\t' << v;
    out << '\n';
  }
  return out.str();
}

void write_metrics(const std::filesystem::path& dir, const MetricsReport& report,
                   const std::vector<std::string>& class_names) {
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << text;
  };
  put("metrics.tsv", render_metrics_tsv(report, class_names));
  put("confusion.tsv", render_confusion_tsv(report.counts));
}

}  // namespace echodx
