#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace echodx {

/// counts[i][j]: samples of true class i predicted as j.
using CountMatrix = std::vector<std::vector<long>>;

CountMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);

/// Row-stochastic version of counts; all-zero rows stay zero.
std::vector<std::vector<double>> normalize_rows(const CountMatrix& counts);

struct ClassMetrics {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  bool recall_undefined = false;
  bool precision_undefined = false;
  bool f1_undefined = false;
};

/// Harmonic mean of precision and recall; 0/0 yields 0 and sets `undefined`.
double f1_score(double precision, double recall, bool* undefined = nullptr);

std::vector<ClassMetrics> per_class_prf1(const CountMatrix& counts);

double overall_accuracy(const CountMatrix& counts);

/// Round half to even at `decimals` places, decided on the decimal expansion.
double round_half_even(double value, int decimals = 2);
/// Fixed two-decimal rendering after round_half_even.
std::string format_2dp(double value);

struct MetricsReport {
  CountMatrix counts;
  std::vector<std::vector<double>> normalized;
  std::vector<ClassMetrics> classes;
  double accuracy = 0.0;
};

MetricsReport evaluate(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);

/// `class recall precision f1 flags` rows plus an `accuracy` footer.
std::string render_metrics_tsv(const MetricsReport& report, const std::vector<std::string>& class_names = {});
std::string render_confusion_tsv(const CountMatrix& counts);

void write_metrics(const std::filesystem::path& dir, const MetricsReport& report,
                   const std::vector<std::string>& class_names = {});

}  // namespace echodx
