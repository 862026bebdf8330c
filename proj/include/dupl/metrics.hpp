#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dupl/maps.hpp"

namespace dupl {

// Rows are ground truth, columns prediction, over labels 0..C.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_labels = 0);

  // Counts every pixel whose gt is not ignore. Either map holding a label
  // >= num_labels (other than ignore in gt) throws DataError.
  void accumulate(std::span<const std::uint8_t> pred,
                  std::span<const std::uint8_t> gt);
  void accumulate(const LabelMap& pred, const LabelMap& gt);
  // Same, but pixels predicted as ignore are skipped as well.
  void accumulate_defined(const LabelMap& pred, const LabelMap& gt);
  void merge(const ConfusionMatrix& other);

  int num_labels() const { return n_; }
  std::uint64_t at(int gt, int pred) const {
    return counts_[static_cast<std::size_t>(gt) * n_ + pred];
  }
  std::uint64_t total() const;
  std::uint64_t tp(int k) const { return at(k, k); }
  std::uint64_t fp(int k) const;  // predicted k, gt differs
  std::uint64_t fn(int k) const;  // gt k, predicted otherwise

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int n_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  std::optional<double> miou;  // absent when no class has TP+FP+FN > 0
  std::vector<std::optional<double>> per_class;
};

MiouResult miou(const ConfusionMatrix& cm);

// FP/(TP+FP) per label; label 0 (background) and labels never predicted
// are absent.
std::vector<std::optional<double>> over_activation_rate(const ConfusionMatrix& cm);
std::optional<double> mean_over_activation(const ConfusionMatrix& cm);

// TP/(TP+FP) per label; absent when never predicted.
std::vector<std::optional<double>> precision(const ConfusionMatrix& cm);

struct PseudoLabelQuality {
  ConfusionMatrix cm;
  MiouResult miou;
  double coverage = 0;  // non-ignore pseudo-labels / pixels with a gt label
};

class PseudoLabelQualityAccumulator {
 public:
  explicit PseudoLabelQualityAccumulator(int num_labels) : cm_(num_labels) {}
  void add(const LabelMap& pseudo, const LabelMap& gt);
  PseudoLabelQuality result() const;

 private:
  ConfusionMatrix cm_;
  std::uint64_t defined_ = 0;
  std::uint64_t labelled_ = 0;
};

PseudoLabelQuality pseudolabel_quality(std::span<const LabelMap> pseudo,
                                       std::span<const LabelMap> gts,
                                       int num_labels);

// Long-format metric rows: iteration, split, metric, class, value. class
// is left empty for scalar metrics.
struct MetricRow {
  int iteration = 0;
  std::string split;
  std::string metric;
  int cls = -1;
  double value = 0;
};

std::string format_metric_row(const MetricRow& row);
inline constexpr const char* kMetricsHeader = "iteration,split,metric,class,value";

// Appends rows to a CSV, writing the header when the file is new.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path, bool truncate = true);
  void write(const MetricRow& row);
  void write_miou(int iteration, const std::string& split, const std::string& prefix,
                  const MiouResult& result);

 private:
  std::ofstream os_;
  std::filesystem::path path_;
};

std::vector<MetricRow> read_metrics(const std::filesystem::path& path);

}  // namespace dupl
