#include "dupl/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "dupl/error.hpp"

namespace dupl {

ConfusionMatrix::ConfusionMatrix(int num_labels)
    : n_(num_labels),
      counts_(static_cast<std::size_t>(num_labels) * num_labels, 0) {
  if (num_labels < 0 || num_labels >= kIgnoreLabel) {
    throw ConfigError("confusion matrix: bad label count");
  }
}

void ConfusionMatrix::accumulate(std::span<const std::uint8_t> pred,
                                 std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw ConfigError("accumulate: size mismatch");
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (gt[p] == kIgnoreLabel) continue;
    if (gt[p] >= n_ || pred[p] >= n_) {
      throw DataError("accumulate: label out of range at pixel " + std::to_string(p));
    }
    ++counts_[static_cast<std::size_t>(gt[p]) * n_ + pred[p]];
  }
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ConfigError("accumulate: map shape mismatch");
  }
  accumulate(std::span<const std::uint8_t>(pred.labels),
             std::span<const std::uint8_t>(gt.labels));
}

void ConfusionMatrix::accumulate_defined(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ConfigError("accumulate: map shape mismatch");
  }
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const auto g = gt.labels[p], q = pred.labels[p];
    if (g == kIgnoreLabel || q == kIgnoreLabel) continue;
    if (g >= n_ || q >= n_) throw DataError("accumulate: label out of range");
    ++counts_[static_cast<std::size_t>(g) * n_ + q];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ConfigError("merge: label count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::fp(int k) const {
  std::uint64_t s = 0;
  for (int g = 0; g < n_; ++g) {
    if (g != k) s += at(g, k);
  }
  return s;
}

std::uint64_t ConfusionMatrix::fn(int k) const {
  std::uint64_t s = 0;
  for (int p = 0; p < n_; ++p) {
    if (p != k) s += at(k, p);
  }
  return s;
}

MiouResult miou(const ConfusionMatrix& cm) {
  MiouResult r;
  r.per_class.resize(static_cast<std::size_t>(cm.num_labels()));
  double sum = 0;
  int defined = 0;
  for (int k = 0; k < cm.num_labels(); ++k) {
    const std::uint64_t denom = cm.tp(k) + cm.fp(k) + cm.fn(k);
    if (denom == 0) continue;
    const double iou = static_cast<double>(cm.tp(k)) / static_cast<double>(denom);
    r.per_class[static_cast<std::size_t>(k)] = iou;
    sum += iou;
    ++defined;
  }
  if (defined > 0) r.miou = sum / defined;
  return r;
}

std::vector<std::optional<double>> precision(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(cm.num_labels()));
  for (int k = 0; k < cm.num_labels(); ++k) {
    const std::uint64_t predicted = cm.tp(k) + cm.fp(k);
    if (predicted > 0) {
      out[static_cast<std::size_t>(k)] =
          static_cast<double>(cm.tp(k)) / static_cast<double>(predicted);
    }
  }
  return out;
}

std::vector<std::optional<double>> over_activation_rate(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(cm.num_labels()));
  for (int k = 1; k < cm.num_labels(); ++k) {
    const std::uint64_t predicted = cm.tp(k) + cm.fp(k);
    if (predicted > 0) {
      out[static_cast<std::size_t>(k)] =
          static_cast<double>(cm.fp(k)) / static_cast<double>(predicted);
    }
  }
  return out;
}

std::optional<double> mean_over_activation(const ConfusionMatrix& cm) {
  double sum = 0;
  int n = 0;
  for (const auto& v : over_activation_rate(cm)) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

void PseudoLabelQualityAccumulator::add(const LabelMap& pseudo, const LabelMap& gt) {
  cm_.accumulate_defined(pseudo, gt);
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (gt.labels[p] == kIgnoreLabel) continue;
    ++labelled_;
    if (pseudo.labels[p] != kIgnoreLabel) ++defined_;
  }
}

PseudoLabelQuality PseudoLabelQualityAccumulator::result() const {
  PseudoLabelQuality q{cm_, miou(cm_), 0.0};
  if (labelled_ > 0) q.coverage = static_cast<double>(defined_) / static_cast<double>(labelled_);
  return q;
}

PseudoLabelQuality pseudolabel_quality(std::span<const LabelMap> pseudo,
                                       std::span<const LabelMap> gts, int num_labels) {
  if (pseudo.size() != gts.size()) throw ConfigError("pseudolabel_quality: stream length mismatch");
  PseudoLabelQualityAccumulator acc(num_labels);
  for (std::size_t i = 0; i < pseudo.size(); ++i) acc.add(pseudo[i], gts[i]);
  return acc.result();
}

std::string format_metric_row(const MetricRow& row) {
  char value[64];
  std::snprintf(value, sizeof value, "%.17g", row.value);
  std::ostringstream os;
  os << row.iteration << ',' << row.split << ',' << row.metric << ',';
  if (row.cls >= 0) os << row.cls;
  os << ',' << value;
  return os.str();
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool truncate) : path_(path) {
  const bool fresh = truncate || !std::filesystem::exists(path);
  os_.open(path, fresh ? std::ios::trunc : std::ios::app);
  if (!os_) throw IoError("cannot write " + path.string());
  if (fresh) os_ << kMetricsHeader << '\n';
}

void MetricsWriter::write(const MetricRow& row) {
  os_ << format_metric_row(row) << '\n';
  os_.flush();
  if (!os_) throw IoError("failed writing " + path_.string());
}

void MetricsWriter::write_miou(int iteration, const std::string& split,
                               const std::string& prefix, const MiouResult& result) {
  if (result.miou) write({iteration, split, prefix + "miou", -1, *result.miou});
  for (std::size_t k = 0; k < result.per_class.size(); ++k) {
    if (result.per_class[k]) {
      write({iteration, split, prefix + "iou", static_cast<int>(k), *result.per_class[k]});
    }
  }
}

std::vector<MetricRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) {
    throw DataError("unexpected metrics header in " + path.string());
  }
  std::vector<MetricRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string it, split, metric, cls, value;
    if (!std::getline(ss, it, ',') || !std::getline(ss, split, ',') ||
        !std::getline(ss, metric, ',') || !std::getline(ss, cls, ',') ||
        !std::getline(ss, value)) {
      throw DataError("malformed metrics row: " + line);
    }
    try {
      rows.push_back({std::stoi(it), split, metric, cls.empty() ? -1 : std::stoi(cls),
                      std::stod(value)});
    } catch (const std::exception&) {
      throw DataError("malformed metrics row: " + line);
    }
  }
  return rows;
}

}  // namespace dupl
