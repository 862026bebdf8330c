#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dupl/data.hpp"
#include "dupl/metrics.hpp"
#include "dupl/model.hpp"

namespace dupl {

struct EvalOptions {
  double tau_l = 0.25;
  double tau_h = 0.55;
  int batch_size = 16;
  // When set, writes <id>_net<k>_seg.pgm and <id>_net<k>_pseudo.pgm here.
  std::optional<std::filesystem::path> dump_dir;
};

struct SubnetEval {
  ConfusionMatrix seg_cm;
  MiouResult seg;
  PseudoLabelQuality pseudo;
};

// Seg-head predictions and CAM pseudo-labels (from the ground-truth image
// labels) for every sub-net, without augmentation.
struct EvalReport {
  std::vector<SubnetEval> subnets;

  double seg_miou(int net) const;
  double pseudo_miou(int net) const;
  // Mean foreground over-activation of the pseudo-labels.
  double pseudo_oa(int net) const;
  double mean_seg_miou() const;
  double best_seg_miou() const;
  double mean_pseudo_miou() const;
  double best_pseudo_miou() const;
  double mean_pseudo_oa() const;
};

Tensor<float> stack_images(std::span<const Image* const> images);

EvalReport evaluate(const DualStudent<float>& model, std::span<const SynthSample> samples,
                    const EvalOptions& options);

// Pseudo-label quality of each sub-net at several tau_h values.
std::vector<std::vector<PseudoLabelQuality>> sweep_tau_h(
    const DualStudent<float>& model, std::span<const SynthSample> samples,
    double tau_l, const std::vector<double>& tau_h_values, int batch_size);

void write_eval_metrics(MetricsWriter& writer, int iteration, const std::string& split,
                        const EvalReport& report);

}  // namespace dupl
