#include "dupl/evaluator.hpp"

#include <algorithm>

#include "dupl/cam.hpp"
#include "dupl/error.hpp"

namespace dupl {

double EvalReport::seg_miou(int net) const {
  return subnets.at(static_cast<std::size_t>(net)).seg.miou.value_or(0.0);
}
double EvalReport::pseudo_miou(int net) const {
  return subnets.at(static_cast<std::size_t>(net)).pseudo.miou.miou.value_or(0.0);
}
double EvalReport::pseudo_oa(int net) const {
  return mean_over_activation(subnets.at(static_cast<std::size_t>(net)).pseudo.cm).value_or(0.0);
}

namespace {

template <typename F>
double mean_of(const EvalReport& r, F f) {
  double s = 0;
  for (int i = 0; i < static_cast<int>(r.subnets.size()); ++i) s += f(i);
  return r.subnets.empty() ? 0.0 : s / static_cast<double>(r.subnets.size());
}

template <typename F>
double best_of(const EvalReport& r, F f) {
  double b = 0;
  for (int i = 0; i < static_cast<int>(r.subnets.size()); ++i) b = std::max(b, f(i));
  return b;
}

// Runs every sub-net over the samples in batches, handing each image's
// seg logits and CAM to `visit(net, sample index, seg slice, cam)`.
template <typename Visit>
void run_model(const DualStudent<float>& model, std::span<const SynthSample> samples,
               int batch_size, Visit visit) {
  if (batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
  const SubNetConfig& cfg = model.net1.config();
  Graph<float> g;
  g.set_enabled(false);
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Image*> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(&samples[i].image);
    const Tensor<float> batch = stack_images(imgs);
    const int h = batch.dim(2), w = batch.dim(3);
    for (int k = 0; k < model.size(); ++k) {
      const SubNet<float>& net = model.net(k);
      const SubNetOutput<float> out = net.forward(g, batch);
      const int d = out.features.dim(1), fh = out.features.dim(2), fw = out.features.dim(3);
      const std::size_t fsize = static_cast<std::size_t>(d) * fh * fw;
      const std::size_t ssize = static_cast<std::size_t>(cfg.num_classes + 1) * h * w;
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t b = i - start;
        const auto& s = samples[i];
        if (static_cast<int>(s.image_label.size()) != cfg.num_classes) {
          throw ConfigError("sample " + s.id + " has " + std::to_string(s.image_label.size()) +
                            " labels but the model has " + std::to_string(cfg.num_classes) +
                            " classes");
        }
        const CamMap cam = compute_cam<float>(
            out.features.data().subspan(b * fsize, fsize), d, fh, fw,
            net.classifier_weight().data(), cfg.num_classes,
            present_from_bits(s.image_label), h, w);
        visit(k, i, out.seg_logits.data().subspan(b * ssize, ssize), cam);
      }
    }
  }
}

LabelMap argmax_labels(std::span<const float> seg, int channels, int h, int w) {
  LabelMap pred(h, w, 0);
  const std::size_t plane = pred.size();
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int c = 1; c < channels; ++c) {
      if (seg[c * plane + p] > seg[best * plane + p]) best = c;
    }
    pred.labels[p] = static_cast<std::uint8_t>(best);
  }
  return pred;
}

}  // namespace

double EvalReport::mean_seg_miou() const {
  return mean_of(*this, [this](int i) { return seg_miou(i); });
}
double EvalReport::best_seg_miou() const {
  return best_of(*this, [this](int i) { return seg_miou(i); });
}
double EvalReport::mean_pseudo_miou() const {
  return mean_of(*this, [this](int i) { return pseudo_miou(i); });
}
double EvalReport::best_pseudo_miou() const {
  return best_of(*this, [this](int i) { return pseudo_miou(i); });
}
double EvalReport::mean_pseudo_oa() const {
  return mean_of(*this, [this](int i) { return pseudo_oa(i); });
}

Tensor<float> stack_images(std::span<const Image* const> images) {
  if (images.empty()) throw ConfigError("stack_images: empty batch");
  const Image& first = *images.front();
  const std::size_t each = first.pixels.size();
  std::vector<float> values;
  values.reserve(each * images.size());
  for (const Image* img : images) {
    if (img->channels != first.channels || img->height != first.height ||
        img->width != first.width) {
      throw ConfigError("stack_images: images differ in size");
    }
    values.insert(values.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor<float>::from({static_cast<int>(images.size()), first.channels, first.height,
                              first.width},
                             std::move(values));
}

EvalReport evaluate(const DualStudent<float>& model, std::span<const SynthSample> samples,
                    const EvalOptions& options) {
  const int labels = model.net1.config().num_classes + 1;
  std::vector<ConfusionMatrix> seg(static_cast<std::size_t>(model.size()), ConfusionMatrix(labels));
  std::vector<PseudoLabelQualityAccumulator> pseudo(static_cast<std::size_t>(model.size()),
                                                    PseudoLabelQualityAccumulator(labels));
  if (options.dump_dir) std::filesystem::create_directories(*options.dump_dir);
  run_model(model, samples, options.batch_size,
            [&](int k, std::size_t i, std::span<const float> logits, const CamMap& cam) {
              const SynthSample& s = samples[i];
              const LabelMap pred = argmax_labels(logits, labels, cam.height, cam.width);
              seg[static_cast<std::size_t>(k)].accumulate(pred, s.gt_mask);
              const PseudoLabelMap pl = cam_to_pseudolabel(cam, options.tau_l, options.tau_h);
              pseudo[static_cast<std::size_t>(k)].add(pl.map, s.gt_mask);
              if (options.dump_dir) {
                const std::string stem = s.id + "_net" + std::to_string(k + 1);
                write_pgm(*options.dump_dir / (stem + "_seg.pgm"), pred);
                write_pgm(*options.dump_dir / (stem + "_pseudo.pgm"), pl.map);
              }
            });
  EvalReport report;
  for (int k = 0; k < model.size(); ++k) {
    const auto& cm = seg[static_cast<std::size_t>(k)];
    report.subnets.push_back({cm, miou(cm), pseudo[static_cast<std::size_t>(k)].result()});
  }
  return report;
}

std::vector<std::vector<PseudoLabelQuality>> sweep_tau_h(
    const DualStudent<float>& model, std::span<const SynthSample> samples, double tau_l,
    const std::vector<double>& tau_h_values, int batch_size) {
  const int labels = model.net1.config().num_classes + 1;
  std::vector<std::vector<PseudoLabelQualityAccumulator>> acc(
      static_cast<std::size_t>(model.size()),
      std::vector<PseudoLabelQualityAccumulator>(tau_h_values.size(),
                                                 PseudoLabelQualityAccumulator(labels)));
  run_model(model, samples, batch_size,
            [&](int k, std::size_t i, std::span<const float>, const CamMap& cam) {
              for (std::size_t t = 0; t < tau_h_values.size(); ++t) {
                acc[static_cast<std::size_t>(k)][t].add(
                    cam_to_pseudolabel(cam, tau_l, tau_h_values[t]).map, samples[i].gt_mask);
              }
            });
  std::vector<std::vector<PseudoLabelQuality>> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) {
    for (const auto& a : acc[k]) out[k].push_back(a.result());
  }
  return out;
}

void write_eval_metrics(MetricsWriter& writer, int iteration, const std::string& split,
                        const EvalReport& report) {
  for (std::size_t k = 0; k < report.subnets.size(); ++k) {
    const auto& s = report.subnets[k];
    const std::string net = "net" + std::to_string(k + 1) + "/";
    writer.write_miou(iteration, split, net + "seg_", s.seg);
    writer.write_miou(iteration, split, net + "pseudo_", s.pseudo.miou);
    writer.write({iteration, split, net + "pseudo_coverage", -1, s.pseudo.coverage});
    const auto oa = over_activation_rate(s.pseudo.cm);
    for (std::size_t c = 0; c < oa.size(); ++c) {
      if (oa[c]) writer.write({iteration, split, net + "pseudo_oa", static_cast<int>(c), *oa[c]});
    }
    if (auto m = mean_over_activation(s.pseudo.cm)) {
      writer.write({iteration, split, net + "pseudo_mean_oa", -1, *m});
    }
    if (auto m = mean_over_activation(s.seg_cm)) {
      writer.write({iteration, split, net + "seg_mean_oa", -1, *m});
    }
  }
  writer.write({iteration, split, "seg_miou_mean", -1, report.mean_seg_miou()});
  writer.write({iteration, split, "seg_miou_best", -1, report.best_seg_miou()});
  writer.write({iteration, split, "pseudo_miou_mean", -1, report.mean_pseudo_miou()});
  writer.write({iteration, split, "pseudo_miou_best", -1, report.best_pseudo_miou()});
  writer.write({iteration, split, "pseudo_mean_oa", -1, report.mean_pseudo_oa()});
}

}  // namespace dupl
