#include "dupl/losses.hpp"

#include "dupl/error.hpp"
#include "dupl/ops.hpp"

namespace dupl {

void LossWeights::validate() const {
  if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0)) {
    throw ConfigError("loss weights must be >= 0");
  }
}

Phase phase_at(int iteration, int warmup_cls_iters, int warmup_seg_iters) {
  if (iteration < warmup_cls_iters) return Phase::kA;
  if (iteration < warmup_seg_iters) return Phase::kB;
  return Phase::kC;
}

const char* phase_name(Phase phase) {
  switch (phase) {
    case Phase::kA: return "A";
    case Phase::kB: return "B";
    default: return "C";
  }
}

double combine_losses(double l_cls, double l_dis, double l_seg, double l_reg,
                      const LossWeights& w, Phase phase) {
  double total = l_cls + w.lambda1 * l_dis;
  if (phase != Phase::kA) total += w.lambda2 * l_seg;
  if (phase == Phase::kC) total += w.lambda3 * l_reg;
  return total;
}

namespace {

void check_filter(const LabelMap& map, const NoiseMask* filter) {
  if (filter && !filter->mask.empty() &&
      (filter->height != map.height || filter->width != map.width)) {
    throw ConfigError("noise mask does not match label map");
  }
}

bool filtered(const NoiseMask* filter, std::size_t p) {
  return filter && !filter->mask.empty() && filter->mask[p];
}

template <typename T>
void check_seg(const Tensor<T>& seg, std::size_t n_images, const LabelMap& first) {
  if (seg.shape().rank() != 4 || static_cast<std::size_t>(seg.dim(0)) != n_images ||
      seg.dim(2) != first.height || seg.dim(3) != first.width) {
    throw ConfigError("seg logits " + seg.shape().to_string() +
                      " do not match the label maps");
  }
}

}  // namespace

LabelMap effective_labels(const PseudoLabelMap& labels, const NoiseMask* filter) {
  check_filter(labels.map, filter);
  LabelMap out = labels.map;
  for (std::size_t p = 0; p < out.size(); ++p) {
    if (filtered(filter, p)) out.labels[p] = kIgnoreLabel;
  }
  return out;
}

PixelCounts count_pixels(const PseudoLabelMap& labels, const NoiseMask* filter) {
  check_filter(labels.map, filter);
  PixelCounts c;
  for (std::size_t p = 0; p < labels.map.size(); ++p) {
    if (labels.map.labels[p] == kIgnoreLabel) {
      ++c.ignored;
    } else if (filtered(filter, p)) {
      ++c.filtered;
    } else {
      ++c.supervised;
    }
  }
  return c;
}

NoiseMask unsupervised_mask(const PseudoLabelMap& labels, const NoiseMask* filter) {
  check_filter(labels.map, filter);
  NoiseMask m(labels.map.height, labels.map.width);
  for (std::size_t p = 0; p < m.size(); ++p) {
    m.mask[p] = labels.map.labels[p] == kIgnoreLabel || filtered(filter, p);
  }
  return m;
}

template <typename T>
Tensor<T> classification_loss(Graph<T>& g, const Tensor<T>& class_logits,
                              std::span<const std::uint8_t> image_labels) {
  if (image_labels.size() != class_logits.numel()) {
    throw ConfigError("classification_loss: label count mismatch");
  }
  std::vector<T> y(image_labels.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (image_labels[i] > 1) throw DataError("classification_loss: labels must be 0/1");
    y[i] = static_cast<T>(image_labels[i]);
  }
  return multilabel_soft_margin(g, class_logits, std::span<const T>(y));
}

template <typename T>
Tensor<T> discrepancy_loss(Graph<T>& g, const Tensor<T>& f1, const Tensor<T>& f2,
                           double eps) {
  if (!(f1.shape() == f2.shape())) throw ConfigError("discrepancy_loss: shape mismatch");
  return add(g, cosine_discrepancy(g, f1, stop_gradient(f2), eps),
             cosine_discrepancy(g, f2, stop_gradient(f1), eps));
}

template <typename T>
Tensor<T> segmentation_term(Graph<T>& g, const Tensor<T>& seg_logits,
                            const std::vector<PseudoLabelMap>& labels,
                            std::span<const NoiseMask> filters) {
  if (labels.empty()) throw ConfigError("segmentation_term: no labels");
  if (!filters.empty() && filters.size() != labels.size()) {
    throw ConfigError("segmentation_term: one noise mask per image expected");
  }
  check_seg(seg_logits, labels.size(), labels.front().map);
  std::vector<std::uint8_t> targets;
  targets.reserve(seg_logits.numel() / static_cast<std::size_t>(seg_logits.dim(1)));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const LabelMap eff = effective_labels(labels[i], filters.empty() ? nullptr : &filters[i]);
    if (eff.height != labels.front().map.height || eff.width != labels.front().map.width) {
      throw ConfigError("segmentation_term: label maps differ in size");
    }
    targets.insert(targets.end(), eff.labels.begin(), eff.labels.end());
  }
  return pixel_cross_entropy(g, seg_logits, targets);
}

template <typename T>
Tensor<T> cross_supervision_loss(Graph<T>& g, const Tensor<T>& seg_logits_1,
                                 const Tensor<T>& seg_logits_2,
                                 const std::vector<PseudoLabelMap>& labels_1,
                                 const std::vector<PseudoLabelMap>& labels_2,
                                 std::span<const NoiseMask> filters_1,
                                 std::span<const NoiseMask> filters_2) {
  if (!(seg_logits_1.shape() == seg_logits_2.shape())) {
    throw ConfigError("cross_supervision_loss: seg logits differ in shape");
  }
  return add(g, segmentation_term(g, seg_logits_1, labels_2, filters_1),
             segmentation_term(g, seg_logits_2, labels_1, filters_2));
}

template <typename T>
Tensor<T> consistency_loss(Graph<T>& g, const Tensor<T>& strong_seg_logits,
                           const std::vector<PseudoLabelMap>& relaxed_labels,
                           const std::vector<AugmentRecord>& records,
                           const std::vector<NoiseMask>& masks) {
  const std::size_t n = relaxed_labels.size();
  if (n == 0 || records.size() != n || masks.size() != n) {
    throw ConfigError("consistency_loss: need one label, record and mask per image");
  }
  check_seg(strong_seg_logits, n, relaxed_labels.front().map);
  std::vector<std::uint8_t> targets;
  targets.reserve(n * relaxed_labels.front().map.size());
  for (std::size_t i = 0; i < n; ++i) {
    const LabelMap& lab = relaxed_labels[i].map;
    if (masks[i].height != lab.height || masks[i].width != lab.width ||
        lab.height != relaxed_labels.front().map.height ||
        lab.width != relaxed_labels.front().map.width) {
      throw ConfigError("consistency_loss: mask/label shape mismatch");
    }
    const LabelMap moved = records[i].spatial_identity() ? lab : replay_spatial(records[i], lab);
    const NoiseMask moved_mask =
        records[i].spatial_identity() ? masks[i] : replay_spatial(records[i], masks[i]);
    for (std::size_t p = 0; p < moved.size(); ++p) {
      targets.push_back(moved_mask.mask[p] ? moved.labels[p] : kIgnoreLabel);
    }
  }
  return pixel_cross_entropy(g, strong_seg_logits, targets);
}

template <typename T>
Tensor<T> total_loss(Graph<T>& g, const LossTerms<T>& terms, const LossWeights& w,
                     Phase phase, LossReport* report) {
  if (!terms.cls.defined()) throw ConfigError("total_loss: L_cls is required");
  w.validate();
  Tensor<T> total = terms.cls;
  auto value = [](const Tensor<T>& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };
  auto add_weighted = [&](const Tensor<T>& term, double lambda) {
    if (term.defined()) total = add(g, total, scale(g, term, lambda));
  };
  add_weighted(terms.dis, w.lambda1);
  if (phase != Phase::kA) add_weighted(terms.seg, w.lambda2);
  if (phase == Phase::kC) add_weighted(terms.reg, w.lambda3);
  if (report) {
    report->l_cls = value(terms.cls);
    report->l_dis = value(terms.dis);
    report->l_seg = phase != Phase::kA ? value(terms.seg) : 0.0;
    report->l_reg = phase == Phase::kC ? value(terms.reg) : 0.0;
    report->total = combine_losses(report->l_cls, report->l_dis, report->l_seg,
                                   report->l_reg, w, phase);
  }
  return total;
}

#define DUPL_INSTANTIATE(T)                                                      \
  template Tensor<T> classification_loss<T>(Graph<T>&, const Tensor<T>&,         \
                                            std::span<const std::uint8_t>);      \
  template Tensor<T> discrepancy_loss<T>(Graph<T>&, const Tensor<T>&,            \
                                         const Tensor<T>&, double);              \
  template Tensor<T> segmentation_term<T>(Graph<T>&, const Tensor<T>&,           \
                                          const std::vector<PseudoLabelMap>&,    \
                                          std::span<const NoiseMask>);           \
  template Tensor<T> cross_supervision_loss<T>(                                  \
      Graph<T>&, const Tensor<T>&, const Tensor<T>&,                             \
      const std::vector<PseudoLabelMap>&, const std::vector<PseudoLabelMap>&,    \
      std::span<const NoiseMask>, std::span<const NoiseMask>);                   \
  template Tensor<T> consistency_loss<T>(Graph<T>&, const Tensor<T>&,            \
                                         const std::vector<PseudoLabelMap>&,     \
                                         const std::vector<AugmentRecord>&,      \
                                         const std::vector<NoiseMask>&);         \
  template Tensor<T> total_loss<T>(Graph<T>&, const LossTerms<T>&,               \
                                   const LossWeights&, Phase, LossReport*);

DUPL_INSTANTIATE(float)
DUPL_INSTANTIATE(double)
#undef DUPL_INSTANTIATE

}  // namespace dupl
