#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dupl/data.hpp"
#include "dupl/maps.hpp"
#include "dupl/tensor.hpp"

namespace dupl {

// Weights of L_dis, L_seg and L_reg in the total objective.
struct LossWeights {
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double lambda3 = 0.05;

  void validate() const;
};

// A: classifier warm-up, B: segmentation warm-up, C: everything on.
enum class Phase { kA, kB, kC };

Phase phase_at(int iteration, int warmup_cls_iters, int warmup_seg_iters);
const char* phase_name(Phase phase);

inline constexpr double kDiscrepancyEps = 1e-4;

struct PixelCounts {
  std::size_t supervised = 0;
  std::size_t ignored = 0;   // uncertain band
  std::size_t filtered = 0;  // removed by the noise mask on top of that
};

struct SubnetLosses {
  double l_cls = 0;
  double l_seg = 0;
  double l_reg = 0;
  PixelCounts pixels;
};

struct LossReport {
  double l_cls = 0, l_dis = 0, l_seg = 0, l_reg = 0, total = 0;
  std::vector<SubnetLosses> subnets;
};

// Plain double version of the weighted sum, with phase gating.
double combine_losses(double l_cls, double l_dis, double l_seg, double l_reg,
                      const LossWeights& weights, Phase phase);

// Labels with ignore added wherever `filter` is set (filter may be null).
LabelMap effective_labels(const PseudoLabelMap& labels, const NoiseMask* filter);

PixelCounts count_pixels(const PseudoLabelMap& labels, const NoiseMask* filter);

// Pixels left without a strict label: the uncertain band plus the noise mask.
NoiseMask unsupervised_mask(const PseudoLabelMap& labels, const NoiseMask* filter);

// class_logits: N x C, image_labels: N*C entries of 0/1.
template <typename T>
Tensor<T> classification_loss(Graph<T>& g, const Tensor<T>& class_logits,
                              std::span<const std::uint8_t> image_labels);

// D(f1, sg(f2)) + D(f2, sg(f1)), batch-averaged. f1, f2: N x D x h x w.
template <typename T>
Tensor<T> discrepancy_loss(Graph<T>& g, const Tensor<T>& f1, const Tensor<T>& f2,
                           double eps = kDiscrepancyEps);

// CE of one sub-net's seg logits (N x (C+1) x H x W) against the labels
// supervising it, with its own noise masks (empty span = no filtering).
template <typename T>
Tensor<T> segmentation_term(Graph<T>& g, const Tensor<T>& seg_logits,
                            const std::vector<PseudoLabelMap>& labels,
                            std::span<const NoiseMask> filters);

// CE(P1, Y2 | filter1) + CE(P2, Y1 | filter2): sub-net 1 learns from the
// labels of sub-net 2 and vice versa.
template <typename T>
Tensor<T> cross_supervision_loss(Graph<T>& g, const Tensor<T>& seg_logits_1,
                                 const Tensor<T>& seg_logits_2,
                                 const std::vector<PseudoLabelMap>& labels_1,
                                 const std::vector<PseudoLabelMap>& labels_2,
                                 std::span<const NoiseMask> filters_1,
                                 std::span<const NoiseMask> filters_2);

// One sub-net's consistency term. relaxed labels and masks live in the
// clean view; both are carried into the strong view with each image's
// spatial record. Per image: CE over the transported mask, divided by its
// pixel count (0 when empty); then batch mean.
template <typename T>
Tensor<T> consistency_loss(Graph<T>& g, const Tensor<T>& strong_seg_logits,
                           const std::vector<PseudoLabelMap>& relaxed_labels,
                           const std::vector<AugmentRecord>& records,
                           const std::vector<NoiseMask>& masks);

// Undefined tensors count as zero.
template <typename T>
struct LossTerms {
  Tensor<T> cls, dis, seg, reg;
};

// L_cls + l1 L_dis (+ l2 L_seg from phase B) (+ l3 L_reg in phase C).
// Fills the scalar parts and total of `report` when given.
template <typename T>
Tensor<T> total_loss(Graph<T>& g, const LossTerms<T>& terms,
                     const LossWeights& weights, Phase phase,
                     LossReport* report = nullptr);

}  // namespace dupl
