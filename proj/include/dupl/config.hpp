#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dupl/losses.hpp"
#include "dupl/model.hpp"
#include "dupl/optim.hpp"
#include "dupl/progressive.hpp"

namespace dupl {

struct AblationFlags {
  bool dual_student = true;  // ds
  bool l_dis = true;         // dis
  bool dta = true;           // dynamic tau_h
  bool anf = true;           // adaptive noise filtering
  bool l_reg = true;         // reg

  // Comma-separated subset of {ds, dis, dta, anf, reg} to switch off; "all"
  // switches everything off. Without the second sub-net L_dis is off too.
  void disable(const std::string& list);
  std::string to_string() const;
};

// Target of the consistency term on unsupervised pixels. kCam: relaxed CAM
// label of the supervising sub-net (foreground everywhere in the uncertain
// band, by construction). kSeg: the sub-net's own clean-view seg argmax over
// background and present classes.
enum class RegTarget { kCam, kSeg };

struct TrainConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs/default";

  int height = 64;
  int width = 64;
  int num_classes = 4;

  int batch_size = 8;
  int total_iters = 3000;
  int warmup_cls_iters = 300;
  int warmup_seg_iters = 1200;  // noise filtering and L_reg start here

  double tau_l = 0.25;
  double tau_h_start = 0.7;
  double tau_h_end = 0.55;
  NoiseFilterConfig noise;
  LossWeights weights;
  AdamWConfig optim;
  // lr(t) = lr * (1 - t / T)^lr_power; 0 keeps it constant.
  double lr_power = 0.9;
  std::uint64_t seed = 1;
  AblationFlags flags;
  RegTarget reg_target = RegTarget::kSeg;
  SubNetConfig model;

  int eval_every = 500;        // 0 disables intermediate evaluation
  int checkpoint_every = 1000;  // 0 keeps only the final checkpoint
  int eval_batch = 16;
  bool dump_labels = false;

  ThresholdSchedule schedule() const {
    return {tau_l, tau_h_start, tau_h_end, total_iters};
  }
  // Applies --iters: sets T and rescales both warm-up points in proportion.
  void override_iters(int iters);
  void validate() const;
};

// Flat "key = value" lines; '#' starts a comment; strings may be quoted.
// Unknown keys and malformed values throw ConfigError.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);
std::string dump_config(const TrainConfig& config);

}  // namespace dupl
