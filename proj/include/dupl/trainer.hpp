#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <vector>

#include "dupl/config.hpp"
#include "dupl/data.hpp"
#include "dupl/evaluator.hpp"
#include "dupl/losses.hpp"
#include "dupl/model.hpp"
#include "dupl/optim.hpp"
#include "dupl/progressive.hpp"

namespace dupl {

struct IterationLog {
  int iteration = 0;
  Phase phase = Phase::kA;
  double tau_h = 0;
  LossReport report;
  // Over every pixel of every sub-net's batch.
  double supervised_frac = 0;
  double ignored_frac = 0;
  double filtered_frac = 0;
  int anf_fitted = 0;  // images whose GMM was fitted
  int anf_active = 0;  // images whose separation exceeded eta
};

// The training loop, one iteration at a time. Deterministic in
// (config, data) regardless of DUPL_THREADS.
class Trainer {
 public:
  Trainer(const TrainConfig& config, std::vector<SynthSample> train,
          std::vector<SynthSample> val);

  IterationLog step();

  int iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  const DualStudent<float>& model() const { return model_; }
  const std::vector<SynthSample>& val() const { return val_; }
  // GMM fits of the latest iteration, per sub-net and image.
  const std::vector<std::vector<GmmFit>>& last_fits() const { return last_fits_; }

  EvalReport evaluate(const std::vector<SynthSample>& samples,
                      const std::optional<std::filesystem::path>& dump_dir = {}) const;

 private:
  std::vector<std::size_t> next_batch();

  TrainConfig config_;
  std::vector<SynthSample> train_;
  std::vector<SynthSample> val_;
  DualStudent<float> model_;
  std::vector<AdamW<float>> optims_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  int iteration_ = 0;
  std::vector<std::vector<GmmFit>> last_fits_;
};

inline constexpr const char* kTrainLogHeader =
    "iteration,phase,tau_h,l_cls,l_dis,l_seg,l_reg,total,supervised_frac,"
    "ignored_frac,filtered_frac,anf_fitted,anf_active";

std::string format_train_log_row(const IterationLog& log);

struct TrainSummary {
  int iterations = 0;
  IterationLog last;
  EvalReport final_eval;
  std::filesystem::path final_checkpoint;
};

// Reads the dataset from config.data_dir and writes config.txt,
// train_log.csv, metrics.csv, checkpoints/*.dupl and (on request) labels/
// under config.out_dir. A non-finite loss aborts with nan_dump.txt.
TrainSummary train(const TrainConfig& config, std::ostream* progress = nullptr);

}  // namespace dupl
