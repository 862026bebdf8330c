#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>

#include "dupl/config.hpp"
#include "dupl/data.hpp"
#include "dupl/error.hpp"
#include "dupl/evaluator.hpp"
#include "dupl/gradcheck.hpp"
#include "dupl/kernels/kernels.hpp"
#include "dupl/progressive.hpp"
#include "dupl/trainer.hpp"

namespace {

using namespace dupl;

int run_gen_data(const DatasetSpec& spec, const std::string& out) {
  const auto rows = generate_dataset(spec, out);
  std::cout << "wrote " << rows.size() << " samples to " << out << "\n";
  return 0;
}

int run_gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(seed)) {
    std::printf("%-28s %4d/%-4d within 1e-3  max rel %.3g  %s\n", r.name.c_str(), r.within_1e3,
                r.coords, r.max_rel_error, r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

int run_gmm_debug(const std::string& input, const NoiseFilterConfig& cfg) {
  std::ifstream is(input);
  if (!is) throw IoError("cannot open " + input);
  std::vector<double> losses{std::istream_iterator<double>(is), std::istream_iterator<double>()};
  if (!is.eof()) throw DataError("loss dump must hold whitespace-separated numbers");
  if (losses.size() < 2) throw DataError("loss dump needs at least 2 values");
  const GmmFit f = fit_gmm_1d(losses, cfg);
  std::size_t noisy = 0;
  for (double v : losses) noisy += noise_posterior(f, v) > cfg.gamma ? 1 : 0;
  std::printf("samples     %d\n", f.n_samples);
  std::printf("clean       w=%.6f mu=%.6f sigma=%.6f\n", f.w_c, f.mu_c, f.sigma_c);
  std::printf("noisy       w=%.6f mu=%.6f sigma=%.6f\n", f.w_n, f.mu_n, f.sigma_n);
  std::printf("separation  %.6f (eta %.3f) -> filtering %s\n", f.separation(), cfg.eta,
              f.separation() > cfg.eta ? "active" : "inactive");
  std::printf("above gamma %zu of %zu\n", f.separation() > cfg.eta ? noisy : 0, losses.size());
  std::printf("em          %d iterations, converged=%s, mean log-lik %.6f\n", f.iterations,
              f.converged ? "yes" : "no", f.log_likelihood);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, config, data, split = "val", out;
  bool sweep = false, dump = false;
  double tau_h = -1;
};

int run_eval(const EvalArgs& a) {
  std::filesystem::path config_path = a.config;
  if (config_path.empty()) {
    const auto guess = std::filesystem::path(a.checkpoint).parent_path().parent_path() / "config.txt";
    if (std::filesystem::exists(guess)) config_path = guess;
  }
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  if (!a.data.empty()) cfg.data_dir = a.data;
  const DualStudent<float> model = load_model(a.checkpoint, cfg.model);
  const auto samples = load_split(cfg.data_dir, a.split);
  EvalOptions opt;
  opt.tau_l = cfg.tau_l;
  opt.tau_h = a.tau_h >= 0 ? a.tau_h : cfg.tau_h_end;
  opt.batch_size = cfg.eval_batch;
  const std::filesystem::path out = a.out.empty() ? std::filesystem::path(a.checkpoint).parent_path() : std::filesystem::path(a.out);
  std::filesystem::create_directories(out);
  if (a.dump) opt.dump_dir = out / "labels";
  const EvalReport r = evaluate(model, samples, opt);
  MetricsWriter writer(out / "eval_metrics.csv");
  write_eval_metrics(writer, 0, a.split, r);
  for (int k = 0; k < static_cast<int>(r.subnets.size()); ++k) {
    std::printf("net%d  seg mIoU %.4f  pseudo mIoU %.4f  coverage %.4f  pseudo OA %.4f\n", k + 1,
                r.seg_miou(k), r.pseudo_miou(k), r.subnets[static_cast<std::size_t>(k)].pseudo.coverage,
                r.pseudo_oa(k));
  }
  std::printf("mean  seg mIoU %.4f  pseudo mIoU %.4f  pseudo OA %.4f\n", r.mean_seg_miou(),
              r.mean_pseudo_miou(), r.mean_pseudo_oa());
  std::printf("best  seg mIoU %.4f  pseudo mIoU %.4f\n", r.best_seg_miou(), r.best_pseudo_miou());
  if (a.sweep) {
    std::vector<double> taus;
    for (int i = 0; i <= 8; ++i) taus.push_back(0.4 + 0.05 * i);
    const auto sw = sweep_tau_h(model, samples, cfg.tau_l, taus, cfg.eval_batch);
    for (std::size_t k = 0; k < sw.size(); ++k) {
      for (std::size_t t = 0; t < taus.size(); ++t) {
        const auto& q = sw[k][t];
        std::printf("sweep net%zu tau_h %.2f  pseudo mIoU %.4f  coverage %.4f\n", k + 1, taus[t],
                    q.miou.miou.value_or(0.0), q.coverage);
        writer.write({0, a.split, "net" + std::to_string(k + 1) + "/sweep_pseudo_miou",
                      static_cast<int>(t), q.miou.miou.value_or(0.0)});
      }
    }
  }
  std::cout << "metrics written to " << (out / "eval_metrics.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-student pseudo-label training on synthetic shapes"};
  app.require_subcommand(1);

  DatasetSpec spec;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  gen->add_option("--out", gen_out, "Output directory");
  gen->add_option("--seed", spec.seed, "Generator seed");
  gen->add_option("--n-train", spec.n_train, "Training images");
  gen->add_option("--n-val", spec.n_val, "Validation images");
  gen->add_option("--height", spec.height, "Image height");
  gen->add_option("--width", spec.width, "Image width");
  gen->add_option("--classes", spec.num_classes, "Number of classes (2-8)");

  std::string config_path, out_dir, ablate, data_dir;
  std::uint64_t seed = 0;
  int iters = 0;
  bool dump_labels = false;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config_path, "key = value config file");
  auto* seed_opt = tr->add_option("--seed", seed, "Experiment seed");
  tr->add_option("--out", out_dir, "Run directory");
  tr->add_option("--data", data_dir, "Dataset directory");
  tr->add_option("--ablate", ablate, "Switch off: comma list of ds,dis,dta,anf,reg (or all)");
  tr->add_option("--iters", iters, "Override total iterations (warm-ups rescale)");
  tr->add_flag("--dump-labels", dump_labels, "Write final val predictions as PGM");

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "Evaluate a checkpoint");
  evc->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  evc->add_option("--config", ev.config, "Config (default: config.txt of the run)");
  evc->add_option("--data", ev.data, "Dataset directory");
  evc->add_option("--split", ev.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  evc->add_option("--out", ev.out, "Directory for eval_metrics.csv");
  evc->add_option("--tau-h", ev.tau_h, "Foreground threshold for pseudo-labels");
  evc->add_flag("--sweep", ev.sweep, "Also sweep tau_h over 0.40..0.80");
  evc->add_flag("--dump-labels", ev.dump, "Write predictions as PGM");

  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "Suite seed");

  std::string gmm_input;
  NoiseFilterConfig nf;
  auto* gmm = app.add_subcommand("gmm-debug", "Fit the noise GMM to a loss dump");
  gmm->add_option("--input", gmm_input, "Text file of loss values")->required();
  gmm->add_option("--gamma", nf.gamma, "Posterior threshold");
  gmm->add_option("--eta", nf.eta, "Minimum mean separation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(spec, gen_out);
    if (gc->parsed()) return run_gradcheck(gc_seed);
    if (gmm->parsed()) return run_gmm_debug(gmm_input, nf);
    if (evc->parsed()) return run_eval(ev);
    if (tr->parsed()) {
      TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
      if (*seed_opt) cfg.seed = seed;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (!data_dir.empty()) cfg.data_dir = data_dir;
      if (!ablate.empty()) cfg.flags.disable(ablate);
      if (iters > 0) cfg.override_iters(iters);
      if (dump_labels) cfg.dump_labels = true;
      std::cout << "isa " << kernels::isa_name(kernels::active_isa()) << ", flags "
                << cfg.flags.to_string() << "\n";
      const TrainSummary s = train(cfg, &std::cout);
      std::cout << "checkpoint " << s.final_checkpoint.string() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
