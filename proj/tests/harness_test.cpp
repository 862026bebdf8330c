#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "dupl/config.hpp"
#include "dupl/error.hpp"
#include "dupl/evaluator.hpp"
#include "dupl/trainer.hpp"
#include "test_util.hpp"

using namespace dupl;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCli = DUPL_CLI_PATH;

// Small dataset shared by the harness cases.
const fs::path& tiny_data() {
  static test::TempDir dir("harness_data");
  static bool made = false;
  if (!made) {
    DatasetSpec s;
    s.n_train = 16;
    s.n_val = 6;
    s.height = 32;
    s.width = 32;
    s.num_classes = 3;
    s.seed = 3;
    generate_dataset(s, dir.path());
    made = true;
  }
  return dir.path();
}

std::string tiny_config_text(const fs::path& out, int iters = 10) {
  std::ostringstream os;
  os << "data_dir = \"" << tiny_data().string() << "\"\n"
     << "out_dir = \"" << out.string() << "\"\n"
     << "height = 32\nwidth = 32\nnum_classes = 3\nbatch_size = 4\n"
     << "total_iters = " << iters << "\nwarmup_cls_iters = 2\nwarmup_seg_iters = 5\n"
     << "backbone_channels = [8, 12]\nbackbone_strides = [2, 2]\n"
     << "head_channels = 8\nhead_dilation = 2\n"
     << "eval_every = 5\ncheckpoint_every = 5\neval_batch = 8\nlr = 1e-3\n";
  return os.str();
}

TrainConfig tiny_config(const fs::path& out, int iters = 10) {
  return parse_config(tiny_config_text(out, iters));
}

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + kCli + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = test::read_file(e.path());
  }
  return files;
}

}  // namespace

TEST_CASE("config defaults carry the published settings") {
  TrainConfig c;
  CHECK(c.tau_l == 0.25);
  CHECK(c.tau_h_start == 0.7);
  CHECK(c.tau_h_end == 0.55);
  CHECK(c.noise.gamma == 0.9);
  CHECK(c.noise.eta == 1.0);
  CHECK(c.weights.lambda1 == 0.1);
  CHECK(c.weights.lambda2 == 0.1);
  CHECK(c.weights.lambda3 == 0.05);
  CHECK(c.optim.lr == 6e-5);
  CHECK(c.optim.weight_decay == 0.01);
  CHECK(c.height == 64);
  CHECK(c.num_classes == 4);
  CHECK(c.model.feature_dim() == 128);
  CHECK(c.total_iters == 3000);
  CHECK(c.warmup_seg_iters == 1200);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config parsing") {
  auto c = parse_config(
      "# comment\n[train]\nseed = 9  # trailing\nlr = 0.001\nout_dir = \"a b\"\n"
      "backbone_channels = [4, 8]\nbackbone_strides = [1, 2]\nnum_classes = 5\n"
      "anf = false\n");
  CHECK(c.seed == 9);
  CHECK(c.optim.lr == 0.001);
  CHECK(c.out_dir == "a b");
  CHECK(c.model.backbone_channels == std::vector<int>{4, 8});
  CHECK(c.model.num_classes == 5);
  CHECK_FALSE(c.flags.anf);
  CHECK(c.reg_target == RegTarget::kSeg);
  CHECK(c.lr_power == 0.9);
  CHECK(parse_config("reg_target = \"cam\"\n").reg_target == RegTarget::kCam);
  CHECK(parse_config("lr_power = 0\n").lr_power == 0.0);
  CHECK_THROWS_AS(parse_config("reg_target = \"band\"\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr_power = -1\n").validate(), ConfigError);

  auto again = parse_config(dump_config(c));
  CHECK(dump_config(again) == dump_config(c));

  CHECK_THROWS_AS(parse_config("no_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("seed\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/dupl.toml"), IoError);

  TrainConfig bad;
  bad.warmup_cls_iters = 1500;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.tau_h_end = 0.8;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("iteration override rescales the warm-ups") {
  TrainConfig c;
  c.override_iters(1000);
  CHECK(c.total_iters == 1000);
  CHECK(c.warmup_cls_iters == 100);
  CHECK(c.warmup_seg_iters == 400);
  c.override_iters(3);
  CHECK(c.warmup_cls_iters < c.warmup_seg_iters);
  CHECK(c.warmup_seg_iters < c.total_iters);
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS_AS(c.override_iters(2), ConfigError);
}

TEST_CASE("ablation flags") {
  AblationFlags f;
  f.disable("dta,reg");
  CHECK(f.dual_student);
  CHECK_FALSE(f.dta);
  CHECK_FALSE(f.l_reg);
  AblationFlags ds;
  ds.disable("ds");
  CHECK_FALSE(ds.l_dis);
  AblationFlags all;
  all.disable("all");
  CHECK_FALSE(all.dual_student);
  CHECK_FALSE(all.anf);
  CHECK_THROWS_AS(all.disable("bogus"), ConfigError);
}

TEST_CASE("phase gating over a short run") {
  test::TempDir out("gating");
  auto cfg = tiny_config(out.path(), 12);
  Trainer t(cfg, load_split(cfg.data_dir, "train"), load_split(cfg.data_dir, "val"));
  CHECK(t.model().size() == 2);
  for (int i = 0; i < 12; ++i) {
    const auto log = t.step();
    CHECK(log.iteration == i);
    CHECK(std::isfinite(log.report.total));
    CHECK(std::abs(log.report.total - combine_losses(log.report.l_cls, log.report.l_dis,
                                                     log.report.l_seg, log.report.l_reg,
                                                     cfg.weights, log.phase)) <= 1e-9);
    CHECK(log.tau_h == doctest::Approx(tau_h_at(cfg.schedule(), i)).epsilon(1e-15));
    if (i < cfg.warmup_cls_iters) {
      CHECK(log.phase == Phase::kA);
      CHECK(log.report.l_seg == 0.0);
    }
    if (i < cfg.warmup_seg_iters) {
      CHECK(log.phase != Phase::kC);
      CHECK(log.filtered_frac == 0.0);
      CHECK(log.anf_fitted == 0);
      CHECK(log.report.l_reg == 0.0);
    } else {
      CHECK(log.phase == Phase::kC);
      CHECK(log.anf_fitted > 0);
    }
    CHECK(log.supervised_frac + log.ignored_frac + log.filtered_frac ==
          doctest::Approx(log.phase == Phase::kA ? 0.0 : 1.0));
  }
}

TEST_CASE("fixed threshold when the dynamic schedule is ablated") {
  test::TempDir out("dta");
  auto cfg = tiny_config(out.path(), 6);
  cfg.flags.disable("dta");
  Trainer t(cfg, load_split(cfg.data_dir, "train"), load_split(cfg.data_dir, "val"));
  for (int i = 0; i < 6; ++i) CHECK(t.step().tau_h == cfg.tau_h_start);
}

TEST_CASE("baseline smoke run with every flag off") {
  test::TempDir out("smoke");
  auto cfg = tiny_config(out.path() / "run", 10);
  cfg.flags.disable("all");
  auto summary = train(cfg);
  CHECK(summary.iterations == 10);
  const auto log = lines(out.path() / "run" / "train_log.csv");
  REQUIRE(log.size() == 11);
  CHECK(log[0] == kTrainLogHeader);
  CHECK(summary.final_eval.subnets.size() == 1);
  CHECK(summary.last.report.l_dis == 0.0);
  CHECK(summary.last.report.l_reg == 0.0);
  auto model = load_model(summary.final_checkpoint, cfg.model);
  CHECK_FALSE(model.net2.has_value());
  CHECK(fs::exists(out.path() / "run" / "config.txt"));

  // Metric rows never go back in iteration.
  auto rows = read_metrics(out.path() / "run" / "metrics.csv");
  REQUIRE_FALSE(rows.empty());
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].iteration >= rows[i - 1].iteration);
  int train_rows = 0;
  for (const auto& r : rows) train_rows += r.split == "train" && r.metric == "total";
  CHECK(train_rows == 10);
}

TEST_CASE("identical config and seed give identical logs") {
  setenv("DUPL_THREADS", "1", 1);
  test::TempDir a("det_a"), b("det_b");
  auto ca = tiny_config(a.path() / "run", 8);
  auto cb = ca;
  cb.out_dir = b.path() / "run";
  train(ca);
  train(cb);
  CHECK(test::read_file(a.path() / "run" / "metrics.csv") ==
        test::read_file(b.path() / "run" / "metrics.csv"));
  CHECK(test::read_file(a.path() / "run" / "train_log.csv") ==
        test::read_file(b.path() / "run" / "train_log.csv"));
  CHECK(test::read_file(a.path() / "run" / "checkpoints" / "final.dupl") ==
        test::read_file(b.path() / "run" / "checkpoints" / "final.dupl"));
  unsetenv("DUPL_THREADS");

  test::TempDir c("det_c");
  auto cc = ca;
  cc.out_dir = c.path() / "run";
  cc.seed = 2;
  train(cc);
  CHECK(test::read_file(a.path() / "run" / "train_log.csv") !=
        test::read_file(c.path() / "run" / "train_log.csv"));
}

TEST_CASE("evaluation") {
  test::TempDir out("eval");
  auto cfg = tiny_config(out.path(), 6);
  auto val = load_split(cfg.data_dir, "val");
  Trainer t(cfg, load_split(cfg.data_dir, "train"), val);
  for (int i = 0; i < 6; ++i) t.step();

  const auto dump = out.path() / "labels";
  auto r1 = t.evaluate(val, dump);
  auto r2 = t.evaluate(val);
  REQUIRE(r1.subnets.size() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(r1.seg_miou(k) == r2.seg_miou(k));
    CHECK(r1.pseudo_miou(k) == r2.pseudo_miou(k));
    CHECK(r1.subnets[k].seg_cm == r2.subnets[k].seg_cm);

    // Recompute the seg and pseudo scores from the dumped maps.
    ConfusionMatrix seg(4);
    PseudoLabelQualityAccumulator pseudo(4);
    for (const auto& s : val) {
      const std::string stem = s.id + "_net" + std::to_string(k + 1);
      seg.accumulate(read_pgm(dump / (stem + "_seg.pgm")), s.gt_mask);
      pseudo.add(read_pgm(dump / (stem + "_pseudo.pgm")), s.gt_mask);
    }
    CHECK(seg == r1.subnets[k].seg_cm);
    CHECK(*miou(seg).miou == r1.seg_miou(k));
    CHECK(pseudo.result().cm == r1.subnets[k].pseudo.cm);
  }
  CHECK(r1.best_seg_miou() >= r1.mean_seg_miou());

  // Untrained model: a valid report, not a crash.
  DualStudent<float> fresh(cfg.model, true, 5);
  EvalOptions opts;
  auto r3 = evaluate(fresh, val, opts);
  for (int k = 0; k < 2; ++k) {
    CHECK(r3.seg_miou(k) >= 0.0);
    CHECK(r3.seg_miou(k) <= 1.0);
  }

  SubNetConfig other = cfg.model;
  other.num_classes = 4;
  DualStudent<float> wrong(other, true, 5);
  CHECK_THROWS_AS(evaluate(wrong, val, opts), ConfigError);
}

TEST_CASE("a diverging run aborts with a diagnostic dump") {
  test::TempDir out("nan");
  auto cfg = tiny_config(out.path() / "run", 10);
  cfg.optim.lr = 1e30;
  CHECK_THROWS_AS(train(cfg), NumericError);
  CHECK(fs::exists(out.path() / "run" / "nan_dump.txt"));
  CHECK_FALSE(test::read_file(out.path() / "run" / "nan_dump.txt").empty());
}

TEST_CASE("command line") {
  CHECK(run("gradcheck") == 0);
  CHECK(run("gradcheck --no-such-flag") == 2);
  CHECK(run("no-such-command") == 2);
  CHECK(run("--help") == 0);

  test::TempDir dir("cli");
  const auto a = dir.path() / "a", b = dir.path() / "b";
  const std::string gen = " --seed 1 --n-train 6 --n-val 2 --height 32 --width 32 --classes 3";
  REQUIRE(run("gen-data --out \"" + a.string() + "\"" + gen) == 0);
  REQUIRE(run("gen-data --out \"" + b.string() + "\"" + gen) == 0);
  CHECK(snapshot(a) == snapshot(b));

  const auto cfg_path = dir.path() / "c.toml";
  {
    std::ofstream os(cfg_path);
    os << tiny_config_text(dir.path() / "unused", 6);
  }
  const auto run_dir = dir.path() / "run";
  REQUIRE(run("train --config \"" + cfg_path.string() + "\" --out \"" + run_dir.string() +
              "\" --data \"" + a.string() + "\" --iters 6") == 0);
  const auto ckpt = run_dir / "checkpoints" / "final.dupl";
  REQUIRE(fs::exists(ckpt));
  const auto eval_dir = dir.path() / "eval";
  REQUIRE(run("eval --checkpoint \"" + ckpt.string() + "\" --out \"" + eval_dir.string() + "\"") == 0);
  auto rows = read_metrics(eval_dir / "eval_metrics.csv");
  REQUIRE_FALSE(rows.empty());
  bool has_seg = false;
  for (const auto& r : rows) has_seg |= r.metric == "net1/seg_miou";
  CHECK(has_seg);
  CHECK(run("train --config \"" + cfg_path.string() + "\" --ablate nonsense") == 2);
  CHECK(run("eval --checkpoint \"" + (dir.path() / "missing.dupl").string() + "\" --config \"" +
            cfg_path.string() + "\"") == 1);

  const auto losses = dir.path() / "losses.txt";
  {
    std::ofstream os(losses);
    for (int i = 0; i < 300; ++i) os << (i % 10 == 0 ? 3.0 + 0.001 * i : 0.2 + 0.0005 * i) << "\n";
  }
  CHECK(run("gmm-debug --input \"" + losses.string() + "\"") == 0);
}
