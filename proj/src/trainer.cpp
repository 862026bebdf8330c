#include "dupl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

#include "dupl/cam.hpp"
#include "dupl/error.hpp"
#include "dupl/parallel.hpp"

namespace dupl {
namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = (a ^ 0xA0761D6478BD642FULL) * 0xE7037ED1A0B428DBULL + b;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t aug_seed(std::uint64_t seed, int iteration, std::size_t image, int stream) {
  return mix(mix(mix(seed, static_cast<std::uint64_t>(iteration)), image),
             static_cast<std::uint64_t>(stream));
}

template <typename T>
std::span<const T> slice(const Tensor<T>& t, std::size_t index) {
  const std::size_t each = t.numel() / static_cast<std::size_t>(t.dim(0));
  return t.data().subspan(index * each, each);
}

// Argmax of clean-view seg logits over background and the present classes.
PseudoLabelMap seg_target(std::span<const float> seg, const std::vector<int>& present, int h,
                          int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  PseudoLabelMap out{LabelMap(h, w, 0), 0.0, 0.0};
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int cls : present) {
      if (seg[static_cast<std::size_t>(cls + 1) * plane + p] > seg[static_cast<std::size_t>(best) * plane + p]) {
        best = cls + 1;
      }
    }
    out.map.labels[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace

Trainer::Trainer(const TrainConfig& config, std::vector<SynthSample> train,
                 std::vector<SynthSample> val)
    : config_(config),
      train_(std::move(train)),
      val_(std::move(val)),
      model_(config.model, config.flags.dual_student, config.seed) {
  config_.validate();
  if (train_.empty()) throw ConfigError("training split is empty");
  for (const auto* split : {&train_, &val_}) {
    for (const auto& s : *split) {
      if (s.image.height != config_.height || s.image.width != config_.width ||
          static_cast<int>(s.image_label.size()) != config_.num_classes) {
        throw ConfigError("sample " + s.id + " does not match the configured size/classes");
      }
    }
  }
  for (int k = 0; k < model_.size(); ++k) {
    optims_.emplace_back(model_.net(k).param_tensors(), config_.optim);
  }
}

std::vector<std::size_t> Trainer::next_batch() {
  std::vector<std::size_t> batch;
  while (static_cast<int>(batch.size()) < config_.batch_size) {
    if (cursor_ == order_.size()) {
      order_.resize(train_.size());
      std::iota(order_.begin(), order_.end(), 0);
      std::mt19937_64 rng(mix(config_.seed, 0x0E0C0000ULL + static_cast<std::uint64_t>(epoch_++)));
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    batch.push_back(order_[cursor_++]);
  }
  return batch;
}

IterationLog Trainer::step() {
  const TrainConfig& c = config_;
  const int t = iteration_;
  const int n = c.batch_size;
  const int nets = model_.size();
  const bool dual = nets == 2;
  const int channels = c.num_classes + 1;
  const int h = c.height, w = c.width;

  IterationLog log;
  log.iteration = t;
  log.phase = phase_at(t, c.warmup_cls_iters, c.warmup_seg_iters);
  log.tau_h = c.flags.dta ? tau_h_at(c.schedule(), t) : c.tau_h_start;
  const bool seg_on = log.phase != Phase::kA;
  const bool full_on = log.phase == Phase::kC;

  const std::vector<std::size_t> batch = next_batch();
  std::vector<WeakView> views(static_cast<std::size_t>(n));
  parallel_for(n, [&](int i) {
    views[static_cast<std::size_t>(i)] =
        weak_augment(train_[batch[static_cast<std::size_t>(i)]], aug_seed(c.seed, t, static_cast<std::size_t>(i), 0));
  });
  std::vector<const Image*> imgs;
  std::vector<std::uint8_t> image_labels;
  for (int i = 0; i < n; ++i) {
    imgs.push_back(&views[static_cast<std::size_t>(i)].image);
    const auto& lab = train_[batch[static_cast<std::size_t>(i)]].image_label;
    image_labels.insert(image_labels.end(), lab.begin(), lab.end());
  }
  const Tensor<float> images = stack_images(imgs);

  Graph<float> g;
  std::vector<SubNetOutput<float>> outs;
  for (int k = 0; k < nets; ++k) outs.push_back(model_.net(k).forward(g, images));

  // CAMs and strict pseudo-labels on the weak view.
  std::vector<std::vector<CamMap>> cams(static_cast<std::size_t>(nets));
  std::vector<std::vector<PseudoLabelMap>> strict(static_cast<std::size_t>(nets));
  if (seg_on) {
    for (int k = 0; k < nets; ++k) {
      const auto& f = outs[static_cast<std::size_t>(k)].features;
      auto& ck = cams[static_cast<std::size_t>(k)];
      auto& sk = strict[static_cast<std::size_t>(k)];
      ck.resize(static_cast<std::size_t>(n));
      sk.resize(static_cast<std::size_t>(n));
      const auto weights = model_.net(k).classifier_weight().data();
      parallel_for(n, [&](int i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto lab = std::span<const std::uint8_t>(image_labels).subspan(ui * c.num_classes, c.num_classes);
        ck[ui] = compute_cam<float>(slice(f, ui), f.dim(1), f.dim(2), f.dim(3), weights,
                                    c.num_classes, present_from_bits(lab), h, w);
        sk[ui] = cam_to_pseudolabel(ck[ui], c.tau_l, log.tau_h);
      });
    }
  }
  // Sub-net k learns from the other sub-net's labels; a single net from its own.
  auto source = [&](int k) { return dual ? 1 - k : k; };

  // Noise masks: each sub-net's loss map against the labels supervising it.
  std::vector<std::vector<NoiseMask>> filters(static_cast<std::size_t>(nets));
  last_fits_.assign(static_cast<std::size_t>(nets), {});
  for (int k = 0; k < nets; ++k) {
    auto& fk = filters[static_cast<std::size_t>(k)];
    fk.assign(static_cast<std::size_t>(n), NoiseMask(h, w));
    if (!(full_on && c.flags.anf)) continue;
    std::vector<NoiseFilterResult> res(static_cast<std::size_t>(n));
    const auto& seg = outs[static_cast<std::size_t>(k)].seg_logits;
    const auto& sup = strict[static_cast<std::size_t>(source(k))];
    parallel_for(n, [&](int i) {
      const auto ui = static_cast<std::size_t>(i);
      res[ui] = adaptive_noise_filter(pixel_loss_map<float>(slice(seg, ui), channels, sup[ui].map),
                                      c.noise);
    });
    for (int i = 0; i < n; ++i) {
      auto& r = res[static_cast<std::size_t>(i)];
      fk[static_cast<std::size_t>(i)] = std::move(r.mask);
      last_fits_[static_cast<std::size_t>(k)].push_back(r.fit);
      log.anf_fitted += r.fitted ? 1 : 0;
      log.anf_active += r.active ? 1 : 0;
    }
  }

  LossTerms<float> terms;
  log.report.subnets.resize(static_cast<std::size_t>(nets));
  std::vector<Tensor<float>> cls_parts, seg_parts, reg_parts;
  for (int k = 0; k < nets; ++k) {
    cls_parts.push_back(classification_loss(g, outs[static_cast<std::size_t>(k)].class_logits,
                                            std::span<const std::uint8_t>(image_labels)));
  }
  if (dual && c.flags.l_dis) terms.dis = discrepancy_loss(g, outs[0].features, outs[1].features);

  PixelCounts total_px;
  if (seg_on) {
    for (int k = 0; k < nets; ++k) {
      const auto& sup = strict[static_cast<std::size_t>(source(k))];
      const auto& fk = filters[static_cast<std::size_t>(k)];
      seg_parts.push_back(segmentation_term(g, outs[static_cast<std::size_t>(k)].seg_logits, sup,
                                            std::span<const NoiseMask>(fk)));
      PixelCounts& pc = log.report.subnets[static_cast<std::size_t>(k)].pixels;
      for (int i = 0; i < n; ++i) {
        const PixelCounts p = count_pixels(sup[static_cast<std::size_t>(i)], &fk[static_cast<std::size_t>(i)]);
        pc.supervised += p.supervised;
        pc.ignored += p.ignored;
        pc.filtered += p.filtered;
      }
      total_px.supervised += pc.supervised;
      total_px.ignored += pc.ignored;
      total_px.filtered += pc.filtered;
    }
  }

  if (full_on && c.flags.l_reg) {
    for (int k = 0; k < nets; ++k) {
      const auto& sup = strict[static_cast<std::size_t>(source(k))];
      const auto& src_cams = cams[static_cast<std::size_t>(source(k))];
      std::vector<Image> strong(static_cast<std::size_t>(n));
      std::vector<AugmentRecord> records(static_cast<std::size_t>(n));
      std::vector<PseudoLabelMap> relaxed(static_cast<std::size_t>(n));
      std::vector<NoiseMask> masks(static_cast<std::size_t>(n));
      parallel_for(n, [&](int i) {
        const auto ui = static_cast<std::size_t>(i);
        auto [img, rec] = strong_augment(views[ui].image, aug_seed(c.seed, t, ui, 1 + k));
        strong[ui] = std::move(img);
        records[ui] = rec;
        relaxed[ui] = c.reg_target == RegTarget::kCam
                          ? cam_to_relaxed_label(src_cams[ui], c.tau_l)
                          : seg_target(slice(outs[static_cast<std::size_t>(k)].seg_logits, ui),
                                       src_cams[ui].present_classes, h, w);
        masks[ui] = unsupervised_mask(sup[ui], &filters[static_cast<std::size_t>(k)][ui]);
      });
      std::vector<const Image*> sp;
      for (const auto& s : strong) sp.push_back(&s);
      const auto out = model_.net(k).forward(g, stack_images(sp));
      reg_parts.push_back(consistency_loss(g, out.seg_logits, relaxed, records, masks));
    }
  }

  auto add_all = [&g](const std::vector<Tensor<float>>& parts) {
    Tensor<float> s;
    for (const auto& p : parts) s = s.defined() ? add(g, s, p) : p;
    return s;
  };
  terms.cls = add_all(cls_parts);
  terms.seg = add_all(seg_parts);
  terms.reg = add_all(reg_parts);
  for (int k = 0; k < nets; ++k) {
    auto& sl = log.report.subnets[static_cast<std::size_t>(k)];
    sl.l_cls = cls_parts[static_cast<std::size_t>(k)].item();
    if (!seg_parts.empty()) sl.l_seg = seg_parts[static_cast<std::size_t>(k)].item();
    if (!reg_parts.empty()) sl.l_reg = reg_parts[static_cast<std::size_t>(k)].item();
  }
  Tensor<float> total = total_loss(g, terms, c.weights, log.phase, &log.report);
  if (!std::isfinite(log.report.total)) {
    throw NumericError("non-finite total loss at iteration " + std::to_string(t));
  }
  g.backward(total);
  const double lr = c.optim.lr * std::pow(1.0 - static_cast<double>(t) / c.total_iters, c.lr_power);
  for (auto& opt : optims_) {
    opt.set_lr(lr);
    opt.step();
    opt.zero_grad();
  }

  const double pixels = static_cast<double>(nets) * n * h * w;
  if (seg_on) {
    log.supervised_frac = static_cast<double>(total_px.supervised) / pixels;
    log.ignored_frac = static_cast<double>(total_px.ignored) / pixels;
    log.filtered_frac = static_cast<double>(total_px.filtered) / pixels;
  }
  ++iteration_;
  return log;
}

EvalReport Trainer::evaluate(const std::vector<SynthSample>& samples,
                             const std::optional<std::filesystem::path>& dump_dir) const {
  EvalOptions opt;
  opt.tau_l = config_.tau_l;
  opt.tau_h = config_.tau_h_end;
  opt.batch_size = config_.eval_batch;
  opt.dump_dir = dump_dir;
  return dupl::evaluate(model_, samples, opt);
}

std::string format_train_log_row(const IterationLog& l) {
  char buf[512];
  const LossReport& r = l.report;
  std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d,%d",
                l.iteration, phase_name(l.phase), l.tau_h, r.l_cls, r.l_dis, r.l_seg, r.l_reg,
                r.total, l.supervised_frac, l.ignored_frac, l.filtered_frac, l.anf_fitted,
                l.anf_active);
  return buf;
}

namespace {

void write_nan_dump(const std::filesystem::path& path, const IterationLog* last,
                    const Trainer& trainer, const std::string& what) {
  std::ofstream os(path, std::ios::trunc);
  os << "error: " << what << "\n";
  if (last) {
    os << "last completed iteration:\n" << kTrainLogHeader << "\n"
       << format_train_log_row(*last) << "\n";
    for (std::size_t k = 0; k < last->report.subnets.size(); ++k) {
      const auto& s = last->report.subnets[k];
      os << "net" << k + 1 << ": l_cls=" << s.l_cls << " l_seg=" << s.l_seg
         << " l_reg=" << s.l_reg << "\n";
    }
  }
  const auto& fits = trainer.last_fits();
  for (std::size_t k = 0; k < fits.size(); ++k) {
    for (std::size_t i = 0; i < fits[k].size(); ++i) {
      const GmmFit& f = fits[k][i];
      os << "gmm net" << k + 1 << " image " << i << ": w=(" << f.w_c << ", " << f.w_n
         << ") mu=(" << f.mu_c << ", " << f.mu_n << ") sigma=(" << f.sigma_c << ", "
         << f.sigma_n << ") n=" << f.n_samples << " converged=" << f.converged << "\n";
    }
  }
}

}  // namespace

TrainSummary train(const TrainConfig& config, std::ostream* progress) {
  config.validate();
  auto train_set = load_split(config.data_dir, "train");
  auto val_set = load_split(config.data_dir, "val");
  Trainer trainer(config, std::move(train_set), std::move(val_set));

  const auto& out = config.out_dir;
  std::filesystem::create_directories(out / "checkpoints");
  {
    std::ofstream os(out / "config.txt", std::ios::trunc);
    if (!os) throw IoError("cannot write to " + out.string());
    os << dump_config(config);
  }
  std::ofstream train_log(out / "train_log.csv", std::ios::trunc);
  if (!train_log) throw IoError("cannot write train_log.csv in " + out.string());
  train_log << kTrainLogHeader << "\n";
  MetricsWriter metrics(out / "metrics.csv");

  TrainSummary summary;
  bool have_last = false;
  while (trainer.iteration() < config.total_iters) {
    IterationLog log;
    try {
      log = trainer.step();
    } catch (const NumericError& e) {
      write_nan_dump(out / "nan_dump.txt", have_last ? &summary.last : nullptr, trainer, e.what());
      throw NumericError(std::string(e.what()) + " (diagnostics in " +
                         (out / "nan_dump.txt").string() + ")");
    }
    summary.last = log;
    have_last = true;
    train_log << format_train_log_row(log) << "\n";
    for (const auto& [name, value] : {std::pair<const char*, double>{"l_cls", log.report.l_cls},
                                      {"l_dis", log.report.l_dis},
                                      {"l_seg", log.report.l_seg},
                                      {"l_reg", log.report.l_reg},
                                      {"total", log.report.total},
                                      {"tau_h", log.tau_h},
                                      {"supervised_frac", log.supervised_frac},
                                      {"filtered_frac", log.filtered_frac}}) {
      metrics.write({log.iteration, "train", name, -1, value});
    }
    const int done = trainer.iteration();
    if (progress && (done % 100 == 0 || done == config.total_iters)) {
      *progress << "iter " << done << "/" << config.total_iters << " phase "
                << phase_name(log.phase) << " tau_h " << log.tau_h << " loss "
                << log.report.total << std::endl;
    }
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 &&
        done < config.total_iters) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06d.dupl", done);
      save_model(out / "checkpoints" / name, trainer.model());
    }
    if (config.eval_every > 0 && done % config.eval_every == 0 && done < config.total_iters) {
      const EvalReport r = trainer.evaluate(trainer.val());
      write_eval_metrics(metrics, done, "val", r);
      if (progress) {
        *progress << "  val seg mIoU " << r.mean_seg_miou() << " pseudo mIoU "
                  << r.mean_pseudo_miou() << std::endl;
      }
    }
  }
  train_log.flush();
  if (!train_log) throw IoError("failed writing train_log.csv");

  std::optional<std::filesystem::path> dump;
  if (config.dump_labels) dump = out / "labels";
  summary.final_eval = trainer.evaluate(trainer.val(), dump);
  summary.iterations = trainer.iteration();
  write_eval_metrics(metrics, summary.iterations, "val", summary.final_eval);
  summary.final_checkpoint = out / "checkpoints" / "final.dupl";
  save_model(summary.final_checkpoint, trainer.model());
  if (progress) {
    *progress << "final val seg mIoU " << summary.final_eval.mean_seg_miou()
              << " pseudo mIoU " << summary.final_eval.mean_pseudo_miou() << " OA "
              << summary.final_eval.mean_pseudo_oa() << std::endl;
  }
  return summary;
}

}  // namespace dupl
