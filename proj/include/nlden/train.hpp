#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nlden/checkpoint.hpp"
#include "nlden/config.hpp"
#include "nlden/losses.hpp"
#include "nlden/metrics.hpp"
#include "nlden/networks.hpp"
#include "nlden/optim.hpp"
#include "nlden/phantom.hpp"

namespace nlden {

// lr0 * factor^floor(iter / every)
inline double lr_at(double lr0, double factor, std::size_t every, std::size_t iter) {
  return lr0 * std::pow(factor, double(iter / every));
}

// Stop once `patience` iterations have passed without a new best.
struct PatienceTracker {
  std::size_t patience;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_iter = 0;

  explicit PatienceTracker(std::size_t p) : patience(p) {}

  bool update(std::size_t iter, double loss) {
    if (loss < best) {
      best = loss;
      best_iter = iter;
    }
    return iter - best_iter >= patience;
  }
};

class RunningMean {
 public:
  explicit RunningMean(std::size_t window) : window_(window) {}
  double push(double v) {
    values_.push_back(v);
    if (values_.size() > window_) values_.pop_front();
    double s = 0;
    for (double x : values_) s += x;
    return s / double(values_.size());
  }

 private:
  std::size_t window_;
  std::deque<double> values_;
};

// ---------------------------------------------------------------------------
// Data

// Windowed [1,H,W] images of one split.
struct SplitData {
  std::vector<std::string> ids;
  std::vector<Tensor> clean, low;
  std::vector<Meta> meta;
};

inline SplitData load_split(const std::filesystem::path& dir, const std::string& split, const HUWindow& w) {
  const auto ids = split_ids(read_manifest(dir), split);
  if (ids.empty()) throw ConfigError("split '" + split + "' is empty in " + dir.string());
  std::string missing;
  for (const auto& id : ids)
    for (const char* suffix : {"_clean.nlt1", "_low.nlt1", "_meta.txt"})
      if (!std::filesystem::exists(dir / "phantoms" / (id + suffix))) {
        missing += (missing.empty() ? "" : ", ") + id;
        break;
      }
  if (!missing.empty()) throw IoError("missing phantom files for ids: " + missing);
  SplitData d;
  for (const auto& id : ids) {
    auto s = load_slice(dir, id);
    d.ids.push_back(id);
    d.clean.push_back(hu_window(s.clean, w));
    d.low.push_back(hu_window(s.low, w));
    d.meta.push_back(std::move(s.meta));
  }
  return d;
}

// Each epoch draws patches_per_slice random crops from every slice and
// shuffles them; batches are consumed in order.
class PatchStream {
 public:
  PatchStream(const SplitData& data, std::size_t patch, std::size_t per_slice, std::size_t batch, std::uint64_t seed)
      : data_(&data), patch_(patch), per_slice_(per_slice), batch_(batch), seed_(seed) {
    const std::size_t H = data.clean.at(0).dim(1), W = data.clean.at(0).dim(2);
    if (patch > H || patch > W) throw ConfigError("patch_size exceeds image size");
  }

  PatchBatch next() {
    const std::size_t s = patch_;
    PatchBatch b{Tensor({batch_, 1, s, s}), Tensor({batch_, 1, s, s}), {}, {}};
    for (std::size_t k = 0; k < batch_; ++k) {
      if (pos_ == queue_.size()) refill();
      const auto [slice, r, c] = queue_[pos_++];
      const Tensor cc = crop(data_->clean[slice], r, c, s), nn = crop(data_->low[slice], r, c, s);
      std::copy_n(cc.ptr(), s * s, b.clean.ptr() + k * s * s);
      std::copy_n(nn.ptr(), s * s, b.noisy.ptr() + k * s * s);
      b.slice_ids.push_back(slice);
      b.offsets.emplace_back(r, c);
    }
    return b;
  }

 private:
  struct Item {
    std::size_t slice, row, col;
  };

  void refill() {
    Rng rng(derive_seed(seed_, epoch_++));
    queue_.clear();
    pos_ = 0;
    for (std::size_t i = 0; i < data_->clean.size(); ++i) {
      const std::size_t H = data_->clean[i].dim(1), W = data_->clean[i].dim(2);
      for (std::size_t k = 0; k < per_slice_; ++k) queue_.push_back({i, rng.below(H - patch_ + 1), rng.below(W - patch_ + 1)});
    }
    for (std::size_t i = queue_.size(); i > 1; --i) std::swap(queue_[i - 1], queue_[rng.below(i)]);
  }

  const SplitData* data_;
  std::size_t patch_, per_slice_, batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<Item> queue_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// State and checkpoints

struct TrainState {
  ResolvedVariant variant;
  std::size_t iteration = 0;
  ParamMap<float> gen;
  AdamState gen_adam;
  std::optional<DiscriminatorParams> disc;
  AdamState disc_adam;
};

inline void put_discriminator_spec(TensorMap& m, const DiscriminatorSpec& s) {
  Tensor w({s.widths.size()});
  for (std::size_t i = 0; i < s.widths.size(); ++i) w[i] = float(s.widths[i]);
  m["spec.disc.widths"] = w;
  m["spec.disc.self_attention_after"] = scalar_tensor(s.self_attention_after);
  m["spec.disc.global_mean_head"] = scalar_tensor(s.global_mean_head ? 1 : 0);
}

inline DiscriminatorSpec get_discriminator_spec(const TensorMap& m) {
  auto it = m.find("spec.disc.widths");
  if (it == m.end()) throw ConfigError("checkpoint has no discriminator");
  DiscriminatorSpec s;
  s.widths.clear();
  for (float v : it->second.data()) s.widths.push_back(std::size_t(v));
  s.self_attention_after = int(m.at("spec.disc.self_attention_after")[0]);
  s.global_mean_head = m.at("spec.disc.global_mean_head")[0] != 0;
  return s;
}

inline TensorMap checkpoint_entries(const TrainState& st) {
  TensorMap m;
  put_generator_spec(m, st.variant.generator);
  m["state.iteration"] = scalar_tensor(double(st.iteration));
  for (const auto& [k, v] : st.gen) m[k] = v;
  put_adam(m, "gen", st.gen_adam);
  if (st.disc) {
    put_discriminator_spec(m, *st.variant.discriminator);
    for (const auto& [k, v] : st.disc->params) m[k] = v;
    put_spectral(m, st.disc->spectral);
    put_adam(m, "disc", st.disc_adam);
  }
  return m;
}

// A generator ready for inference.
struct Model {
  GeneratorSpec spec;
  ParamMap<float> params;
};

inline Model model_from_entries(const TensorMap& m, const std::optional<GeneratorSpec>& expected = std::nullopt) {
  Model model{get_generator_spec(m), select_prefix(m, "gen.")};
  if (expected) require_same_generator(*expected, model.spec);
  require_parameters(init_generator(model.spec, 0), model.params);
  return model;
}

inline Model load_model(const std::filesystem::path& path, const std::optional<GeneratorSpec>& expected = std::nullopt) {
  return model_from_entries(load_checkpoint(path), expected);
}

// ---------------------------------------------------------------------------
// Inference

// Reflect-pads the last two dims up to a multiple of m.
inline Tensor pad_to_multiple(const Tensor& x, std::size_t m) {
  require_4d(x, "pad_to_multiple");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
  if (Hp == H && Wp == W) return x;
  if (Hp - H >= H || Wp - W >= W) throw DimensionError("image too small to reflect-pad");
  Tensor out({N, C, Hp, Wp});
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < Hp; ++i)
      for (std::size_t j = 0; j < Wp; ++j)
        out[(p * Hp + i) * Wp + j] = x[(p * H + detail::reflect_index(std::ptrdiff_t(i), H)) * W +
                                       detail::reflect_index(std::ptrdiff_t(j), W)];
  return out;
}

inline Tensor crop_to(const Tensor& x, std::size_t H, std::size_t W) {
  const std::size_t N = x.dim(0), C = x.dim(1), Hp = x.dim(2), Wp = x.dim(3);
  if (Hp == H && Wp == W) return x;
  Tensor out({N, C, H, W});
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) out[(p * H + i) * W + j] = x[(p * Hp + i) * Wp + j];
  return out;
}

// Forward pass on a normalized image of shape [H,W], [1,H,W] or [N,1,H,W];
// the output has the input's shape.
inline Tensor denoise_normalized(const Model& m, const Tensor& x) {
  if (x.rank() < 2 || x.rank() > 4) throw DimensionError("denoise expects an image, got " + shape_str(x.shape()));
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t N = x.rank() == 4 ? x.dim(0) : 1;
  if (x.rank() == 4 && x.dim(1) != 1) throw DimensionError("denoise expects one channel");
  const Tensor padded = pad_to_multiple(x.reshaped({N, 1, H, W}), m.spec.downsample_factor);
  Binding<float> b(m.params);
  const auto y = generator_forward(constant(padded), m.spec, b);
  return crop_to(y->value, H, W).reshaped(x.shape());
}

inline Tensor denoise_hu(const Model& m, const Tensor& hu, const HUWindow& w = {}) {
  return hu_unwindow(denoise_normalized(m, hu_window(hu, w)), w);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
  std::string id;
  double rmse = 0, psnr = 0, ssim = 0;
  std::optional<double> cnr;
  double tml = 0;
};

struct EvalTable {
  std::vector<EvalRow> rows;
  EvalRow mean;
};

enum class EvalSource { clean, low, model };

inline EvalSource parse_eval_source(const std::string& s) {
  if (s == "clean") return EvalSource::clean;
  if (s == "low") return EvalSource::low;
  if (s == "model") return EvalSource::model;
  throw ConfigError("unknown evaluation source '" + s + "' (expected clean, low or model)");
}

inline constexpr std::uint64_t kTextureSeed = 1234;

// Metrics of one windowed image against its windowed reference.
inline EvalRow evaluate_image(const std::string& id, const Tensor& x, const Tensor& ref, const Meta& meta,
                              const FeatureExtractor& fx) {
  const std::size_t H = ref.dim(ref.rank() - 2), W = ref.dim(ref.rank() - 1);
  EvalRow r{id, rmse(x, ref), psnr(x, ref, 1.0), ssim(x, ref), std::nullopt, 0};
  if (auto regions = lesion_regions(meta, H, W)) r.cnr = cnr(x, *regions);
  const auto a = constant(x.reshaped({1, 1, H, W})), b = constant(ref.reshaped({1, 1, H, W}));
  r.tml = double(texture_matching_loss(a, b, fx)->value[0]);
  return r;
}

inline EvalRow mean_row(const std::vector<EvalRow>& rows) {
  EvalRow m{"mean", 0, 0, 0, std::nullopt, 0};
  double cnr_sum = 0;
  std::size_t cnr_n = 0;
  for (const auto& r : rows) {
    m.rmse += r.rmse;
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.tml += r.tml;
    if (r.cnr) {
      cnr_sum += *r.cnr;
      ++cnr_n;
    }
  }
  const double n = double(rows.size());
  m.rmse /= n;
  m.psnr /= n;
  m.ssim /= n;
  m.tml /= n;
  if (cnr_n) m.cnr = cnr_sum / double(cnr_n);
  return m;
}

// Rows are sorted by id.
inline EvalTable evaluate(const SplitData& data, EvalSource source, const Model* model) {
  if (source == EvalSource::model && !model) throw ConfigError("model evaluation needs a checkpoint");
  const auto fx = FeatureExtractor::random(kTextureSeed);
  std::vector<std::size_t> order(data.ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return data.ids[a] < data.ids[b]; });
  EvalTable t;
  for (auto i : order) {
    Tensor x = source == EvalSource::clean ? data.clean[i]
               : source == EvalSource::low ? data.low[i]
                                           : denoise_normalized(*model, data.low[i]);
    t.rows.push_back(evaluate_image(data.ids[i], x, data.clean[i], data.meta[i], fx));
  }
  t.mean = mean_row(t.rows);
  return t;
}

inline std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string eval_csv(const EvalTable& t) {
  std::string out = "id,rmse,psnr,ssim,cnr,tml\n";
  auto line = [&](const EvalRow& r) {
    out += r.id + "," + csv_number(r.rmse) + "," + csv_number(r.psnr) + "," + csv_number(r.ssim) + "," +
           (r.cnr ? csv_number(*r.cnr) : "") + "," + csv_number(r.tml) + "\n";
  };
  for (const auto& r : t.rows) line(r);
  line(t.mean);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& s) { write_bytes(path, {s.begin(), s.end()}); }

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::size_t iterations = 0;
  bool early_stopped = false;
  double running_loss = 0;
};

// Initial state. Streams: generator init 1, discriminator init 2, data 3.
inline TrainState initial_state(const TrainConfig& cfg) {
  TrainState st;
  st.variant = resolve_variant(cfg);
  st.gen = init_generator(st.variant.generator, derive_seed(cfg.seed, 1));
  if (st.variant.discriminator) {
    st.disc = init_discriminator(*st.variant.discriminator, derive_seed(cfg.seed, 2));
    st.disc->spectral.power_iterations = cfg.power_iterations;
  }
  return st;
}

struct StepStats {
  double loss_gp = 0;
  std::optional<double> loss_d, d_real, d_fake;
};

inline double mean_value(const Tensor& t) {
  double s = 0;
  for (float v : t.data()) s += v;
  return s / double(t.size());
}

// One iteration: generator forward, then (adversarial variants) n_critic
// critic updates on (clean, G(noisy)), then the generator update.
inline StepStats train_step(TrainState& st, const PatchBatch& batch, const TrainConfig& cfg, double lr_g, double lr_d) {
  const auto& rv = st.variant;
  StepStats s;
  Binding<float> gb(st.gen);
  const auto out = generator_forward(constant(batch.noisy), rv.generator, gb);
  Var<float> fake_scores;
  if (st.disc) {
    const auto& ds = *rv.discriminator;
    for (std::size_t k = 0; k < cfg.n_critic; ++k) {
      Binding<float> db(st.disc->params);
      const auto real = discriminator_forward(constant(batch.clean), ds, db, st.disc->spectral, true);
      const auto fake = discriminator_forward(constant(out->value), ds, db, st.disc->spectral, false);
      const auto ld = wgan_discriminator_loss(real, fake);
      adam_step(st.disc->params, db.backward(ld), st.disc_adam, lr_d);
      s.loss_d = double(ld->value[0]);
      s.d_real = mean_value(real->value);
      s.d_fake = mean_value(fake->value);
    }
    Binding<float> db(st.disc->params);
    fake_scores = discriminator_forward(out, ds, db, st.disc->spectral, false);
  }
  GeneratorLossConfig lc{rv.cfg.loss, bool(st.disc), cfg.lambda_adv, cfg.weights};
  const auto loss = total_generator_loss(constant(batch.clean), out, fake_scores, lc);
  adam_step(st.gen, gb.backward(loss.total), st.gen_adam, lr_g);
  s.loss_gp = double(loss.pixel->value[0]);
  return s;
}

// Log columns: iter, loss_gp, loss_d, d_real, d_fake, lr_g, lr_d,
// running_loss, unstable. Wall-clock times go to timing.csv so that the log
// itself is reproducible byte for byte.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                         const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const SplitData data = load_split(data_dir, "train", cfg.window);
  PatchStream stream(data, cfg.patch_size, cfg.patches_per_slice, cfg.batch_size, derive_seed(cfg.seed, 3));
  TrainState st = initial_state(cfg);
  write_text(out_dir / "config.txt", config_text(cfg));

  std::string log = "iter,loss_gp,loss_d,d_real,d_fake,lr_g,lr_d,running_loss,unstable\n";
  std::string timing = "iter,wall_ms\n";
  RunningMean running(cfg.loss_window);
  PatienceTracker patience(cfg.patience);
  TrainResult res;
  res.log = out_dir / "train_log.csv";
  res.checkpoint = out_dir / "final.nlck";
  auto opt = [](const std::optional<double>& v) { return v ? csv_number(*v) : std::string(); };

  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr_g = lr_at(cfg.lr_g, cfg.lr_decay_factor, cfg.lr_decay_every, it);
    const double lr_d = lr_at(cfg.lr_d, cfg.lr_decay_factor, cfg.lr_decay_every, it);
    const PatchBatch batch = stream.next();
    StepStats s;
    try {
      s = train_step(st, batch, cfg, lr_g, lr_d);
    } catch (const NumericError& e) {
      save_checkpoint(out_dir / "last_good.nlck", checkpoint_entries(st));
      write_text(res.log, log);
      throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(it) +
                         "; last good state kept in last_good.nlck");
    }
    st.iteration = it + 1;
    const double rl = running.push(s.loss_gp);
    const bool unstable = s.d_real && std::abs(*s.d_real - *s.d_fake) > cfg.stability_bound;
    log += std::to_string(it) + "," + csv_number(s.loss_gp) + "," + opt(s.loss_d) + "," + opt(s.d_real) + "," +
           opt(s.d_fake) + "," + csv_number(lr_g) + "," + csv_number(lr_d) + "," + csv_number(rl) + "," +
           (unstable ? "1" : "0") + "\n";
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    timing += std::to_string(it) + "," + csv_number(ms) + "\n";
    res.iterations = it + 1;
    res.running_loss = rl;
    if (patience.update(it, rl)) {
      res.early_stopped = true;
      break;
    }
  }
  write_text(res.log, log);
  write_text(out_dir / "timing.csv", timing);
  save_checkpoint(res.checkpoint, checkpoint_entries(st));
  return res;
}

struct CriticCheck {
  double mean_real = 0;
  double mean_fake = 0;
  Shape score_shape;
};

// Scores a trained critic on n held-out patches: clean targets against the
// generator's output for the matching low-dose crops.
inline CriticCheck held_out_critic(const TensorMap& ckpt, const SplitData& data, std::size_t patch, std::size_t n,
                                   std::uint64_t seed) {
  const Model g = model_from_entries(ckpt);
  const DiscriminatorSpec ds = get_discriminator_spec(ckpt);
  const ParamMap<float> dp = select_prefix(ckpt, "disc.");
  SpectralState sn = get_spectral(ckpt);
  PatchStream stream(data, patch, 1, n, seed);
  const PatchBatch b = stream.next();
  const Tensor fake = denoise_normalized(g, b.noisy);
  Binding<float> bind(dp);
  const auto real_s = discriminator_forward(constant(b.clean), ds, bind, sn, false);
  const auto fake_s = discriminator_forward(constant(fake), ds, bind, sn, false);
  return {mean_value(real_s->value), mean_value(fake_s->value), real_s->value.shape()};
}

// ---------------------------------------------------------------------------
// Ablation and radius sweep

struct AblationRow {
  std::string label;
  ResolvedVariant variant;
  int radius = 0;
  EvalRow metrics;
};

inline AblationRow train_and_score(const TrainConfig& cfg, const std::string& label, const std::filesystem::path& data_dir,
                                   const std::filesystem::path& run_dir, const SplitData& test) {
  const auto r = train(cfg, data_dir, run_dir);
  const Model m = load_model(r.checkpoint);
  const auto t = evaluate(test, EvalSource::model, &m);
  write_text(run_dir / "eval.csv", eval_csv(t));
  return {label, resolve_variant(cfg), cfg.nl_radius, t.mean};
}

// Every variant sees the same seed, hence the same initial stream and data order.
inline std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<std::string>& variants,
                                       const std::filesystem::path& data_dir, const std::filesystem::path& out_dir) {
  if (variants.size() < 2) throw ConfigError("ablate needs at least two variants");
  const SplitData test = load_split(data_dir, "test", base.window);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    TrainConfig c = base;
    c.variant = variants[i];
    const std::string label = variants[i];
    rows.push_back(train_and_score(c, label, data_dir, out_dir / (std::to_string(i) + "_" + label), test));
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,use_nonlocal,loss,adversary,nl_radius,rmse,psnr,ssim,cnr,tml\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out += r.label + "," + (r.variant.cfg.use_nonlocal ? "1" : "0") + "," + to_string(r.variant.cfg.loss) + "," +
           to_string(r.variant.cfg.adversary) + "," + radius_str(r.radius) + "," + csv_number(m.rmse) + "," +
           csv_number(m.psnr) + "," + csv_number(m.ssim) + "," + (m.cnr ? csv_number(*m.cnr) : "") + "," +
           csv_number(m.tml) + "\n";
  }
  return out;
}

inline const std::vector<int>& default_sweep_radii() {
  static const std::vector<int> r{0, 1, 2, 3, 5, NeighborhoodSpec::full};
  return r;
}

// Radius 0 trains without the non-local block.
inline std::vector<AblationRow> radius_sweep(const TrainConfig& base, const std::vector<int>& radii,
                                             const std::filesystem::path& data_dir, const std::filesystem::path& out_dir) {
  const SplitData test = load_split(data_dir, "test", base.window);
  std::vector<AblationRow> rows;
  for (int r : radii) {
    TrainConfig c = base;
    c.nl_radius = r;
    rows.push_back(train_and_score(c, base.variant, data_dir, out_dir / ("radius_" + radius_str(r)), test));
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<AblationRow>& rows) {
  std::string out = "radius,psnr,rmse,ssim\n";
  for (const auto& r : rows)
    out += radius_str(r.radius) + "," + csv_number(r.metrics.psnr) + "," + csv_number(r.metrics.rmse) + "," +
           csv_number(r.metrics.ssim) + "\n";
  return out;
}

}  // namespace nlden
