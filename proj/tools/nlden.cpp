// Command-line front end: dataset generation, training, inference,
// evaluation, ablations and diagnostics.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nlden/nlden.hpp"

namespace fs = std::filesystem;
using namespace nlden;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> sets;
};

// Defaults, then the config file, then --set overrides, then --seed.
TrainConfig resolve_config(const Globals& g) {
  TrainConfig c;
  if (!g.config.empty()) c = load_config(g.config);
  std::string text;
  for (const auto& s : g.sets) {
    if (s.find('=') == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    text += s + "\n";
  }
  apply_config_text(c, text);
  if (g.seed) c.seed = *g.seed;
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void emit(const fs::path& path, const std::string& text) {
  write_text(path, text);
  std::fputs(text.c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neighbourhood non-local CT denoiser"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out-dir", g.out_dir, "output directory");
  app.add_option("--set", g.sets, "override one config key (key=value)");

  auto* gen = app.add_subcommand("phantom-gen", "write a synthetic phantom dataset");
  std::optional<std::size_t> count, size;
  gen->add_option("--count", count, "number of phantoms");
  gen->add_option("--size", size, "image side in pixels");

  auto* tr = app.add_subcommand("train", "train one variant");
  std::string data_dir, variant;
  tr->add_option("--data", data_dir, "dataset directory");
  tr->add_option("--variant", variant, "M1..M6");

  auto* dn = app.add_subcommand("denoise", "denoise one NLT1 image in HU");
  std::string ckpt, input, output, pgm;
  dn->add_option("--checkpoint", ckpt)->required();
  dn->add_option("--input", input)->required();
  dn->add_option("--output", output)->required();
  dn->add_option("--pgm", pgm, "also write a windowed 8-bit rendering");

  auto* ev = app.add_subcommand("evaluate", "metrics CSV over a split");
  std::string split = "test", source = "model", csv_out;
  ev->add_option("--data", data_dir, "dataset directory");
  ev->add_option("--checkpoint", ckpt);
  ev->add_option("--split", split);
  ev->add_option("--source", source, "model, low or clean");
  ev->add_option("--output", csv_out, "CSV path (default <out-dir>/eval.csv)");

  auto* ab = app.add_subcommand("ablate", "train several variants on one seed stream");
  std::string variants = "M1,M2,M3,M4,M5,M6", radii;
  bool sweep = false;
  ab->add_option("--data", data_dir, "dataset directory");
  ab->add_option("--variants", variants, "comma-separated variant list");
  ab->add_flag("--radius-sweep", sweep, "sweep the neighbourhood radius instead");
  ab->add_option("--radii", radii, "radius list for the sweep, e.g. 0,1,2,3,5,full");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::size_t seeds = 50;
  std::string fault;
  gc->add_option("--seeds", seeds);
  gc->add_option("--inject-fault", fault)->group("");

  auto* dw = app.add_subcommand("dump-weights", "write the loss weight map and attention maps of one slice");
  std::string id;
  dw->add_option("--data", data_dir, "dataset directory");
  dw->add_option("--id", id)->required();
  dw->add_option("--checkpoint", ckpt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : int(ExitCode::usage);
  }

  try {
    TrainConfig cfg = resolve_config(g);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    if (!variant.empty()) cfg.variant = variant;
    const fs::path out = cfg.out_dir;

    if (gen->parsed()) {
      if (count) cfg.phantoms = *count;
      if (size) cfg.image_size = *size;
      auto opts = cfg.dataset_options();
      const auto m = write_dataset(out, opts);
      std::printf("wrote %zu phantoms to %s\n", m.size(), out.string().c_str());
    } else if (tr->parsed()) {
      const auto r = train(cfg, cfg.data_dir, out);
      std::printf("iterations %zu%s, running loss %.6g\ncheckpoint %s\nlog %s\n", r.iterations,
                  r.early_stopped ? " (early stop)" : "", r.running_loss, r.checkpoint.string().c_str(),
                  r.log.string().c_str());
    } else if (dn->parsed()) {
      std::optional<GeneratorSpec> expected;
      if (!g.config.empty() || !g.sets.empty()) expected = resolve_variant(cfg).generator;
      const Model m = load_model(ckpt, expected);
      const Tensor hu = read_tensor(input);
      const Tensor y = denoise_hu(m, hu, cfg.window);
      write_tensor(output, y);
      if (!pgm.empty()) write_pgm(pgm, hu_window(y, cfg.window));
    } else if (ev->parsed()) {
      const auto src = parse_eval_source(source);
      std::optional<Model> m;
      if (src == EvalSource::model) {
        if (ckpt.empty()) throw ConfigError("--source model needs --checkpoint");
        m = load_model(ckpt);
      }
      const auto data = load_split(cfg.data_dir, split, cfg.window);
      const auto t = evaluate(data, src, m ? &*m : nullptr);
      emit(csv_out.empty() ? out / "eval.csv" : fs::path(csv_out), eval_csv(t));
    } else if (ab->parsed()) {
      if (sweep) {
        std::vector<int> rs;
        for (const auto& r : split_list(radii)) rs.push_back(parse_radius(r));
        if (rs.empty()) rs = default_sweep_radii();
        emit(out / "radius_sweep.csv", sweep_csv(radius_sweep(cfg, rs, cfg.data_dir, out)));
      } else {
        emit(out / "ablation.csv", ablation_csv(ablate(cfg, split_list(variants), cfg.data_dir, out)));
      }
    } else if (gc->parsed()) {
      if (!fault.empty()) {
        if (fault != "conv2d") throw ConfigError("unknown fault '" + fault + "'");
        debug::conv2d_backward_input_scale = 1.01f;
      }
      GradcheckOptions o;
      o.seeds = seeds;
      const auto rep = run_gradcheck(o);
      std::fputs(rep.text().c_str(), stdout);
      if (!rep.passed()) return int(ExitCode::numeric);
    } else if (dw->parsed()) {
      const auto slice = load_slice(cfg.data_dir, id);
      const Tensor clean = hu_window(slice.clean, cfg.window);
      const Tensor low = hu_window(slice.low, cfg.window);
      const std::size_t H = clean.dim(1), W = clean.dim(2);
      std::optional<Model> m;
      if (!ckpt.empty()) m = load_model(ckpt);
      const Tensor recon = m ? denoise_normalized(*m, low) : low;
      const auto wm = noise_weight_map(clean.reshaped({1, 1, H, W}), recon.reshaped({1, 1, H, W}), cfg.weights);
      write_tensor(out / (id + "_weights.nlt1"), wm.p);
      Tensor shown = wm.p;
      float mx = 0;
      for (float v : shown.data()) mx = std::max(mx, v);
      for (auto& v : shown.data()) v = mx > 0 ? v / mx : 0.0f;
      write_pgm(out / (id + "_weights.pgm"), shown);
      std::printf("weight map %s\n", (out / (id + "_weights.nlt1")).string().c_str());
      if (m && m->spec.use_nonlocal) {
        Binding<float> b(m->params);
        const Tensor x = pad_to_multiple(low.reshaped({1, 1, H, W}), m->spec.downsample_factor);
        const auto e = generator_encode(constant(x), m->spec, b);
        const Tensor a =
            attention_weights_debug(e.skips.back()->value, generator_nonlocal(m->spec), m->spec.nl_radius, m->params);
        write_tensor(out / (id + "_attention.nlt1"), a);
        std::printf("attention %s %s\n", (out / (id + "_attention.nlt1")).string().c_str(), shape_str(a.shape()).c_str());
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "nlden: %s\n", e.what());
    return int(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "nlden: io error: %s\n", e.what());
    return int(ExitCode::io);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "nlden: %s\n", e.what());
    return int(ExitCode::usage);
  }
  return 0;
}
