#pragma once

// Command-line front end: config documents, overrides and subcommands.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "siban/evalkit.hpp"
#include "siban/gradcheck.hpp"
#include "siban/synthdomains.hpp"
#include "siban/trainer.hpp"

namespace siban {

struct EvalConfig {
  ADistanceOptions a_distance;
  std::size_t max_pixels = 2000;
  std::uint64_t seed = 0;
};

struct CliConfig {
  TrainConfig train;
  ModelConfig model;
  SceneSpec scene;
  DomainStyle source_style = default_source_style();
  DomainStyle target_style = default_target_style();
  DatasetSizes data;
  EvalConfig eval;
};

inline nlohmann::ordered_json to_json(const SceneSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"class_names", s.class_names},
          {"frequency_targets", s.frequency_targets},
          {"horizon_min", s.horizon_min},
          {"horizon_max", s.horizon_max},
          {"buildings_min", s.buildings_min},
          {"buildings_max", s.buildings_max},
          {"building_width_min", s.building_width_min},
          {"building_width_max", s.building_width_max},
          {"building_height_min", s.building_height_min},
          {"building_height_max", s.building_height_max},
          {"vehicles_max", s.vehicles_max},
          {"vehicle_width_min", s.vehicle_width_min},
          {"vehicle_width_max", s.vehicle_width_max},
          {"vehicle_height_min", s.vehicle_height_min},
          {"vehicle_height_max", s.vehicle_height_max},
          {"pole_probability", s.pole_probability},
          {"pole_width_min", s.pole_width_min},
          {"pole_width_max", s.pole_width_max},
          {"pole_height_min", s.pole_height_min},
          {"pole_height_max", s.pole_height_max},
          {"seed", s.seed}};
}

template <typename J>
void update_from_json(SceneSpec& s, const J& j) {
  const std::string n = "scene";
  detail::reject_unknown(j,
                         {"height", "width", "class_names", "frequency_targets", "horizon_min", "horizon_max",
                          "buildings_min", "buildings_max", "building_width_min", "building_width_max",
                          "building_height_min", "building_height_max", "vehicles_max", "vehicle_width_min",
                          "vehicle_width_max", "vehicle_height_min", "vehicle_height_max", "pole_probability",
                          "pole_width_min", "pole_width_max", "pole_height_min", "pole_height_max", "seed"},
                         n);
  detail::read_key(j, "height", s.height, n);
  detail::read_key(j, "width", s.width, n);
  detail::read_key(j, "class_names", s.class_names, n);
  detail::read_key(j, "frequency_targets", s.frequency_targets, n);
  detail::read_key(j, "horizon_min", s.horizon_min, n);
  detail::read_key(j, "horizon_max", s.horizon_max, n);
  detail::read_key(j, "buildings_min", s.buildings_min, n);
  detail::read_key(j, "buildings_max", s.buildings_max, n);
  detail::read_key(j, "building_width_min", s.building_width_min, n);
  detail::read_key(j, "building_width_max", s.building_width_max, n);
  detail::read_key(j, "building_height_min", s.building_height_min, n);
  detail::read_key(j, "building_height_max", s.building_height_max, n);
  detail::read_key(j, "vehicles_max", s.vehicles_max, n);
  detail::read_key(j, "vehicle_width_min", s.vehicle_width_min, n);
  detail::read_key(j, "vehicle_width_max", s.vehicle_width_max, n);
  detail::read_key(j, "vehicle_height_min", s.vehicle_height_min, n);
  detail::read_key(j, "vehicle_height_max", s.vehicle_height_max, n);
  detail::read_key(j, "pole_probability", s.pole_probability, n);
  detail::read_key(j, "pole_width_min", s.pole_width_min, n);
  detail::read_key(j, "pole_width_max", s.pole_width_max, n);
  detail::read_key(j, "pole_height_min", s.pole_height_min, n);
  detail::read_key(j, "pole_height_max", s.pole_height_max, n);
  detail::read_key(j, "seed", s.seed, n);
}

template <typename J>
void update_from_json(DomainStyle& s, const J& j, const std::string& n) {
  detail::reject_unknown(j, {"base_colors", "noise", "contrast", "brightness", "channel_gain", "grain_amplitude",
                             "grain_period"},
                         n);
  detail::read_key(j, "base_colors", s.base_colors, n);
  detail::read_key(j, "noise", s.noise, n);
  detail::read_key(j, "contrast", s.contrast, n);
  detail::read_key(j, "brightness", s.brightness, n);
  detail::read_key(j, "channel_gain", s.channel_gain, n);
  detail::read_key(j, "grain_amplitude", s.grain_amplitude, n);
  detail::read_key(j, "grain_period", s.grain_period, n);
  if (s.noise < 0.0 || s.grain_amplitude < 0.0 || !(s.grain_period > 0.0)) throw ConfigError(n + ": invalid texture");
}

inline nlohmann::ordered_json to_json(const EvalConfig& e) {
  return {{"images_per_domain", e.a_distance.images_per_domain},
          {"holdout", e.a_distance.holdout_fraction},
          {"probe_iters", e.a_distance.probe_iters},
          {"probe_batch", e.a_distance.probe_batch},
          {"probe_lr", e.a_distance.probe_lr},
          {"max_pixels", e.max_pixels},
          {"seed", e.seed}};
}

template <typename J>
void update_from_json(EvalConfig& e, const J& j) {
  const std::string n = "eval";
  detail::reject_unknown(j, {"images_per_domain", "holdout", "probe_iters", "probe_batch", "probe_lr", "max_pixels",
                             "seed"},
                         n);
  detail::read_key(j, "images_per_domain", e.a_distance.images_per_domain, n);
  detail::read_key(j, "holdout", e.a_distance.holdout_fraction, n);
  detail::read_key(j, "probe_iters", e.a_distance.probe_iters, n);
  detail::read_key(j, "probe_batch", e.a_distance.probe_batch, n);
  detail::read_key(j, "probe_lr", e.a_distance.probe_lr, n);
  detail::read_key(j, "max_pixels", e.max_pixels, n);
  detail::read_key(j, "seed", e.seed, n);
  e.a_distance.seed = e.seed;
  if (e.a_distance.probe_batch == 0 || !(e.a_distance.probe_lr > 0.0)) throw ConfigError("eval: invalid probe settings");
}

inline nlohmann::ordered_json to_json(const CliConfig& c) {
  return {{"train", to_json(c.train)},
          {"model", to_json(c.model)},
          {"scene", to_json(c.scene)},
          {"source_style", style_to_json(c.source_style)},
          {"target_style", style_to_json(c.target_style)},
          {"data", {{"source", c.data.source}, {"target_train", c.data.target_train}, {"target_val", c.data.target_val}}},
          {"eval", to_json(c.eval)}};
}

// Applies `section.key=value` to a config document. The value is parsed as
// JSON when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  const std::string section = assignment.substr(0, dot), key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  doc[section][key] = value;
}

inline CliConfig parse_config(nlohmann::json doc) {
  if (doc.is_null()) doc = nlohmann::json::object();
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  CliConfig c;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& s = it.key();
    const auto& v = it.value();
    if (s == "train") {
      update_from_json(c.train, v);
    } else if (s == "model") {
      update_from_json(c.model, v);
    } else if (s == "scene") {
      update_from_json(c.scene, v);
    } else if (s == "source_style") {
      update_from_json(c.source_style, v, s);
    } else if (s == "target_style") {
      update_from_json(c.target_style, v, s);
    } else if (s == "data") {
      detail::reject_unknown(v, {"source", "target_train", "target_val"}, s);
      detail::read_key(v, "source", c.data.source, s);
      detail::read_key(v, "target_train", c.data.target_train, s);
      detail::read_key(v, "target_val", c.data.target_val, s);
    } else if (s == "eval") {
      update_from_json(c.eval, v);
    } else {
      throw ConfigError("unknown config section '" + s + "'");
    }
  }
  validate(c.train);
  validate(c.scene);
  return c;
}

inline CliConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json doc = nlohmann::json::object();
  if (!path.empty()) {
    try {
      doc = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return parse_config(doc);
}

namespace detail {
inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, j.dump(2) + "\n");
}
}  // namespace detail

// Exit codes: 0 success, 1 validation error, 2 runtime failure.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"significance-aware information bottleneck domain adaptation toolkit", "siban"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  auto config_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "override, section.key=value")->take_all();
    sub->add_option("--seed", seed, "seed overriding every config seed");
  };
  auto resolve = [&]() {
    auto cfg = load_config(config_path, overrides);
    if (seed) {
      cfg.train.seed = *seed;
      cfg.scene.seed = *seed;
      cfg.eval.seed = *seed;
      cfg.eval.a_distance.seed = *seed;
    }
    return cfg;
  };

  std::string out_path, data_dir, checkpoint, run_dir, split_text = "target-val", reference, mode_text;
  std::string resume;
  std::optional<std::uint64_t> stop_at;
  std::size_t trials = 200, max_pixels_flag = 0;
  bool verbose = false, skip_a_distance = false, skip_blocks = false;
  double fd_eps = 1e-5;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic source/target benchmark");
  config_flags(gen);
  gen->add_option("--out", out_path, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train one ablation arm");
  config_flags(train);
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_path, "run directory")->required();
  train->add_option("--mode", mode_text, "source-only | baseline | iban | siban");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--stop-at", stop_at, "checkpoint and stop after this many iterations");
  train->add_flag("--verbose", verbose, "progress on stderr");

  auto* eval = app.add_subcommand("eval", "segmentation metrics and A-distance of a checkpoint");
  config_flags(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--split", split_text, "source | target-val");
  eval->add_option("--out", out_path, "metrics file (default: metrics.json next to the checkpoint)");
  eval->add_option("--reference", reference, "metrics.json of a reference run, for the gain field");
  eval->add_flag("--no-a-distance", skip_a_distance, "skip the A-distance measurement");

  auto* adist = app.add_subcommand("a-distance", "proxy A-distance of a checkpoint's features");
  config_flags(adist);
  adist->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  adist->add_option("--data", data_dir, "dataset directory")->required();
  adist->add_option("--out", out_path, "optional JSON output");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of random graphs and network blocks");
  gc->add_option("--trials", trials, "number of random graphs");
  gc->add_option("--seed", seed, "graph seed");
  gc->add_option("--eps", fd_eps, "finite-difference step");
  gc->add_flag("--no-blocks", skip_blocks, "skip the network block checks");

  auto* curves = app.add_subcommand("export-curves", "steps.jsonl -> curves.csv");
  curves->add_option("--run", run_dir, "run directory")->required();
  curves->add_option("--out", out_path, "CSV path (default: <run>/curves.csv)");

  auto* dump = app.add_subcommand("dump-features", "per-pixel latent features with class tags as CSV");
  config_flags(dump);
  dump->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  dump->add_option("--data", data_dir, "dataset directory")->required();
  dump->add_option("--split", split_text, "source | target-val");
  dump->add_option("--max-pixels", max_pixels_flag, "rows to emit (default from config)");
  dump->add_option("--out", out_path, "CSV path")->required();

  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == args[0];
    if (!known) {
      err << "error: unknown subcommand '" << args[0] << "'\n";
      return 1;
    }
  }
  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve();
      const auto manifest = build_dataset(cfg.scene, cfg.source_style, cfg.target_style, cfg.data, out_path);
      out << "wrote " << manifest.at("num_samples").get<std::size_t>() << " samples to " << out_path << "\n";
      out << "measured class frequencies: " << manifest.at("measured_frequencies").at("all").dump() << "\n";
      return 0;
    }
    if (train->parsed()) {
      auto cfg = resolve();
      if (!mode_text.empty()) cfg.train.mode = parse_mode(mode_text);
      RunControl control;
      if (!resume.empty()) control.resume = resume;
      control.stop_at = stop_at;
      control.quiet = !verbose;
      const auto st = run_training(cfg.train, cfg.model, data_dir, out_path, control);
      out << "trained " << mode_name(cfg.train.mode) << " to iteration " << st.iter << " in " << out_path << "\n";
      return 0;
    }
    if (eval->parsed() || adist->parsed() || dump->parsed()) {
      const auto cfg = resolve();
      const auto loaded = load_checkpoint(checkpoint);
      const Mode mode = loaded.config.mode;
      const Dataset data = Dataset::open(data_dir);
      const auto& model = loaded.state.model;
      const std::filesystem::path ckpt_dir = std::filesystem::path(checkpoint).parent_path();
      auto ad_opts = cfg.eval.a_distance;

      if (dump->parsed()) {
        const std::size_t max_pixels = max_pixels_flag ? max_pixels_flag : cfg.eval.max_pixels;
        dump_features(model, mode, data, parse_split(split_text), max_pixels, cfg.eval.seed, out_path);
        out << "wrote " << out_path << "\n";
        return 0;
      }
      if (adist->parsed()) {
        const auto r = a_distance(model, mode, data, ad_opts);
        nlohmann::ordered_json j = {{"epsilon", r.epsilon}, {"d_A", r.d_a}, {"probe", r.probe}, {"mode", mode_name(mode)}};
        if (!out_path.empty()) detail::write_json(out_path, j);
        out << j.dump() << "\n";
        return 0;
      }
      const Split split = parse_split(split_text);
      const auto ev = evaluate_split(model, mode, data, split);
      MetricsRecord m;
      m.iou = iou_table(ev.confusion);
      m.checkpoint_iter = loaded.state.iter;
      if (!skip_a_distance) {
        const auto r = a_distance(model, mode, data, ad_opts);
        m.epsilon = r.epsilon;
        m.d_a = r.d_a;
      }
      if (!reference.empty()) {
        const auto ref = nlohmann::json::parse(detail::read_file(reference));
        m.gain = 100.0 * (m.iou.miou - ref.at("miou").get<double>());
      }
      auto j = metrics_to_json(m, data.class_names());
      j["split"] = split_name(split);
      j["mode"] = mode_name(mode);
      const std::filesystem::path metrics_path = out_path.empty() ? ckpt_dir / "metrics.json" : std::filesystem::path(out_path);
      detail::write_json(metrics_path, j);
      const auto pred_path = metrics_path.parent_path() / (metrics_path.stem().string() + "_predictions.bin");
      detail::write_file(pred_path, std::string(ev.predictions.begin(), ev.predictions.end()));
      out << "mIoU " << format_sig9(m.iou.miou) << " -> " << metrics_path.string() << "\n";
      return 0;
    }
    if (gc->parsed()) {
      RngStream rng(seed.value_or(0));
      double worst = 0.0;
      std::size_t rejected = 0;
      for (std::size_t t = 0; t < trials; ++t) {
        const auto g = random_graph_check(rng, 6, fd_eps);
        worst = std::max(worst, g.error);
        rejected += g.rejected;
      }
      out << "random graphs: " << trials << " checked (" << rejected
          << " draws skipped as unresolvable by finite differences), max relative error " << worst << "\n";
      if (!skip_blocks) {
        for (const auto& b : network_block_checks(seed.value_or(0), 24, fd_eps)) {
          out << "block " << b.block << ": max relative error " << b.error << "\n";
          worst = std::max(worst, b.error);
        }
      }
      out << "max relative error " << worst << "\n";
      return worst <= 1e-5 ? 0 : 2;
    }
    if (curves->parsed()) {
      const auto path = out_path.empty() ? export_curves(run_dir) : export_curves(run_dir, std::filesystem::path(out_path));
      out << "wrote " << path.string() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 1;
  } catch (const PolicyError& e) {
    err << "policy error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace siban
