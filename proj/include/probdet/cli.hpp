#pragma once

// Command-line front end. Needs CLI11 on the include path in addition to the
// library's own dependencies.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "probdet/config.hpp"
#include "probdet/detail/parallel.hpp"
#include "probdet/detector.hpp"
#include "probdet/errors.hpp"
#include "probdet/evalkit.hpp"
#include "probdet/probcore.hpp"
#include "probdet/synthdata.hpp"
#include "probdet/trainer.hpp"

namespace probdet::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kConfig = 4,
  kNonFinite = 5,
  kCheckFailed = 6,
};

inline constexpr const char* kExitCodeHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage error (bad subcommand, flag or flag value)\n"
    "  3  file missing, unreadable or unwritable\n"
    "  4  invalid config or input file contents\n"
    "  5  training produced a non-finite loss\n"
    "  6  a verification (grad-check) failed\n"
    "Errors print one line to stderr: error: code=<n> kind=<kind> msg=\"<text>\"";

struct CommandError : std::runtime_error {
  int code;
  CommandError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

inline const char* kind_name(int code) {
  switch (code) {
    case kUsage: return "usage";
    case kIo: return "io";
    case kConfig: return "config";
    case kNonFinite: return "nonfinite";
    case kCheckFailed: return "check";
    default: return "internal";
  }
}

inline void print_error(std::ostream& err, int code, const std::string& msg) {
  std::string escaped;
  for (char ch : msg) {
    if (ch == '"' || ch == '\\') escaped += '\\';
    escaped += ch == '\n' ? ' ' : ch;
  }
  err << "error: code=" << code << " kind=" << kind_name(code) << " msg=\"" << escaped << "\"\n";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << text;
  if (!os) throw IoError("write failed for " + path);
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(1) + "\n"); }

// Base config (file or embedded) plus --set overrides, validated.
inline RunConfig resolve_config(const std::optional<nlohmann::json>& base, const std::vector<std::string>& overrides) {
  nlohmann::json j = base ? *base : nlohmann::json::object();
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

inline nlohmann::json provenance(const RunConfig& rc) {
  return {{"run_config", run_config_to_json(rc)}, {"tool_version", kToolVersion}};
}

inline void add_provenance(nlohmann::json& artifact, const RunConfig& rc) {
  artifact["run_config"] = run_config_to_json(rc);
  artifact["tool_version"] = kToolVersion;
}

struct Options {
  unsigned threads = 0;
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string model;
  std::string trace;
  std::size_t grid = 1000;
  double lower = 1e-6;
  std::string kind = "prob_ablation";
  std::size_t scene = 0;
  std::size_t coords = 0;
  double step = 1e-6;
  double tolerance = 1e-5;
  double perturb = 0.1;
  bool quiet = false;
};

inline std::optional<nlohmann::json> load_base(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return config_json_from_file(path);
}

inline int cmd_gen_data(const Options& o, std::ostream& out) {
  auto rc = resolve_config(load_base(o.config), o.overrides);
  if (o.seed) rc.seed = *o.seed;
  const auto ds = generate_dataset(rc.data, rc.seed);
  save_dataset(ds, o.out, provenance(rc));
  std::size_t objects = 0;
  for (const auto& s : ds.scenes) objects += s.objects.size();
  if (!o.quiet) out << "wrote " << o.out << ": " << ds.scenes.size() << " scenes, " << objects << " objects\n";
  return kOk;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const auto raw = read_json_file(o.data);
  const auto ds = dataset_from_json(raw);
  std::optional<nlohmann::json> base = load_base(o.config);
  if (!base && raw.contains("run_config")) base = raw.at("run_config");
  auto rc = resolve_config(base, o.overrides);
  rc.data = ds.config;
  rc.seed = ds.seed;
  const std::size_t every = std::max<std::size_t>(1, rc.train.iterations / 10);
  const auto result = train(ds, rc.train, [&](const TraceRow& r) {
    if (!o.quiet && (r.iteration % every == 0 || r.iteration + 1 == rc.train.iterations)) {
      char line[160];
      std::snprintf(line, sizeof line, "iter %zu lr %.4g loss %.6f\n", r.iteration, r.lr, r.total);
      out << line << std::flush;
    }
  });
  auto model = checkpoint_to_json(result.params);
  add_provenance(model, rc);
  write_json(o.out, model);
  std::ostringstream csv;
  write_trace_csv(csv, result.trace);
  const std::string trace_path = o.trace.empty() ? o.out + ".loss.csv" : o.trace;
  write_text(trace_path, csv.str());
  if (!o.quiet) out << "wrote " << o.out << " and " << trace_path << "\n";
  return kOk;
}

// Detections stored per scene instead of a checkpoint; used for fixtures.
inline std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j, std::size_t scenes) {
  const auto& per_scene = j.at("detections");
  if (per_scene.size() != scenes) throw std::invalid_argument("model: detections must list every scene");
  std::vector<std::vector<Detection>> out(scenes);
  for (std::size_t s = 0; s < scenes; ++s) {
    std::size_t i = 0;
    for (const auto& d : per_scene[s]) {
      out[s].push_back({box_from_json(d.at("box")), d.at("class").get<int>(), d.at("score").get<double>(), i++, 0});
    }
  }
  return out;
}

inline nlohmann::json detections_to_json(const std::vector<std::vector<Detection>>& dets) {
  auto out = nlohmann::json::array();
  for (const auto& scene : dets) {
    auto js = nlohmann::json::array();
    for (const auto& d : scene) js.push_back({{"box", box_to_json(d.box)}, {"class", d.class_id}, {"score", d.score}});
    out.push_back(js);
  }
  return out;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const auto model = read_json_file(o.model);
  const auto ds = load_dataset(o.data);
  std::optional<nlohmann::json> base = load_base(o.config);
  if (!base && model.contains("run_config")) base = model.at("run_config");
  auto rc = resolve_config(base, o.overrides);

  MeanApResult ap;
  std::optional<double> recall;
  const std::size_t budget = rc.train.max_proposals;
  if (model.contains("detections")) {
    const auto dets = detections_from_json(model, ds.scenes.size());
    ap = mean_ap(dets, ds, rc.eval.iou_thresholds);
  } else {
    const auto params = checkpoint_from_json(model);
    if (params.feature_length != ds.config.feature_length() || params.num_classes != ds.config.num_classes ||
        !(params.pyramid == ds.config.pyramid)) {
      throw std::invalid_argument("model does not match the dataset's features, classes or pyramid");
    }
    const std::size_t budgets[] = {budget};
    const ProposalOptions po{rc.train.max_proposals, rc.train.proposal_nms, rc.train.pre_nms_top};
    const auto r = evaluate_model(params, ds, rc.train.scoring, budgets, rc.eval, po);
    ap = r[0].ap;
    recall = r[0].recall;
  }

  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    const auto v = ap.class_ap(static_cast<int>(c));
    per_class.push_back({{"id", c},
                         {"name", ds.classes[c].name},
                         {"frequency", ds.classes[c].frequency},
                         {"AP", v ? nlohmann::json(*v) : nlohmann::json(nullptr)}});
  }
  const auto rare = rare_classes(ds);
  nlohmann::json report{{"num_scenes", ds.scenes.size()},
                        {"scoring", to_string(rc.train.scoring)},
                        {"mAP", ap.map},
                        {"AP_per_threshold", nlohmann::json::array()},
                        {"rare_classes", rare},
                        {"rare_mAP", ap.class_mean(rare)},
                        {"per_class", per_class}};
  for (std::size_t t = 0; t < ap.thresholds.size(); ++t) {
    report["AP_per_threshold"].push_back({{"iou", ap.thresholds[t]}, {"AP", ap.ap_at(t)}});
  }
  if (recall) {
    report["AR"] = *recall;
    report["AR_budget"] = budget;
    report["AR_iou"] = rc.eval.recall_iou;
  }
  add_provenance(report, rc);
  write_json(o.out, report);
  if (!o.quiet) {
    char line[160];
    std::snprintf(line, sizeof line, "mAP %.4f", ap.map);
    out << line;
    if (recall) {
      std::snprintf(line, sizeof line, "  AR@%zu %.4f", budget, *recall);
      out << line;
    }
    out << "\n";
  }
  return kOk;
}

inline int cmd_bounds(const Options& o, std::ostream& out) {
  const auto surface = bound_gap_sweep(o.grid, o.lower);
  std::ostringstream csv;
  surface.write_csv(csv);
  write_text(o.out, csv.str());
  nlohmann::json meta{{"grid", o.grid},
                      {"lower", o.lower},
                      {"max_gap", surface.max_gap},
                      {"argmax_alpha", surface.argmax_alpha},
                      {"argmax_beta", surface.argmax_beta},
                      {"min_gap", surface.min_gap},
                      {"log2", std::log(2.0)},
                      {"tool_version", kToolVersion}};
  write_json(o.out + ".meta.json", meta);
  if (!o.quiet) {
    char line[200];
    std::snprintf(line, sizeof line, "max gap %.9f at alpha=%.3g beta=%.3g (log 2 = %.9f); min gap %.3g\n",
                  surface.max_gap, surface.argmax_alpha, surface.argmax_beta, std::log(2.0), surface.min_gap);
    out << line;
  }
  return kOk;
}

inline int run_and_report(ExperimentKind kind, const Options& o, std::ostream& out) {
  const auto rc = resolve_config(load_base(o.config), o.overrides);
  std::filesystem::create_directories(o.out);
  const auto rep = run_experiment(kind, rc.experiment(), nullptr, [&](const ConditionRow& r) {
    if (o.quiet) return;
    char line[200];
    std::snprintf(line, sizeof line, "seed %llu %-20s K=%-4zu mAP %.4f AR %.4f rare %.4f (%.1fs)\n",
                  static_cast<unsigned long long>(r.seed), r.condition.c_str(), r.budget, r.map, r.recall, r.rare_map,
                  r.train_seconds);
    out << line << std::flush;
  });
  const std::filesystem::path dir(o.out);
  std::ostringstream medians, seeds;
  write_report_csv(medians, rep.median_rows, false);
  write_report_csv(seeds, rep.seed_rows, true);
  write_text((dir / "report.csv").string(), medians.str());
  write_text((dir / "report_seeds.csv").string(), seeds.str());
  nlohmann::json j{{"kind", to_string(kind)},
                   {"medians", report_rows_to_json(rep.median_rows)},
                   {"seeds", report_rows_to_json(rep.seed_rows)}};
  add_provenance(j, rc);
  write_json((dir / "report.json").string(), j);
  if (!o.quiet) out << medians.str();
  return kOk;
}

inline int cmd_grad_check(const Options& o, std::ostream& out) {
  const auto rc = resolve_config(load_base(o.config), o.overrides);
  const auto ds = o.data.empty() ? generate_dataset(rc.data, rc.seed) : load_dataset(o.data);
  if (ds.scenes.empty()) throw std::invalid_argument("grad-check: dataset has no scenes");
  if (o.scene >= ds.scenes.size()) throw std::invalid_argument("grad-check: --scene out of range");
  const auto& scene = ds.scenes[o.scene];
  const auto features = compute_scene_features(ds, scene);
  const auto labels = assign_labels(scene, ds.config.pyramid, rc.train);

  ScorerParams params;
  if (!o.model.empty()) {
    params = checkpoint_from_json(read_json_file(o.model));
  } else {
    params = initial_params(ds, rc.train);
    Rng rng(mix_seed(rc.train.seed, 0x9cu));
    for (auto* m : params.mutable_blocks()) {
      for (auto& v : m->data) v += o.perturb * rng.normal();
    }
  }
  auto opt = make_loss_options(rc.train);
  std::vector<int> subset;
  if (rc.train.class_loss == ClassLoss::federated) {
    std::vector<int> positives;
    for (const auto& g : scene.objects) positives.push_back(g.class_id);
    Rng rng(mix_seed(rc.train.seed, 0xfedu));
    subset = sample_subset(positives, ClassFrequencyTable{ds.class_counts()}, rc.train.federated_subset_size, rng);
    opt.federated_subset = subset;
  }
  GradCheckOptions go;
  go.step = o.step;
  go.tolerance = o.tolerance;
  go.max_coords_per_block = o.coords;
  go.seed = rc.train.seed;
  const auto report = grad_check_scene(params, {scene, features}, labels, opt, go);
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : report.blocks) {
    char line[200];
    std::snprintf(line, sizeof line, "%-18s checked %4zu/%-4zu max rel %.3e max abs %.3e  %s\n", b.name.c_str(),
                  b.checked, b.size, b.max_rel_error, b.max_abs_error, b.passed ? "ok" : "FAIL");
    if (!o.quiet) out << line;
    blocks.push_back({{"name", b.name},
                      {"size", b.size},
                      {"checked", b.checked},
                      {"max_rel_error", b.max_rel_error},
                      {"max_abs_error", b.max_abs_error},
                      {"worst_index", b.worst_index},
                      {"passed", b.passed}});
  }
  if (!o.out.empty()) {
    nlohmann::json j{{"step", go.step}, {"tolerance", go.tolerance}, {"passed", report.passed()}, {"blocks", blocks}};
    add_provenance(j, rc);
    write_json(o.out, j);
  }
  if (!report.passed()) throw CommandError(kCheckFailed, "gradient check failed");
  if (!o.quiet) out << "gradient check passed\n";
  return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options o;
  CLI::App app{"Probabilistic two-stage detection toolkit: synthetic data, training, evaluation and analysis.",
               "probdet"};
  app.footer(kExitCodeHelp);
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", o.threads, "Maximum worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_flag("--quiet", o.quiet, "Suppress progress output");
  app.set_version_flag("--version", kToolVersion);

  auto add_config = [&](CLI::App* sub, bool required) {
    auto* opt = sub->add_option("--config", o.config, "Config JSON, or any artifact with an embedded run_config");
    if (required) opt->required();
    sub->add_option("--set", o.overrides, "Override a config value, e.g. --set trainer.iterations=500 (repeatable)");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset");
  add_config(gen, false);
  gen->add_option("--seed", o.seed, "Dataset seed (overrides the config's seed)");
  gen->add_option("--out", o.out, "Output dataset JSON")->required();

  auto* tr = app.add_subcommand("train", "Train a detector on a dataset");
  add_config(tr, false);
  tr->add_option("--data", o.data, "Dataset JSON")->required();
  tr->add_option("--out", o.out, "Output model checkpoint JSON")->required();
  tr->add_option("--trace", o.trace, "Loss trace CSV (default: <out>.loss.csv)");

  auto* ev = app.add_subcommand("eval", "Evaluate a model on a dataset");
  add_config(ev, false);
  ev->add_option("--model", o.model, "Model checkpoint or detections JSON")->required();
  ev->add_option("--data", o.data, "Dataset JSON")->required();
  ev->add_option("--out", o.out, "Output report JSON")->required();

  auto* bd = app.add_subcommand("bounds", "Sweep the background bound gap over (alpha, beta)");
  bd->add_option("--grid", o.grid, "Grid points per axis")->check(CLI::Range(std::size_t{2}, std::size_t{20000}));
  bd->add_option("--lower", o.lower, "Lower end of both axes")->check(CLI::Range(1e-300, 0.999));
  bd->add_option("--out", o.out, "Output CSV (alpha,beta,exact,B1,B2,gap); a .meta.json summary is written beside it")
      ->required();

  auto* ab = app.add_subcommand("ablate", "Run an ablation experiment over the configured seeds");
  add_config(ab, true);
  ab->add_option("--kind", o.kind, "Experiment kind")
      ->check(CLI::IsMember({"prob_ablation", "stage_style", "federated_loss"}));
  ab->add_option("--out", o.out, "Output directory (report.csv, report_seeds.csv, report.json)")->required();

  auto* sw = app.add_subcommand("sweep-proposals", "Sweep the proposal budget");
  add_config(sw, true);
  sw->add_option("--out", o.out, "Output directory (report.csv, report_seeds.csv, report.json)")->required();

  auto* gc = app.add_subcommand("grad-check", "Compare analytic gradients with central finite differences");
  add_config(gc, true);
  gc->add_option("--data", o.data, "Dataset JSON (default: generate from the config)");
  gc->add_option("--model", o.model, "Checkpoint to check at (default: perturbed initial weights)");
  gc->add_option("--scene", o.scene, "Scene index");
  gc->add_option("--coords", o.coords, "Coordinates checked per block (0 = all)");
  gc->add_option("--step", o.step, "Finite-difference step")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", o.tolerance, "Maximum relative error")->check(CLI::PositiveNumber);
  gc->add_option("--perturb", o.perturb, "Std of the random perturbation of initial weights")
      ->check(CLI::NonNegativeNumber);
  gc->add_option("--out", o.out, "Optional report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, kUsage, e.what());
    return kUsage;
  }

  set_max_threads(o.threads);
  try {
    if (gen->parsed()) return cmd_gen_data(o, out);
    if (tr->parsed()) return cmd_train(o, out);
    if (ev->parsed()) return cmd_eval(o, out);
    if (bd->parsed()) return cmd_bounds(o, out);
    if (ab->parsed()) return run_and_report(experiment_kind_from_string(o.kind), o, out);
    if (sw->parsed()) return run_and_report(ExperimentKind::proposal_sweep, o, out);
    if (gc->parsed()) return cmd_grad_check(o, out);
  } catch (const CommandError& e) {
    print_error(err, e.code, e.what());
    return e.code;
  } catch (const IoError& e) {
    print_error(err, kIo, e.what());
    return kIo;
  } catch (const NonFiniteLoss& e) {
    print_error(err, kNonFinite, e.what());
    return kNonFinite;
  } catch (const SizingError& e) {
    print_error(err, kConfig, e.what());
    return kConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    print_error(err, kIo, e.what());
    return kIo;
  } catch (const nlohmann::json::exception& e) {
    print_error(err, kConfig, e.what());
    return kConfig;
  } catch (const std::invalid_argument& e) {
    print_error(err, kConfig, e.what());
    return kConfig;
  } catch (const std::out_of_range& e) {
    print_error(err, kConfig, e.what());
    return kConfig;
  } catch (const std::exception& e) {
    print_error(err, kInternal, e.what());
    return kInternal;
  }
  print_error(err, kUsage, "no subcommand given");
  return kUsage;
}

}  // namespace probdet::cli
