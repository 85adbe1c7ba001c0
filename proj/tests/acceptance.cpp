// Acceptance run: one PASS/FAIL line per criterion.
//
//   probdet_acceptance              all eight, sharing trained models
//   probdet_acceptance --only 5     a single criterion
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "probdet/cli.hpp"
#include "probdet/config.hpp"
#include "probdet/evalkit.hpp"
#include "probdet/fedloss.hpp"
#include "probdet/geometry.hpp"
#include "probdet/probcore.hpp"
#include "probdet/trainer.hpp"

#ifndef PROBDET_SOURCE_DIR
#define PROBDET_SOURCE_DIR "."
#endif

namespace fs = std::filesystem;
using namespace probdet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

RunConfig shipped_config(const std::string& name) {
  return run_config_from_json(config_json_from_file(std::string(PROBDET_SOURCE_DIR) + "/configs/" + name));
}

// 1 --------------------------------------------------------------------------

Outcome bound_tightness() {
  const auto s = bound_gap_sweep(1000, 1e-6);
  const double log2 = std::log(2.0);
  bool inside = s.min_gap >= 0.0 && s.max_gap <= log2 + 1e-9;
  for (const auto& v : s.values) inside = inside && v.gap() >= 0.0 && v.gap() <= log2 + 1e-9;
  const double corner = s.at(0, 0).gap();
  const bool near = std::abs(corner - log2) <= 1e-3;
  return {inside && near, fmt("gap in [%.3g, %.9f] over 10^6 grid points, gap(1e-6, 1e-6) = %.9f", s.min_gap, s.max_gap,
                              corner)};
}

// 2 --------------------------------------------------------------------------

Outcome case_split() {
  std::mt19937_64 g(20240601);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t violations = 0, a_side = 0, b_side = 0;
  double worst = -1.0;
  for (int i = 0; i < 1000000; ++i) {
    const double a = std::max(u(g), kProbEps), b = std::max(u(g), kProbEps);
    const auto v = background_bounds(a, b);
    if (a >= b) {
      ++a_side;
      const double excess = (v.exact - v.b1) - std::log(2.0 - a);
      worst = std::max(worst, excess);
      violations += excess > 1e-9;
    }
    if (a <= b) {
      ++b_side;
      const double excess = (v.exact - v.b2) - std::log(2.0 - b);
      worst = std::max(worst, excess);
      violations += excess > 1e-9;
    }
  }
  return {violations == 0,
          fmt("%zu violations (alpha>=beta: %zu points, alpha<=beta: %zu points, worst excess %.3g)", violations, a_side,
              b_side, worst)};
}

// 3 --------------------------------------------------------------------------

struct GradTally {
  std::string name;
  std::size_t instances = 0;
  double worst = 0.0;
};

Outcome gradient_suite() {
  std::mt19937_64 g(7);
  std::normal_distribution<double> n(0.0, 1.5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<GradTally> tallies;
  auto tally = [&](const std::string& name) -> GradTally& {
    tallies.push_back({name, 0, 0.0});
    return tallies.back();
  };

  {
    auto& t = tally("focal");
    for (int i = 0; i < 100; ++i) {
      const double p = 0.01 + 0.98 * u(g);
      const bool pos = i % 2 == 0;
      const auto r = focal_loss(p, pos);
      auto f = [&](std::vector<double>& x) { return focal_loss(x[0], pos).loss; };
      t.worst = std::max(t.worst, oracle::rel_err(r.grad, oracle::central_diff(f, {p}, 0)));
      ++t.instances;
    }
  }
  {
    auto& t = tally("giou");
    std::uniform_real_distribution<double> off(0.5, 12.0);
    for (int i = 0; i < 100; ++i) {
      const LtrbOffsets pred{off(g), off(g), off(g), off(g)}, target{off(g), off(g), off(g), off(g)};
      const Point anchor{20.0 * u(g), 20.0 * u(g)};
      const auto r = giou_loss(pred, target, anchor);
      auto f = [&](std::vector<double>& x) { return giou_loss({x[0], x[1], x[2], x[3]}, target, anchor).loss; };
      const std::vector<double> x{pred.l, pred.t, pred.r, pred.b};
      for (std::size_t k = 0; k < 4; ++k) t.worst = std::max(t.worst, oracle::rel_err(r.grad[k], oracle::central_diff(f, x, k)));
      ++t.instances;
    }
  }
  {
    auto& t = tally("positive objective");
    for (int i = 0; i < 100; ++i) {
      std::vector<double> z(5);
      for (auto& v : z) v = n(g);
      const ObjectnessState obj{0.02 + 0.96 * u(g)};
      const ClassPosterior cls{softmax(z)};
      const int c = i % 4;
      const auto r = positive_log_objective(obj, cls, c);
      auto f = [&](std::vector<double>& x) {
        auto probs = cls.probs;
        probs[static_cast<std::size_t>(c)] = x[1];
        return positive_log_objective({x[0]}, {probs}, c).value;
      };
      const std::vector<double> x{obj.p_obj, cls.probs[static_cast<std::size_t>(c)]};
      t.worst = std::max(t.worst, oracle::rel_err(r.d_p_obj, oracle::central_diff(f, x, 0, 1e-7)));
      t.worst = std::max(t.worst, oracle::rel_err(r.d_class_prob, oracle::central_diff(f, x, 1, 1e-7)));
      ++t.instances;
    }
  }
  {
    auto& t = tally("weighted background CE");
    for (int i = 0; i < 100; ++i) {
      std::vector<double> z(6);
      for (auto& v : z) v = n(g);
      const double w = u(g);
      const auto r = weighted_softmax_ce(z, z.size() - 1, w);
      auto f = [&](std::vector<double>& x) { return weighted_softmax_ce(x, x.size() - 1, w).loss; };
      for (std::size_t k = 0; k < z.size(); ++k) t.worst = std::max(t.worst, oracle::rel_err(r.grad[k], oracle::central_diff(f, z, k)));
      ++t.instances;
    }
  }
  {
    auto& t = tally("federated BCE");
    for (int i = 0; i < 100; ++i) {
      std::vector<double> z(12);
      for (auto& v : z) v = n(g);
      std::vector<int> s;
      for (int c = 0; c < 12; ++c) {
        if (u(g) < 0.5) s.push_back(c);
      }
      const int target = s.empty() || i % 3 == 0 ? kBackgroundTarget : s[static_cast<std::size_t>(i) % s.size()];
      const double w = target == kBackgroundTarget ? u(g) : 1.0;
      const auto r = federated_bce(z, target, s, w);
      auto f = [&](std::vector<double>& x) { return federated_bce(x, target, s, w).loss; };
      for (std::size_t k = 0; k < z.size(); ++k) t.worst = std::max(t.worst, oracle::rel_err(r.grad[k], oracle::central_diff(f, z, k)));
      ++t.instances;
    }
  }
  {
    auto& t = tally("total_loss");
    DatasetConfig dc;
    dc.num_scenes = 25;
    dc.scene_width = dc.scene_height = 32;
    dc.num_classes = 4;
    dc.max_object_size = 20;
    dc.max_objects = 3;
    const auto ds = generate_dataset(dc, 11);
    const auto features = compute_all_features(ds);
    const ClassFrequencyTable table{ds.class_counts()};
    for (int i = 0; i < 100; ++i) {
      TrainConfig tc;
      tc.scoring = i % 2 ? ScoringMode::baseline : ScoringMode::probabilistic;
      tc.class_loss = (i / 2) % 2 ? ClassLoss::federated : ClassLoss::softmax;
      tc.assignment = (i / 4) % 2 ? AssignmentMode::recall : AssignmentMode::center;
      tc.first_stage_class_head = i % 10 == 9;
      tc.federated_subset_size = 2;
      tc.seed = static_cast<std::uint64_t>(i);
      const auto& scene = ds.scenes[static_cast<std::size_t>(i) % ds.scenes.size()];
      auto params = initial_params(ds, tc);
      Rng rng(mix_seed(99, static_cast<std::uint64_t>(i)));
      for (auto* m : params.mutable_blocks()) {
        for (auto& v : m->data) v += 0.3 * rng.normal();
      }
      auto opt = make_loss_options(tc);
      std::vector<int> subset;
      if (tc.class_loss == ClassLoss::federated) {
        std::vector<int> pos;
        for (const auto& o : scene.objects) pos.push_back(o.class_id);
        std::sort(pos.begin(), pos.end());
        pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
        subset = sample_subset(pos, table, tc.federated_subset_size, rng);
        opt.federated_subset = subset;
      }
      GradCheckOptions go;
      go.max_coords_per_block = 8;
      go.seed = static_cast<std::uint64_t>(i);
      const auto labels = assign_labels(scene, ds.config.pyramid, tc);
      const auto rep = grad_check_scene(params, {scene, features[static_cast<std::size_t>(i) % ds.scenes.size()]},
                                        labels, opt, go);
      for (const auto& b : rep.blocks) t.worst = std::max(t.worst, b.max_rel_error);
      ++t.instances;
    }
  }

  bool pass = true;
  std::string detail;
  for (const auto& t : tallies) {
    pass = pass && t.instances == 100 && t.worst < 1e-5;
    detail += fmt("%s%s %.2e", detail.empty() ? "" : ", ", t.name.c_str(), t.worst);
  }
  return {pass, "worst relative error over 100 instances each: " + detail};
}

// 4 --------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 g(4);
  std::uniform_int_distribution<int> count(0, 8), gcount(1, 4), level(0, 4);
  std::uniform_real_distribution<double> pos(0.0, 40.0), size(4.0, 16.0), jitter(-4.0, 4.0);
  std::size_t ap_bad = 0, nms_bad = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<Box> gts;
    for (int k = gcount(g); k > 0; --k) {
      const double x = pos(g), y = pos(g), w = size(g), h = size(g);
      gts.push_back({x, y, x + w, y + h});
    }
    std::vector<ScoredBox> dets;
    std::vector<oracle::Det> odets;
    for (int k = count(g); k > 0; --k) {
      const Box& b = gts[g() % gts.size()];
      const Box d{b.x1 + jitter(g), b.y1 + jitter(g), b.x2 + jitter(g), b.y2 + jitter(g)};
      const double s = level(g) / 4.0;
      dets.push_back({d, s});
      odets.push_back({d, s});
    }
    if (*average_precision(dets, gts, 0.5) != oracle::ap(odets, gts, 0.5)) ++ap_bad;
  }
  for (int t = 0; t < 1000; ++t) {
    std::vector<ScoredBox> c;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int k = count(g); k > 0; --k) {
      const double x = pos(g), y = pos(g);
      const Box b{x, y, x + size(g), y + size(g)};
      const double s = level(g) / 4.0;
      c.push_back({b, s});
      boxes.push_back(b);
      scores.push_back(s);
    }
    const double thr = 0.3 + 0.1 * (t % 5);
    if (nms(c, thr) != oracle::brute_nms(boxes, scores, thr)) ++nms_bad;
  }
  return {ap_bad == 0 && nms_bad == 0,
          fmt("AP mismatches %zu / 1000, NMS mismatches %zu / 1000", ap_bad, nms_bad)};
}

// 5, 6 -----------------------------------------------------------------------

Outcome prob_ablation(ModelCache& cache) {
  const auto rc = shipped_config("desk8.json");
  auto cfg = rc.experiment();
  cfg.budgets = {256};
  const auto rep = run_experiment(ExperimentKind::prob_ablation, cfg, &cache);
  const double cf = rep.median("center_fused").map, cn = rep.median("center_nonfused").map;
  const double rf = rep.median("recall_fused").map, rn = rep.median("recall_nonfused").map;
  const double center_gain = 100.0 * (cf - cn), recall_diff = 100.0 * (rf - rn);
  return {center_gain >= 1.0 && std::abs(recall_diff) <= 0.5,
          fmt("median mAP center fused %.2f / non-fused %.2f (gain %+.2f, need >= 1.0); recall fused %.2f / non-fused "
              "%.2f (diff %+.2f, need |diff| <= 0.5)",
              100 * cf, 100 * cn, center_gain, 100 * rf, 100 * rn, recall_diff)};
}

Outcome proposal_sweep(ModelCache& cache) {
  const auto rc = shipped_config("desk8.json");
  const auto rep = run_experiment(ExperimentKind::proposal_sweep, rc.experiment(), &cache);
  const auto& c256 = rep.median("center_fused", 256);
  const auto& c8 = rep.median("center_fused", 8);
  const auto& c32 = rep.median("center_fused", 32);
  const auto& r256 = rep.median("recall_nonfused", 256);
  const auto& r8 = rep.median("recall_nonfused", 8);
  const double center_drop = 100.0 * (c256.map - c8.map), recall_drop = 100.0 * (r256.map - r8.map);
  return {center_drop < recall_drop && c32.recall >= r256.recall,
          fmt("mAP drop 256->8: center fused %.2f vs recall non-fused %.2f; AR center@32 %.4f vs recall@256 %.4f",
              center_drop, recall_drop, c32.recall, r256.recall)};
}

// 7 --------------------------------------------------------------------------

Outcome federated_loss() {
  const auto rc = shipped_config("longtail40_federated.json");
  const auto rep = run_experiment(ExperimentKind::federated_loss, rc.experiment());
  const double fed = rep.median("federated_bce").rare_map, soft = rep.median("softmax_ce").rare_map;

  const auto ds = generate_dataset(rc.data, rc.seed);
  const ClassFrequencyTable table{ds.class_counts()};
  const auto w = sampling_weights(table);
  std::vector<double> hits(w.size(), 0.0);
  Rng rng(5);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) hits[static_cast<std::size_t>(sample_subset({}, table, 1, rng)[0])] += 1.0 / draws;
  double l1 = 0.0;
  for (std::size_t c = 0; c < w.size(); ++c) l1 += std::abs(hits[c] - w[c]);

  return {fed > soft && l1 <= 0.02,
          fmt("median rare-class mAP federated %.2f vs softmax %.2f (margin %+.2f); sampling L1 %.4f over 10^5 draws",
              100 * fed, 100 * soft, 100 * (fed - soft), l1)};
}

// 8 --------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cli_call(std::vector<std::string> args) {
  args.insert(args.begin(), "probdet");
  args.insert(args.begin() + 1, "--quiet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
  return code;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "probdet_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const char* name) { return (dir / name).string(); };
  const std::string cfg = std::string(PROBDET_SOURCE_DIR) + "/configs/desk8.json";

  int bad = 0;
  bad += cli_call({"gen-data", "--config", cfg, "--set", "data.num_scenes=24", "--seed", "3", "--out", p("d1.json")}) != 0;
  bad += cli_call({"gen-data", "--config", p("d1.json"), "--out", p("d2.json")}) != 0;
  bad += cli_call({"train", "--data", p("d1.json"), "--set", "trainer.iterations=60", "--out", p("m1.json")}) != 0;
  bad += cli_call({"--threads", "1", "train", "--config", p("m1.json"), "--data", p("d2.json"), "--out", p("m2.json")}) != 0;
  bad += cli_call({"eval", "--model", p("m1.json"), "--data", p("d1.json"), "--out", p("r1.json")}) != 0;
  bad += cli_call({"eval", "--config", p("r1.json"), "--model", p("m2.json"), "--data", p("d2.json"), "--out", p("r2.json")}) != 0;

  const bool data_same = bad == 0 && slurp(p("d1.json")) == slurp(p("d2.json"));
  const bool model_same = bad == 0 && slurp(p("m1.json")) == slurp(p("m2.json"));
  const bool trace_same = bad == 0 && slurp(p("m1.json.loss.csv")) == slurp(p("m2.json.loss.csv"));
  const bool report_same = bad == 0 && slurp(p("r1.json")) == slurp(p("r2.json"));
  fs::remove_all(dir);
  return {data_same && model_same && trace_same && report_same,
          fmt("%d failed commands; dataset %s, checkpoint %s, loss trace %s, eval report %s", bad,
              data_same ? "identical" : "DIFFERS", model_same ? "identical" : "DIFFERS",
              trace_same ? "identical" : "DIFFERS", report_same ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-8)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int id;
    const char* name;
    double limit_seconds;  // 0 = no runtime limit
    std::function<Outcome()> run;
  };
  ModelCache cache;
  const std::vector<Criterion> all{
      {1, "bound tightness", 5.0, bound_tightness},
      {2, "case-split bounds", 0.0, case_split},
      {3, "gradient suite", 30.0, gradient_suite},
      {4, "oracle equivalence", 0.0, oracle_equivalence},
      {5, "fused vs non-fused scoring", 15 * 60.0, [&] { return prob_ablation(cache); }},
      {6, "proposal budget sweep", 15 * 60.0, [&] { return proposal_sweep(cache); }},
      {7, "federated loss on rare classes", 0.0, federated_loss},
      {8, "determinism from embedded configs", 0.0, determinism},
  };

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_seconds <= 0.0 || secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::string timing = fmt("%.1fs", secs);
    if (c.limit_seconds > 0.0) timing += fmt(" (limit %.0fs%s)", c.limit_seconds, in_time ? "" : ", EXCEEDED");
    std::printf("criterion %d %s: %s | %s | %s\n", c.id, pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
