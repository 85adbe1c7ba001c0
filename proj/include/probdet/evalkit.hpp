#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "probdet/detail/parallel.hpp"
#include "probdet/detail/rng.hpp"
#include "probdet/detector.hpp"
#include "probdet/geometry.hpp"
#include "probdet/synthdata.hpp"
#include "probdet/trainer.hpp"

namespace probdet {

// One class-specific detection in a multi-scene evaluation.
struct EvalDetection {
  std::size_t scene = 0;
  Box box;
  double score = 0.0;
};

struct MatchResult {
  std::vector<std::size_t> order;            // detection indices by descending score, ties by index
  std::vector<std::vector<char>> tp;         // [threshold][rank]
  std::vector<std::vector<long>> matched_gt; // [threshold][rank], flat ground-truth id or -1
  std::vector<std::vector<char>> gt_matched; // [threshold][flat ground-truth id]
};

inline std::vector<std::size_t> score_order(std::span<const EvalDetection> dets) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// Greedy matching by descending score. Each detection takes the unmatched
// ground truth in its scene with the highest IoU at or above the threshold.
// gts[scene] lists that scene's boxes; flat ids run over scenes in order.
inline MatchResult match_detections(std::span<const EvalDetection> dets, const std::vector<std::vector<Box>>& gts,
                                    std::span<const double> thresholds) {
  MatchResult m;
  m.order = score_order(dets);
  std::vector<std::size_t> offset(gts.size() + 1, 0);
  for (std::size_t s = 0; s < gts.size(); ++s) offset[s + 1] = offset[s] + gts[s].size();
  for (double thr : thresholds) {
    std::vector<char> tp(dets.size(), 0);
    std::vector<long> mg(dets.size(), -1);
    std::vector<char> used(offset.back(), 0);
    for (std::size_t r = 0; r < m.order.size(); ++r) {
      const auto& d = dets[m.order[r]];
      if (d.scene >= gts.size()) throw std::out_of_range("match_detections: scene index");
      double best = -1.0;
      long best_id = -1;
      for (std::size_t g = 0; g < gts[d.scene].size(); ++g) {
        const auto id = offset[d.scene] + g;
        if (used[id]) continue;
        const double v = iou(d.box, gts[d.scene][g]);
        if (v >= thr && v > best) {
          best = v;
          best_id = static_cast<long>(id);
        }
      }
      if (best_id >= 0) {
        used[static_cast<std::size_t>(best_id)] = 1;
        tp[r] = 1;
        mg[r] = best_id;
      }
    }
    m.tp.push_back(std::move(tp));
    m.matched_gt.push_back(std::move(mg));
    m.gt_matched.push_back(std::move(used));
  }
  return m;
}

// All-point interpolated AP from a ranked TP sequence: the precision envelope
// (max precision at any deeper cutoff) summed at each recall step. With
// ranked scores, a run of equal scores is one cutoff, so the order inside a
// tie does not matter.
inline double ap_from_ranked(std::span<const char> tp, std::size_t num_gt, std::span<const double> ranked_scores = {}) {
  if (num_gt == 0) return 0.0;
  const std::size_t n = tp.size();
  if (!ranked_scores.empty() && ranked_scores.size() != n) throw std::invalid_argument("ap_from_ranked: scores size");
  std::vector<double> precision;
  std::vector<std::size_t> gained;
  std::size_t hits = 0, prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i] != 0;
    const bool cut = ranked_scores.empty() || i + 1 == n || ranked_scores[i + 1] != ranked_scores[i];
    if (!cut) continue;
    precision.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
    gained.push_back(hits - prev);
    prev = hits;
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) ap += static_cast<double>(gained[k]) * precision[k];
  return ap / static_cast<double>(num_gt);
}

inline std::vector<double> ranked_scores(std::span<const EvalDetection> dets, const MatchResult& m) {
  std::vector<double> s(m.order.size());
  for (std::size_t r = 0; r < s.size(); ++r) s[r] = dets[m.order[r]].score;
  return s;
}

// Undefined (nullopt) when there is no ground truth.
inline std::optional<double> average_precision(std::span<const EvalDetection> dets,
                                               const std::vector<std::vector<Box>>& gts, double iou_threshold) {
  std::size_t num_gt = 0;
  for (const auto& g : gts) num_gt += g.size();
  if (num_gt == 0) return std::nullopt;
  const double thr[] = {iou_threshold};
  const auto m = match_detections(dets, gts, thr);
  return ap_from_ranked(m.tp[0], num_gt, ranked_scores(dets, m));
}

// Single-scene convenience.
inline std::optional<double> average_precision(std::span<const ScoredBox> dets, std::span<const Box> gts,
                                               double iou_threshold) {
  std::vector<EvalDetection> d;
  for (const auto& s : dets) d.push_back({0, s.box, s.score});
  return average_precision(d, {std::vector<Box>(gts.begin(), gts.end())}, iou_threshold);
}

inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct MeanApResult {
  std::vector<double> thresholds;
  std::vector<std::vector<std::optional<double>>> per_class;  // [class][threshold]
  double map = 0.0;

  // Mean over the given classes (those with ground truth) per threshold, then over thresholds.
  double class_mean(std::span<const int> classes) const {
    double total = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      double sum = 0.0;
      std::size_t n = 0;
      for (int c : classes) {
        const auto& v = per_class[static_cast<std::size_t>(c)][t];
        if (v) {
          sum += *v;
          ++n;
        }
      }
      total += n ? sum / static_cast<double>(n) : 0.0;
    }
    return thresholds.empty() ? 0.0 : total / static_cast<double>(thresholds.size());
  }

  std::optional<double> class_ap(int c) const {
    double sum = 0.0;
    for (const auto& v : per_class[static_cast<std::size_t>(c)]) {
      if (!v) return std::nullopt;
      sum += *v;
    }
    return sum / static_cast<double>(thresholds.size());
  }

  double ap_at(std::size_t t) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& row : per_class) {
      if (row[t]) {
        sum += *row[t];
        ++n;
      }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

// COCO-style averaging with federated evaluation: class c is scored only on
// scenes whose annotated_classes include c.
inline MeanApResult mean_ap(const std::vector<std::vector<Detection>>& detections, const SceneDataset& ds,
                            std::span<const double> thresholds) {
  if (detections.size() != ds.scenes.size()) throw std::invalid_argument("mean_ap: one detection list per scene");
  MeanApResult r;
  r.thresholds.assign(thresholds.begin(), thresholds.end());
  const std::size_t C = ds.config.num_classes;
  r.per_class.assign(C, std::vector<std::optional<double>>(thresholds.size()));
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<EvalDetection> dets;
    std::vector<std::vector<Box>> gts(ds.scenes.size());
    std::size_t num_gt = 0;
    for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
      const auto& scene = ds.scenes[s];
      if (!scene.is_annotated(static_cast<int>(c))) continue;
      for (const auto& o : scene.objects) {
        if (o.class_id == static_cast<int>(c)) gts[s].push_back(o.box);
      }
      num_gt += gts[s].size();
      for (const auto& d : detections[s]) {
        if (d.class_id == static_cast<int>(c)) dets.push_back({s, d.box, d.score});
      }
    }
    if (num_gt == 0) continue;
    const auto m = match_detections(dets, gts, thresholds);
    const auto scores = ranked_scores(dets, m);
    for (std::size_t t = 0; t < thresholds.size(); ++t) r.per_class[c][t] = ap_from_ranked(m.tp[t], num_gt, scores);
  }
  double total = 0.0;
  for (std::size_t t = 0; t < thresholds.size(); ++t) total += r.ap_at(t);
  r.map = thresholds.empty() ? 0.0 : total / static_cast<double>(thresholds.size());
  return r;
}

inline MeanApResult mean_ap(const std::vector<std::vector<Detection>>& detections, const SceneDataset& ds) {
  const auto t = coco_thresholds();
  return mean_ap(detections, ds, t);
}

// Fraction of ground-truth objects covered at the threshold by one of the
// first K proposals of their scene (proposals are sorted by score).
inline double proposal_recall(const std::vector<std::vector<Proposal>>& proposals, const SceneDataset& ds,
                              std::size_t budget, double iou_threshold = 0.5) {
  if (proposals.size() != ds.scenes.size()) throw std::invalid_argument("proposal_recall: one proposal list per scene");
  std::size_t covered = 0;
  std::size_t total = 0;
  for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
    const std::size_t k = std::min(budget, proposals[s].size());
    for (const auto& o : ds.scenes[s].objects) {
      ++total;
      for (std::size_t i = 0; i < k; ++i) {
        if (iou(proposals[s][i].box, o.box) >= iou_threshold) {
          ++covered;
          break;
        }
      }
    }
  }
  return total ? static_cast<double>(covered) / static_cast<double>(total) : 0.0;
}

// Classes in the lowest frequency tercile (by count, ties broken by id).
inline std::vector<int> rare_classes(const SceneDataset& ds) {
  std::vector<int> ids(ds.classes.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    return ds.classes[static_cast<std::size_t>(a)].frequency < ds.classes[static_cast<std::size_t>(b)].frequency;
  });
  ids.resize(ids.size() / 3);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Model evaluation

struct EvalConfig {
  double score_threshold = 1e-4;
  double nms_threshold = 0.5;
  std::size_t max_detections = 100;
  double recall_iou = 0.5;
  std::vector<double> iou_thresholds = coco_thresholds();

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

inline nlohmann::json eval_config_to_json(const EvalConfig& c) {
  return {{"score_threshold", c.score_threshold},
          {"nms_threshold", c.nms_threshold},
          {"max_detections", c.max_detections},
          {"recall_iou", c.recall_iou},
          {"iou_thresholds", c.iou_thresholds}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  auto keys = detail::keys_of(j, "eval");
  detail::take(j, keys, "score_threshold", c.score_threshold);
  detail::take(j, keys, "nms_threshold", c.nms_threshold);
  detail::take(j, keys, "max_detections", c.max_detections);
  detail::take(j, keys, "recall_iou", c.recall_iou);
  detail::take(j, keys, "iou_thresholds", c.iou_thresholds);
  detail::reject_unknown(keys, "eval");
  if (c.iou_thresholds.empty()) throw std::invalid_argument("eval: iou_thresholds must not be empty");
  for (double t : c.iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("eval: iou thresholds must be in (0, 1]");
  }
  return c;
}

struct BudgetResult {
  std::size_t budget = 0;
  MeanApResult ap;
  double recall = 0.0;
};

// Runs inference at each proposal budget and scores detections and proposals.
inline std::vector<BudgetResult> evaluate_model(const ScorerParams& params, const SceneDataset& ds, ScoringMode mode,
                                                std::span<const std::size_t> budgets, const EvalConfig& ec,
                                                const ProposalOptions& proposals = {}) {
  InferOptions io;
  io.mode = mode;
  io.score_threshold = ec.score_threshold;
  io.nms_threshold = ec.nms_threshold;
  io.max_detections = ec.max_detections;
  io.proposals = proposals;
  std::vector<std::vector<InferenceResult>> per_scene(ds.scenes.size());
  parallel_for(ds.scenes.size(), [&](std::size_t s) {
    const auto features = compute_scene_features(ds, ds.scenes[s]);
    per_scene[s] = infer_budgets(params, {ds.scenes[s], features}, budgets, io);
  });
  std::vector<BudgetResult> out;
  for (std::size_t b = 0; b < budgets.size(); ++b) {
    std::vector<std::vector<Detection>> dets(ds.scenes.size());
    std::vector<std::vector<Proposal>> props(ds.scenes.size());
    for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
      dets[s] = per_scene[s][b].detections;
      props[s] = per_scene[s][b].proposals;
    }
    out.push_back({budgets[b], mean_ap(dets, ds, ec.iou_thresholds), proposal_recall(props, ds, budgets[b], ec.recall_iou)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

enum class ExperimentKind { prob_ablation, proposal_sweep, stage_style, federated_loss };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::prob_ablation: return "prob_ablation";
    case ExperimentKind::proposal_sweep: return "proposal_sweep";
    case ExperimentKind::stage_style: return "stage_style";
    case ExperimentKind::federated_loss: return "federated_loss";
  }
  return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
  for (auto k : {ExperimentKind::prob_ablation, ExperimentKind::proposal_sweep, ExperimentKind::stage_style,
                 ExperimentKind::federated_loss}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown experiment kind '" + s + "'");
}

struct ExperimentConfig {
  DatasetConfig data;
  std::size_t eval_scenes = 64;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  TrainConfig train;
  EvalConfig eval;
  std::vector<std::size_t> budgets{256, 128, 64, 32, 16, 8};

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  return {{"eval_scenes", c.eval_scenes}, {"seeds", c.seeds}, {"budgets", c.budgets}};
}

inline void experiment_config_from_json(const nlohmann::json& j, ExperimentConfig& c) {
  auto keys = detail::keys_of(j, "experiment");
  detail::take(j, keys, "eval_scenes", c.eval_scenes);
  detail::take(j, keys, "seeds", c.seeds);
  detail::take(j, keys, "budgets", c.budgets);
  detail::reject_unknown(keys, "experiment");
  if (c.seeds.empty()) throw std::invalid_argument("experiment: need at least one seed");
  if (c.budgets.empty()) throw std::invalid_argument("experiment: need at least one budget");
}

// One trained variant.
struct Variant {
  std::string name;
  TrainConfig train;
  ScoringMode scoring = ScoringMode::probabilistic;  // inference scoring
};

inline std::uint64_t eval_seed(std::uint64_t seed) { return mix_seed(seed, 0xe7a1u); }

struct TrainedModel {
  ScorerParams params;
  double train_seconds = 0.0;
};

// Trained models keyed by (data config, seed, train config), so several
// experiments over the same seeds share their trainings.
class ModelCache {
 public:
  const TrainedModel& get(const SceneDataset& train_set, const TrainConfig& tc) {
    const auto key = dataset_config_to_json(train_set.config).dump() + "|" + std::to_string(train_set.seed) + "|" +
                     train_config_to_json(tc).dump();
    auto it = models_.find(key);
    if (it != models_.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    auto result = train(train_set, tc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return models_.emplace(key, TrainedModel{std::move(result.params), secs}).first->second;
  }

  std::size_t size() const { return models_.size(); }

 private:
  std::map<std::string, TrainedModel> models_;
};

struct ConditionRow {
  std::string condition;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
  double map = 0.0;
  double recall = 0.0;
  double rare_map = 0.0;
  double train_seconds = 0.0;
};

struct ExperimentReport {
  ExperimentKind kind = ExperimentKind::prob_ablation;
  std::vector<ConditionRow> seed_rows;
  std::vector<ConditionRow> median_rows;

  // Median row for (condition, budget); budget 0 matches the first row of the condition.
  const ConditionRow& median(const std::string& condition, std::size_t budget = 0) const {
    for (const auto& r : median_rows) {
      if (r.condition == condition && (budget == 0 || r.budget == budget)) return r;
    }
    throw std::out_of_range("no report row for " + condition);
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<Variant> experiment_variants(ExperimentKind kind, const TrainConfig& base) {
  auto make = [&](const char* name, AssignmentMode a, ScoringMode s) {
    Variant v{name, base, s};
    v.train.assignment = a;
    v.train.scoring = s;
    return v;
  };
  switch (kind) {
    case ExperimentKind::prob_ablation:
      return {make("center_fused", AssignmentMode::center, ScoringMode::probabilistic),
              make("center_nonfused", AssignmentMode::center, ScoringMode::baseline),
              make("recall_fused", AssignmentMode::recall, ScoringMode::probabilistic),
              make("recall_nonfused", AssignmentMode::recall, ScoringMode::baseline)};
    case ExperimentKind::proposal_sweep:
      return {make("center_fused", AssignmentMode::center, ScoringMode::probabilistic),
              make("recall_nonfused", AssignmentMode::recall, ScoringMode::baseline)};
    case ExperimentKind::stage_style: {
      auto one = make("first_stage_only", AssignmentMode::center, ScoringMode::baseline);
      one.train.cascade_thresholds.clear();
      one.train.first_stage_class_head = true;
      return {one, make("two_stage_nonfused", AssignmentMode::center, ScoringMode::baseline),
              make("two_stage_fused", AssignmentMode::center, ScoringMode::probabilistic)};
    }
    case ExperimentKind::federated_loss: {
      auto soft = make("softmax_ce", base.assignment, base.scoring);
      soft.train.class_loss = ClassLoss::softmax;
      auto fed = make("federated_bce", base.assignment, base.scoring);
      fed.train.class_loss = ClassLoss::federated;
      return {soft, fed};
    }
  }
  return {};
}

using ExperimentProgress = std::function<void(const ConditionRow&)>;

// Per seed: a training set from the seed, a disjoint evaluation set from a
// derived seed, and one training per variant sharing the seed.
inline ExperimentReport run_experiment(ExperimentKind kind, const ExperimentConfig& cfg, ModelCache* cache = nullptr,
                                       const ExperimentProgress& progress = {}) {
  ModelCache local;
  ModelCache& models = cache ? *cache : local;
  ExperimentReport rep;
  rep.kind = kind;
  const auto variants = experiment_variants(kind, cfg.train);
  std::vector<std::size_t> budgets{cfg.train.max_proposals};
  if (kind == ExperimentKind::proposal_sweep) budgets = cfg.budgets;
  auto eval_data = cfg.data;
  eval_data.num_scenes = cfg.eval_scenes;

  for (auto seed : cfg.seeds) {
    const auto train_set = generate_dataset(cfg.data, seed);
    const auto eval_set = generate_dataset(eval_data, eval_seed(seed));
    const auto rare = rare_classes(train_set);
    for (const auto& v : variants) {
      auto tc = v.train;
      tc.seed = seed;
      const auto& model = models.get(train_set, tc);
      const ProposalOptions po{tc.max_proposals, tc.proposal_nms, tc.pre_nms_top};
      const auto results = evaluate_model(model.params, eval_set, v.scoring, budgets, cfg.eval, po);
      for (const auto& r : results) {
        ConditionRow row{v.name, r.budget, seed, r.ap.map, r.recall, r.ap.class_mean(rare), model.train_seconds};
        rep.seed_rows.push_back(row);
        if (progress) progress(row);
      }
    }
  }

  for (const auto& v : variants) {
    for (auto b : budgets) {
      std::vector<double> maps, recalls, rares, secs;
      for (const auto& r : rep.seed_rows) {
        if (r.condition == v.name && r.budget == b) {
          maps.push_back(r.map);
          recalls.push_back(r.recall);
          rares.push_back(r.rare_map);
          secs.push_back(r.train_seconds);
        }
      }
      rep.median_rows.push_back({v.name, b, 0, median(maps), median(recalls), median(rares), median(secs)});
    }
  }
  return rep;
}

inline void write_report_csv(std::ostream& os, const std::vector<ConditionRow>& rows, bool with_seed) {
  os << "condition,K," << (with_seed ? "seed," : "") << "mAP,AR,rare_mAP,train_seconds\n";
  char line[512];
  for (const auto& r : rows) {
    if (with_seed) {
      std::snprintf(line, sizeof line, "%s,%zu,%llu,%.6f,%.6f,%.6f,%.3f\n", r.condition.c_str(), r.budget,
                    static_cast<unsigned long long>(r.seed), r.map, r.recall, r.rare_map, r.train_seconds);
    } else {
      std::snprintf(line, sizeof line, "%s,%zu,%.6f,%.6f,%.6f,%.3f\n", r.condition.c_str(), r.budget, r.map, r.recall,
                    r.rare_map, r.train_seconds);
    }
    os << line;
  }
}

inline nlohmann::json report_rows_to_json(const std::vector<ConditionRow>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"condition", r.condition},
                   {"K", r.budget},
                   {"seed", r.seed},
                   {"mAP", r.map},
                   {"AR", r.recall},
                   {"rare_mAP", r.rare_map},
                   {"train_seconds", r.train_seconds}});
  }
  return out;
}

}  // namespace probdet
