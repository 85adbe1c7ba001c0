#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "probdet/assignment.hpp"
#include "probdet/detail/parallel.hpp"
#include "probdet/detail/rng.hpp"
#include "probdet/detector.hpp"
#include "probdet/errors.hpp"
#include "probdet/fedloss.hpp"
#include "probdet/synthdata.hpp"

namespace probdet {

enum class AssignmentMode { center, recall };

inline const char* to_string(AssignmentMode m) { return m == AssignmentMode::center ? "center" : "recall"; }

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch_size = 8;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::optional<std::vector<std::size_t>> lr_drops;  // default: 2/3 and 8/9 of the run
  double lr_drop_factor = 0.1;
  double max_grad_norm = 0.0;  // 0 disables clipping
  double first_stage_weight = 0.5;
  double first_stage_background_weight = 1.0;
  double second_stage_background_weight = 1.0;
  double objectness_prior = 0.01;
  AssignmentMode assignment = AssignmentMode::center;
  double neighbor_loss_threshold = 0.2;
  bool dynamic_neighbors = false;  // judge neighbors on the current prediction instead of the target
  double recall_iou_threshold = 0.3;
  ScoringMode scoring = ScoringMode::probabilistic;
  ClassLoss class_loss = ClassLoss::softmax;
  std::size_t federated_subset_size = 50;
  std::vector<double> cascade_thresholds{0.6, 0.7, 0.8};
  bool first_stage_class_head = false;
  std::size_t max_proposals = 256;
  double proposal_nms = 0.7;
  std::size_t pre_nms_top = 1000;
  std::uint64_t seed = 0;

  std::vector<std::size_t> effective_lr_drops() const {
    if (lr_drops) return *lr_drops;
    return {iterations * 2 / 3, iterations * 8 / 9};
  }

  double lr_at(std::size_t iteration) const {
    double lr = learning_rate;
    for (auto d : effective_lr_drops()) {
      if (iteration >= d) lr *= lr_drop_factor;
    }
    return lr;
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must be in [0, 1)");
    if (!(lr_drop_factor > 0.0)) throw std::invalid_argument("train: lr_drop_factor must be > 0");
    if (max_grad_norm < 0.0) throw std::invalid_argument("train: max_grad_norm must be >= 0");
    if (!(objectness_prior > 0.0 && objectness_prior < 1.0)) throw std::invalid_argument("train: objectness_prior in (0, 1)");
    const auto drops = effective_lr_drops();
    for (std::size_t i = 0; i < drops.size(); ++i) {
      if (iterations > 0 && drops[i] >= iterations) throw std::invalid_argument("train: lr drop beyond the run");
      if (i > 0 && drops[i] < drops[i - 1]) throw std::invalid_argument("train: lr drops must be ascending");
    }
    if (federated_subset_size < 1) throw std::invalid_argument("train: federated_subset_size must be >= 1");
    if (cascade_thresholds.empty() && !first_stage_class_head) {
      throw std::invalid_argument("train: need cascade stages or a first-stage class head");
    }
    for (double t : cascade_thresholds) {
      if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("train: cascade thresholds must be in (0, 1]");
    }
    if (max_proposals < 1) throw std::invalid_argument("train: max_proposals must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

namespace detail {

template <typename E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options) {
  const auto name = j.get<std::string>();
  for (const auto& [n, v] : options) {
    if (name == n) return v;
  }
  throw std::invalid_argument(std::string("train: unknown ") + key + " '" + name + "'");
}

}  // namespace detail

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j{{"iterations", c.iterations},
                   {"batch_size", c.batch_size},
                   {"learning_rate", c.learning_rate},
                   {"momentum", c.momentum},
                   {"lr_drops", c.lr_drops ? nlohmann::json(*c.lr_drops) : nlohmann::json(nullptr)},
                   {"lr_drop_factor", c.lr_drop_factor},
                   {"max_grad_norm", c.max_grad_norm},
                   {"first_stage_weight", c.first_stage_weight},
                   {"first_stage_background_weight", c.first_stage_background_weight},
                   {"second_stage_background_weight", c.second_stage_background_weight},
                   {"objectness_prior", c.objectness_prior},
                   {"assignment", to_string(c.assignment)},
                   {"neighbor_loss_threshold", c.neighbor_loss_threshold},
                   {"dynamic_neighbors", c.dynamic_neighbors},
                   {"recall_iou_threshold", c.recall_iou_threshold},
                   {"scoring", to_string(c.scoring)},
                   {"class_loss", to_string(c.class_loss)},
                   {"federated_subset_size", c.federated_subset_size},
                   {"cascade_thresholds", c.cascade_thresholds},
                   {"first_stage_class_head", c.first_stage_class_head},
                   {"max_proposals", c.max_proposals},
                   {"proposal_nms", c.proposal_nms},
                   {"pre_nms_top", c.pre_nms_top},
                   {"seed", c.seed}};
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto keys = detail::keys_of(j, "train");
  detail::take(j, keys, "iterations", c.iterations);
  detail::take(j, keys, "batch_size", c.batch_size);
  detail::take(j, keys, "learning_rate", c.learning_rate);
  detail::take(j, keys, "momentum", c.momentum);
  if (j.contains("lr_drops")) {
    if (!j.at("lr_drops").is_null()) c.lr_drops = j.at("lr_drops").get<std::vector<std::size_t>>();
    keys.erase("lr_drops");
  }
  detail::take(j, keys, "lr_drop_factor", c.lr_drop_factor);
  detail::take(j, keys, "max_grad_norm", c.max_grad_norm);
  detail::take(j, keys, "first_stage_weight", c.first_stage_weight);
  detail::take(j, keys, "first_stage_background_weight", c.first_stage_background_weight);
  detail::take(j, keys, "second_stage_background_weight", c.second_stage_background_weight);
  detail::take(j, keys, "objectness_prior", c.objectness_prior);
  if (j.contains("assignment")) {
    c.assignment = detail::parse_enum<AssignmentMode>(j.at("assignment"), "assignment",
                                                      {{"center", AssignmentMode::center}, {"recall", AssignmentMode::recall}});
    keys.erase("assignment");
  }
  detail::take(j, keys, "neighbor_loss_threshold", c.neighbor_loss_threshold);
  detail::take(j, keys, "dynamic_neighbors", c.dynamic_neighbors);
  detail::take(j, keys, "recall_iou_threshold", c.recall_iou_threshold);
  if (j.contains("scoring")) {
    c.scoring = detail::parse_enum<ScoringMode>(
        j.at("scoring"), "scoring", {{"probabilistic", ScoringMode::probabilistic}, {"baseline", ScoringMode::baseline}});
    keys.erase("scoring");
  }
  if (j.contains("class_loss")) {
    c.class_loss = detail::parse_enum<ClassLoss>(j.at("class_loss"), "class_loss",
                                                 {{"softmax", ClassLoss::softmax}, {"federated", ClassLoss::federated}});
    keys.erase("class_loss");
  }
  detail::take(j, keys, "federated_subset_size", c.federated_subset_size);
  detail::take(j, keys, "cascade_thresholds", c.cascade_thresholds);
  detail::take(j, keys, "first_stage_class_head", c.first_stage_class_head);
  detail::take(j, keys, "max_proposals", c.max_proposals);
  detail::take(j, keys, "proposal_nms", c.proposal_nms);
  detail::take(j, keys, "pre_nms_top", c.pre_nms_top);
  detail::take(j, keys, "seed", c.seed);
  detail::reject_unknown(keys, "train");
  c.validate();
  return c;
}

inline LossOptions make_loss_options(const TrainConfig& c) {
  LossOptions o;
  o.mode = c.scoring;
  o.first_stage_weight = c.first_stage_weight;
  o.first_stage_background_weight = c.first_stage_background_weight;
  o.second_stage_background_weight = c.second_stage_background_weight;
  o.proposals = {c.max_proposals, c.proposal_nms, c.pre_nms_top};
  return o;
}

inline ScorerParams initial_params(const SceneDataset& ds, const TrainConfig& c) {
  auto p = ScorerParams::zeros(ds.config.pyramid, ds.config.feature_length(), ds.config.num_classes,
                               c.cascade_thresholds, c.class_loss, c.first_stage_class_head);
  p.set_objectness_prior(c.objectness_prior);
  if (c.class_loss == ClassLoss::federated) {
    // independent sigmoids start at the same small prior as objectness
    const double bias = std::log(c.objectness_prior / (1.0 - c.objectness_prior));
    for (auto& m : p.stage2) {
      for (std::size_t r = 0; r < p.num_classes; ++r) m(r, m.cols - 1) = bias;
    }
  }
  return p;
}

inline PyramidLabels assign_labels(const Scene& scene, const Pyramid& pyr, const TrainConfig& c,
                                   const PyramidOffsets* predictions = nullptr) {
  if (c.assignment == AssignmentMode::recall) {
    return assign_recall_style(scene.objects, pyr, scene.width, scene.height, c.recall_iou_threshold);
  }
  return assign_center_style(scene.objects, pyr, scene.width, scene.height, {c.neighbor_loss_threshold, predictions});
}

inline std::vector<SceneFeatures> compute_all_features(const SceneDataset& ds) {
  std::vector<SceneFeatures> out(ds.scenes.size());
  parallel_for(ds.scenes.size(), [&](std::size_t i) { out[i] = compute_scene_features(ds, ds.scenes[i]); });
  return out;
}

struct TraceRow {
  std::size_t iteration = 0;
  double lr = 0.0;
  double total = 0.0;
  LossTerms terms;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "iteration,lr,total,stage1_focal,stage1_giou,stage2_cls,stage2_bg_weighted,stage2_giou\n";
  char line[512];
  for (const auto& r : trace) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.lr, r.total,
                  r.terms.stage1_focal, r.terms.stage1_giou, r.terms.stage2_cls, r.terms.stage2_bg_weighted,
                  r.terms.stage2_giou);
    os << line;
  }
}

struct TrainResult {
  ScorerParams params;
  std::vector<TraceRow> trace;
};

namespace detail {

inline void check_finite(const LossTerms& t, std::size_t iteration) {
  const std::pair<const char*, double> named[] = {{"stage1_focal", t.stage1_focal},
                                                  {"stage1_giou", t.stage1_giou},
                                                  {"stage2_cls", t.stage2_cls},
                                                  {"stage2_bg_weighted", t.stage2_bg_weighted},
                                                  {"stage2_giou", t.stage2_giou}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) {
      throw NonFiniteLoss(name, "non-finite loss term " + std::string(name) + " at iteration " + std::to_string(iteration));
    }
  }
}

// Seeded epoch shuffling; batches may straddle epochs.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::uint64_t seed) : n_(n), rng_(mix_seed(seed, 0x5bu)) {}

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }

  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace detail

using ProgressFn = std::function<void(const TraceRow&)>;

// Minibatch SGD with momentum (v = mu v + g; w -= lr v) on the batch-mean
// gradient. Labels are assigned once per scene unless dynamic_neighbors asks
// for assignment against the current predictions.
inline TrainResult train(const SceneDataset& ds, const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  TrainResult result{initial_params(ds, cfg), {}};
  if (cfg.iterations == 0) return result;
  if (ds.scenes.empty()) throw std::invalid_argument("train: empty dataset");

  auto& params = result.params;
  const auto& pyr = ds.config.pyramid;
  const auto features = compute_all_features(ds);
  std::vector<PyramidLabels> labels(ds.scenes.size());
  if (!cfg.dynamic_neighbors || cfg.assignment == AssignmentMode::recall) {
    parallel_for(ds.scenes.size(), [&](std::size_t i) { labels[i] = assign_labels(ds.scenes[i], pyr, cfg); });
  }

  const ClassFrequencyTable table{ds.class_counts()};
  Rng subset_rng(mix_seed(cfg.seed, 0xfedu));
  detail::BatchStream batches(ds.scenes.size(), cfg.seed);
  auto velocity = params.zeros_like();
  const auto base_opt = make_loss_options(cfg);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto batch = batches.next(cfg.batch_size);
    std::vector<int> subset;
    if (cfg.class_loss == ClassLoss::federated) {
      std::set<int> positives;
      for (auto i : batch) {
        for (const auto& o : ds.scenes[i].objects) positives.insert(o.class_id);
      }
      const std::vector<int> pos(positives.begin(), positives.end());
      subset = sample_subset(pos, table, cfg.federated_subset_size, subset_rng);
    }
    auto opt = base_opt;
    opt.federated_subset = subset;

    std::vector<ScorerParams> grads(batch.size());
    std::vector<LossTerms> terms(batch.size());
    parallel_for(batch.size(), [&](std::size_t b) {
      const auto i = batch[b];
      const SceneView view{ds.scenes[i], features[i]};
      grads[b] = params.zeros_like();
      if (cfg.dynamic_neighbors && cfg.assignment == AssignmentMode::center) {
        const auto pred = dense_offsets(dense_forward(params, view));
        const auto dyn = assign_labels(ds.scenes[i], pyr, cfg, &pred);
        terms[b] = total_loss(params, view, dyn, opt, &grads[b]);
      } else {
        terms[b] = total_loss(params, view, labels[i], opt, &grads[b]);
      }
    });

    const double inv = 1.0 / static_cast<double>(batch.size());
    LossTerms mean;
    auto grad = params.zeros_like();
    auto gblocks = grad.mutable_blocks();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      mean += terms[b].scaled(inv);
      const auto src = grads[b].blocks();
      for (std::size_t k = 0; k < gblocks.size(); ++k) {
        for (std::size_t e = 0; e < src[k]->data.size(); ++e) gblocks[k]->data[e] += src[k]->data[e] * inv;
      }
    }
    detail::check_finite(mean, it);
    if (!grad.all_finite()) throw NonFiniteLoss("gradient", "non-finite gradient at iteration " + std::to_string(it));

    if (cfg.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (const auto* m : grad.blocks()) {
        for (double v : m->data) sq += v * v;
      }
      const double norm = std::sqrt(sq);
      if (norm > cfg.max_grad_norm) {
        const double k = cfg.max_grad_norm / norm;
        for (auto* m : gblocks) {
          for (double& v : m->data) v *= k;
        }
      }
    }

    const double lr = cfg.lr_at(it);
    auto wblocks = params.mutable_blocks();
    auto vblocks = velocity.mutable_blocks();
    for (std::size_t k = 0; k < wblocks.size(); ++k) {
      for (std::size_t e = 0; e < wblocks[k]->data.size(); ++e) {
        double& v = vblocks[k]->data[e];
        v = cfg.momentum * v + gblocks[k]->data[e];
        wblocks[k]->data[e] -= lr * v;
      }
    }

    TraceRow row{it, lr, mean.total(cfg.first_stage_weight), mean};
    result.trace.push_back(row);
    if (progress) progress(row);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

struct BlockCheck {
  std::string name;
  std::size_t size = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  double step = 0.0;
  double tolerance = 0.0;
  std::vector<BlockCheck> blocks;

  bool passed() const {
    return std::all_of(blocks.begin(), blocks.end(), [](const BlockCheck& b) { return b.passed; });
  }
};

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, scale_floor).
  double scale_floor = 1e-3;
  std::size_t max_coords_per_block = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;
};

using LossFn = std::function<double(const ScorerParams&)>;
using GradientFn = std::function<void(const ScorerParams&, ScorerParams&)>;

inline GradCheckReport grad_check(const ScorerParams& params, const LossFn& loss, const GradientFn& gradient,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report{opt.step, opt.tolerance, {}};
  auto analytic = params.zeros_like();
  gradient(params, analytic);
  auto probe = params;
  auto pblocks = probe.mutable_blocks();
  const auto ablocks = analytic.blocks();
  const auto names = params.block_names();
  Rng rng(mix_seed(opt.seed, 0x9cu));
  for (std::size_t k = 0; k < pblocks.size(); ++k) {
    BlockCheck bc;
    bc.name = names[k];
    bc.size = pblocks[k]->data.size();
    std::vector<std::size_t> coords(bc.size);
    for (std::size_t i = 0; i < bc.size; ++i) coords[i] = i;
    if (opt.max_coords_per_block > 0 && opt.max_coords_per_block < bc.size) {
      for (std::size_t i = 0; i < opt.max_coords_per_block; ++i) {
        std::swap(coords[i], coords[i + rng.below(bc.size - i)]);
      }
      coords.resize(opt.max_coords_per_block);
      std::sort(coords.begin(), coords.end());
    }
    for (auto e : coords) {
      double& w = pblocks[k]->data[e];
      const double saved = w;
      w = saved + opt.step;
      const double up = loss(probe);
      w = saved - opt.step;
      const double down = loss(probe);
      w = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = ablocks[k]->data[e];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.scale_floor});
      bc.max_abs_error = std::max(bc.max_abs_error, abs_err);
      if (rel > bc.max_rel_error || !std::isfinite(rel)) {
        bc.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        bc.worst_index = e;
      }
      ++bc.checked;
    }
    bc.passed = bc.max_rel_error < opt.tolerance;
    report.blocks.push_back(bc);
  }
  return report;
}

// Checks total_loss on one scene. Proposals and cascade inputs are frozen at
// params, matching how the training gradient treats them.
inline GradCheckReport grad_check_scene(const ScorerParams& params, const SceneView& view, const PyramidLabels& labels,
                                        const LossOptions& loss_opt, const GradCheckOptions& opt = {},
                                        const GradientFn& override_gradient = {}) {
  const auto ctx = make_loss_context(params, view, loss_opt);
  const auto loss = [&](const ScorerParams& p) {
    return loss_with_context(p, view, labels, ctx, loss_opt, nullptr).total(loss_opt.first_stage_weight);
  };
  const GradientFn exact = [&](const ScorerParams& p, ScorerParams& g) {
    loss_with_context(p, view, labels, ctx, loss_opt, &g);
  };
  return grad_check(params, loss, override_gradient ? override_gradient : exact, opt);
}

}  // namespace probdet
