#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "probdet/assignment.hpp"
#include "probdet/detail/matrix.hpp"
#include "probdet/fedloss.hpp"
#include "probdet/geometry.hpp"
#include "probdet/probcore.hpp"
#include "probdet/synthdata.hpp"

namespace probdet {

enum class ScoringMode { probabilistic, baseline };
enum class ClassLoss { softmax, federated };

inline const char* to_string(ScoringMode m) { return m == ScoringMode::probabilistic ? "probabilistic" : "baseline"; }
inline const char* to_string(ClassLoss l) { return l == ClassLoss::softmax ? "softmax" : "federated"; }

inline constexpr std::size_t kDenseOutputs = 5;  // objectness logit + l, t, r, b
inline constexpr std::size_t kShapeFeatures = 3;
inline constexpr int kCheckpointVersion = 1;

// All learnable weights. Every block is a linear map whose last column is the bias.
struct ScorerParams {
  Pyramid pyramid;
  std::size_t feature_length = 0;
  std::size_t num_classes = 0;
  std::vector<double> cascade_thresholds;
  ClassLoss class_loss = ClassLoss::softmax;
  std::vector<Matrix> stage1;      // per level: 5 x (F + 1)
  std::vector<Matrix> stage1_cls;  // per level: C x (F + 1); only for first-stage-only detectors
  std::vector<Matrix> stage2;      // per cascade stage: (C + 1 + 4) x (F + 3 + 1)

  std::size_t roi_length() const { return feature_length + kShapeFeatures; }
  std::size_t num_stages() const { return stage2.size(); }
  bool has_class_head() const { return !stage1_cls.empty(); }

  static ScorerParams zeros(const Pyramid& pyr, std::size_t feature_length, std::size_t num_classes,
                            std::vector<double> cascade_thresholds, ClassLoss loss = ClassLoss::softmax,
                            bool first_stage_class_head = false) {
    ScorerParams p;
    p.pyramid = pyr;
    p.feature_length = feature_length;
    p.num_classes = num_classes;
    p.cascade_thresholds = std::move(cascade_thresholds);
    p.class_loss = loss;
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
      p.stage1.emplace_back(kDenseOutputs, feature_length + 1);
      if (first_stage_class_head) p.stage1_cls.emplace_back(num_classes, feature_length + 1);
    }
    for (std::size_t t = 0; t < p.cascade_thresholds.size(); ++t) {
      p.stage2.emplace_back(num_classes + 1 + 4, p.roi_length() + 1);
    }
    return p;
  }

  // Same shapes, all zero. Used as a gradient accumulator.
  ScorerParams zeros_like() const {
    ScorerParams g = *this;
    for (auto* m : g.mutable_blocks()) std::fill(m->data.begin(), m->data.end(), 0.0);
    return g;
  }

  void set_objectness_prior(double p_obj) {
    const double bias = std::log(p_obj / (1.0 - p_obj));
    for (auto& m : stage1) m(0, m.cols - 1) = bias;
    for (auto& m : stage1_cls) {
      for (std::size_t r = 0; r < m.rows; ++r) m(r, m.cols - 1) = bias;
    }
  }

  std::vector<std::string> block_names() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < stage1.size(); ++l) names.push_back("stage1.level" + std::to_string(l));
    for (std::size_t l = 0; l < stage1_cls.size(); ++l) names.push_back("stage1_cls.level" + std::to_string(l));
    for (std::size_t t = 0; t < stage2.size(); ++t) names.push_back("stage2.cascade" + std::to_string(t));
    return names;
  }

  std::vector<Matrix*> mutable_blocks() {
    std::vector<Matrix*> out;
    for (auto& m : stage1) out.push_back(&m);
    for (auto& m : stage1_cls) out.push_back(&m);
    for (auto& m : stage2) out.push_back(&m);
    return out;
  }
  std::vector<const Matrix*> blocks() const {
    std::vector<const Matrix*> out;
    for (const auto& m : stage1) out.push_back(&m);
    for (const auto& m : stage1_cls) out.push_back(&m);
    for (const auto& m : stage2) out.push_back(&m);
    return out;
  }

  bool all_finite() const {
    for (const auto* m : blocks()) {
      for (double v : m->data) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  friend bool operator==(const ScorerParams&, const ScorerParams&) = default;
};

// A scene together with its precomputed cell features.
struct SceneView {
  const Scene& scene;
  const SceneFeatures& features;
};

// ---------------------------------------------------------------------------
// First stage

struct DenseLevel {
  GridShape shape;
  double stride = 1.0;
  std::vector<double> logits;
  std::vector<double> objectness;
  std::vector<std::array<double, 4>> raw_offsets;  // pre-positivity
  std::vector<LtrbOffsets> offsets;
  std::vector<double> class_logits;  // C per cell when the first stage has a class head
};

using DenseOutput = std::vector<DenseLevel>;

// Objectness = sigmoid(logit); offsets = stride * softplus(raw).
inline DenseOutput dense_forward(const ScorerParams& params, const SceneView& view) {
  const auto& pyr = params.pyramid;
  if (view.features.shapes.size() != pyr.levels.size()) throw std::invalid_argument("dense_forward: pyramid mismatch");
  if (view.features.feature_length != params.feature_length) {
    throw std::invalid_argument("dense_forward: feature length mismatch");
  }
  DenseOutput out(pyr.levels.size());
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    auto& d = out[l];
    d.shape = view.features.shapes[l];
    d.stride = pyr.levels[l].stride;
    const std::size_t n = d.shape.size();
    d.logits.resize(n);
    d.objectness.resize(n);
    d.raw_offsets.resize(n);
    d.offsets.resize(n);
    const auto& w = params.stage1[l];
    for (std::size_t i = 0; i < n; ++i) {
      const auto f = view.features.cell(l, i);
      d.logits[i] = affine(w, 0, f);
      d.objectness[i] = sigmoid(d.logits[i]);
      for (std::size_t j = 0; j < 4; ++j) {
        d.raw_offsets[i][j] = affine(w, 1 + j, f);
        d.offsets[i][j] = d.stride * softplus(d.raw_offsets[i][j]);
      }
    }
    if (params.has_class_head()) {
      const auto& wc = params.stage1_cls[l];
      d.class_logits.resize(n * params.num_classes);
      for (std::size_t i = 0; i < n; ++i) {
        const auto f = view.features.cell(l, i);
        for (std::size_t c = 0; c < params.num_classes; ++c) d.class_logits[i * params.num_classes + c] = affine(wc, c, f);
      }
    }
  }
  return out;
}

inline PyramidOffsets dense_offsets(const DenseOutput& dense) {
  PyramidOffsets out;
  for (const auto& d : dense) out.push_back(d.offsets);
  return out;
}

struct Proposal {
  Box box;
  double p_obj = 0.0;
  std::size_t level = 0;
  std::size_t cell = 0;
  bool ground_truth = false;
};

struct ProposalOptions {
  std::size_t max_proposals = 256;
  double nms_threshold = 0.7;
  std::size_t pre_nms_top = 1000;
};

// Decoded cell boxes, top pre_nms_top by objectness, class-agnostic NMS,
// truncated to max_proposals. Sorted by descending objectness.
inline std::vector<Proposal> extract_proposals(const DenseOutput& dense, const Pyramid& pyr, double scene_width,
                                               double scene_height, const ProposalOptions& opt = {}) {
  struct Cand {
    double p;
    std::size_t level, cell;
  };
  std::vector<Cand> cands;
  for (std::size_t l = 0; l < dense.size(); ++l) {
    for (std::size_t i = 0; i < dense[l].objectness.size(); ++i) cands.push_back({dense[l].objectness[i], l, i});
  }
  const auto better = [](const Cand& a, const Cand& b) {
    if (a.p != b.p) return a.p > b.p;
    if (a.level != b.level) return a.level < b.level;
    return a.cell < b.cell;
  };
  const std::size_t top = std::min(opt.pre_nms_top, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(top), cands.end(), better);
  cands.resize(top);

  std::vector<Proposal> pool;
  std::vector<ScoredBox> scored;
  for (const auto& c : cands) {
    const auto& d = dense[c.level];
    const std::size_t row = c.cell / d.shape.cols;
    const std::size_t col = c.cell % d.shape.cols;
    const Box box = clip_box(decode_ltrb(pyr.cell_center(c.level, row, col), d.offsets[c.cell]), scene_width, scene_height);
    if (!(box.width() > 1e-6 && box.height() > 1e-6)) continue;
    pool.push_back({box, c.p, c.level, c.cell, false});
    scored.push_back({box, c.p});
  }
  const auto kept = nms(scored, opt.nms_threshold, opt.max_proposals);
  std::vector<Proposal> out;
  out.reserve(kept.size());
  for (std::size_t k : kept) out.push_back(pool[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Region features

inline std::size_t roi_level(const Pyramid& pyr, const Box& box) { return pyr.level_for_extent(box.max_extent()); }

// Mean of the cell features whose centers fall inside the box (on the level
// assigned by box size), followed by log(w / stride), log(h / stride) and
// log(w / h). A box covering no cell center uses the cell holding its center.
inline std::vector<double> roi_features(const SceneFeatures& features, const Pyramid& pyr, const Box& box) {
  const std::size_t F = features.feature_length;
  const std::size_t l = roi_level(pyr, box);
  const double s = pyr.levels[l].stride;
  const auto g = features.shapes[l];
  const auto last_col = static_cast<long>(g.cols) - 1;
  const auto last_row = static_cast<long>(g.rows) - 1;
  long c0 = static_cast<long>(std::ceil(box.x1 / s - 0.5));
  long c1 = static_cast<long>(std::floor(box.x2 / s - 0.5));
  long r0 = static_cast<long>(std::ceil(box.y1 / s - 0.5));
  long r1 = static_cast<long>(std::floor(box.y2 / s - 0.5));
  c0 = std::max(c0, 0L);
  r0 = std::max(r0, 0L);
  c1 = std::min(c1, last_col);
  r1 = std::min(r1, last_row);

  std::vector<double> out(F + kShapeFeatures, 0.0);
  if (c0 > c1 || r0 > r1) {
    const auto center = box.center();
    const long c = std::clamp(static_cast<long>(std::floor(center.x / s)), 0L, last_col);
    const long r = std::clamp(static_cast<long>(std::floor(center.y / s)), 0L, last_row);
    const auto f = features.cell(l, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    std::copy(f.begin(), f.end(), out.begin());
  } else {
    features.region_sum(l, static_cast<std::size_t>(r0), static_cast<std::size_t>(r1 + 1), static_cast<std::size_t>(c0),
                        static_cast<std::size_t>(c1 + 1), std::span<double>(out.data(), F));
    const double n = static_cast<double>((r1 - r0 + 1) * (c1 - c0 + 1));
    for (std::size_t i = 0; i < F; ++i) out[i] /= n;
  }
  const double w = std::max(box.width(), 1e-3);
  const double h = std::max(box.height(), 1e-3);
  out[F] = std::log(w / s);
  out[F + 1] = std::log(h / s);
  out[F + 2] = std::log(w / h);
  return out;
}

// ---------------------------------------------------------------------------
// Second stage

// Refinement moves each side by kDeltaScale * delta * box size; positive deltas expand.
inline constexpr double kDeltaScale = 0.1;

inline Box apply_deltas(const Box& b, const std::array<double, 4>& d) {
  const double w = kDeltaScale * b.width();
  const double h = kDeltaScale * b.height();
  return {b.x1 - d[0] * w, b.y1 - d[1] * h, b.x2 + d[2] * w, b.y2 + d[3] * h};
}

// Clips to the scene and enforces a minimum side so the box can be pooled again.
inline Box sanitize_box(const Box& b, double scene_width, double scene_height, double min_side = 0.25) {
  Box out{std::min(b.x1, b.x2), std::min(b.y1, b.y2), std::max(b.x1, b.x2), std::max(b.y1, b.y2)};
  out = clip_box(out, scene_width, scene_height);
  auto widen = [&](double& lo, double& hi, double limit) {
    if (hi - lo >= min_side) return;
    const double mid = std::clamp(0.5 * (lo + hi), 0.5 * min_side, limit - 0.5 * min_side);
    lo = mid - 0.5 * min_side;
    hi = mid + 0.5 * min_side;
  };
  widen(out.x1, out.x2, scene_width);
  widen(out.y1, out.y2, scene_height);
  return out;
}

struct StageOutput {
  std::vector<Box> input_boxes;
  std::vector<std::vector<double>> roi;
  std::vector<std::vector<double>> logits;  // C + 1
  std::vector<std::vector<double>> probs;   // C foreground + background
  std::vector<std::array<double, 4>> deltas;
  std::vector<Box> refined;  // raw refined boxes (before sanitizing)
};

struct SecondStageOutput {
  std::vector<StageOutput> stages;
  std::vector<ClassPosterior> mean_posterior;
  std::vector<Box> final_boxes;
};

// Class posterior from one stage's logits. Softmax over C + 1 under the
// softmax loss; under the federated loss each class is an independent sigmoid
// and background is prod_c (1 - p_c) clipped to [eps, 1].
inline std::vector<double> stage_posterior(std::span<const double> logits, ClassLoss loss) {
  if (loss == ClassLoss::softmax) return softmax(logits);
  const std::size_t C = logits.size() - 1;
  std::vector<double> probs(C + 1);
  double bg = 1.0;
  for (std::size_t c = 0; c < C; ++c) {
    probs[c] = sigmoid(logits[c]);
    bg *= 1.0 - probs[c];
  }
  probs[C] = std::clamp(bg, kProbEps, 1.0);
  return probs;
}

inline StageOutput run_stage(const ScorerParams& params, std::size_t t, const SceneView& view,
                             std::span<const Box> boxes) {
  const auto& w = params.stage2[t];
  const std::size_t C = params.num_classes;
  StageOutput s;
  s.input_boxes.assign(boxes.begin(), boxes.end());
  for (const auto& b : boxes) {
    auto r = roi_features(view.features, params.pyramid, b);
    std::vector<double> logits(C + 1);
    for (std::size_t c = 0; c <= C; ++c) logits[c] = affine(w, c, r);
    std::array<double, 4> d{};
    for (std::size_t j = 0; j < 4; ++j) d[j] = affine(w, C + 1 + j, r);
    s.probs.push_back(stage_posterior(logits, params.class_loss));
    s.refined.push_back(apply_deltas(b, d));
    s.deltas.push_back(d);
    s.logits.push_back(std::move(logits));
    s.roi.push_back(std::move(r));
  }
  return s;
}

// Stage t classifies and refines the boxes refined by stage t - 1. The
// inference posterior is the mean over stages; the final box is the last
// stage's refinement.
inline SecondStageOutput second_stage_forward(const ScorerParams& params, const SceneView& view,
                                              std::span<const Box> boxes) {
  if (params.num_stages() == 0) throw std::invalid_argument("second_stage_forward: no cascade stages");
  SecondStageOutput out;
  std::vector<Box> current(boxes.begin(), boxes.end());
  for (std::size_t t = 0; t < params.num_stages(); ++t) {
    auto stage = run_stage(params, t, view, current);
    for (std::size_t i = 0; i < current.size(); ++i) {
      current[i] = sanitize_box(stage.refined[i], view.scene.width, view.scene.height);
    }
    out.stages.push_back(std::move(stage));
  }
  const std::size_t C = params.num_classes;
  out.final_boxes = current;
  out.mean_posterior.resize(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    std::vector<double> mean(C + 1, 0.0);
    for (const auto& s : out.stages) {
      for (std::size_t c = 0; c <= C; ++c) mean[c] += s.probs[i][c];
    }
    for (auto& v : mean) v /= static_cast<double>(out.stages.size());
    out.mean_posterior[i].probs = std::move(mean);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training objective

struct LossTerms {
  double stage1_focal = 0.0;
  double stage1_giou = 0.0;
  double stage2_cls = 0.0;
  double stage2_bg_weighted = 0.0;
  double stage2_giou = 0.0;

  double total(double first_stage_weight) const {
    return first_stage_weight * (stage1_focal + stage1_giou) + stage2_cls + stage2_bg_weighted + stage2_giou;
  }

  LossTerms& operator+=(const LossTerms& o) {
    stage1_focal += o.stage1_focal;
    stage1_giou += o.stage1_giou;
    stage2_cls += o.stage2_cls;
    stage2_bg_weighted += o.stage2_bg_weighted;
    stage2_giou += o.stage2_giou;
    return *this;
  }
  LossTerms scaled(double k) const {
    return {stage1_focal * k, stage1_giou * k, stage2_cls * k, stage2_bg_weighted * k, stage2_giou * k};
  }
};

struct LossOptions {
  ScoringMode mode = ScoringMode::probabilistic;
  double first_stage_weight = 0.5;
  FocalParams focal;
  // Weights of the two background bounds: the dense first-stage negatives and
  // the objectness-weighted second-stage background term.
  double first_stage_background_weight = 1.0;
  double second_stage_background_weight = 1.0;
  ProposalOptions proposals;
  // Class subset for the federated loss; required when params use it.
  std::span<const int> federated_subset;
};

// Quantities that are constants under differentiation: the proposals with
// their objectness and each cascade stage's input boxes.
struct LossContext {
  std::vector<Proposal> proposals;
  std::vector<std::vector<Box>> stage_inputs;
};

inline LossContext make_loss_context(const ScorerParams& params, const SceneView& view, const LossOptions& opt) {
  LossContext ctx;
  const auto dense = dense_forward(params, view);
  ctx.proposals = extract_proposals(dense, params.pyramid, view.scene.width, view.scene.height, opt.proposals);
  for (const auto& gt : view.scene.objects) ctx.proposals.push_back({gt.box, 1.0, 0, 0, true});
  std::vector<Box> current;
  for (const auto& p : ctx.proposals) current.push_back(p.box);
  for (std::size_t t = 0; t < params.num_stages(); ++t) {
    ctx.stage_inputs.push_back(current);
    const auto stage = run_stage(params, t, view, current);
    for (std::size_t i = 0; i < current.size(); ++i) {
      current[i] = sanitize_box(stage.refined[i], view.scene.width, view.scene.height);
    }
  }
  return ctx;
}

namespace detail {

inline void first_stage_loss(const ScorerParams& params, const SceneView& view, const PyramidLabels& labels,
                             const DenseOutput& dense, const LossOptions& opt, LossTerms& terms, ScorerParams* grad) {
  const auto& pyr = params.pyramid;
  const std::size_t C = params.num_classes;
  const double npos = std::max<double>(1.0, static_cast<double>(count_state(labels, CellState::positive)));
  const double w1 = opt.first_stage_weight;
  double focal_sum = 0.0;
  double giou_sum = 0.0;
  for (std::size_t l = 0; l < dense.size(); ++l) {
    const auto& d = dense[l];
    const auto& grid = labels[l];
    if (grid.shape.size() != d.shape.size()) throw std::invalid_argument("total_loss: label grid mismatch");
    for (std::size_t i = 0; i < d.shape.size(); ++i) {
      const auto& lab = grid.cells[i];
      if (lab.state == CellState::ignore) continue;
      const bool positive = lab.state == CellState::positive;
      const auto f = view.features.cell(l, i);
      const double bw = positive ? 1.0 : opt.first_stage_background_weight;
      const auto fl = focal_loss_logit(d.logits[i], positive, opt.focal);
      focal_sum += bw * fl.loss;
      if (grad) accumulate_outer(grad->stage1[l], 0, w1 * bw * fl.grad / npos, f);

      if (params.has_class_head()) {
        const int cls = positive ? view.scene.objects[static_cast<std::size_t>(lab.object)].class_id : -1;
        for (std::size_t c = 0; c < C; ++c) {
          const bool on = positive && static_cast<int>(c) == cls;
          const auto cl = focal_loss_logit(d.class_logits[i * C + c], on, opt.focal);
          const double cw = on ? 1.0 : opt.first_stage_background_weight;
          focal_sum += cw * cl.loss;
          if (grad) accumulate_outer(grad->stage1_cls[l], c, w1 * cw * cl.grad / npos, f);
        }
      }

      if (!positive) continue;
      const auto anchor = pyr.cell_center(l, i / d.shape.cols, i % d.shape.cols);
      const auto g = giou_loss(d.offsets[i], lab.target, anchor);
      giou_sum += g.loss;
      if (grad) {
        for (std::size_t j = 0; j < 4; ++j) {
          const double du = g.grad[j] * d.stride * sigmoid(d.raw_offsets[i][j]);
          accumulate_outer(grad->stage1[l], 1 + j, w1 * du / npos, f);
        }
      }
    }
  }
  terms.stage1_focal += focal_sum / npos;
  terms.stage1_giou += giou_sum / npos;
}

inline void second_stage_loss(const ScorerParams& params, const SceneView& view, const LossContext& ctx,
                              const LossOptions& opt, LossTerms& terms, ScorerParams* grad) {
  const std::size_t C = params.num_classes;
  const auto& objects = view.scene.objects;
  for (std::size_t t = 0; t < params.num_stages(); ++t) {
    const auto& boxes = ctx.stage_inputs[t];
    const auto stage = run_stage(params, t, view, boxes);
    const double n = std::max<double>(1.0, static_cast<double>(boxes.size()));
    std::size_t npos = 0;
    std::vector<int> match(boxes.size(), -1);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      double best = 0.0;
      for (std::size_t k = 0; k < objects.size(); ++k) {
        const double v = iou(boxes[i], objects[k].box);
        if (v > best) {
          best = v;
          match[i] = static_cast<int>(k);
        }
      }
      if (best < params.cascade_thresholds[t]) match[i] = -1;
      npos += match[i] >= 0;
    }
    const double npos_norm = std::max<double>(1.0, static_cast<double>(npos));

    double cls_sum = 0.0, bg_sum = 0.0, giou_sum = 0.0;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const bool positive = match[i] >= 0;
      const int cls = positive ? objects[static_cast<std::size_t>(match[i])].class_id : -1;
      const double weight = positive ? 1.0
                                     : opt.second_stage_background_weight *
                                           (opt.mode == ScoringMode::probabilistic ? ctx.proposals[i].p_obj : 1.0);
      std::vector<double> dlogits(C + 1, 0.0);
      if (params.class_loss == ClassLoss::softmax) {
        const auto ce = weighted_softmax_ce(stage.logits[i], positive ? static_cast<std::size_t>(cls) : C, weight);
        (positive ? cls_sum : bg_sum) += ce.loss;
        dlogits = ce.grad;
      } else {
        const auto fl = federated_bce(std::span<const double>(stage.logits[i].data(), C),
                                      positive ? cls : kBackgroundTarget, opt.federated_subset, weight);
        (positive ? cls_sum : bg_sum) += fl.loss;
        for (std::size_t c = 0; c < C; ++c) dlogits[c] = fl.grad[c];
      }
      if (grad) {
        const double norm = positive ? npos_norm : n;
        for (std::size_t c = 0; c <= C; ++c) accumulate_outer(grad->stage2[t], c, dlogits[c] / norm, stage.roi[i]);
      }
      if (!positive) continue;
      const auto& b = boxes[i];
      const auto g = giou_loss_boxes(stage.refined[i], objects[static_cast<std::size_t>(match[i])].box);
      giou_sum += g.loss;
      if (grad) {
        const double w = kDeltaScale * b.width();
        const double h = kDeltaScale * b.height();
        const double dd[4] = {-g.grad.x1 * w, -g.grad.y1 * h, g.grad.x2 * w, g.grad.y2 * h};
        for (std::size_t j = 0; j < 4; ++j) accumulate_outer(grad->stage2[t], C + 1 + j, dd[j] / npos_norm, stage.roi[i]);
      }
    }
    terms.stage2_cls += cls_sum / npos_norm;
    terms.stage2_bg_weighted += bg_sum / n;
    terms.stage2_giou += giou_sum / npos_norm;
  }
}

}  // namespace detail

// Full training objective for one scene with detached proposals and stage
// inputs taken from ctx. Adds d loss / d params into grad when given.
//
//   w1 * (focal over cells + gIoU over positive cells) / max(1, #positive cells)
//   + sum over cascade stages of
//       [CE on positives + objectness-weighted CE on background] / #boxes
//       + gIoU of refined positives / max(1, #positives)
inline LossTerms loss_with_context(const ScorerParams& params, const SceneView& view, const PyramidLabels& labels,
                                   const LossContext& ctx, const LossOptions& opt, ScorerParams* grad) {
  LossTerms terms;
  const auto dense = dense_forward(params, view);
  detail::first_stage_loss(params, view, labels, dense, opt, terms, grad);
  if (params.num_stages() > 0) detail::second_stage_loss(params, view, ctx, opt, terms, grad);
  return terms;
}

inline LossTerms total_loss(const ScorerParams& params, const SceneView& view, const PyramidLabels& labels,
                            const LossOptions& opt, ScorerParams* grad) {
  const auto ctx = make_loss_context(params, view, opt);
  return loss_with_context(params, view, labels, ctx, opt, grad);
}

// ---------------------------------------------------------------------------
// Inference

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  std::size_t proposal = 0;
  std::size_t stages = 0;
};

struct InferOptions {
  ScoringMode mode = ScoringMode::probabilistic;
  double score_threshold = 1e-3;
  double nms_threshold = 0.5;
  std::size_t max_detections = 100;
  ProposalOptions proposals;
};

struct InferenceResult {
  std::vector<Proposal> proposals;
  std::vector<Detection> detections;
};

namespace detail {

// Per-class NMS over candidates already thresholded; keeps at most max_det.
inline std::vector<Detection> per_class_nms(std::vector<Detection> cands, std::size_t num_classes, double nms_threshold,
                                            std::size_t max_det) {
  std::vector<Detection> kept;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<ScoredBox> sb;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (cands[i].class_id == static_cast<int>(c)) {
        sb.push_back({cands[i].box, cands[i].score});
        idx.push_back(i);
      }
    }
    for (std::size_t k : nms(sb, nms_threshold)) kept.push_back(cands[idx[k]]);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.proposal != b.proposal) return a.proposal < b.proposal;
    return a.class_id < b.class_id;
  });
  if (kept.size() > max_det) kept.resize(max_det);
  return kept;
}

inline std::vector<Detection> score_proposals(const ScorerParams& params, std::span<const Proposal> proposals,
                                              const SecondStageOutput& second, std::size_t count,
                                              const InferOptions& opt) {
  std::vector<Detection> cands;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& post = second.mean_posterior[i];
    const double p_obj = proposals[i].p_obj;
    for (std::size_t c = 0; c < params.num_classes; ++c) {
      const double s = opt.mode == ScoringMode::probabilistic ? fuse({p_obj}, post).scores[c] : post.probs[c];
      if (s > opt.score_threshold) {
        cands.push_back({second.final_boxes[i], static_cast<int>(c), s, i, params.num_stages()});
      }
    }
  }
  return per_class_nms(std::move(cands), params.num_classes, opt.nms_threshold, opt.max_detections);
}

inline std::vector<Detection> one_stage_detections(const ScorerParams& params, const DenseOutput& dense,
                                                   const SceneView& view, const InferOptions& opt) {
  std::vector<Detection> cands;
  const std::size_t C = params.num_classes;
  std::size_t serial = 0;
  for (std::size_t l = 0; l < dense.size(); ++l) {
    const auto& d = dense[l];
    for (std::size_t i = 0; i < d.shape.size(); ++i, ++serial) {
      const Box box = clip_box(decode_ltrb(params.pyramid.cell_center(l, i / d.shape.cols, i % d.shape.cols), d.offsets[i]),
                               view.scene.width, view.scene.height);
      if (!(box.area() > 0.0)) continue;
      for (std::size_t c = 0; c < C; ++c) {
        const double s = sigmoid(d.class_logits[i * C + c]);
        if (s > opt.score_threshold) cands.push_back({box, static_cast<int>(c), s, serial, 0});
      }
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (cands.size() > opt.proposals.pre_nms_top) cands.resize(opt.proposals.pre_nms_top);
  return per_class_nms(std::move(cands), C, opt.nms_threshold, opt.max_detections);
}

}  // namespace detail

// Proposals -> cascade -> score (objectness x mean posterior in probabilistic
// mode, posterior alone in baseline mode) -> per-class NMS -> threshold.
inline InferenceResult infer(const ScorerParams& params, const SceneView& view, const InferOptions& opt = {}) {
  InferenceResult out;
  const auto dense = dense_forward(params, view);
  out.proposals = extract_proposals(dense, params.pyramid, view.scene.width, view.scene.height, opt.proposals);
  if (params.num_stages() == 0) {
    out.detections = detail::one_stage_detections(params, dense, view, opt);
    return out;
  }
  std::vector<Box> boxes;
  for (const auto& p : out.proposals) boxes.push_back(p.box);
  const auto second = second_stage_forward(params, view, boxes);
  out.detections = detail::score_proposals(params, out.proposals, second, out.proposals.size(), opt);
  return out;
}

// Detections for several proposal budgets from one forward pass. Greedy NMS
// keeps proposals in order, so budget K sees exactly the first K proposals of
// the largest budget.
inline std::vector<InferenceResult> infer_budgets(const ScorerParams& params, const SceneView& view,
                                                  std::span<const std::size_t> budgets, InferOptions opt = {}) {
  std::size_t largest = 0;
  for (auto k : budgets) largest = std::max(largest, k);
  opt.proposals.max_proposals = largest;
  const auto dense = dense_forward(params, view);
  const auto proposals = extract_proposals(dense, params.pyramid, view.scene.width, view.scene.height, opt.proposals);
  std::vector<InferenceResult> out;
  if (params.num_stages() == 0) {
    const auto dets = detail::one_stage_detections(params, dense, view, opt);
    for (auto k : budgets) {
      out.push_back({std::vector<Proposal>(proposals.begin(), proposals.begin() + static_cast<std::ptrdiff_t>(std::min(k, proposals.size()))), dets});
    }
    return out;
  }
  std::vector<Box> boxes;
  for (const auto& p : proposals) boxes.push_back(p.box);
  const auto second = second_stage_forward(params, view, boxes);
  for (auto k : budgets) {
    const std::size_t n = std::min(k, proposals.size());
    InferenceResult r;
    r.proposals.assign(proposals.begin(), proposals.begin() + static_cast<std::ptrdiff_t>(n));
    r.detections = detail::score_proposals(params, proposals, second, n, opt);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints. Doubles are stored as C99 hex-float strings, which round-trip
// bit-exactly.

inline std::string to_hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double from_hexfloat(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw std::invalid_argument("checkpoint: bad number '" + s + "'");
  return v;
}

inline nlohmann::json checkpoint_to_json(const ScorerParams& p) {
  nlohmann::json blocks = nlohmann::json::array();
  const auto names = p.block_names();
  const auto mats = p.blocks();
  for (std::size_t b = 0; b < mats.size(); ++b) {
    nlohmann::json data = nlohmann::json::array();
    for (double v : mats[b]->data) data.push_back(to_hexfloat(v));
    blocks.push_back({{"name", names[b]}, {"rows", mats[b]->rows}, {"cols", mats[b]->cols}, {"data", data}});
  }
  return {{"version", kCheckpointVersion},
          {"pyramid", pyramid_to_json(p.pyramid)},
          {"feature_length", p.feature_length},
          {"num_classes", p.num_classes},
          {"cascade_thresholds", p.cascade_thresholds},
          {"class_loss", to_string(p.class_loss)},
          {"first_stage_class_head", p.has_class_head()},
          {"blocks", blocks}};
}

inline ScorerParams checkpoint_from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != kCheckpointVersion) throw std::invalid_argument("checkpoint: unsupported version");
  const auto loss_name = j.at("class_loss").get<std::string>();
  if (loss_name != "softmax" && loss_name != "federated") throw std::invalid_argument("checkpoint: unknown class_loss");
  auto p = ScorerParams::zeros(pyramid_from_json(j.at("pyramid")), j.at("feature_length").get<std::size_t>(),
                               j.at("num_classes").get<std::size_t>(),
                               j.at("cascade_thresholds").get<std::vector<double>>(),
                               loss_name == "softmax" ? ClassLoss::softmax : ClassLoss::federated,
                               j.at("first_stage_class_head").get<bool>());
  const auto names = p.block_names();
  auto mats = p.mutable_blocks();
  const auto& blocks = j.at("blocks");
  if (blocks.size() != mats.size()) throw std::invalid_argument("checkpoint: block count mismatch");
  for (std::size_t b = 0; b < mats.size(); ++b) {
    const auto& jb = blocks[b];
    if (jb.at("name").get<std::string>() != names[b] || jb.at("rows").get<std::size_t>() != mats[b]->rows ||
        jb.at("cols").get<std::size_t>() != mats[b]->cols) {
      throw std::invalid_argument("checkpoint: block layout mismatch at " + names[b]);
    }
    const auto& data = jb.at("data");
    if (data.size() != mats[b]->data.size()) throw std::invalid_argument("checkpoint: block size mismatch at " + names[b]);
    for (std::size_t i = 0; i < data.size(); ++i) mats[b]->data[i] = from_hexfloat(data[i].get<std::string>());
  }
  return p;
}

}  // namespace probdet
