#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "probdet/geometry.hpp"

namespace probdet {

// One pyramid level: cell stride in scene units and the (min, max] range of
// object extents it is responsible for.
struct LevelSpec {
  double stride = 1.0;
  double min_size = 0.0;
  double max_size = std::numeric_limits<double>::infinity();

  friend bool operator==(const LevelSpec&, const LevelSpec&) = default;
};

struct GridShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct Pyramid {
  std::vector<LevelSpec> levels;
  // Side of the canonical cell box used by recall-style labeling, in cells.
  double base_scale = 4.0;

  // strides {2, 4, 8}; ranges (0,16], (16,32], (32,inf)
  static Pyramid desk_default() {
    return {{{2.0, 0.0, 16.0}, {4.0, 16.0, 32.0}, {8.0, 32.0, std::numeric_limits<double>::infinity()}}, 4.0};
  }

  void validate() const {
    if (levels.empty()) throw std::invalid_argument("pyramid: no levels");
    if (levels.front().min_size != 0.0) throw std::invalid_argument("pyramid: first range must start at 0");
    if (!std::isinf(levels.back().max_size)) throw std::invalid_argument("pyramid: last range must be open");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (!(levels[i].stride > 0.0)) throw std::invalid_argument("pyramid: stride must be positive");
      if (!(levels[i].max_size > levels[i].min_size)) throw std::invalid_argument("pyramid: empty size range");
      if (i > 0) {
        if (!(levels[i].stride > levels[i - 1].stride)) throw std::invalid_argument("pyramid: strides must increase");
        if (levels[i].min_size != levels[i - 1].max_size) throw std::invalid_argument("pyramid: ranges must tile");
      }
    }
    if (!(base_scale > 0.0)) throw std::invalid_argument("pyramid: base_scale must be positive");
  }

  std::size_t level_for_extent(double extent) const {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (extent > levels[i].min_size && extent <= levels[i].max_size) return i;
    }
    return extent <= 0.0 ? 0 : levels.size() - 1;
  }

  GridShape grid(std::size_t level, double scene_width, double scene_height) const {
    const double s = levels[level].stride;
    return {static_cast<std::size_t>(std::ceil(scene_height / s)), static_cast<std::size_t>(std::ceil(scene_width / s))};
  }

  Point cell_center(std::size_t level, std::size_t row, std::size_t col) const {
    const double s = levels[level].stride;
    return {(static_cast<double>(col) + 0.5) * s, (static_cast<double>(row) + 0.5) * s};
  }

  friend bool operator==(const Pyramid&, const Pyramid&) = default;
};

struct GroundTruth {
  Box box;
  int class_id = 0;
};

enum class CellState : std::uint8_t { negative, positive, ignore };

struct CellLabel {
  CellState state = CellState::negative;
  int object = -1;         // ground-truth index when positive
  LtrbOffsets target;      // regression target when positive
};

struct LabelGrid {
  GridShape shape;
  std::vector<CellLabel> cells;

  CellLabel& at(std::size_t r, std::size_t c) { return cells[r * shape.cols + c]; }
  const CellLabel& at(std::size_t r, std::size_t c) const { return cells[r * shape.cols + c]; }

  std::size_t count(CellState s) const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.state == s;
    return n;
  }
};

using PyramidLabels = std::vector<LabelGrid>;

inline PyramidLabels empty_labels(const Pyramid& pyr, double width, double height) {
  PyramidLabels out;
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const auto g = pyr.grid(l, width, height);
    out.push_back({g, std::vector<CellLabel>(g.size())});
  }
  return out;
}

inline std::size_t count_state(const PyramidLabels& labels, CellState s) {
  std::size_t n = 0;
  for (const auto& g : labels) n += g.count(s);
  return n;
}

// Per-level predicted offsets, indexed like the label grid. When supplied to
// center-style assignment, a neighbor is judged on its current prediction.
using PyramidOffsets = std::vector<std::vector<LtrbOffsets>>;

struct CenterAssignOptions {
  double neighbor_loss_threshold = 0.2;
  const PyramidOffsets* predictions = nullptr;
};

// Likelihood-calibrated labeling. Each object is positive at the cell holding
// its center on its size-assigned level, plus those 3x3 neighbors whose box
// regression already reaches gIoU loss < threshold. Without predictions the
// neighbor's regression is taken to be its own exact target, so any neighbor
// whose anchor lies strictly inside the object qualifies. Everything else is
// negative. If two objects claim one center cell the smaller object keeps it
// and the other object's would-be positives become ignore.
inline PyramidLabels assign_center_style(std::span<const GroundTruth> objects, const Pyramid& pyr,
                                         double scene_width, double scene_height,
                                         const CenterAssignOptions& opt = {}) {
  auto labels = empty_labels(pyr, scene_width, scene_height);

  struct Claim {
    std::size_t level, row, col;
  };
  std::vector<Claim> claims(objects.size());
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const auto& b = objects[k].box;
    const std::size_t l = pyr.level_for_extent(b.max_extent());
    const auto g = labels[l].shape;
    const double s = pyr.levels[l].stride;
    const auto c = b.center();
    const auto row = std::min<std::size_t>(g.rows - 1, static_cast<std::size_t>(std::max(0.0, std::floor(c.y / s))));
    const auto col = std::min<std::size_t>(g.cols - 1, static_cast<std::size_t>(std::max(0.0, std::floor(c.x / s))));
    claims[k] = {l, row, col};
  }

  std::vector<char> displaced(objects.size(), 0);
  for (std::size_t a = 0; a < objects.size(); ++a) {
    for (std::size_t b = a + 1; b < objects.size(); ++b) {
      if (claims[a].level == claims[b].level && claims[a].row == claims[b].row && claims[a].col == claims[b].col) {
        const double area_a = objects[a].box.area();
        const double area_b = objects[b].box.area();
        // ties go to the lower index
        if (area_b < area_a) displaced[a] = 1; else displaced[b] = 1;
      }
    }
  }

  // Positives of smaller objects take precedence over larger ones.
  std::vector<std::size_t> order(objects.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return objects[a].box.area() < objects[b].box.area(); });

  auto mark_positive = [&](CellLabel& cell, std::size_t k, const LtrbOffsets& target) {
    if (cell.state == CellState::positive) return;
    cell.state = CellState::positive;
    cell.object = static_cast<int>(k);
    cell.target = target;
  };

  for (std::size_t k : order) {
    const auto& gt = objects[k].box;
    const auto [l, row, col] = claims[k];
    auto& grid = labels[l];
    const auto g = grid.shape;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        const long r = static_cast<long>(row) + dr;
        const long c = static_cast<long>(col) + dc;
        if (r < 0 || c < 0 || r >= static_cast<long>(g.rows) || c >= static_cast<long>(g.cols)) continue;
        const auto anchor = pyr.cell_center(l, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        auto& cell = grid.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
        const bool is_center = dr == 0 && dc == 0;

        LtrbOffsets target = encode_ltrb(anchor, gt);
        bool qualifies = false;
        if (is_center) {
          // The center cell always carries a target; clamp if its anchor grazes the box edge.
          target = {std::max(0.0, target.l), std::max(0.0, target.t), std::max(0.0, target.r), std::max(0.0, target.b)};
          qualifies = true;
        } else if (gt.strictly_contains(anchor)) {
          LtrbOffsets pred = target;
          if (opt.predictions) pred = (*opt.predictions)[l][static_cast<std::size_t>(r) * g.cols + static_cast<std::size_t>(c)];
          qualifies = giou_loss(pred, target, anchor).loss < opt.neighbor_loss_threshold;
        }
        if (!qualifies) continue;

        if (displaced[k]) {
          if (cell.state == CellState::negative) cell.state = CellState::ignore;
        } else {
          mark_positive(cell, k, target);
        }
      }
    }
  }
  return labels;
}

// Recall-biased labeling: a cell is positive when the square cell box of side
// stride * base_scale centered on it overlaps some object with IoU >= threshold.
// The target object is the one with the highest IoU; offsets are clamped to be
// nonnegative when the cell center falls outside that object.
inline PyramidLabels assign_recall_style(std::span<const GroundTruth> objects, const Pyramid& pyr,
                                         double scene_width, double scene_height, double iou_threshold = 0.3) {
  auto labels = empty_labels(pyr, scene_width, scene_height);
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    auto& grid = labels[l];
    const double half = 0.5 * pyr.levels[l].stride * pyr.base_scale;
    for (std::size_t r = 0; r < grid.shape.rows; ++r) {
      for (std::size_t c = 0; c < grid.shape.cols; ++c) {
        const auto anchor = pyr.cell_center(l, r, c);
        const Box cell_box{anchor.x - half, anchor.y - half, anchor.x + half, anchor.y + half};
        double best = -1.0;
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < objects.size(); ++k) {
          const double v = iou(cell_box, objects[k].box);
          if (v > best) {
            best = v;
            best_k = k;
          }
        }
        if (best >= iou_threshold) {
          auto& cell = grid.at(r, c);
          cell.state = CellState::positive;
          cell.object = static_cast<int>(best_k);
          const auto t = encode_ltrb(anchor, objects[best_k].box);
          cell.target = {std::max(0.0, t.l), std::max(0.0, t.t), std::max(0.0, t.r), std::max(0.0, t.b)};
        }
      }
    }
  }
  return labels;
}

}  // namespace probdet
