#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace probdet {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Axis-aligned box in scene units, corners (x1, y1) and (x2, y2).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
  double max_extent() const { return std::max(width(), height()); }
  Point center() const { return {0.5 * (x1 + x2), 0.5 * (y1 + y2)}; }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x1 <= x2 && y1 <= y2;
  }
  bool contains(Point p) const { return p.x >= x1 && p.x <= x2 && p.y >= y1 && p.y <= y2; }
  bool strictly_contains(Point p) const { return p.x > x1 && p.x < x2 && p.y > y1 && p.y < y2; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

// Distances from an anchor point to the left, top, right and bottom box sides.
struct LtrbOffsets {
  double l = 0.0;
  double t = 0.0;
  double r = 0.0;
  double b = 0.0;

  double operator[](std::size_t i) const { return i == 0 ? l : i == 1 ? t : i == 2 ? r : b; }
  double& operator[](std::size_t i) { return i == 0 ? l : i == 1 ? t : i == 2 ? r : b; }
  bool nonnegative() const { return l >= 0 && t >= 0 && r >= 0 && b >= 0; }

  friend bool operator==(const LtrbOffsets&, const LtrbOffsets&) = default;
};

inline Box decode_ltrb(Point anchor, const LtrbOffsets& o) {
  return {anchor.x - o.l, anchor.y - o.t, anchor.x + o.r, anchor.y + o.b};
}

// Components are negative when the anchor lies outside the box.
inline LtrbOffsets encode_ltrb(Point anchor, const Box& box) {
  return {anchor.x - box.x1, anchor.y - box.y1, box.x2 - anchor.x, box.y2 - anchor.y};
}

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

// Zero-area boxes have IoU 0 against anything.
inline double iou(const Box& a, const Box& b) {
  const double area_a = a.area();
  const double area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double inter = intersection_area(a, b);
  return inter / (area_a + area_b - inter);
}

inline Box enclosing_box(const Box& a, const Box& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
}

inline double giou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosing = enclosing_box(a, b).area();
  const double overlap = uni > 0.0 ? inter / uni : 0.0;
  if (enclosing <= 0.0) return overlap;
  return overlap - (enclosing - uni) / enclosing;
}

struct BoxGradient {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
};

struct GiouBoxLoss {
  double loss = 0.0;
  BoxGradient grad;  // d loss / d predicted corners
};

// 1 - gIoU(pred, target) with its gradient w.r.t. the predicted corners.
//
// loss = 2 - I/U - U/C with U = A_p + A_t - I. Where min/max selections tie, the
// predicted box is treated as the selected side for both the intersection and
// the enclosing box, which makes the gradient vanish at pred == target.
inline GiouBoxLoss giou_loss_boxes(const Box& pred, const Box& target) {
  const double pw = pred.x2 - pred.x1;
  const double ph = pred.y2 - pred.y1;
  const double pw_pos = std::max(0.0, pw);
  const double ph_pos = std::max(0.0, ph);
  const double area_p = pw_pos * ph_pos;
  const double area_t = target.area();

  const bool ix1_pred = pred.x1 >= target.x1;
  const bool iy1_pred = pred.y1 >= target.y1;
  const bool ix2_pred = pred.x2 <= target.x2;
  const bool iy2_pred = pred.y2 <= target.y2;
  const double iw = (ix2_pred ? pred.x2 : target.x2) - (ix1_pred ? pred.x1 : target.x1);
  const double ih = (iy2_pred ? pred.y2 : target.y2) - (iy1_pred ? pred.y1 : target.y1);
  const bool overlapping = iw > 0.0 && ih > 0.0;
  const double inter = overlapping ? iw * ih : 0.0;

  const bool cx1_pred = pred.x1 <= target.x1;
  const bool cy1_pred = pred.y1 <= target.y1;
  const bool cx2_pred = pred.x2 >= target.x2;
  const bool cy2_pred = pred.y2 >= target.y2;
  const double cw = (cx2_pred ? pred.x2 : target.x2) - (cx1_pred ? pred.x1 : target.x1);
  const double ch = (cy2_pred ? pred.y2 : target.y2) - (cy1_pred ? pred.y1 : target.y1);
  const double enclosing = cw * ch;

  const double uni = area_p + area_t - inter;

  GiouBoxLoss out;
  if (uni <= 0.0 || enclosing <= 0.0) {
    out.loss = 1.0;
    return out;
  }
  out.loss = 2.0 - inter / uni - uni / enclosing;

  const double d_inter = -(uni + inter) / (uni * uni) + 1.0 / enclosing;
  const double d_area_p = inter / (uni * uni) - 1.0 / enclosing;
  const double d_enclosing = uni / (enclosing * enclosing);

  // d area_p / d corner
  const double ap_x1 = (pw > 0.0 && ph > 0.0) ? -ph_pos : 0.0;
  const double ap_x2 = -ap_x1;
  const double ap_y1 = (pw > 0.0 && ph > 0.0) ? -pw_pos : 0.0;
  const double ap_y2 = -ap_y1;

  const double i_x1 = (overlapping && ix1_pred) ? -ih : 0.0;
  const double i_x2 = (overlapping && ix2_pred) ? ih : 0.0;
  const double i_y1 = (overlapping && iy1_pred) ? -iw : 0.0;
  const double i_y2 = (overlapping && iy2_pred) ? iw : 0.0;

  const double c_x1 = cx1_pred ? -ch : 0.0;
  const double c_x2 = cx2_pred ? ch : 0.0;
  const double c_y1 = cy1_pred ? -cw : 0.0;
  const double c_y2 = cy2_pred ? cw : 0.0;

  out.grad.x1 = d_inter * i_x1 + d_area_p * ap_x1 + d_enclosing * c_x1;
  out.grad.x2 = d_inter * i_x2 + d_area_p * ap_x2 + d_enclosing * c_x2;
  out.grad.y1 = d_inter * i_y1 + d_area_p * ap_y1 + d_enclosing * c_y1;
  out.grad.y2 = d_inter * i_y2 + d_area_p * ap_y2 + d_enclosing * c_y2;
  return out;
}

struct GiouOffsetLoss {
  double loss = 0.0;
  LtrbOffsets grad;  // d loss / d predicted offsets
};

// gIoU loss between two boxes given as distances from a shared anchor.
inline GiouOffsetLoss giou_loss(const LtrbOffsets& pred, const LtrbOffsets& target, Point anchor) {
  if (!target.nonnegative()) {
    throw std::invalid_argument("giou_loss: anchor lies outside the target box");
  }
  const auto boxes = giou_loss_boxes(decode_ltrb(anchor, pred), decode_ltrb(anchor, target));
  // x1 = ax - l, y1 = ay - t, x2 = ax + r, y2 = ay + b
  return {boxes.loss, {-boxes.grad.x1, -boxes.grad.y1, boxes.grad.x2, boxes.grad.y2}};
}

struct ScoredBox {
  Box box;
  double score = 0.0;
};

// Indices sorted by descending score; equal scores keep input order.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Greedy non-maximum suppression. A box is suppressed when its IoU with an
// already kept box exceeds the threshold. Returns kept indices in descending
// score order; stops early once max_keep boxes are kept.
inline std::vector<std::size_t> nms(std::span<const ScoredBox> candidates, double iou_threshold,
                                    std::size_t max_keep = static_cast<std::size_t>(-1)) {
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = candidates[i].score;
  const auto order = order_by_score(scores);

  std::vector<std::size_t> kept;
  std::vector<char> suppressed(candidates.size(), 0);
  for (std::size_t oi = 0; oi < order.size() && kept.size() < max_keep; ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(candidates[i].box, candidates[j].box) > iou_threshold) suppressed[j] = 1;
    }
  }
  return kept;
}

}  // namespace probdet
