#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace probdet {

// Probabilities are clamped to [kProbEps, 1 - kProbEps] before any log.
inline constexpr double kProbEps = 1e-12;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double peak = *std::max_element(out.begin(), out.end());
  double total = 0.0;
  for (auto& v : out) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : out) v /= total;
  return out;
}

// P(O_k = 1) from the first stage.
struct ObjectnessState {
  double p_obj = 0.0;
  double alpha() const { return 1.0 - p_obj; }
};

// P(C_k | O_k = 1) over foreground classes followed by background as the last entry.
struct ClassPosterior {
  std::vector<double> probs;

  std::size_t num_foreground() const { return probs.empty() ? 0 : probs.size() - 1; }
  std::size_t background_index() const { return num_foreground(); }
  double beta() const { return probs.back(); }
};

struct FusedScore {
  std::vector<double> scores;  // per foreground class
  double background = 0.0;
};

// Two-stage score factorization: a first-stage negative implies background.
inline FusedScore fuse(const ObjectnessState& obj, const ClassPosterior& cls) {
  if (cls.probs.empty()) throw std::invalid_argument("fuse: empty class posterior");
  FusedScore out;
  out.scores.resize(cls.num_foreground());
  for (std::size_t c = 0; c < out.scores.size(); ++c) out.scores[c] = cls.probs[c] * obj.p_obj;
  out.background = cls.beta() * obj.p_obj + obj.alpha();
  return out;
}

struct PositiveObjective {
  double value = 0.0;
  double d_p_obj = 0.0;
  double d_class_prob = 0.0;
};

// log P(c | O=1) + log P(O=1) for an annotated object, with both partials.
inline PositiveObjective positive_log_objective(const ObjectnessState& obj, const ClassPosterior& cls,
                                                std::size_t class_id) {
  if (class_id >= cls.probs.size()) throw std::out_of_range("positive_log_objective: class id");
  const double p = std::clamp(obj.p_obj, kProbEps, 1.0);
  const double q = std::clamp(cls.probs[class_id], kProbEps, 1.0);
  return {std::log(q) + std::log(p), 1.0 / p, 1.0 / q};
}

struct BackgroundBounds {
  double exact = 0.0;  // log(beta * (1 - alpha) + alpha)
  double b1 = 0.0;     // log alpha
  double b2 = 0.0;     // (1 - alpha) * log beta

  double gap() const { return exact - std::max(b1, b2); }
};

// alpha = P(O=0), beta = P(bg | O=1). Both are clamped to [kProbEps, 1].
inline BackgroundBounds background_bounds(double alpha, double beta) {
  const double a = std::clamp(alpha, kProbEps, 1.0);
  const double b = std::clamp(beta, kProbEps, 1.0);
  return {std::log(b * (1.0 - a) + a), std::log(a), (1.0 - a) * std::log(b)};
}

// Gap between the exact background log-likelihood and the better of its two
// lower bounds over a regular grid on [lower, 1]^2.
struct GapSurface {
  std::size_t resolution = 0;
  std::vector<double> grid;  // shared axis values for alpha and beta
  std::vector<BackgroundBounds> values;  // row-major: alpha index major, beta index minor
  double max_gap = 0.0;
  double argmax_alpha = 0.0;
  double argmax_beta = 0.0;
  double min_gap = 0.0;

  const BackgroundBounds& at(std::size_t ia, std::size_t ib) const { return values[ia * resolution + ib]; }

  void write_csv(std::ostream& os) const {
    os << "alpha,beta,exact,B1,B2,gap\n";
    char line[256];
    for (std::size_t ia = 0; ia < resolution; ++ia) {
      for (std::size_t ib = 0; ib < resolution; ++ib) {
        const auto& v = at(ia, ib);
        std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", grid[ia], grid[ib], v.exact,
                      v.b1, v.b2, v.gap());
        os << line;
      }
    }
  }
};

inline GapSurface bound_gap_sweep(std::size_t resolution, double lower = 1e-6) {
  if (resolution < 2) throw std::invalid_argument("bound_gap_sweep: resolution must be >= 2");
  if (!(lower > 0.0 && lower < 1.0)) throw std::invalid_argument("bound_gap_sweep: lower must be in (0, 1)");
  GapSurface s;
  s.resolution = resolution;
  s.grid.resize(resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    s.grid[i] = lower + (1.0 - lower) * static_cast<double>(i) / static_cast<double>(resolution - 1);
  }
  s.grid.back() = 1.0;
  s.values.resize(resolution * resolution);
  s.max_gap = -1.0;
  s.min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t ia = 0; ia < resolution; ++ia) {
    for (std::size_t ib = 0; ib < resolution; ++ib) {
      const auto v = background_bounds(s.grid[ia], s.grid[ib]);
      s.values[ia * resolution + ib] = v;
      const double g = v.gap();
      if (g > s.max_gap) {
        s.max_gap = g;
        s.argmax_alpha = s.grid[ia];
        s.argmax_beta = s.grid[ib];
      }
      s.min_gap = std::min(s.min_gap, g);
    }
  }
  return s;
}

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;  // weight of the positive class
};

struct ScalarLoss {
  double loss = 0.0;
  double grad = 0.0;
};

// Binary focal loss and its derivative w.r.t. the probability p. The gradient
// is zero where p had to be clamped.
inline ScalarLoss focal_loss(double p, bool positive, const FocalParams& fp = {}) {
  const double q = clamp_prob(p);
  const bool clamped = q != p;
  if (positive) {
    const double m = 1.0 - q;
    const double mg = std::pow(m, fp.gamma);
    const double loss = -fp.alpha * mg * std::log(q);
    const double dm = fp.gamma == 0.0 ? 0.0 : fp.gamma * std::pow(m, fp.gamma - 1.0);
    const double grad = fp.alpha * (dm * std::log(q) - mg / q);
    return {loss, clamped ? 0.0 : grad};
  }
  const double qg = std::pow(q, fp.gamma);
  const double loss = -(1.0 - fp.alpha) * qg * std::log1p(-q);
  const double dq = fp.gamma == 0.0 ? 0.0 : fp.gamma * std::pow(q, fp.gamma - 1.0);
  const double grad = -(1.0 - fp.alpha) * (dq * std::log1p(-q) - qg / (1.0 - q));
  return {loss, clamped ? 0.0 : grad};
}

// Focal loss on a logit. d loss / d logit = d loss / dp * p (1 - p).
inline ScalarLoss focal_loss_logit(double logit, bool positive, const FocalParams& fp = {}) {
  const double p = sigmoid(logit);
  const auto f = focal_loss(p, positive, fp);
  return {f.loss, f.grad * p * (1.0 - p)};
}

struct VectorLoss {
  double loss = 0.0;
  std::vector<double> grad;
};

// weight * -log softmax(logits)[target] and its gradient w.r.t. the logits.
// With target = background and weight = p_obj this is the weighted
// background term of the second stage.
inline VectorLoss weighted_softmax_ce(std::span<const double> logits, std::size_t target, double weight = 1.0) {
  if (target >= logits.size()) throw std::invalid_argument("weighted_softmax_ce: target out of range");
  const auto p = softmax(logits);
  VectorLoss out{-weight * std::log(clamp_prob(p[target])), std::vector<double>(p.size())};
  for (std::size_t c = 0; c < p.size(); ++c) out.grad[c] = weight * (p[c] - (c == target ? 1.0 : 0.0));
  return out;
}

}  // namespace probdet
