#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "probdet/detail/rng.hpp"
#include "probdet/probcore.hpp"

namespace probdet {

// Per-class object counts from the training set.
struct ClassFrequencyTable {
  std::vector<std::size_t> counts;

  std::size_t num_classes() const { return counts.size(); }
};

// w_c = sqrt(n_c) / sum_j sqrt(n_j)
inline std::vector<double> sampling_weights(const ClassFrequencyTable& table) {
  std::vector<double> w(table.counts.size());
  double total = 0.0;
  for (std::size_t c = 0; c < w.size(); ++c) {
    w[c] = std::sqrt(static_cast<double>(table.counts[c]));
    total += w[c];
  }
  if (!(total > 0.0)) throw std::invalid_argument("sampling_weights: all class counts are zero");
  for (auto& v : w) v /= total;
  return w;
}

// Class subset for one iteration: every positive class plus negatives drawn
// without replacement in proportion to sqrt frequency, until the subset holds
// min(subset_size, |classes|) classes. Negatives are chosen by weighted
// reservoir keys u^(1/w) (Efraimidis-Spirakis); zero-weight classes are only
// taken once every positive-weight class is in. Returned sorted.
inline std::vector<int> sample_subset(std::span<const int> positive_classes, const ClassFrequencyTable& table,
                                      std::size_t subset_size, Rng& rng) {
  if (subset_size < 1) throw std::invalid_argument("sample_subset: subset_size must be >= 1");
  const std::size_t C = table.num_classes();
  std::vector<char> in_set(C, 0);
  std::vector<int> out;
  for (int c : positive_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= C) throw std::out_of_range("sample_subset: class id");
    if (!in_set[static_cast<std::size_t>(c)]) {
      in_set[static_cast<std::size_t>(c)] = 1;
      out.push_back(c);
    }
  }
  const std::size_t target = std::min(subset_size, C);
  if (out.size() < target) {
    const auto weights = sampling_weights(table);
    struct Key {
      double key;
      int cls;
    };
    std::vector<Key> keys;
    for (std::size_t c = 0; c < C; ++c) {
      const double u = rng.uniform();  // consumed for every class so the stream is order-independent
      if (in_set[c]) continue;
      // log-domain key: log(u) / w, larger is better; zero weight sorts last
      const double key = weights[c] > 0.0 ? std::log(std::max(u, 1e-300)) / weights[c]
                                          : -std::numeric_limits<double>::infinity();
      keys.push_back({key, static_cast<int>(c)});
    }
    std::stable_sort(keys.begin(), keys.end(), [](const Key& a, const Key& b) { return a.key > b.key; });
    for (std::size_t i = 0; i < keys.size() && out.size() < target; ++i) out.push_back(keys[i].cls);
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct FederatedLoss {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits, same length as the logits; zero outside S
};

inline constexpr int kBackgroundTarget = -1;

// Sigmoid binary cross-entropy summed over the classes in S only. For a
// foreground proposal the true class must be in S. Background proposals
// (true_class == kBackgroundTarget) have all-zero targets and are scaled by
// weight (the first-stage objectness).
inline FederatedLoss federated_bce(std::span<const double> class_logits, int true_class, std::span<const int> subset,
                                   double weight = 1.0) {
  FederatedLoss out;
  out.grad.assign(class_logits.size(), 0.0);
  const bool background = true_class == kBackgroundTarget;
  if (!background) {
    if (std::find(subset.begin(), subset.end(), true_class) == subset.end()) {
      throw std::invalid_argument("federated_bce: foreground class missing from the sampled subset");
    }
  }
  const double scale = background ? weight : 1.0;
  for (int c : subset) {
    if (c < 0 || static_cast<std::size_t>(c) >= class_logits.size()) throw std::out_of_range("federated_bce: class id");
    const double z = class_logits[static_cast<std::size_t>(c)];
    const double y = (!background && c == true_class) ? 1.0 : 0.0;
    // stable BCE with logits: softplus(z) - y z
    out.loss += scale * (softplus(z) - y * z);
    out.grad[static_cast<std::size_t>(c)] = scale * (sigmoid(z) - y);
  }
  return out;
}

}  // namespace probdet
