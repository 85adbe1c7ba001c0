#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "probdet/assignment.hpp"
#include "probdet/errors.hpp"
#include "probdet/detail/rng.hpp"
#include "probdet/geometry.hpp"

namespace probdet {

using json = nlohmann::json;

inline constexpr int kDatasetFormatVersion = 1;

// Number of presence-derived features preceding the class signature block.
inline constexpr std::size_t kGeometricFeatures = 11;

struct SizingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::size_t num_scenes = 64;
  double scene_width = 64.0;
  double scene_height = 64.0;
  std::size_t num_classes = 8;
  double class_skew = 0.0;  // power-law exponent over class rank
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double min_object_size = 6.0;
  double max_object_size = 40.0;
  double max_aspect = 1.5;
  double federated_fraction = 1.0;  // chance an absent class is still exhaustively annotated
  std::size_t signature_dims = 5;
  std::uint64_t signature_seed = 0;  // class appearance; shared by every dataset with this config
  double signature_noise = 0.1;  // per-object jitter of the class signature
  double feature_noise = 0.05;   // per-cell additive noise
  Pyramid pyramid = Pyramid::desk_default();

  std::size_t feature_length() const { return kGeometricFeatures + signature_dims; }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("data: need at least one class");
    if (min_objects > max_objects) throw std::invalid_argument("data: min_objects > max_objects");
    if (!(min_object_size > 0.0) || min_object_size > max_object_size) {
      throw std::invalid_argument("data: invalid object size range");
    }
    if (min_object_size > std::min(scene_width, scene_height)) {
      throw SizingError("data: scene smaller than the smallest object");
    }
    if (!(max_aspect >= 1.0)) throw std::invalid_argument("data: max_aspect must be >= 1");
    if (federated_fraction < 0.0 || federated_fraction > 1.0) {
      throw std::invalid_argument("data: federated_fraction must be in [0, 1]");
    }
    if (signature_dims < 1) throw std::invalid_argument("data: signature_dims must be >= 1");
    if (signature_noise < 0.0 || feature_noise < 0.0) throw std::invalid_argument("data: negative noise");
    pyramid.validate();
  }

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ClassInfo {
  int id = 0;
  std::string name;
  std::size_t frequency = 0;
};

struct Scene {
  double width = 0.0;
  double height = 0.0;
  std::vector<GroundTruth> objects;
  std::vector<int> annotated_classes;  // sorted
  std::uint64_t seed = 0;              // drives appearance jitter and feature noise

  bool is_annotated(int c) const { return std::binary_search(annotated_classes.begin(), annotated_classes.end(), c); }
};

struct SceneDataset {
  int version = kDatasetFormatVersion;
  std::uint64_t seed = 0;
  DatasetConfig config;
  std::vector<ClassInfo> classes;
  std::vector<Scene> scenes;
  std::vector<std::vector<double>> signatures;  // per class, length signature_dims; derived from signature_seed

  std::size_t num_classes() const { return classes.size(); }
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> out;
    for (const auto& c : classes) out.push_back(c.frequency);
    return out;
  }
};

namespace detail {

inline double quantize(double v, double step = 0.25) { return std::round(v / step) * step; }

inline constexpr std::uint64_t kSignatureStream = 0x5167000000000000ULL;

inline std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) { return mix_seed(seed, index + 1); }

// Unit-norm class signatures. Of several random draws, the one with the largest
// minimum pairwise distance is kept.
inline std::vector<std::vector<double>> class_signatures(std::uint64_t seed, std::size_t classes, std::size_t dims) {
  std::vector<std::vector<double>> best;
  double best_sep = -1.0;
  for (std::size_t attempt = 0; attempt < 32; ++attempt) {
    Rng rng(mix_seed(seed, kSignatureStream + attempt));
    std::vector<std::vector<double>> sig(classes, std::vector<double>(dims));
    for (auto& s : sig) {
      double norm = 0.0;
      for (auto& v : s) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (auto& v : s) v /= norm;
    }
    double sep = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < classes; ++a) {
      for (std::size_t b = a + 1; b < classes; ++b) {
        double d = 0.0;
        for (std::size_t i = 0; i < dims; ++i) d += (sig[a][i] - sig[b][i]) * (sig[a][i] - sig[b][i]);
        sep = std::min(sep, d);
      }
    }
    if (sep > best_sep) {
      best_sep = sep;
      best = std::move(sig);
    }
  }
  return best;
}

inline std::size_t draw_class(Rng& rng, std::span<const double> cumulative) {
  const double u = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

inline bool separated(const Box& a, const Box& b, double gap) {
  return a.x2 + gap <= b.x1 || b.x2 + gap <= a.x1 || a.y2 + gap <= b.y1 || b.y2 + gap <= a.y1;
}

inline Scene generate_scene(const DatasetConfig& cfg, std::uint64_t seed, std::size_t index,
                            std::span<const double> class_cumulative) {
  constexpr int kSceneAttempts = 20;
  constexpr int kObjectAttempts = 200;
  const std::uint64_t sseed = scene_seed(seed, index);
  Rng rng(sseed);
  const std::size_t span = cfg.max_objects - cfg.min_objects + 1;
  const std::size_t target = cfg.min_objects + rng.below(span);

  for (int attempt = 0; attempt < kSceneAttempts; ++attempt) {
    Scene scene;
    scene.width = cfg.scene_width;
    scene.height = cfg.scene_height;
    scene.seed = sseed;
    bool ok = true;
    for (std::size_t k = 0; k < target && ok; ++k) {
      const int cls = static_cast<int>(draw_class(rng, class_cumulative));
      bool placed = false;
      for (int tries = 0; tries < kObjectAttempts && !placed; ++tries) {
        const double size = rng.uniform(cfg.min_object_size, cfg.max_object_size);
        const double log_aspect = rng.uniform(-std::log(cfg.max_aspect), std::log(cfg.max_aspect));
        const double aspect = std::exp(log_aspect);
        const double w = quantize(std::clamp(size * std::sqrt(aspect), cfg.min_object_size,
                                             std::min(cfg.max_object_size, cfg.scene_width)));
        const double h = quantize(std::clamp(size / std::sqrt(aspect), cfg.min_object_size,
                                             std::min(cfg.max_object_size, cfg.scene_height)));
        const double x1 = quantize(rng.uniform(0.0, std::max(0.0, cfg.scene_width - w)));
        const double y1 = quantize(rng.uniform(0.0, std::max(0.0, cfg.scene_height - h)));
        const Box box{x1, y1, std::min(cfg.scene_width, x1 + w), std::min(cfg.scene_height, y1 + h)};
        if (!(box.area() > 0.0)) continue;
        bool free = true;
        for (const auto& o : scene.objects) free = free && separated(o.box, box, 1.0);
        if (free) {
          scene.objects.push_back({box, cls});
          placed = true;
        }
      }
      ok = placed;
    }
    if (!ok) continue;

    std::set<int> annotated;
    for (const auto& o : scene.objects) annotated.insert(o.class_id);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      const double u = rng.uniform();
      if (cfg.federated_fraction >= 1.0 || u < cfg.federated_fraction) annotated.insert(static_cast<int>(c));
    }
    scene.annotated_classes.assign(annotated.begin(), annotated.end());
    return scene;
  }
  throw SizingError("data: could not place " + std::to_string(target) + " non-overlapping objects in scene " +
                    std::to_string(index));
}

}  // namespace detail

inline std::vector<double> class_prior(const DatasetConfig& cfg) {
  std::vector<double> p(cfg.num_classes);
  double total = 0.0;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    p[c] = std::pow(static_cast<double>(c + 1), -cfg.class_skew);
    total += p[c];
  }
  for (auto& v : p) v /= total;
  return p;
}

inline void recount_frequencies(SceneDataset& ds) {
  for (auto& c : ds.classes) c.frequency = 0;
  for (const auto& s : ds.scenes) {
    for (const auto& o : s.objects) {
      if (o.class_id < 0 || static_cast<std::size_t>(o.class_id) >= ds.classes.size()) {
        throw std::invalid_argument("dataset: class id out of range");
      }
      ++ds.classes[static_cast<std::size_t>(o.class_id)].frequency;
    }
  }
}

// Scenes are generated independently from per-scene derived seeds.
inline SceneDataset generate_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SceneDataset ds;
  ds.seed = seed;
  ds.config = cfg;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    ds.classes.push_back({static_cast<int>(c), "class_" + std::to_string(c), 0});
  }
  ds.signatures = detail::class_signatures(cfg.signature_seed, cfg.num_classes, cfg.signature_dims);

  const auto prior = class_prior(cfg);
  std::vector<double> cumulative(prior.size());
  double acc = 0.0;
  for (std::size_t c = 0; c < prior.size(); ++c) cumulative[c] = acc += prior[c];

  ds.scenes.reserve(cfg.num_scenes);
  for (std::size_t i = 0; i < cfg.num_scenes; ++i) ds.scenes.push_back(detail::generate_scene(cfg, seed, i, cumulative));
  recount_frequencies(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Cell features
//
// The scene is rendered as a piecewise-constant field: a presence channel that
// is 1 inside any object, and a signature channel equal to the object's
// (jittered) class signature. Background is 0 in both. A cell's features are
// window averages of these channels, so every value is an exact area-weighted
// mix of object and background contributions:
//   [0..4]   presence coverage in square windows of side 1, 2, 4, 8, 16 strides
//   [5..8]   rectified left/right and top/bottom coverage differences, 8-stride window
//   [9, 10]  coverage of a horizontal and a vertical 16x1-stride strip
//   [11..]   mean signature over the cell itself
// followed by deterministic per-cell noise.

inline std::vector<double> object_signature(const SceneDataset& ds, const Scene& scene, std::size_t k) {
  const auto& base = ds.signatures[static_cast<std::size_t>(scene.objects[k].class_id)];
  std::vector<double> sig(base);
  if (ds.config.signature_noise > 0.0) {
    for (std::size_t i = 0; i < sig.size(); ++i) {
      sig[i] += ds.config.signature_noise * hashed_normal(mix_seed(scene.seed, 0x0b1e000000ULL + k * 4096 + i));
    }
  }
  return sig;
}

namespace detail {

inline double coverage(std::span<const GroundTruth> objects, const Box& window) {
  double acc = 0.0;
  for (const auto& o : objects) acc += intersection_area(o.box, window);
  return acc / window.area();
}

inline Box square_window(Point c, double side) {
  return {c.x - 0.5 * side, c.y - 0.5 * side, c.x + 0.5 * side, c.y + 0.5 * side};
}

inline void raw_cell_features(const Scene& scene, std::span<const std::vector<double>> obj_signatures,
                              const Pyramid& pyr, std::size_t level, std::size_t row, std::size_t col,
                              std::span<double> out) {
  const double s = pyr.levels[level].stride;
  const Point c = pyr.cell_center(level, row, col);
  const auto objects = std::span<const GroundTruth>(scene.objects);
  out[0] = coverage(objects, square_window(c, s));
  out[1] = coverage(objects, square_window(c, 2 * s));
  out[2] = coverage(objects, square_window(c, 4 * s));
  out[3] = coverage(objects, square_window(c, 8 * s));
  out[4] = coverage(objects, square_window(c, 16 * s));
  const double h = 4 * s;
  const double left = coverage(objects, {c.x - h, c.y - h, c.x, c.y + h});
  const double right = coverage(objects, {c.x, c.y - h, c.x + h, c.y + h});
  const double top = coverage(objects, {c.x - h, c.y - h, c.x + h, c.y});
  const double bottom = coverage(objects, {c.x - h, c.y, c.x + h, c.y + h});
  out[5] = std::max(0.0, left - right);
  out[6] = std::max(0.0, right - left);
  out[7] = std::max(0.0, top - bottom);
  out[8] = std::max(0.0, bottom - top);
  out[9] = coverage(objects, {c.x - 8 * s, c.y - 0.5 * s, c.x + 8 * s, c.y + 0.5 * s});
  out[10] = coverage(objects, {c.x - 0.5 * s, c.y - 8 * s, c.x + 0.5 * s, c.y + 8 * s});

  const Box cell = square_window(c, s);
  const double cell_area = cell.area();
  for (std::size_t i = kGeometricFeatures; i < out.size(); ++i) out[i] = 0.0;
  for (std::size_t k = 0; k < scene.objects.size(); ++k) {
    const double frac = intersection_area(scene.objects[k].box, cell) / cell_area;
    if (frac <= 0.0) continue;
    for (std::size_t i = 0; i < obj_signatures[k].size(); ++i) out[kGeometricFeatures + i] += frac * obj_signatures[k][i];
  }
}

inline void add_cell_noise(std::uint64_t scene_seed, double sigma, std::size_t level, std::size_t row, std::size_t col,
                           std::span<double> out) {
  if (sigma <= 0.0) return;
  const std::uint64_t cell_key = mix_seed(scene_seed, 0xce11000000000000ULL + (level << 40) + (row << 20) + col);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += sigma * hashed_normal(cell_key + i * 0x9e3779b97f4a7c15ULL);
}

}  // namespace detail

inline std::vector<std::vector<double>> object_signatures(const SceneDataset& ds, const Scene& scene) {
  std::vector<std::vector<double>> sigs;
  for (std::size_t k = 0; k < scene.objects.size(); ++k) sigs.push_back(object_signature(ds, scene, k));
  return sigs;
}

inline std::vector<double> cell_features(const SceneDataset& ds, const Scene& scene, std::size_t level,
                                         std::size_t row, std::size_t col) {
  const auto& pyr = ds.config.pyramid;
  if (level >= pyr.levels.size()) throw std::out_of_range("cell_features: level");
  const auto g = pyr.grid(level, scene.width, scene.height);
  if (row >= g.rows || col >= g.cols) throw std::out_of_range("cell_features: cell");
  std::vector<double> out(ds.config.feature_length());
  const auto sigs = object_signatures(ds, scene);
  detail::raw_cell_features(scene, sigs, pyr, level, row, col, out);
  detail::add_cell_noise(scene.seed, ds.config.feature_noise, level, row, col, out);
  return out;
}

// All cell features of one scene plus per-level summed-area tables for
// region pooling.
struct SceneFeatures {
  std::size_t feature_length = 0;
  std::vector<GridShape> shapes;
  std::vector<std::vector<double>> levels;    // rows * cols * F
  std::vector<std::vector<double>> integral;  // (rows + 1) * (cols + 1) * F

  std::span<const double> cell(std::size_t level, std::size_t row, std::size_t col) const {
    return {levels[level].data() + (row * shapes[level].cols + col) * feature_length, feature_length};
  }
  std::span<const double> cell(std::size_t level, std::size_t index) const {
    return {levels[level].data() + index * feature_length, feature_length};
  }

  // Sum of features over rows [r0, r1) and cols [c0, c1).
  void region_sum(std::size_t level, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1,
                  std::span<double> out) const {
    const std::size_t F = feature_length;
    const std::size_t stride = shapes[level].cols + 1;
    const double* t = integral[level].data();
    for (std::size_t i = 0; i < F; ++i) {
      out[i] = t[(r1 * stride + c1) * F + i] - t[(r0 * stride + c1) * F + i] - t[(r1 * stride + c0) * F + i] +
               t[(r0 * stride + c0) * F + i];
    }
  }
};

inline SceneFeatures compute_scene_features(const SceneDataset& ds, const Scene& scene) {
  const auto& pyr = ds.config.pyramid;
  SceneFeatures sf;
  sf.feature_length = ds.config.feature_length();
  const std::size_t F = sf.feature_length;
  const auto sigs = object_signatures(ds, scene);
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const auto g = pyr.grid(l, scene.width, scene.height);
    sf.shapes.push_back(g);
    std::vector<double> maps(g.size() * F);
    for (std::size_t r = 0; r < g.rows; ++r) {
      for (std::size_t c = 0; c < g.cols; ++c) {
        std::span<double> out(maps.data() + (r * g.cols + c) * F, F);
        detail::raw_cell_features(scene, sigs, pyr, l, r, c, out);
        detail::add_cell_noise(scene.seed, ds.config.feature_noise, l, r, c, out);
      }
    }
    std::vector<double> table((g.rows + 1) * (g.cols + 1) * F, 0.0);
    const std::size_t stride = g.cols + 1;
    for (std::size_t r = 0; r < g.rows; ++r) {
      for (std::size_t c = 0; c < g.cols; ++c) {
        for (std::size_t i = 0; i < F; ++i) {
          table[((r + 1) * stride + c + 1) * F + i] = maps[(r * g.cols + c) * F + i] +
                                                      table[(r * stride + c + 1) * F + i] +
                                                      table[((r + 1) * stride + c) * F + i] -
                                                      table[(r * stride + c) * F + i];
        }
      }
    }
    sf.levels.push_back(std::move(maps));
    sf.integral.push_back(std::move(table));
  }
  return sf;
}

// ---------------------------------------------------------------------------
// Persistence. Features are never stored; they are regenerated from the seed.

inline json pyramid_to_json(const Pyramid& p) {
  json levels = json::array();
  for (const auto& l : p.levels) {
    json jl{{"stride", l.stride}, {"min_size", l.min_size}};
    jl["max_size"] = std::isinf(l.max_size) ? json(nullptr) : json(l.max_size);
    levels.push_back(jl);
  }
  return {{"levels", levels}, {"base_scale", p.base_scale}};
}

inline Pyramid pyramid_from_json(const json& j) {
  Pyramid p;
  p.base_scale = j.at("base_scale").get<double>();
  for (const auto& jl : j.at("levels")) {
    LevelSpec l;
    l.stride = jl.at("stride").get<double>();
    l.min_size = jl.at("min_size").get<double>();
    l.max_size = jl.at("max_size").is_null() ? std::numeric_limits<double>::infinity() : jl.at("max_size").get<double>();
    p.levels.push_back(l);
  }
  p.validate();
  return p;
}

inline json dataset_config_to_json(const DatasetConfig& c) {
  return {{"num_scenes", c.num_scenes},
          {"scene_width", c.scene_width},
          {"scene_height", c.scene_height},
          {"num_classes", c.num_classes},
          {"class_skew", c.class_skew},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"min_object_size", c.min_object_size},
          {"max_object_size", c.max_object_size},
          {"max_aspect", c.max_aspect},
          {"federated_fraction", c.federated_fraction},
          {"signature_dims", c.signature_dims},
          {"signature_seed", c.signature_seed},
          {"signature_noise", c.signature_noise},
          {"feature_noise", c.feature_noise},
          {"pyramid", pyramid_to_json(c.pyramid)}};
}

inline json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

inline Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x1, y1, x2, y2]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw std::invalid_argument("box corners out of order");
  return b;
}

inline json dataset_to_json(const SceneDataset& ds) {
  json classes = json::array();
  for (const auto& c : ds.classes) classes.push_back({{"id", c.id}, {"name", c.name}, {"frequency", c.frequency}});
  json scenes = json::array();
  for (const auto& s : ds.scenes) {
    json objects = json::array();
    for (const auto& o : s.objects) objects.push_back({{"box", box_to_json(o.box)}, {"class", o.class_id}});
    scenes.push_back({{"size", json::array({s.height, s.width})}, {"objects", objects}, {"annotated_classes", s.annotated_classes}});
  }
  return {{"version", ds.version},
          {"seed", ds.seed},
          {"config", dataset_config_to_json(ds.config)},
          {"classes", classes},
          {"scenes", scenes}};
}

// Strict config parsing: every key must be known.
inline DatasetConfig dataset_config_from_json(const json& j);

inline SceneDataset dataset_from_json(const json& j) {
  SceneDataset ds;
  ds.version = j.at("version").get<int>();
  if (ds.version != kDatasetFormatVersion) throw std::invalid_argument("dataset: unsupported version");
  ds.seed = j.at("seed").get<std::uint64_t>();
  ds.config = dataset_config_from_json(j.at("config"));
  for (const auto& jc : j.at("classes")) {
    ds.classes.push_back({jc.at("id").get<int>(), jc.at("name").get<std::string>(), jc.at("frequency").get<std::size_t>()});
  }
  for (std::size_t i = 0; i < ds.classes.size(); ++i) {
    if (ds.classes[i].id != static_cast<int>(i)) throw std::invalid_argument("dataset: class ids must be 0..C-1 in order");
  }
  if (ds.classes.size() != ds.config.num_classes) throw std::invalid_argument("dataset: class catalog size mismatch");
  std::size_t index = 0;
  for (const auto& js : j.at("scenes")) {
    Scene s;
    const auto& size = js.at("size");
    s.height = size.at(0).get<double>();
    s.width = size.at(1).get<double>();
    s.seed = detail::scene_seed(ds.seed, index++);
    for (const auto& jo : js.at("objects")) s.objects.push_back({box_from_json(jo.at("box")), jo.at("class").get<int>()});
    s.annotated_classes = js.at("annotated_classes").get<std::vector<int>>();
    std::sort(s.annotated_classes.begin(), s.annotated_classes.end());
    for (const auto& o : s.objects) {
      if (!s.is_annotated(o.class_id)) throw std::invalid_argument("dataset: object class missing from annotated_classes");
    }
    ds.scenes.push_back(std::move(s));
  }
  const auto stored = ds.class_counts();
  recount_frequencies(ds);
  if (stored != ds.class_counts()) throw std::invalid_argument("dataset: class frequencies do not match objects");
  ds.signatures = detail::class_signatures(ds.config.signature_seed, ds.config.num_classes, ds.config.signature_dims);
  return ds;
}

namespace detail {

// Reads j[key] into out if present, erasing it from the remaining-key set.
template <typename T>
void take(const json& j, std::set<std::string>& remaining, const char* key, T& out) {
  if (!j.contains(key)) return;
  out = j.at(key).get<T>();
  remaining.erase(key);
}

inline std::set<std::string> keys_of(const json& j, const char* section) {
  if (!j.is_object()) throw std::invalid_argument(std::string(section) + ": expected an object");
  std::set<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
  return keys;
}

inline void reject_unknown(const std::set<std::string>& remaining, const char* section) {
  if (!remaining.empty()) throw std::invalid_argument(std::string(section) + ": unknown key '" + *remaining.begin() + "'");
}

}  // namespace detail

inline DatasetConfig dataset_config_from_json(const json& j) {
  DatasetConfig c;
  auto keys = detail::keys_of(j, "data");
  detail::take(j, keys, "num_scenes", c.num_scenes);
  detail::take(j, keys, "scene_width", c.scene_width);
  detail::take(j, keys, "scene_height", c.scene_height);
  detail::take(j, keys, "num_classes", c.num_classes);
  detail::take(j, keys, "class_skew", c.class_skew);
  detail::take(j, keys, "min_objects", c.min_objects);
  detail::take(j, keys, "max_objects", c.max_objects);
  detail::take(j, keys, "min_object_size", c.min_object_size);
  detail::take(j, keys, "max_object_size", c.max_object_size);
  detail::take(j, keys, "max_aspect", c.max_aspect);
  detail::take(j, keys, "federated_fraction", c.federated_fraction);
  detail::take(j, keys, "signature_dims", c.signature_dims);
  detail::take(j, keys, "signature_seed", c.signature_seed);
  detail::take(j, keys, "signature_noise", c.signature_noise);
  detail::take(j, keys, "feature_noise", c.feature_noise);
  if (j.contains("pyramid")) {
    c.pyramid = pyramid_from_json(j.at("pyramid"));
    keys.erase("pyramid");
  }
  detail::reject_unknown(keys, "data");
  c.validate();
  return c;
}

inline void save_dataset(const SceneDataset& ds, const std::string& path, const json& extra = {}) {
  json j = dataset_to_json(ds);
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os << j.dump(1) << '\n';
}

inline SceneDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  return dataset_from_json(json::parse(is));
}

}  // namespace probdet
