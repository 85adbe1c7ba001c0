#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "probdet/evalkit.hpp"

using namespace probdet;

namespace {

SceneDataset hand_dataset(std::size_t classes, std::vector<Scene> scenes) {
  SceneDataset ds;
  ds.config.num_classes = classes;
  for (std::size_t c = 0; c < classes; ++c) ds.classes.push_back({static_cast<int>(c), "c" + std::to_string(c), 0});
  ds.scenes = std::move(scenes);
  recount_frequencies(ds);
  return ds;
}

Scene scene_with(std::vector<GroundTruth> objs, std::vector<int> annotated) {
  Scene s;
  s.width = s.height = 64;
  s.objects = std::move(objs);
  s.annotated_classes = std::move(annotated);
  return s;
}

Box jitter(const Box& b, std::mt19937_64& g, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  return {b.x1 + u(g), b.y1 + u(g), b.x2 + u(g), b.y2 + u(g)};
}

}  // namespace

TEST(AveragePrecision, Examples) {
  const std::vector<Box> one{{0, 0, 10, 10}};
  const std::vector<ScoredBox> hit{{{0, 0, 10, 9}, 0.5}};
  EXPECT_DOUBLE_EQ(*average_precision(hit, one, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(*average_precision(std::vector<ScoredBox>{}, one, 0.5), 0.0);

  const std::vector<Box> two{{0, 0, 10, 10}, {20, 20, 30, 30}};
  const std::vector<ScoredBox> dets{{{0, 0, 10, 10}, 0.9}, {{40, 40, 50, 50}, 0.8}, {{20, 20, 30, 30}, 0.7}};
  EXPECT_NEAR(*average_precision(dets, two, 0.5), 0.5 + 0.5 * 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(oracle::ap({{dets[0].box, 0.9}, {dets[1].box, 0.8}, {dets[2].box, 0.7}}, two, 0.5), 0.8333, 1e-4);
}

TEST(AveragePrecision, NoGroundTruthIsExcluded) {
  const std::vector<ScoredBox> dets{{{0, 0, 1, 1}, 0.9}};
  EXPECT_FALSE(average_precision(dets, std::vector<Box>{}, 0.5).has_value());
}

TEST(AveragePrecision, DuplicateDetectionIsFalsePositive) {
  const std::vector<Box> one{{0, 0, 10, 10}};
  const std::vector<ScoredBox> dets{{{0, 0, 10, 10}, 0.9}, {{0, 0, 10, 10}, 0.8}};
  const auto m = match_detections(std::vector<EvalDetection>{{0, dets[0].box, 0.9}, {0, dets[1].box, 0.8}},
                                  {one}, std::vector<double>{0.5});
  EXPECT_EQ(m.tp[0][0], 1);
  EXPECT_EQ(m.tp[0][1], 0);
  EXPECT_DOUBLE_EQ(*average_precision(dets, one, 0.5), 1.0);
}

TEST(AveragePrecision, MatchesPrOracleOnRandomInstances) {
  std::mt19937_64 g(1);
  std::uniform_int_distribution<int> nd(0, 8), ng(1, 4), sc(0, 4);
  std::uniform_real_distribution<double> pos(0, 30);
  for (int t = 0; t < 1000; ++t) {
    std::vector<Box> gts;
    for (int i = ng(g); i > 0; --i) {
      const double x = pos(g), y = pos(g);
      gts.push_back({x, y, x + 6, y + 6});
    }
    std::vector<ScoredBox> dets;
    std::vector<oracle::Det> odets;
    for (int i = nd(g); i > 0; --i) {
      const Box b = jitter(gts[static_cast<std::size_t>(i) % gts.size()], g, 3.0);
      const double s = sc(g) / 4.0;
      dets.push_back({b, s});
      odets.push_back({b, s});
    }
    EXPECT_EQ(*average_precision(dets, gts, 0.5), oracle::ap(odets, gts, 0.5)) << "instance " << t;
  }
}

TEST(AveragePrecision, EqualScoresFormOneCutoff) {
  const std::vector<Box> gts{{0, 0, 10, 10}};
  const std::vector<ScoredBox> a{{{0, 0, 10, 10}, 0.5}, {{30, 30, 40, 40}, 0.5}};
  const std::vector<ScoredBox> b{{{30, 30, 40, 40}, 0.5}, {{0, 0, 10, 10}, 0.5}};
  EXPECT_DOUBLE_EQ(*average_precision(a, gts, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(*average_precision(b, gts, 0.5), 0.5);
}

TEST(AveragePrecision, OrderInsideTiesNeverMatters) {
  // ground truths far apart, so each detection can only ever match one of them
  std::mt19937_64 g(3);
  std::uniform_int_distribution<int> nd(1, 8), sc(0, 2);
  for (int t = 0; t < 1000; ++t) {
    const std::vector<Box> gts{{0, 0, 10, 10}, {100, 0, 110, 10}, {0, 100, 10, 110}};
    std::vector<ScoredBox> dets;
    for (int i = nd(g); i > 0; --i) dets.push_back({jitter(gts[g() % 3], g, 4.0), sc(g) / 2.0});
    const double base = *average_precision(dets, gts, 0.5);
    auto shuffled = dets;
    std::shuffle(shuffled.begin(), shuffled.end(), g);
    EXPECT_DOUBLE_EQ(*average_precision(shuffled, gts, 0.5), base) << "instance " << t;
  }
}

TEST(MeanAp, PerfectDetectionsGiveOne) {
  DatasetConfig cfg;
  cfg.num_scenes = 10;
  const auto ds = generate_dataset(cfg, 3);
  std::vector<std::vector<Detection>> dets(ds.scenes.size());
  for (std::size_t s = 0; s < ds.scenes.size(); ++s) {
    for (const auto& o : ds.scenes[s].objects) dets[s].push_back({o.box, o.class_id, 0.9, 0, 1});
  }
  const auto r = mean_ap(dets, ds);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_EQ(r.thresholds.size(), 10u);
}

TEST(MeanAp, SingleThresholdIsClassMean) {
  const auto ds = hand_dataset(2, {scene_with({{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 1}}, {0, 1})});
  std::vector<std::vector<Detection>> dets{{{{0, 0, 10, 10}, 0, 0.9, 0, 1}, {{40, 40, 50, 50}, 1, 0.8, 0, 1},
                                            {{20, 20, 30, 30}, 1, 0.4, 0, 1}}};
  const auto r = mean_ap(dets, ds, std::vector<double>{0.5});
  EXPECT_DOUBLE_EQ(*r.class_ap(0), 1.0);
  EXPECT_DOUBLE_EQ(*r.class_ap(1), 0.5);
  EXPECT_DOUBLE_EQ(r.map, 0.75);
}

TEST(MeanAp, FederatedScenesOnlyCountAnnotatedClasses) {
  // scene 1 does not annotate class 0, so a class-0 detection there is ignored
  const auto ds = hand_dataset(2, {scene_with({{{0, 0, 10, 10}, 0}}, {0, 1}), scene_with({{{0, 0, 10, 10}, 1}}, {1})});
  std::vector<std::vector<Detection>> dets{{{{0, 0, 10, 10}, 0, 0.5, 0, 1}},
                                           {{{30, 30, 40, 40}, 0, 0.9, 0, 1}, {{0, 0, 10, 10}, 1, 0.9, 0, 1}}};
  const auto r = mean_ap(dets, ds, std::vector<double>{0.5});
  EXPECT_DOUBLE_EQ(*r.class_ap(0), 1.0);
  EXPECT_DOUBLE_EQ(*r.class_ap(1), 1.0);
}

TEST(MeanAp, RandomThreeSceneFixtureMatchesOracle) {
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> pos(0, 50), u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Scene> scenes;
    for (int s = 0; s < 3; ++s) {
      std::vector<GroundTruth> objs;
      for (int k = 0; k < 3; ++k) {
        const double x = pos(g), y = pos(g);
        objs.push_back({{x, y, x + 8, y + 8}, static_cast<int>(g() % 3)});
      }
      std::vector<int> ann{0, 1, 2};
      if (s == 2) {
        ann.clear();
        for (const auto& o : objs) ann.push_back(o.class_id);
        std::sort(ann.begin(), ann.end());
        ann.erase(std::unique(ann.begin(), ann.end()), ann.end());
      }
      scenes.push_back(scene_with(objs, ann));
    }
    const auto ds = hand_dataset(3, scenes);
    std::vector<std::vector<Detection>> dets(3);
    for (std::size_t s = 0; s < 3; ++s) {
      for (const auto& o : ds.scenes[s].objects) {
        for (int r = 0; r < 2; ++r) {
          const int cls = u(g) < 0.8 ? o.class_id : static_cast<int>(g() % 3);
          dets[s].push_back({jitter(o.box, g, 2.5), cls, std::round(u(g) * 8) / 8, 0, 1});
        }
      }
    }
    const std::vector<double> thr{0.5, 0.75};
    const auto r = mean_ap(dets, ds, thr);
    // oracle: shift scene s by 1000 s so that cross-scene IoU vanishes
    double total = 0.0;
    for (double t : thr) {
      double sum = 0.0;
      int n = 0;
      for (int c = 0; c < 3; ++c) {
        std::vector<oracle::Det> od;
        std::vector<Box> gts;
        for (std::size_t s = 0; s < 3; ++s) {
          if (!ds.scenes[s].is_annotated(c)) continue;
          const double off = 1000.0 * static_cast<double>(s);
          auto shift = [&](const Box& b) { return Box{b.x1 + off, b.y1, b.x2 + off, b.y2}; };
          for (const auto& o : ds.scenes[s].objects) {
            if (o.class_id == c) gts.push_back(shift(o.box));
          }
          for (const auto& d : dets[s]) {
            if (d.class_id == c) od.push_back({shift(d.box), d.score});
          }
        }
        if (gts.empty()) continue;
        sum += oracle::ap(od, gts, t);
        ++n;
      }
      total += n ? sum / n : 0.0;
    }
    EXPECT_NEAR(r.map, total / static_cast<double>(thr.size()), 1e-12) << "trial " << trial;
  }
}

TEST(ProposalRecall, Examples) {
  const auto ds = hand_dataset(1, {scene_with({{{0, 0, 10, 10}, 0}, {{20, 20, 30, 30}, 0}}, {0})});
  std::vector<std::vector<Proposal>> exact{{{{0, 0, 10, 10}, 0.9}, {{20, 20, 30, 30}, 0.8}}};
  EXPECT_DOUBLE_EQ(proposal_recall(exact, ds, 256), 1.0);
  std::vector<std::vector<Proposal>> half{{{{0, 0, 10, 10}, 0.9}, {{40, 40, 50, 50}, 0.8}}};
  EXPECT_DOUBLE_EQ(proposal_recall(half, ds, 256), 0.5);
  EXPECT_DOUBLE_EQ(proposal_recall(exact, ds, 1), 0.5);
}

TEST(ProposalRecall, FourSceneFixtureHandCounted) {
  // Each scene has 2 objects. Proposals are listed best first; filler boxes
  // cover nothing. Covering proposals sit at the ranks noted below.
  std::vector<Scene> scenes;
  std::vector<std::vector<Proposal>> props(4);
  const std::vector<std::vector<std::size_t>> cover_rank{{0, 40}, {5, 20}, {7, 8}, {31, 32}};
  for (std::size_t s = 0; s < 4; ++s) {
    scenes.push_back(scene_with({{{0, 0, 10, 10}, 0}, {{30, 30, 40, 40}, 0}}, {0}));
    for (std::size_t r = 0; r < 48; ++r) {
      Box b{50, 50, 52, 52};
      if (r == cover_rank[s][0]) b = {0, 0, 10, 11};
      if (r == cover_rank[s][1]) b = {30, 30, 41, 40};
      props[s].push_back({b, 1.0 - 0.01 * static_cast<double>(r)});
    }
  }
  const auto ds = hand_dataset(1, scenes);
  // K = 8: scene0 1, scene1 1, scene2 1, scene3 0 -> 3 of 8
  EXPECT_DOUBLE_EQ(proposal_recall(props, ds, 8), 3.0 / 8.0);
  // K = 32: scene0 1, scene1 2, scene2 2, scene3 1 -> 6 of 8
  EXPECT_DOUBLE_EQ(proposal_recall(props, ds, 32), 6.0 / 8.0);
}

TEST(RareClasses, BottomTercileByFrequency) {
  DatasetConfig cfg;
  cfg.num_classes = 9;
  cfg.class_skew = 1.5;
  cfg.num_scenes = 300;
  const auto ds = generate_dataset(cfg, 2);
  const auto rare = rare_classes(ds);
  EXPECT_EQ(rare.size(), 3u);
  for (int r : rare) {
    std::size_t more = 0;
    for (const auto& c : ds.classes) more += c.frequency > ds.classes[static_cast<std::size_t>(r)].frequency;
    EXPECT_GE(more, 6u);
  }
}

TEST(Experiment, VariantsCoverEveryCondition) {
  const TrainConfig base;
  const auto pa = experiment_variants(ExperimentKind::prob_ablation, base);
  ASSERT_EQ(pa.size(), 4u);
  EXPECT_EQ(pa[2].train.assignment, AssignmentMode::recall);
  EXPECT_EQ(pa[3].scoring, ScoringMode::baseline);
  const auto ss = experiment_variants(ExperimentKind::stage_style, base);
  ASSERT_EQ(ss.size(), 3u);
  EXPECT_TRUE(ss[0].train.cascade_thresholds.empty());
  EXPECT_TRUE(ss[0].train.first_stage_class_head);
  const auto fl = experiment_variants(ExperimentKind::federated_loss, base);
  EXPECT_EQ(fl[1].train.class_loss, ClassLoss::federated);
  EXPECT_EQ(experiment_kind_from_string("proposal_sweep"), ExperimentKind::proposal_sweep);
  EXPECT_THROW(experiment_kind_from_string("nope"), std::invalid_argument);
}

TEST(Experiment, SmallSweepReportsEveryBudgetWithMonotoneRecall) {
  ExperimentConfig cfg;
  cfg.data.num_scenes = 16;
  cfg.eval_scenes = 8;
  cfg.seeds = {1};
  cfg.train.iterations = 30;
  cfg.train.batch_size = 4;
  cfg.budgets = {64, 16, 4};
  const auto rep = run_experiment(ExperimentKind::proposal_sweep, cfg);
  EXPECT_EQ(rep.seed_rows.size(), 6u);
  EXPECT_EQ(rep.median_rows.size(), 6u);
  for (const char* c : {"center_fused", "recall_nonfused"}) {
    EXPECT_GE(rep.median(c, 64).recall, rep.median(c, 16).recall);
    EXPECT_GE(rep.median(c, 16).recall, rep.median(c, 4).recall);
  }
  std::ostringstream os;
  write_report_csv(os, rep.median_rows, false);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "condition,K,mAP,AR,rare_mAP,train_seconds");
}

TEST(Experiment, CacheSharesTrainings) {
  ExperimentConfig cfg;
  cfg.data.num_scenes = 8;
  cfg.eval_scenes = 4;
  cfg.seeds = {1};
  cfg.train.iterations = 5;
  cfg.train.batch_size = 2;
  ModelCache cache;
  run_experiment(ExperimentKind::prob_ablation, cfg, &cache);
  EXPECT_EQ(cache.size(), 4u);
  run_experiment(ExperimentKind::proposal_sweep, cfg, &cache);
  EXPECT_EQ(cache.size(), 4u);
}

TEST(Median, OddAndEven) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
}
