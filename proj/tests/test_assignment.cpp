#include <gtest/gtest.h>

#include <limits>
#include <vector>

#include "probdet/assignment.hpp"
#include "probdet/synthdata.hpp"

using namespace probdet;

namespace {

Pyramid two_level() {
  return {{{4.0, 0.0, 32.0}, {8.0, 32.0, std::numeric_limits<double>::infinity()}}, 4.0};
}

std::size_t positives_for(const LabelGrid& g, int k) {
  std::size_t n = 0;
  for (const auto& c : g.cells) n += c.state == CellState::positive && c.object == k;
  return n;
}

}  // namespace

TEST(Pyramid, LevelBySize) {
  const auto p = two_level();
  EXPECT_EQ(p.level_for_extent(20), 0u);
  EXPECT_EQ(p.level_for_extent(32), 0u);
  EXPECT_EQ(p.level_for_extent(33), 1u);
  const auto d = Pyramid::desk_default();
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(d.level_for_extent(16), 0u);
  EXPECT_EQ(d.level_for_extent(17), 1u);
  EXPECT_EQ(d.level_for_extent(100), 2u);
}

TEST(Pyramid, ValidateRejectsBadLayouts) {
  Pyramid p = two_level();
  p.levels[1].stride = 2.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p = two_level();
  p.levels[1].min_size = 30.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(CenterStyle, ObjectGoesToItsSizeLevel) {
  const std::vector<GroundTruth> objs{{{10, 10, 30, 30}, 0}};
  const auto labels = assign_center_style(objs, two_level(), 64, 64);
  EXPECT_GE(positives_for(labels[0], 0), 1u);
  EXPECT_EQ(positives_for(labels[1], 0), 0u);
}

TEST(CenterStyle, LargeCenteredObjectFillsNeighborhood) {
  // center (18, 18) is the center of cell (4, 4) at stride 4
  const std::vector<GroundTruth> objs{{{6, 6, 30, 30}, 0}};
  const auto labels = assign_center_style(objs, two_level(), 64, 64);
  EXPECT_EQ(positives_for(labels[0], 0), 9u);
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      const auto& cell = labels[0].at(4 + dr, 4 + dc);
      EXPECT_EQ(cell.state, CellState::positive);
      const Point a = two_level().cell_center(0, 4 + dr, 4 + dc);
      EXPECT_EQ(decode_ltrb(a, cell.target), objs[0].box);
    }
  }
  EXPECT_EQ(count_state(labels, CellState::positive), 9u);
  EXPECT_EQ(count_state(labels, CellState::ignore), 0u);
}

TEST(CenterStyle, SmallObjectKeepsOnlyInteriorNeighbors) {
  // 3x3 object around the center of cell (4, 4); no neighbor anchor lies inside
  const std::vector<GroundTruth> objs{{{16.5, 16.5, 19.5, 19.5}, 0}};
  const auto labels = assign_center_style(objs, two_level(), 64, 64);
  EXPECT_EQ(positives_for(labels[0], 0), 1u);
  EXPECT_EQ(labels[0].at(4, 4).state, CellState::positive);
}

TEST(CenterStyle, EmptySceneAllNegative) {
  const auto labels = assign_center_style(std::vector<GroundTruth>{}, two_level(), 64, 64);
  EXPECT_EQ(count_state(labels, CellState::positive), 0u);
  EXPECT_EQ(count_state(labels, CellState::ignore), 0u);
  EXPECT_EQ(labels[0].cells.size(), 256u);
  EXPECT_EQ(labels[1].cells.size(), 64u);
}

TEST(CenterStyle, CollisionSmallerObjectWins) {
  // both centers fall in cell (4, 4) at stride 4
  const std::vector<GroundTruth> objs{{{12, 12, 24, 24}, 0}, {{16.5, 16.5, 19.5, 19.5}, 1}};
  const auto labels = assign_center_style(objs, two_level(), 64, 64);
  EXPECT_EQ(labels[0].at(4, 4).state, CellState::positive);
  EXPECT_EQ(labels[0].at(4, 4).object, 1);
  EXPECT_EQ(positives_for(labels[0], 0), 0u);
  EXPECT_GT(count_state(labels, CellState::ignore), 0u);
}

TEST(CenterStyle, PredictionsCanRejectNeighbors) {
  const std::vector<GroundTruth> objs{{{6, 6, 30, 30}, 0}};
  const auto pyr = two_level();
  PyramidOffsets preds(2);
  preds[0].assign(256, LtrbOffsets{0.5, 0.5, 0.5, 0.5});
  preds[1].assign(64, LtrbOffsets{0.5, 0.5, 0.5, 0.5});
  CenterAssignOptions opt;
  opt.predictions = &preds;
  const auto labels = assign_center_style(objs, pyr, 64, 64, opt);
  // only the unconditional center survives when every neighbor predicts a tiny box
  EXPECT_EQ(positives_for(labels[0], 0), 1u);
}

TEST(RecallStyle, IdenticalCellBoxIsPositive) {
  // stride 4, base scale 4: the cell box at cell (4, 4) is (10, 10, 26, 26)
  const std::vector<GroundTruth> objs{{{10, 10, 26, 26}, 0}};
  const auto labels = assign_recall_style(objs, two_level(), 64, 64);
  EXPECT_EQ(labels[0].at(4, 4).state, CellState::positive);
  EXPECT_EQ(labels[0].at(4, 4).object, 0);
}

TEST(RecallStyle, IouJustAboveThresholdIsPositive) {
  // cell box (10,10,26,26) has area 256; an object (10,10,26,10+h) has IoU h/16
  const double h = 0.31 * 16;
  const std::vector<GroundTruth> objs{{{10, 10, 26, 10 + h}, 0}};
  ASSERT_NEAR(iou({10, 10, 26, 26}, objs[0].box), 0.31, 1e-12);
  const auto labels = assign_recall_style(objs, two_level(), 64, 64);
  EXPECT_EQ(labels[0].at(4, 4).state, CellState::positive);
  const auto below = assign_recall_style(std::vector<GroundTruth>{{{10, 10, 26, 10 + 0.29 * 16}, 0}}, two_level(), 64, 64);
  EXPECT_EQ(below[0].at(4, 4).state, CellState::negative);
}

TEST(RecallStyle, TargetsAreNonnegative) {
  const std::vector<GroundTruth> objs{{{10, 10, 26, 26}, 0}, {{40, 40, 60, 50}, 1}};
  const auto labels = assign_recall_style(objs, two_level(), 64, 64);
  for (const auto& g : labels) {
    for (const auto& c : g.cells) {
      if (c.state == CellState::positive) {
        EXPECT_TRUE(c.target.nonnegative());
      }
    }
  }
}

TEST(RecallStyle, EmptySceneAllNegative) {
  const auto labels = assign_recall_style(std::vector<GroundTruth>{}, two_level(), 64, 64);
  EXPECT_EQ(count_state(labels, CellState::positive), 0u);
}

TEST(AssignmentProperties, RandomScenes) {
  DatasetConfig cfg;
  cfg.num_scenes = 200;
  const auto ds = generate_dataset(cfg, 99);
  const auto& pyr = cfg.pyramid;
  for (const auto& s : ds.scenes) {
    const auto center = assign_center_style(s.objects, pyr, s.width, s.height);
    const auto recall = assign_recall_style(s.objects, pyr, s.width, s.height);
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const auto lvl = pyr.level_for_extent(s.objects[k].box.max_extent());
      for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
        const auto n = positives_for(center[l], static_cast<int>(k));
        if (l == lvl) {
          EXPECT_GE(n, 1u);
          EXPECT_LE(n, 9u);
        } else {
          EXPECT_EQ(n, 0u);
        }
      }
    }
    for (const auto& g : center) {
      for (std::size_t i = 0; i < g.cells.size(); ++i) {
        const auto& c = g.cells[i];
        if (c.state == CellState::positive) {
          EXPECT_TRUE(c.target.nonnegative());
        }
      }
    }
    EXPECT_GE(count_state(recall, CellState::positive), count_state(center, CellState::positive));
  }
}
