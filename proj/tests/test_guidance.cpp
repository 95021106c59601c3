#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "deepedit/error.hpp"
#include "deepedit/guidance.hpp"
#include "deepedit/volume_io.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace deepedit;

namespace {

Volume flip_all(const Volume& v, Axis ax) { return flip(v, ax); }

}  // namespace

TEST_CASE("click JSON round trip and malformed input") {
  const ClickSet cs{2, {{1, 3, 4, 5}, {0, 0, 0, 0}}};
  CHECK(click_set_from_json(to_json(cs)) == cs);
  CHECK_THROWS_AS(click_set_from_json(nlohmann::json::parse(R"({"clicks":[]})")), Error);
  CHECK_THROWS_AS(click_set_from_json(nlohmann::json::parse(R"({"num_labels":2,"clicks":[{"label":1}]})")), Error);
  CHECK_THROWS_AS(click_set_from_json(nlohmann::json::parse("[1,2]")), Error);
}

TEST_CASE("rasterize sets click voxels in the right channels") {
  const Shape3D s(4, 4, 4);
  const ClickSet cs{2, {{1, 0, 1, 2}, {2, 3, 3, 3}, {0, 1, 1, 1}}};
  const Volume r = rasterize_clicks(cs, s);
  CHECK(r.channels() == 3);
  CHECK(r.at(0, 0, 1, 2) == 1.0f);
  CHECK(r.at(1, 3, 3, 3) == 1.0f);
  CHECK(r.at(2, 1, 1, 1) == 1.0f);
  double total = 0.0;
  for (float v : r.data()) total += v;
  CHECK(total == 3.0);
  CHECK_THROWS_AS(rasterize_clicks(ClickSet{2, {{1, 4, 0, 0}}}, s), Error);
  CHECK_THROWS_AS(rasterize_clicks(ClickSet{2, {{3, 0, 0, 0}}}, s), Error);
}

TEST_CASE("smooth_guidance peak is 0 or 1 per channel") {
  const Shape3D s(12, 12, 12);
  SeededRng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    ClickSet cs{2, {}};
    const int n = static_cast<int>(rng.below(5));
    for (int i = 0; i < n; ++i) {
      cs.clicks.push_back({static_cast<int>(rng.below(3)), static_cast<long long>(rng.below(12)),
                           static_cast<long long>(rng.below(12)), static_cast<long long>(rng.below(12))});
    }
    const Volume g = make_guidance(cs, s, {});
    for (std::size_t c = 0; c < g.channels(); ++c) {
      const auto ch = g.channel(c);
      const float peak = *std::max_element(ch.begin(), ch.end());
      CHECK((peak == 0.0f || peak == 1.0f));
    }
  }
}

TEST_CASE("smoothing commutes exactly with flips") {
  const Shape3D s(9, 10, 11);
  const ClickSet cs{2, {{1, 2, 3, 4}, {1, 7, 1, 9}, {2, 0, 9, 10}, {0, 4, 4, 4}}};
  const Volume raster = rasterize_clicks(cs, s);
  for (Axis ax : {Axis::kZ, Axis::kY, Axis::kX}) {
    CHECK(smooth_guidance(flip_all(raster, ax), {}) == flip(smooth_guidance(raster, {}), ax));
  }
}

TEST_CASE("two-click field matches the direct truncated Gaussian") {
  const Shape3D s(16, 16, 16);
  const ClickSet cs{1, {{1, 5, 6, 4}, {1, 9, 8, 10}}};
  const GuidanceConfig cfg;
  const Volume g = make_guidance(cs, s, cfg);
  const auto expect = oracle::direct_field(cs, 1, s, cfg.sigma, cfg.radius);
  // Midpoint of the two clicks.
  CHECK(std::abs(g.at(0, 7, 7, 7) - expect[s.index(7, 7, 7)]) < 1e-6);
  double worst = 0.0;
  for (std::size_t i = 0; i < s.voxels(); ++i) worst = std::max(worst, std::abs(g.channel(0)[i] - expect[i]));
  CHECK(worst < 1e-6);
}

TEST_CASE("a click near the border is truncated, not renormalized") {
  const Shape3D s(8, 8, 8);
  const ClickSet cs{1, {{0, 0, 0, 0}}};
  const Volume g = make_guidance(cs, s, {});
  const auto expect = oracle::direct_field(cs, 0, s, 2.0, 5);
  for (std::size_t i = 0; i < s.voxels(); ++i) CHECK(std::abs(g.channel(1)[i] - expect[i]) < 1e-6);
  CHECK(g.at(1, 0, 0, 6) == 0.0f);  // beyond the radius
}

TEST_CASE("guidance is independent of click order and duplicates") {
  const Shape3D s(8, 8, 8);
  const ClickSet a{2, {{1, 1, 1, 1}, {2, 5, 5, 5}, {0, 3, 6, 2}}};
  ClickSet b{2, {a.clicks[2], a.clicks[0], a.clicks[1], a.clicks[0]}};
  CHECK(make_guidance(a, s, {}) == make_guidance(b, s, {}));
}

TEST_CASE("guidance config validation") {
  CHECK_THROWS_AS(GuidanceConfig({0.0, 5}).validate(), Error);
  CHECK_THROWS_AS(GuidanceConfig({3.0, 5}).validate(), Error);
  CHECK_NOTHROW(GuidanceConfig({2.0, 4}).validate());
}

TEST_CASE("discrepancy masks") {
  const Shape3D s(1, 1, 4);
  const LabelMap gt(s, 2, std::vector<std::uint8_t>{1, 1, 2, 0});
  const LabelMap pred(s, 2, std::vector<std::uint8_t>{1, 0, 1, 2});
  const Discrepancy d = compute_discrepancy(pred, gt);
  CHECK(d.false_negative[0].data()[1] == 1);
  CHECK(d.false_negative[0].count(1) == 1);
  CHECK(d.false_negative[1].data()[2] == 1);
  CHECK(d.false_positive[0].data()[2] == 1);
  CHECK(d.false_positive[1].data()[3] == 1);
  CHECK(d.false_positive[1].count(1) == 1);
}

TEST_CASE("initial clicks are round-robin inside each label") {
  SynthConfig cfg;
  cfg.shape = Shape3D(16, 16, 16);
  cfg.min_radius = 2.0;
  cfg.max_radius = 4.0;
  SeededRng rng(5);
  const auto [img, gt] = generate_synthetic_case(cfg, rng);
  SeededRng crng(6);
  const ClickSet cs = simulate_interaction_clicks(gt, std::nullopt, 5, crng);
  REQUIRE(cs.size() == 5);
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const Click& c = cs.clicks[i];
    CHECK(c.label == static_cast<int>(i % 2) + 1);
    CHECK(gt.at(c.z, c.y, c.x) == c.label);
  }
  SeededRng bad(0);
  CHECK_THROWS_AS(simulate_interaction_clicks(gt, std::nullopt, 0, bad), Error);
}

TEST_CASE("corrective clicks target the largest discrepancy first") {
  const Shape3D s(1, 10, 10);
  LabelMap gt(s, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) gt.at(0, y, x) = 1;  // 16-voxel FN when pred is empty
  LabelMap pred(s, 1);
  pred.at(0, 8, 8) = 1;  // 1-voxel FP
  pred.at(0, 8, 9) = 1;  // 2-voxel FP component
  SeededRng rng(7);
  const ClickSet one = simulate_interaction_clicks(gt, pred, 1, rng);
  REQUIRE(one.size() == 1);
  CHECK(one.clicks[0].label == 1);
  CHECK(gt.at(one.clicks[0].z, one.clicks[0].y, one.clicks[0].x) == 1);

  const ClickSet three = simulate_interaction_clicks(gt, pred, 3, rng);
  REQUIRE(three.size() == 3);
  CHECK(three.clicks[1].label == 0);
  CHECK(pred.at(three.clicks[1].z, three.clicks[1].y, three.clicks[1].x) == 1);
  CHECK(three.clicks[2].label == 1);  // cycles back to the largest

  SeededRng r2(8);
  CHECK(simulate_interaction_clicks(gt, gt, 3, r2).empty());
}

TEST_CASE("a confused label yields a label click, never a background click") {
  const Shape3D s(1, 4, 4);
  LabelMap gt(s, 2);
  for (std::size_t x = 0; x < 4; ++x) gt.at(0, 0, x) = 2;
  LabelMap pred = gt;
  for (std::size_t x = 0; x < 4; ++x) pred.at(0, 0, x) = 1;
  pred.at(0, 3, 3) = 1;  // genuine background FP
  SeededRng rng(4);
  const ClickSet cs = simulate_interaction_clicks(gt, pred, 4, rng);
  REQUIRE(cs.size() == 4);
  for (const Click& c : cs.clicks) {
    if (c.label == 0) {
      CHECK(gt.at(c.z, c.y, c.x) == 0);
    } else {
      CHECK(c.label == 2);
    }
  }
  CHECK(cs.clicks[0].label == 2);
  CHECK(cs.clicks[1].label == 0);
}

TEST_CASE("corrective clicks land uniformly inside the component") {
  const Shape3D s(1, 1, 8);
  const LabelMap gt(s, 1, std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0, 0, 0});
  const LabelMap pred(s, 1);
  SeededRng rng(9);
  std::vector<int> counts(4, 0);
  const int n = 4000;
  for (int i = 0; i < n; ++i) ++counts[simulate_interaction_clicks(gt, pred, 1, rng).clicks[0].x];
  // Each cell has expected 1000 and binomial sd ~27; allow 5 sd.
  for (int c : counts) CHECK(std::abs(c - 1000) < 140);
}

TEST_CASE("build_input stacks image then guidance") {
  const Volume img = testutil::random_volume(1, Shape3D(2, 2, 2), 1);
  const Volume g = zero_guidance(Shape3D(2, 2, 2), 2);
  const Volume in = build_input(img, g);
  CHECK(in.channels() == 4);
  CHECK(slice_channels(in, 0, 1) == img);
  CHECK_THROWS_AS(build_input(img, zero_guidance(Shape3D(2, 2, 4), 2)), Error);
}
