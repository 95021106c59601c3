#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "deepedit/error.hpp"
#include "deepedit/eval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace deepedit;

namespace {

ModelParams small_model(int num_labels, double dropout = 0.1, std::uint64_t seed = 1) {
  ArchConfig cfg;
  cfg.in_channels = 1 + num_labels + 1;
  cfg.num_classes = num_labels + 1;
  cfg.base_width = 4;
  cfg.levels = 2;
  cfg.dropout_rate = dropout;
  SeededRng rng(seed);
  return init_model(cfg, rng);
}

LoadedCase synthetic(const std::string& id, std::uint64_t seed, Shape3D shape = Shape3D(8, 8, 8)) {
  SynthConfig cfg;
  cfg.shape = shape;
  cfg.min_radius = 1.0;
  cfg.max_radius = 3.0;
  SeededRng rng(seed);
  auto [img, lab] = generate_synthetic_case(cfg, rng);
  return {id, img, lab};
}

}  // namespace

TEST_CASE("dice closed forms") {
  const Shape3D s(1, 1, 4);
  const LabelMap a(s, 1, std::vector<std::uint8_t>{1, 0, 0, 0});
  const LabelMap b(s, 1, std::vector<std::uint8_t>{1, 1, 0, 0});
  const LabelMap c(s, 1, std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK(dice(b, b, 1) == 1.0);
  CHECK(dice(b, c, 1) == 0.0);
  CHECK(dice(a, b, 1) == doctest::Approx(2.0 / 3.0));
  const LabelMap empty(s, 1);
  const DiceResult r = dice_score(empty, empty, 1);
  CHECK(r.value == 1.0);
  CHECK(r.both_empty);
  CHECK_FALSE(dice_score(a, b, 1).both_empty);
  CHECK_THROWS_AS(dice(a, LabelMap(Shape3D(1, 1, 5), 1), 1), Error);
}

TEST_CASE("dice equals brute-force counting and is symmetric") {
  SeededRng rng(11);
  int empties = 0;
  for (int trial = 0; trial < 200; ++trial) {
    // Sparse maps make the both-empty case reachable.
    const double density = trial % 4 == 0 ? 0.002 : 0.5;
    LabelMap a(Shape3D(8, 8, 8), 3), b(Shape3D(8, 8, 8), 3);
    for (auto* m : {&a, &b})
      for (auto& v : m->data()) v = rng.uniform() < density ? static_cast<std::uint8_t>(1 + rng.below(3)) : 0;
    for (int k = 1; k <= 3; ++k) {
      bool empty = false;
      const double expect = oracle::dice_oracle(a, b, k, empty);
      const DiceResult got = dice_score(a, b, k);
      CHECK(got.value == expect);
      CHECK(got.both_empty == empty);
      CHECK(dice(b, a, k) == got.value);
      empties += empty;
    }
  }
  CHECK(empties > 0);
}

TEST_CASE("predict_auto equals prediction with no clicks and is deterministic") {
  const ModelParams p = small_model(2);
  const LoadedCase c = synthetic("a", 1);
  const LabelMap auto1 = predict_auto(p, c.image);
  CHECK(auto1 == predict_auto(p, c.image));
  CHECK(auto1 == predict_with_clicks(p, c.image, ClickSet{2, {}}));
  for (auto v : auto1.data()) CHECK(v <= 2);
  CHECK(auto1.num_labels() == 2);

  // Whitening first changes the input by rounding only.
  const LabelMap pre = predict_auto(p, whiten(c.image));
  std::size_t same = 0;
  for (std::size_t i = 0; i < pre.voxels(); ++i) same += pre.data()[i] == auto1.data()[i];
  CHECK(static_cast<double>(same) / pre.voxels() >= 0.99);
}

TEST_CASE("click order and duplicates do not change the prediction") {
  const ModelParams p = small_model(2);
  const LoadedCase c = synthetic("a", 2);
  const ClickSet a{2, {{1, 1, 2, 3}, {2, 6, 6, 6}, {0, 4, 0, 7}}};
  const ClickSet b{2, {a.clicks[1], a.clicks[2], a.clicks[0], a.clicks[1]}};
  CHECK(predict_with_clicks(p, c.image, a) == predict_with_clicks(p, c.image, b));
  CHECK_THROWS_AS(predict_with_clicks(p, c.image, ClickSet{2, {{1, 8, 0, 0}}}), Error);
  CHECK_THROWS_AS(predict_with_clicks(p, c.image, ClickSet{3, {{1, 0, 0, 0}}}), Error);
}

TEST_CASE("click budget protocol accounting") {
  const ModelParams p = small_model(2);
  const LoadedCase c = synthetic("a", 3);
  const std::vector<int> budgets{0, 1, 3, 6};
  SeededRng rng(4);
  const auto points = run_click_budget(p, c.image, *c.labels, budgets, {}, rng);
  REQUIRE(points.size() == 4);
  const LabelMap auto_pred = predict_auto(p, c.image);
  CHECK(points[0].clicks_placed == 0);
  CHECK(points[0].dice[0].value == dice(auto_pred, *c.labels, 1));
  CHECK(points[0].dice[1].value == dice(auto_pred, *c.labels, 2));
  for (std::size_t i = 0; i < points.size(); ++i) {
    CHECK(points[i].clicks_placed <= budgets[i]);
    if (i > 0) CHECK(points[i].clicks_placed >= points[i - 1].clicks_placed);
  }
  // An untrained model leaves discrepancies, so every budget is used.
  CHECK(points.back().clicks_placed == 6);
}

TEST_CASE("perfect predictions place no clicks and score 1 at every budget") {
  const ModelParams p = small_model(2);
  const LoadedCase c = synthetic("a", 5);
  const LabelMap gt = predict_auto(p, c.image);
  SeededRng rng(6);
  const std::vector<int> budgets{0, 1, 5, 10};
  for (const auto& pt : run_click_budget(p, c.image, gt, budgets, {}, rng)) {
    CHECK(pt.clicks_placed == 0);
    for (const auto& d : pt.dice) CHECK(d.value == 1.0);
  }
}

TEST_CASE("evaluation is reproducible and reports both formats") {
  const ModelParams p = small_model(2);
  std::vector<LoadedCase> cases{synthetic("b", 7), synthetic("a", 8)};
  EvalConfig cfg;
  cfg.click_budgets = {0, 2};
  cfg.repetitions = 2;
  const EvalReport r1 = evaluate(p, cases, cfg);
  const EvalReport r2 = evaluate(p, cases, cfg);
  CHECK(to_json(r1).dump() == to_json(r2).dump());
  CHECK(to_csv(r1) == to_csv(r2));
  CHECK(r1.rows.size() == 2 * 2 * 2);
  for (const auto& row : r1.rows) {
    CHECK(row.dice_mean >= 0.0);
    CHECK(row.dice_mean <= 1.0);
    CHECK(row.dice_std >= 0.0);
  }
  const std::string csv = to_csv(r1);
  CHECK(csv.rfind("case_id,label,budget,dice_mean,dice_std,empty_convention_used\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);

  // Repetition streams depend on the case id, not on its position.
  std::vector<LoadedCase> reversed{cases[1], cases[0]};
  const EvalReport r3 = evaluate(p, reversed, cfg);
  for (const auto& row : r1.rows) {
    const auto it = std::find_if(r3.rows.begin(), r3.rows.end(), [&](const BudgetRow& o) {
      return o.case_id == row.case_id && o.label == row.label && o.budget == row.budget;
    });
    REQUIRE(it != r3.rows.end());
    CHECK(it->dice_mean == row.dice_mean);
  }

  cases.push_back({"u", cases[0].image, std::nullopt});
  CHECK_THROWS_AS(evaluate(p, cases, cfg), Error);
}

TEST_CASE("eval config validation") {
  EvalConfig cfg;
  cfg.click_budgets = {5, 1};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.click_budgets = {1, 1};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.click_budgets = {-1};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.click_budgets = {0};
  cfg.repetitions = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("voxel-mean variance") {
  const std::vector<std::vector<float>> two{{0.0f, 0.5f}, {1.0f, 0.5f}};
  CHECK(voxel_mean_variance(two) == doctest::Approx(0.125));
  const std::vector<std::vector<float>> single{{0.0f}, {1.0f}};
  CHECK(voxel_mean_variance(single) == 0.25);
  CHECK(voxel_mean_variance(std::vector<std::vector<float>>{{0.3f}}) == 0.0);

  SeededRng rng(3);
  std::vector<std::vector<float>> s(6, std::vector<float>(50));
  for (auto& v : s)
    for (float& x : v) x = static_cast<float>(rng.uniform());
  const double base = voxel_mean_variance(s);
  std::reverse(s.begin(), s.end());
  std::swap(s[1], s[4]);
  CHECK(std::abs(voxel_mean_variance(s) - base) < 1e-12);
}

TEST_CASE("epistemic uncertainty edge cases") {
  const LoadedCase c = synthetic("a", 9);
  SeededRng rng(1);
  CHECK(epistemic_uncertainty(small_model(2, 0.3), c.image, 1, rng) == 0.0);
  CHECK(epistemic_uncertainty(small_model(2, 0.0), c.image, 5, rng) == 0.0);
  CHECK(epistemic_uncertainty(small_model(2, 0.3), c.image, 5, rng) > 0.0);
  CHECK_THROWS_AS(epistemic_uncertainty(small_model(2), c.image, 0, rng), Error);
}

TEST_CASE("aleatoric uncertainty is zero for constant outputs and non-negative otherwise") {
  const LoadedCase c = synthetic("a", 10);
  ModelParams flat = small_model(2);
  for (auto& t : flat.tensors) {
    std::fill(t.weight.begin(), t.weight.end(), 0.0f);
    std::fill(t.bias.begin(), t.bias.end(), 0.25f);
  }
  CHECK(aleatoric_uncertainty(flat, c.image) == 0.0);
  SeededRng rng(2);
  CHECK(epistemic_uncertainty(flat, c.image, 4, rng) == 0.0);
  CHECK(aleatoric_uncertainty(small_model(2), c.image) >= 0.0);
}

TEST_CASE("score_case combines and is deterministic") {
  const LoadedCase c = synthetic("a", 11);
  const ModelParams p = small_model(2, 0.2);
  const UncertaintyScore a = score_case(p, c, 4, 7);
  const UncertaintyScore b = score_case(p, c, 4, 7);
  CHECK(a.epistemic == b.epistemic);
  CHECK(a.combined == a.epistemic + a.aleatoric);
  const UncertaintyScore back = uncertainty_score_from_json(to_json(a));
  CHECK(back.combined == a.combined);
  CHECK(back.case_id == "a");
}

TEST_CASE("rank_unlabeled ordering") {
  CHECK(rank_unlabeled({}, RankKey::kCombined).empty());
  const std::vector<UncertaintyScore> s{{"x", 0.3, 0.0, 0.3}, {"y", 0.1, 0.0, 0.1}, {"z", 0.2, 0.0, 0.2}};
  CHECK(rank_unlabeled(s, RankKey::kEpistemic) == std::vector<std::string>{"x", "z", "y"});
  const std::vector<UncertaintyScore> tie{{"b", 0.0, 0.5, 0.5}, {"a", 0.0, 0.5, 0.5}, {"c", 0.0, 0.9, 0.9}};
  CHECK(rank_unlabeled(tie, RankKey::kAleatoric) == std::vector<std::string>{"c", "a", "b"});
  CHECK(parse_rank_key("combined") == RankKey::kCombined);
  CHECK_THROWS_AS(parse_rank_key("bogus"), Error);

  SeededRng rng(5);
  std::vector<UncertaintyScore> many;
  for (int i = 0; i < 50; ++i) {
    const double e = std::floor(rng.uniform() * 10) / 10;
    many.push_back({"c" + std::to_string(i), e, 0.0, e});
  }
  const auto order = rank_unlabeled(many, RankKey::kCombined);
  REQUIRE(order.size() == many.size());
  CHECK(std::set<std::string>(order.begin(), order.end()).size() == many.size());
  auto score_of = [&](const std::string& id) {
    return std::find_if(many.begin(), many.end(), [&](const auto& s) { return s.case_id == id; })->combined;
  };
  for (std::size_t i = 1; i < order.size(); ++i) {
    const double a = score_of(order[i - 1]), b = score_of(order[i]);
    CHECK(a >= b);
    if (a == b) CHECK(order[i - 1] < order[i]);
  }
}
