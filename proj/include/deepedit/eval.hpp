#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "deepedit/backbone.hpp"
#include "deepedit/guidance.hpp"
#include "deepedit/tensor.hpp"
#include "deepedit/volume_io.hpp"

namespace deepedit {

struct DiceResult {
  double value = 0.0;
  /// True when both masks are empty and value is the 1.0 convention.
  bool both_empty = false;
};

DiceResult dice_score(const LabelMap& pred, const LabelMap& gt, int label);
double dice(const LabelMap& pred, const LabelMap& gt, int label);

/// Number of foreground labels the model segments (num_classes - 1).
int model_num_labels(const ModelParams& params);

/// Both whiten the image internally, so raw and whitened input agree.
LabelMap predict_auto(const ModelParams& params, const Volume& image, const GuidanceConfig& gcfg = {});
LabelMap predict_with_clicks(const ModelParams& params, const Volume& image, const ClickSet& clicks,
                             const GuidanceConfig& gcfg = {});

struct EvalConfig {
  std::vector<int> click_budgets{0, 1, 5, 10};
  int repetitions = 3;
  std::uint64_t seed = 0;
  GuidanceConfig guidance;

  /// Budgets must be non-negative, ascending and distinct.
  void validate() const;
};

nlohmann::json to_json(const EvalConfig& cfg);

/// One budget of one repetition.
struct BudgetPoint {
  int budget = 0;
  int clicks_placed = 0;
  std::vector<DiceResult> dice;  // index label-1
};

/// A single repetition of the growing-click protocol: corrective clicks are
/// added one at a time against the current prediction until the budget is
/// reached or prediction matches gt.
std::vector<BudgetPoint> run_click_budget(const ModelParams& params, const Volume& image, const LabelMap& gt,
                                          std::span<const int> budgets, const GuidanceConfig& gcfg,
                                          SeededRng& rng);

struct BudgetRow {
  std::string case_id;
  int label = 0;
  int budget = 0;
  double dice_mean = 0.0;
  double dice_std = 0.0;  // population std over repetitions
  bool empty_convention_used = false;
  double clicks_mean = 0.0;
};

/// Rng per repetition derives from (seed, case_id, repetition) only.
std::vector<BudgetRow> evaluate_click_budget(const ModelParams& params, const LoadedCase& c, const EvalConfig& cfg);

struct EvalReport {
  EvalConfig config;
  std::vector<BudgetRow> rows;

  /// Mean of dice_mean over all cases and labels at a budget.
  double grand_mean(int budget) const;
  double grand_mean(int budget, int label) const;
};

/// Throws kInvalidArgument for any unlabeled case.
EvalReport evaluate(const ModelParams& params, std::span<const LoadedCase> cases, const EvalConfig& cfg);

nlohmann::json to_json(const EvalReport& report);
/// Header `case_id,label,budget,dice_mean,dice_std,empty_convention_used`.
std::string to_csv(const EvalReport& report);

/// Population variance across samples per voxel, averaged over voxels. All
/// samples must have equal length; fewer than two samples give 0.
double voxel_mean_variance(std::span<const std::vector<float>> samples);

/// MC-dropout score over T train-mode passes with zero guidance.
double epistemic_uncertainty(const ModelParams& params, const Volume& image, int passes, SeededRng& rng);
/// Spread over identity, flips along z/y/x and the four (y,x) rotations, each
/// output mapped back before comparison.
double aleatoric_uncertainty(const ModelParams& params, const Volume& image);

struct UncertaintyScore {
  std::string case_id;
  double epistemic = 0.0;
  double aleatoric = 0.0;
  double combined = 0.0;
};

UncertaintyScore score_case(const ModelParams& params, const LoadedCase& c, int passes, std::uint64_t seed);

enum class RankKey { kEpistemic, kAleatoric, kCombined };

RankKey parse_rank_key(std::string_view text);
std::string_view rank_key_name(RankKey key);
double score_for(const UncertaintyScore& s, RankKey key);

/// Descending by key, ties by case_id ascending.
std::vector<std::string> rank_unlabeled(std::span<const UncertaintyScore> scores, RankKey key);

nlohmann::json to_json(const UncertaintyScore& s);
UncertaintyScore uncertainty_score_from_json(const nlohmann::json& j);

}  // namespace deepedit
