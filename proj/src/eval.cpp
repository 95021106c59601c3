#include "deepedit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "deepedit/error.hpp"

namespace deepedit {

using nlohmann::json;

DiceResult dice_score(const LabelMap& pred, const LabelMap& gt, int label) {
  if (!(pred.shape() == gt.shape())) {
    throw Error(ErrorKind::kShapeMismatch, "dice: " + pred.shape().str() + " vs " + gt.shape().str());
  }
  const auto p = pred.data();
  const auto g = gt.data();
  std::size_t np = 0, ng = 0, both = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool in_p = p[i] == label;
    const bool in_g = g[i] == label;
    np += in_p;
    ng += in_g;
    both += in_p && in_g;
  }
  if (np + ng == 0) return {1.0, true};
  return {2.0 * static_cast<double>(both) / static_cast<double>(np + ng), false};
}

double dice(const LabelMap& pred, const LabelMap& gt, int label) { return dice_score(pred, gt, label).value; }

int model_num_labels(const ModelParams& params) { return params.cfg.num_classes - 1; }

namespace {

Volume guidance_for(const ModelParams& params, const Shape3D& shape, const ClickSet& clicks,
                    const GuidanceConfig& gcfg) {
  const int L = model_num_labels(params);
  if (clicks.empty()) return zero_guidance(shape, L);
  if (clicks.num_labels != L) {
    throw Error(ErrorKind::kInvalidArgument, "clicks declare " + std::to_string(clicks.num_labels) +
                                                 " labels, model segments " + std::to_string(L));
  }
  clicks.validate(shape);
  return make_guidance(clicks, shape, gcfg);
}

Volume probabilities(const ModelParams& params, const Volume& image, const Volume& guidance) {
  return softmax_channels(infer(params, build_input(whiten(image), guidance)));
}

}  // namespace

LabelMap predict_auto(const ModelParams& params, const Volume& image, const GuidanceConfig& gcfg) {
  return predict_with_clicks(params, image, ClickSet{model_num_labels(params), {}}, gcfg);
}

LabelMap predict_with_clicks(const ModelParams& params, const Volume& image, const ClickSet& clicks,
                             const GuidanceConfig& gcfg) {
  const Volume g = guidance_for(params, image.shape(), clicks, gcfg);
  return argmax_channels(probabilities(params, image, g));
}

void EvalConfig::validate() const {
  if (repetitions < 1) throw Error(ErrorKind::kConfig, "repetitions must be >= 1");
  if (click_budgets.empty()) throw Error(ErrorKind::kConfig, "click_budgets must not be empty");
  for (std::size_t i = 0; i < click_budgets.size(); ++i) {
    if (click_budgets[i] < 0) throw Error(ErrorKind::kConfig, "click budgets must be non-negative");
    if (i > 0 && click_budgets[i] <= click_budgets[i - 1]) {
      throw Error(ErrorKind::kConfig, "click budgets must be strictly ascending");
    }
  }
  guidance.validate();
}

json to_json(const EvalConfig& cfg) {
  return {{"click_budgets", cfg.click_budgets}, {"repetitions", cfg.repetitions}, {"seed", cfg.seed},
          {"sigma", cfg.guidance.sigma}, {"radius", cfg.guidance.radius}};
}

std::vector<BudgetPoint> run_click_budget(const ModelParams& params, const Volume& image, const LabelMap& gt,
                                          std::span<const int> budgets, const GuidanceConfig& gcfg,
                                          SeededRng& rng) {
  const int L = gt.num_labels();
  if (L != model_num_labels(params)) {
    throw Error(ErrorKind::kInvalidArgument, "ground truth has " + std::to_string(L) + " labels, model " +
                                                 std::to_string(model_num_labels(params)));
  }
  ClickSet clicks{L, {}};
  LabelMap pred = predict_with_clicks(params, image, clicks, gcfg);
  bool exhausted = false;
  std::vector<BudgetPoint> out;
  for (int b : budgets) {
    while (!exhausted && static_cast<int>(clicks.size()) < b) {
      const ClickSet next = simulate_interaction_clicks(gt, pred, 1, rng);
      if (next.empty()) {
        exhausted = true;
        break;
      }
      clicks.append(next);
      pred = predict_with_clicks(params, image, clicks, gcfg);
    }
    BudgetPoint pt{b, static_cast<int>(clicks.size()), {}};
    for (int l = 1; l <= L; ++l) pt.dice.push_back(dice_score(pred, gt, l));
    out.push_back(std::move(pt));
  }
  return out;
}

std::vector<BudgetRow> evaluate_click_budget(const ModelParams& params, const LoadedCase& c,
                                             const EvalConfig& cfg) {
  cfg.validate();
  if (!c.labels) throw Error(ErrorKind::kInvalidArgument, "case " + c.case_id + " has no ground truth");
  const int L = c.labels->num_labels();
  const std::size_t nb = cfg.click_budgets.size();
  // [budget][label] -> per-repetition values
  std::vector<std::vector<std::vector<double>>> values(nb, std::vector<std::vector<double>>(L));
  std::vector<std::vector<bool>> empty(nb, std::vector<bool>(L, false));
  std::vector<double> clicks(nb, 0.0);
  const std::uint64_t case_seed = mix_seed(cfg.seed, stable_hash(c.case_id));
  for (int r = 0; r < cfg.repetitions; ++r) {
    SeededRng rng(mix_seed(case_seed, static_cast<std::uint64_t>(r)));
    const auto points = run_click_budget(params, c.image, *c.labels, cfg.click_budgets, cfg.guidance, rng);
    for (std::size_t b = 0; b < nb; ++b) {
      clicks[b] += points[b].clicks_placed;
      for (int l = 0; l < L; ++l) {
        values[b][l].push_back(points[b].dice[l].value);
        if (points[b].dice[l].both_empty) empty[b][l] = true;
      }
    }
  }
  std::vector<BudgetRow> rows;
  for (int l = 0; l < L; ++l) {
    for (std::size_t b = 0; b < nb; ++b) {
      const auto& v = values[b][l];
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      var /= static_cast<double>(v.size());
      rows.push_back({c.case_id, l + 1, cfg.click_budgets[b], mean, std::sqrt(var), empty[b][l],
                      clicks[b] / cfg.repetitions});
    }
  }
  return rows;
}

double EvalReport::grand_mean(int budget) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.budget != budget) continue;
    sum += r.dice_mean;
    ++n;
  }
  return n ? sum / n : 0.0;
}

double EvalReport::grand_mean(int budget, int label) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.budget != budget || r.label != label) continue;
    sum += r.dice_mean;
    ++n;
  }
  return n ? sum / n : 0.0;
}

EvalReport evaluate(const ModelParams& params, std::span<const LoadedCase> cases, const EvalConfig& cfg) {
  cfg.validate();
  EvalReport report{cfg, {}};
  for (const LoadedCase& c : cases) {
    auto rows = evaluate_click_budget(params, c, cfg);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  return report;
}

json to_json(const EvalReport& report) {
  json rows = json::array();
  std::map<int, int> labels;
  for (const auto& r : report.rows) {
    rows.push_back({{"case_id", r.case_id}, {"label", r.label}, {"budget", r.budget}, {"dice_mean", r.dice_mean},
                    {"dice_std", r.dice_std}, {"empty_convention_used", r.empty_convention_used},
                    {"clicks_mean", r.clicks_mean}});
    labels[r.label] = 1;
  }
  json grand = json::object();
  for (int b : report.config.click_budgets) {
    json per_label = json::object();
    for (const auto& [l, _] : labels) per_label[std::to_string(l)] = report.grand_mean(b, l);
    grand[std::to_string(b)] = {{"mean", report.grand_mean(b)}, {"per_label", per_label}};
  }
  return {{"config", to_json(report.config)}, {"rows", rows}, {"grand_mean", grand}};
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "case_id,label,budget,dice_mean,dice_std,empty_convention_used\n";
  char buf[64];
  for (const auto& r : report.rows) {
    out << r.case_id << ',' << r.label << ',' << r.budget << ',';
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,", r.dice_mean, r.dice_std);
    out << buf << (r.empty_convention_used ? "true" : "false") << '\n';
  }
  return out.str();
}

double voxel_mean_variance(std::span<const std::vector<float>> samples) {
  if (samples.size() < 2) return 0.0;
  const std::size_t n = samples.front().size();
  for (const auto& s : samples) {
    if (s.size() != n) throw Error(ErrorKind::kShapeMismatch, "voxel_mean_variance: unequal sample sizes");
  }
  if (n == 0) return 0.0;
  const double t = static_cast<double>(samples.size());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (const auto& s : samples) sum += s[i];
    const double mean = sum / t;
    double sq = 0.0;
    for (const auto& s : samples) sq += (s[i] - mean) * (s[i] - mean);
    total += sq / t;
  }
  return total / static_cast<double>(n);
}

namespace {

std::vector<float> max_prob(const Volume& logits) {
  const Volume m = max_over_channels(softmax_channels(logits));
  return {m.data().begin(), m.data().end()};
}

}  // namespace

double epistemic_uncertainty(const ModelParams& params, const Volume& image, int passes, SeededRng& rng) {
  if (passes < 1) throw Error(ErrorKind::kInvalidArgument, "passes must be >= 1");
  if (passes < 2) return 0.0;
  const Volume input = build_input(whiten(image), zero_guidance(image.shape(), model_num_labels(params)));
  std::vector<std::vector<float>> samples;
  for (int t = 0; t < passes; ++t) {
    SeededRng pass_rng = rng.fork(static_cast<std::uint64_t>(t));
    samples.push_back(max_prob(forward(params, input, Mode::kTrain, pass_rng).logits));
  }
  return voxel_mean_variance(samples);
}

double aleatoric_uncertainty(const ModelParams& params, const Volume& image) {
  const Volume base = build_input(whiten(image), zero_guidance(image.shape(), model_num_labels(params)));
  std::vector<std::vector<float>> samples;
  auto run = [&](const Volume& in) { return softmax_channels(infer(params, in)); };
  auto keep = [&](const Volume& prob) {
    const Volume m = max_over_channels(prob);
    samples.emplace_back(m.data().begin(), m.data().end());
  };
  keep(run(base));
  for (Axis ax : {Axis::kY, Axis::kX, Axis::kZ}) keep(flip(run(flip(base, ax)), ax));
  for (int k = 0; k < 4; ++k) keep(rot90_yx(run(rot90_yx(base, k)), (4 - k) % 4));
  return voxel_mean_variance(samples);
}

UncertaintyScore score_case(const ModelParams& params, const LoadedCase& c, int passes, std::uint64_t seed) {
  SeededRng rng(mix_seed(seed, stable_hash(c.case_id)));
  UncertaintyScore s{c.case_id, epistemic_uncertainty(params, c.image, passes, rng),
                     aleatoric_uncertainty(params, c.image), 0.0};
  s.combined = s.epistemic + s.aleatoric;
  return s;
}

RankKey parse_rank_key(std::string_view text) {
  if (text == "epistemic") return RankKey::kEpistemic;
  if (text == "aleatoric") return RankKey::kAleatoric;
  if (text == "combined") return RankKey::kCombined;
  throw Error(ErrorKind::kInvalidArgument, "unknown rank key '" + std::string(text) + "'");
}

std::string_view rank_key_name(RankKey key) {
  switch (key) {
    case RankKey::kEpistemic: return "epistemic";
    case RankKey::kAleatoric: return "aleatoric";
    case RankKey::kCombined: return "combined";
  }
  return "combined";
}

double score_for(const UncertaintyScore& s, RankKey key) {
  switch (key) {
    case RankKey::kEpistemic: return s.epistemic;
    case RankKey::kAleatoric: return s.aleatoric;
    case RankKey::kCombined: return s.combined;
  }
  return s.combined;
}

std::vector<std::string> rank_unlabeled(std::span<const UncertaintyScore> scores, RankKey key) {
  std::vector<const UncertaintyScore*> order;
  for (const auto& s : scores) order.push_back(&s);
  std::sort(order.begin(), order.end(), [key](const UncertaintyScore* a, const UncertaintyScore* b) {
    const double sa = score_for(*a, key), sb = score_for(*b, key);
    if (sa != sb) return sa > sb;
    return a->case_id < b->case_id;
  });
  std::vector<std::string> ids;
  for (const auto* s : order) ids.push_back(s->case_id);
  return ids;
}

json to_json(const UncertaintyScore& s) {
  return {{"case_id", s.case_id}, {"epistemic", s.epistemic}, {"aleatoric", s.aleatoric}, {"combined", s.combined}};
}

UncertaintyScore uncertainty_score_from_json(const json& j) {
  try {
    UncertaintyScore s{j.at("case_id").get<std::string>(), j.at("epistemic").get<double>(),
                       j.at("aleatoric").get<double>(), 0.0};
    s.combined = j.value("combined", s.epistemic + s.aleatoric);
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("uncertainty score: ") + e.what());
  }
}

}  // namespace deepedit
