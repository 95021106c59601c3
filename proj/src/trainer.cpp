#include "deepedit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "deepedit/error.hpp"
#include "deepedit/eval.hpp"

namespace deepedit {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error(ErrorKind::kConfig, "train config field '" + field + "': " + why);
  };
  if (!(p_clickfree >= 0.0 && p_clickfree <= 1.0)) fail("p_clickfree", "must be in [0, 1]");
  if (clicks_per_iteration < 1) fail("clicks_per_iteration", "must be >= 1");
  if (interaction_rounds < 1) fail("interaction_rounds", "must be >= 1");
  if (epochs < 1) fail("epochs", "must be >= 1");
  if (!(lr > 0.0)) fail("lr", "must be > 0");
  if (!(augment.probability >= 0.0 && augment.probability <= 1.0)) fail("augment.probability", "must be in [0, 1]");
  try {
    guidance().validate();
  } catch (const Error& e) {
    fail("sigma", e.what());
  }
  ArchConfig probe;
  probe.base_width = base_width;
  probe.levels = levels;
  probe.dropout_rate = dropout_rate;
  probe.validate();
}

GuidanceConfig TrainConfig::guidance() const {
  GuidanceConfig g;
  g.sigma = sigma;
  g.radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  return g;
}

ArchConfig TrainConfig::arch(std::size_t image_channels, int num_labels) const {
  ArchConfig a;
  a.in_channels = static_cast<int>(image_channels) + num_labels + 1;
  a.num_classes = num_labels + 1;
  a.base_width = base_width;
  a.levels = levels;
  a.dropout_rate = dropout_rate;
  a.validate();
  return a;
}

json to_json(const TrainConfig& cfg) {
  return {{"p_clickfree", cfg.p_clickfree},
          {"clicks_per_iteration", cfg.clicks_per_iteration},
          {"interaction_rounds", cfg.interaction_rounds},
          {"epochs", cfg.epochs},
          {"lr", cfg.lr},
          {"sigma", cfg.sigma},
          {"seed", cfg.seed},
          {"augment",
           {{"flip", cfg.augment.flip},
            {"rotate", cfg.augment.rotate},
            {"intensity_shift", cfg.augment.intensity_shift},
            {"probability", cfg.augment.probability}}},
          {"base_width", cfg.base_width},
          {"levels", cfg.levels},
          {"dropout_rate", cfg.dropout_rate}};
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& prefix = "") {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, "train config field '" + prefix + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& prefix) {
  for (const auto& [k, _] : j.items()) {
    if (!known.contains(k)) throw Error(ErrorKind::kConfig, "train config: unknown field '" + prefix + k + "'");
  }
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kConfig, "train config must be a JSON object");
  reject_unknown(j,
                 {"p_clickfree", "clicks_per_iteration", "interaction_rounds", "epochs", "lr", "sigma", "seed",
                  "augment", "base_width", "levels", "dropout_rate"},
                 "");
  TrainConfig cfg;
  read_field(j, "p_clickfree", cfg.p_clickfree);
  read_field(j, "clicks_per_iteration", cfg.clicks_per_iteration);
  read_field(j, "interaction_rounds", cfg.interaction_rounds);
  read_field(j, "epochs", cfg.epochs);
  read_field(j, "lr", cfg.lr);
  read_field(j, "sigma", cfg.sigma);
  read_field(j, "seed", cfg.seed);
  read_field(j, "base_width", cfg.base_width);
  read_field(j, "levels", cfg.levels);
  read_field(j, "dropout_rate", cfg.dropout_rate);
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    if (!a.is_object()) throw Error(ErrorKind::kConfig, "train config field 'augment': must be an object");
    reject_unknown(a, {"flip", "rotate", "intensity_shift", "probability"}, "augment.");
    read_field(a, "flip", cfg.augment.flip, "augment.");
    read_field(a, "rotate", cfg.augment.rotate, "augment.");
    read_field(a, "intensity_shift", cfg.augment.intensity_shift, "augment.");
    read_field(a, "probability", cfg.augment.probability, "augment.");
  }
  cfg.validate();
  return cfg;
}

std::pair<Volume, LabelMap> augment(const Volume& image, const LabelMap& gt, SeededRng& rng,
                                    const AugmentToggles& toggles) {
  if (!(image.shape() == gt.shape())) {
    throw Error(ErrorKind::kShapeMismatch, "augment: image " + image.shape().str() + " vs labels " + gt.shape().str());
  }
  Volume img = image;
  LabelMap lab = gt;
  auto fires = [&] { return rng.uniform() < toggles.probability; };
  if (toggles.flip) {
    for (Axis ax : {Axis::kY, Axis::kX}) {
      if (fires()) {
        img = flip(img, ax);
        lab = flip(lab, ax);
      }
    }
  }
  if (toggles.rotate && fires()) {
    const int k = 1 + static_cast<int>(rng.below(3));
    img = rot90_yx(img, k);
    lab = rot90_yx(lab, k);
  }
  if (toggles.intensity_shift && fires()) {
    const float delta = static_cast<float>(rng.uniform(-0.1, 0.1));
    for (float& v : img.data()) v += delta;
  }
  return {whiten(img), std::move(lab)};
}

IterationResult train_iteration(ModelParams& params, AdamState& state, const LoadedCase& c, const TrainConfig& cfg,
                                SeededRng& rng) {
  if (!c.labels) throw Error(ErrorKind::kInvalidArgument, "train_iteration: case " + c.case_id + " is unlabeled");
  IterationResult res;
  res.mode = rng.uniform() < cfg.p_clickfree ? IterationMode::kClickFree : IterationMode::kInteractive;
  SeededRng aug_rng = rng.fork("augment");
  SeededRng click_rng = rng.fork("clicks");
  SeededRng dropout_rng = rng.fork("dropout");

  const auto [image, gt] = augment(c.image, *c.labels, aug_rng, cfg.augment);
  const int L = gt.num_labels();
  const GuidanceConfig gcfg = cfg.guidance();
  res.clicks.num_labels = L;

  Volume guidance = zero_guidance(image.shape(), L);
  if (res.mode == IterationMode::kInteractive) {
    res.clicks = simulate_interaction_clicks(gt, std::nullopt, cfg.clicks_per_iteration, click_rng);
    for (int r = 2; r <= cfg.interaction_rounds; ++r) {
      const Volume g = make_guidance(res.clicks, image.shape(), gcfg);
      const LabelMap pred = argmax_channels(infer(params, build_input(image, g)));
      res.clicks.append(simulate_interaction_clicks(gt, pred, cfg.clicks_per_iteration, click_rng));
    }
    if (!res.clicks.empty()) guidance = make_guidance(res.clicks, image.shape(), gcfg);
  }
  for (std::size_t ch = 0; ch < guidance.channels(); ++ch) {
    const auto span = guidance.channel(ch);
    res.guidance_peaks.push_back(*std::max_element(span.begin(), span.end()));
  }

  const ForwardResult fr = forward(params, build_input(image, guidance), Mode::kTrain, dropout_rng);
  const LossResult lr = loss_and_grad(fr.logits, gt);
  adam_step(params, backward(params, fr.cache, lr.dlogits), state, cfg.lr);
  res.loss = lr.loss;
  return res;
}

int TrainReport::click_free_total() const {
  int n = 0;
  for (const auto& e : epochs) n += e.click_free;
  return n;
}

int TrainReport::interactive_total() const {
  int n = 0;
  for (const auto& e : epochs) n += e.interactive;
  return n;
}

json to_json(const TrainReport& report) {
  json epochs = json::array();
  for (const auto& e : report.epochs) {
    epochs.push_back({{"mean_loss", e.mean_loss}, {"click_free", e.click_free}, {"interactive", e.interactive}});
  }
  return {{"config", to_json(report.config)},
          {"epochs", epochs},
          {"click_free_total", report.click_free_total()},
          {"interactive_total", report.interactive_total()},
          {"iteration_losses", report.iteration_losses},
          {"final_dice", report.final_dice}};
}

std::pair<ModelParams, TrainReport> train(std::span<const LoadedCase> cases, const TrainConfig& cfg,
                                          const EpochCallback& on_epoch) {
  cfg.validate();
  std::vector<const LoadedCase*> labeled;
  for (const auto& c : cases) {
    if (c.labels) labeled.push_back(&c);
  }
  if (labeled.empty()) throw Error(ErrorKind::kInvalidArgument, "train: no labeled cases");
  const std::size_t channels = labeled.front()->image.channels();
  const int L = labeled.front()->labels->num_labels();
  const ArchConfig arch = cfg.arch(channels, L);
  for (const auto* c : labeled) {
    if (c->image.channels() != channels || c->labels->num_labels() != L) {
      throw Error(ErrorKind::kConfig, "train: case " + c->case_id + " disagrees on channels or label count");
    }
    arch.check_shape(c->image.shape());
  }

  const SeededRng root(cfg.seed);
  SeededRng init_rng = root.fork("init");
  ModelParams params = init_model(arch, init_rng);
  AdamState state = init_adam(params);
  const SeededRng shuffle_root = root.fork("shuffle");
  const SeededRng iter_root = root.fork("iteration");

  TrainReport report;
  report.config = cfg;
  std::uint64_t t = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(labeled.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng shuffle = shuffle_root.fork(static_cast<std::uint64_t>(e));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochStats stats;
    double sum = 0.0;
    for (std::size_t idx : order) {
      SeededRng rng = iter_root.fork(t++);
      const IterationResult r = train_iteration(params, state, *labeled[idx], cfg, rng);
      report.iteration_losses.push_back(r.loss);
      sum += r.loss;
      (r.mode == IterationMode::kClickFree ? stats.click_free : stats.interactive) += 1;
    }
    stats.mean_loss = sum / static_cast<double>(order.size());
    report.epochs.push_back(stats);
    if (on_epoch) on_epoch(e, stats);
  }

  report.final_dice.assign(static_cast<std::size_t>(L), 0.0);
  for (const auto* c : labeled) {
    const LabelMap pred = predict_auto(params, c->image, cfg.guidance());
    for (int l = 1; l <= L; ++l) report.final_dice[l - 1] += dice(pred, *c->labels, l);
  }
  for (double& d : report.final_dice) d /= static_cast<double>(labeled.size());
  return {std::move(params), std::move(report)};
}

}  // namespace deepedit
