// deepedit command line: gen-data, train, eval, rank, serve.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "deepedit/backbone.hpp"
#include "deepedit/error.hpp"
#include "deepedit/eval.hpp"
#include "deepedit/server.hpp"
#include "deepedit/trainer.hpp"
#include "deepedit/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deepedit;

namespace {

// Bad flag values detected after parsing; reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, path.string() + ": " + e.what());
  }
}

void print_resolved(const std::string& command, const json& cfg) {
  std::cout << command << " config: " << cfg.dump() << "\n";
  if (cfg.contains("seed")) std::cout << command << " seed: " << cfg.at("seed").dump() << "\n";
}

std::vector<LoadedCase> load_cases(const fs::path& root) {
  std::vector<LoadedCase> out;
  for (const auto& rec : scan_dataset(root)) out.push_back(load_case(rec));
  return out;
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  fs::path out;
  int cases = 10;
  int unlabeled = 0;
  std::vector<std::size_t> shape{32, 32, 32};
  int labels = 2;
  std::uint64_t seed = 0;
  double noise_std = -1.0;
  int levels = 3;
};

int run_gen_data(const GenDataArgs& a) {
  if (a.shape.size() != 3) throw UsageError("--shape needs D,H,W");
  if (a.cases < 1) throw UsageError("--cases must be >= 1");
  if (a.unlabeled < 0 || a.unlabeled > a.cases) throw UsageError("--unlabeled must be in 0..cases");
  SynthConfig sc = default_synth_config(a.labels);
  sc.shape = Shape3D(a.shape[0], a.shape[1], a.shape[2]);
  if (a.noise_std >= 0.0) sc.noise_std = a.noise_std;
  sc.validate();

  json resolved = {{"out", a.out.string()}, {"cases", a.cases}, {"unlabeled", a.unlabeled},
                   {"synth", to_json(sc)}, {"seed", a.seed}};
  print_resolved("gen-data", resolved);
  const std::size_t div = std::size_t{1} << (a.levels - 1);
  for (std::size_t d : a.shape) {
    if (d % div != 0) {
      std::cerr << "warning: dimension " << d << " is not divisible by " << div << "; a levels=" << a.levels
                << " model cannot process this shape\n";
    }
  }

  fs::create_directories(a.out / "images");
  fs::create_directories(a.out / "labels");
  const SeededRng data_rng = SeededRng(a.seed).fork("data");
  json ids = json::array(), unlabeled = json::array();
  char name[32];
  for (int i = 0; i < a.cases; ++i) {
    std::snprintf(name, sizeof name, "case_%03d", i);
    SeededRng rng = data_rng.fork(static_cast<std::uint64_t>(i));
    const auto [image, labels] = generate_synthetic_case(sc, rng);
    save_volume(image, image_path_for(a.out, name));
    if (i < a.cases - a.unlabeled) {
      save_labels(labels, label_path_for(a.out, name));
    } else {
      unlabeled.push_back(name);
    }
    ids.push_back(name);
  }
  const json manifest = {{"version", 1}, {"seed", a.seed}, {"synth", to_json(sc)}, {"cases", ids},
                         {"unlabeled", unlabeled}};
  write_text(a.out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << a.cases << " cases to " << a.out.string() << "\n";
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  fs::path data;
  std::optional<fs::path> config;
  fs::path out;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config ? train_config_from_json(read_json(*a.config)) : TrainConfig{};
  if (a.seed) cfg.seed = *a.seed;
  print_resolved("train", to_json(cfg));
  const std::vector<LoadedCase> cases = load_cases(a.data);
  const auto [params, report] = train(cases, cfg, [&](int e, const EpochStats& s) {
    std::printf("epoch %d/%d loss %.6f click-free %d interactive %d\n", e + 1, cfg.epochs, s.mean_loss, s.click_free,
                s.interactive);
    std::fflush(stdout);
  });
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  save_params(params, a.out);
  fs::path report_path = a.out;
  report_path.replace_extension(".report.json");
  write_text(report_path, to_json(report).dump(2) + "\n");
  std::cout << "model " << a.out.string() << " version " << model_version(params) << "\n";
  std::cout << "report " << report_path.string() << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  fs::path data;
  fs::path model;
  std::vector<int> budgets{0, 1, 5, 10};
  int reps = 3;
  std::uint64_t seed = 0;
  fs::path out = "report.json";
};

void print_table(const EvalReport& report, int num_labels) {
  std::printf("%-8s", "budget");
  for (int l = 1; l <= num_labels; ++l) std::printf("  label %-12d", l);
  std::printf("  %s\n", "mean");
  for (int b : report.config.click_budgets) {
    std::printf("%-8d", b);
    for (int l = 1; l <= num_labels; ++l) {
      double mean = 0.0, sd = 0.0;
      int n = 0;
      for (const auto& r : report.rows) {
        if (r.budget == b && r.label == l) {
          mean += r.dice_mean;
          sd += r.dice_std;
          ++n;
        }
      }
      if (n) mean /= n, sd /= n;
      std::printf("  %.3f +/- %.3f   ", mean, sd);
    }
    std::printf("  %.3f\n", report.grand_mean(b));
  }
}

int run_eval(const EvalArgs& a) {
  EvalConfig cfg;
  cfg.click_budgets = a.budgets;
  cfg.repetitions = a.reps;
  cfg.seed = a.seed;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  print_resolved("eval", to_json(cfg));
  const ModelParams params = load_params(a.model);
  std::vector<LoadedCase> labeled;
  for (auto& c : load_cases(a.data)) {
    if (c.labels) labeled.push_back(std::move(c));
  }
  if (labeled.empty()) throw Error(ErrorKind::kNotFound, "no labeled cases under " + a.data.string());
  const EvalReport report = evaluate(params, labeled, cfg);
  write_text(a.out, to_json(report).dump(2) + "\n");
  fs::path csv = a.out;
  csv.replace_extension(".csv");
  write_text(csv, to_csv(report));
  print_table(report, model_num_labels(params));
  std::cout << "report " << a.out.string() << " and " << csv.string() << "\n";
  return 0;
}

// ---- rank -------------------------------------------------------------------

struct RankArgs {
  fs::path data;
  fs::path model;
  std::string key = "combined";
  int passes = 10;
  std::uint64_t seed = 0;
  fs::path out = "rank.json";
};

int run_rank(const RankArgs& a) {
  RankKey key;
  try {
    key = parse_rank_key(a.key);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (a.passes < 1) throw UsageError("--passes must be >= 1");
  print_resolved("rank", {{"key", a.key}, {"passes", a.passes}, {"seed", a.seed}});
  if (a.passes < 2) std::cerr << "warning: passes=" << a.passes << " gives epistemic score 0 for every case\n";
  const ModelParams params = load_params(a.model);
  std::vector<UncertaintyScore> scores;
  for (const auto& c : load_cases(a.data)) {
    if (!c.labels) scores.push_back(score_case(params, c, a.passes, a.seed));
  }
  if (scores.empty()) throw Error(ErrorKind::kNotFound, "no unlabeled cases under " + a.data.string());
  std::vector<UncertaintyScore> ordered;
  for (const auto& id : rank_unlabeled(scores, key)) {
    for (const auto& s : scores) {
      if (s.case_id == id) ordered.push_back(s);
    }
  }
  write_text(a.out, ranking_to_json(ordered, key, a.passes, a.seed).dump(2) + "\n");
  for (const auto& s : ordered) std::printf("%-16s %.6g\n", s.case_id.c_str(), score_for(s, key));
  return 0;
}

// ---- serve ------------------------------------------------------------------

struct ServeArgs {
  fs::path data;
  fs::path model;
  std::optional<fs::path> rank;
  std::optional<fs::path> ui;
  std::string host = "127.0.0.1";
  int port = 8765;
  int threads = 4;
};

int run_serve(const ServeArgs& a) {
  print_resolved("serve", {{"data", a.data.string()}, {"model", a.model.string()}, {"host", a.host}, {"port", a.port},
                           {"rank", a.rank ? a.rank->string() : ""}});
  ServerOptions opts;
  opts.data_root = a.data;
  opts.rank_file = a.rank;
  opts.ui_dir = a.ui;
  opts.threads = a.threads;
  Server server(load_params(a.model), opts);
  server.load_dataset();
  if (server.bind(a.host, a.port) < 0) {
    throw Error(ErrorKind::kIo, "cannot bind " + a.host + ":" + std::to_string(a.port) + " (port busy?)");
  }
  std::cout << "listening on http://" << a.host << ":" << a.port << std::endl;
  return server.listen_after_bind() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepedit: interactive 3D segmentation with click guidance"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "write a synthetic dataset");
  g->add_option("--out", gen.out, "dataset root")->required();
  g->add_option("--cases", gen.cases, "number of cases")->capture_default_str();
  g->add_option("--unlabeled", gen.unlabeled, "how many of the last cases get no label file")->capture_default_str();
  g->add_option("--shape", gen.shape, "D,H,W")->delimiter(',')->expected(3)->capture_default_str();
  g->add_option("--labels", gen.labels, "foreground labels")->capture_default_str();
  g->add_option("--noise-std", gen.noise_std, "noise std (negative keeps the default)")->capture_default_str();
  g->add_option("--levels", gen.levels, "model depth used for the divisibility warning")->capture_default_str();
  g->add_option("--seed", gen.seed, "seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--data", tr.data, "dataset root")->required();
  t->add_option("--config", tr.config, "TrainConfig JSON");
  t->add_option("--out", tr.out, "output parameter file")->required();
  t->add_option("--seed", tr.seed, "override the config seed");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "click-budget Dice evaluation");
  e->add_option("--data", ev.data, "dataset root")->required();
  e->add_option("--model", ev.model, "parameter file")->required();
  e->add_option("--budgets", ev.budgets, "ascending click budgets")->delimiter(',')->capture_default_str();
  e->add_option("--reps", ev.reps, "repetitions")->capture_default_str();
  e->add_option("--seed", ev.seed, "seed")->capture_default_str();
  e->add_option("--out", ev.out, "report JSON (CSV written alongside)")->capture_default_str();

  RankArgs rk;
  auto* r = app.add_subcommand("rank", "rank unlabeled cases by uncertainty");
  r->add_option("--data", rk.data, "dataset root")->required();
  r->add_option("--model", rk.model, "parameter file")->required();
  r->add_option("--key", rk.key, "epistemic|aleatoric|combined")->capture_default_str();
  r->add_option("--passes", rk.passes, "dropout passes")->capture_default_str();
  r->add_option("--seed", rk.seed, "seed")->capture_default_str();
  r->add_option("--out", rk.out, "ranking JSON")->capture_default_str();

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "HTTP server for the viewer");
  s->add_option("--data", sv.data, "dataset root")->required();
  s->add_option("--model", sv.model, "parameter file")->required();
  s->add_option("--rank", sv.rank, "ranking JSON from `rank`");
  s->add_option("--ui", sv.ui, "static UI directory served at /");
  s->add_option("--host", sv.host, "bind address")->capture_default_str();
  s->add_option("--port", sv.port, "port")->capture_default_str();
  s->add_option("--threads", sv.threads, "request threads")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 2;
  }

  try {
    if (*g) return run_gen_data(gen);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*r) return run_rank(rk);
    if (*s) return run_serve(sv);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 2;
}
