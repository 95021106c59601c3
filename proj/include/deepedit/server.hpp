#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deepedit/backbone.hpp"
#include "deepedit/eval.hpp"

namespace deepedit {

struct ServerOptions {
  std::filesystem::path data_root;
  /// Ranking file written by the `rank` subcommand, loaded at startup.
  std::optional<std::filesystem::path> rank_file;
  /// Static files served under `/`.
  std::optional<std::filesystem::path> ui_dir;
  /// Defaults for POST /api/rank when the body does not override them.
  int rank_passes = 10;
  std::uint64_t rank_seed = 0;
  int threads = 4;
};

/// Ranking file layout: `{"key":..,"passes":..,"seed":..,"scores":[UncertaintyScore...]}`
/// with scores already in ranked order.
nlohmann::json ranking_to_json(const std::vector<UncertaintyScore>& scores, RankKey key, int passes,
                               std::uint64_t seed);
std::vector<UncertaintyScore> ranking_from_json(const nlohmann::json& j);

/// HTTP front end. Every /api endpoint answers 503 until load_dataset() has run.
class Server {
 public:
  Server(ModelParams params, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Scans the data root and loads every case. Throws kConfig when the
  /// model's label or channel count disagrees with a case.
  void load_dataset();

  /// Returns the bound port, or -1.
  int bind(const std::string& host, int port);
  int bind_any_port(const std::string& host);
  /// Blocks serving until stop().
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace deepedit
