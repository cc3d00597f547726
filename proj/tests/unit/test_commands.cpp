#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "sejd/commands.hpp"
#include "sejd/data.hpp"
#include "support.hpp"

using namespace sejd;
using namespace sejd::testing;

namespace {

ConditionerHyper bench_hyper() {
  ConditionerHyper hp;
  hp.seq_len = 8;
  hp.patch_dim = 2;
  hp.channels = 8;
  hp.blocks = 1;
  return hp;
}

FlowModel<float> identity_checkpoint_model() {
  Rng rng(0);
  std::vector<ConditionerParams<float>> layers;
  for (int k = 0; k < 3; ++k) layers.push_back(init_params<float>(rng, bench_hyper()));
  return FlowModel<float>::from_params(std::move(layers), true);
}

BenchOptions quick_options() {
  BenchOptions o;
  o.batch = 4;
  o.repeats = 5;
  o.threads = 1;
  return o;
}

std::string first_line(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST_CASE("bench on an identity checkpoint has zero deviation everywhere") {
  const auto report = cmd_bench(identity_checkpoint_model(), quick_options());
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[0].mode == DecodeMode::kSequential);
  CHECK(report.rows[0].speedup == 1.0);
  for (const auto& row : report.rows) {
    CHECK(row.max_abs_deviation == 0.0);
    CHECK(row.repeat_seconds.size() == 5);
    CHECK(row.mean_iterations.size() == 3);
  }
  const auto* sejd = report.find(DecodeMode::kSejd);
  REQUIRE(sejd != nullptr);
  CHECK(sejd->mean_iterations[0] == 8.0);  // layer 1 decoded sequentially
  CHECK(sejd->mean_iterations[1] == 2.0);
  CHECK(report.sequential_layers == std::vector<std::size_t>{1});
}

TEST_CASE("bench always reports the sequential reference") {
  auto o = quick_options();
  o.modes = {DecodeMode::kUjd};
  const auto report = cmd_bench(identity_checkpoint_model(), o);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].mode == DecodeMode::kSequential);
  CHECK(report.rows[1].mode == DecodeMode::kUjd);
}

TEST_CASE("bench with tau = 0 matches sequential on a non-trivial model") {
  const auto model = active_model<float>(3, bench_hyper(), 3, true, 0.5);
  auto o = quick_options();
  o.tau = 0.0;
  const auto report = cmd_bench(model, o);
  for (const auto& row : report.rows) CHECK(row.max_abs_deviation <= 1e-4);
  CHECK(report.find(DecodeMode::kUjd)->mean_nll ==
        doctest::Approx(report.find(DecodeMode::kSequential)->mean_nll).epsilon(1e-4));
}

TEST_CASE("bench option validation") {
  const auto model = identity_checkpoint_model();
  auto o = quick_options();
  o.repeats = 4;
  CHECK_THROWS_AS(cmd_bench(model, o), UsageError);
  o = quick_options();
  o.sequential_layers = {4};
  CHECK_THROWS_AS(cmd_bench(model, o), UsageError);
  o = quick_options();
  o.modes.clear();
  CHECK_THROWS_AS(cmd_bench(model, o), UsageError);
  o = quick_options();
  o.tau = -1.0;
  CHECK_THROWS_AS(cmd_bench(model, o), UsageError);
}

TEST_CASE("bench report JSON and CSV layouts") {
  auto o = quick_options();
  o.seed = 11;
  const auto report = cmd_bench(identity_checkpoint_model(), o);
  const auto j = nlohmann::json::parse(bench_report_json(report));
  CHECK(j["layers"] == 3);
  CHECK(j["seq_len"] == 8);
  CHECK(j["seed"] == 11);
  CHECK(j["tau"] == 0.5);
  REQUIRE(j["modes"].size() == 3);
  CHECK(j["modes"][0]["mode"] == "sequential");
  for (const auto& row : j["modes"]) {
    for (const char* key : {"median_seconds", "speedup", "mean_iterations", "max_abs_deviation",
                            "mean_nll", "repeat_seconds"}) {
      CHECK(row.contains(key));
    }
  }
  std::ostringstream csv;
  write_bench_csv(csv, report);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header == "mode,median_seconds,speedup,max_abs_deviation,mean_nll,iters_layer1,iters_layer2,"
                  "iters_layer3");
  std::string row;
  std::getline(lines, row);
  CHECK(row.rfind("sequential,", 0) == 0);
}

TEST_CASE("analyze commands") {
  const auto model = identity_checkpoint_model();
  SUBCASE("redundancy with o = 0") {
    for (const auto& r : cmd_analyze_redundancy(active_model<float>(4, bench_hyper(), 2, true), 0, 3, 0, 1)) {
      CHECK(r.cos_sim == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("o >= L is a usage error") {
    CHECK_THROWS_AS(cmd_analyze_redundancy(model, 8, 3, 0, 1), UsageError);
  }
  SUBCASE("convergence on an identity checkpoint is exact from t = 1") {
    const auto rows = cmd_analyze_convergence(model, std::nullopt, 3, 0, 1);
    CHECK(rows.size() == 3 * 8);
    for (const auto& r : rows) CHECK(r.err_l2 == 0.0);
  }
  SUBCASE("bad counts") {
    CHECK_THROWS_AS(cmd_analyze_convergence(model, 0, 3, 0, 1), UsageError);
    CHECK_THROWS_AS(cmd_analyze_redundancy(model, 5, 0, 0, 1), UsageError);
  }
}

TEST_CASE("ablate-tau") {
  const auto model = active_model<float>(5, bench_hyper(), 3, true, 0.5);
  auto o = quick_options();
  const auto rows = cmd_ablate_tau(model, {1.0, 0.0, 0.5, 0.1}, o);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].tau == 0.0);
  CHECK(rows[0].max_dev <= 1e-4);
  bool has_default = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    has_default = has_default || rows[i].tau == 0.5;
    if (i > 0) {
      CHECK(rows[i].tau > rows[i - 1].tau);
      CHECK(rows[i].mean_iters <= rows[i - 1].mean_iters);
    }
  }
  CHECK(has_default);
  CHECK_THROWS_AS(cmd_ablate_tau(model, {}, o), UsageError);
  CHECK_THROWS_AS(cmd_ablate_tau(model, {-0.5}, o), UsageError);

  std::ostringstream csv;
  write_tau_csv(csv, {{0.5, 0.25, 0.125, 2.0}});
  CHECK(csv.str() == "tau,time_s,max_dev,mean_iters\n0.5,0.25,0.125,2\n");
  CHECK(std::find(kDefaultTaus.begin(), kDefaultTaus.end(), 0.5) != kDefaultTaus.end());
}

TEST_CASE("SEJD_THREADS overrides the requested thread count") {
  ::unsetenv("SEJD_THREADS");
  CHECK(threads_from_env(3) == 3);
  ::setenv("SEJD_THREADS", "2", 1);
  CHECK(threads_from_env(3) == 2);
  ::setenv("SEJD_THREADS", "two", 1);
  CHECK_THROWS_AS(threads_from_env(3), UsageError);
  ::unsetenv("SEJD_THREADS");
}

TEST_CASE("make_noise is deterministic and shaped") {
  const auto a = make_noise(9, 3, 4, 2);
  const auto b = make_noise(9, 3, 4, 2);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i] == b[i]);
    CHECK(a[i].rows() == 4);
    CHECK(a[i].cols() == 2);
  }
  CHECK_FALSE(a[0] == a[1]);
}

TEST_CASE("cmd_train with zero steps writes an identity checkpoint") {
  const auto dir = std::filesystem::temp_directory_path() / "sejd_test_train";
  std::filesystem::remove_all(dir);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.dataset_size = 40;
  cfg.layers = 2;
  cfg.hyper.channels = 8;
  cfg.hyper.blocks = 1;
  cfg.threads = 1;
  TrainArtifacts art;
  const auto result = cmd_train(cfg, dir, &art);
  CHECK(std::filesystem::exists(art.checkpoint));
  CHECK(art.checkpoint.filename() == kCheckpointFile);
  CHECK(first_line(art.loss_csv) == "step,loss");
  const auto loaded = load_checkpoint(art.checkpoint);
  for (std::size_t k = 0; k < 2; ++k) {
    for (const float v : loaded.params(k).head_w.values()) CHECK(v == 0.0f);
  }
  CHECK(serialize_checkpoint(loaded) == serialize_checkpoint(result.model));
  std::filesystem::remove_all(dir);
}

TEST_CASE("loss CSV layout") {
  std::ostringstream os;
  write_loss_csv(os, {{0, 1.5}, {1, -0.25}});
  CHECK(os.str() == "step,loss\n0,1.5\n1,-0.25\n");
}
