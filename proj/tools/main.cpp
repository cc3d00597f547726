#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sejd/commands.hpp"
#include "sejd/data.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::vector<sejd::DecodeMode> parse_modes(const std::string& list) {
  std::vector<sejd::DecodeMode> modes;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      modes.push_back(sejd::parse_decode_mode(item));
    } catch (const sejd::ContractError& e) {
      throw sejd::UsageError(e.what());
    }
  }
  return modes;
}

// Writes to `path`, or to stdout when the path is empty or "-".
template <typename Fn>
void emit(const std::string& path, Fn&& write) {
  if (path.empty() || path == "-") {
    write(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  write(os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective Jacobi decoding for autoregressive flows"};
  app.require_subcommand(1);
  std::size_t threads = 0;

  // train
  sejd::TrainConfig tc;
  std::string train_out = "run";
  auto* train = app.add_subcommand("train", "Train a flow and write checkpoint.sejd + loss.csv");
  train->add_option("--dataset", tc.dataset, "Dataset id")->capture_default_str();
  train->add_option("--layers", tc.layers, "Flow layers K")->capture_default_str();
  train->add_option("--channels", tc.hyper.channels, "Conditioner width C")->capture_default_str();
  train->add_option("--blocks", tc.hyper.blocks, "Attention blocks per layer")->capture_default_str();
  train->add_option("--steps", tc.steps, "Optimizer steps")->capture_default_str();
  train->add_option("--batch", tc.batch, "Batch size")->capture_default_str();
  train->add_option("--lr", tc.adam.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--clip", tc.adam.grad_clip, "Global-norm gradient clip")->capture_default_str();
  train->add_option("--dataset-size", tc.dataset_size, "Generated samples")->capture_default_str();
  train->add_option("--seed", tc.seed, "Seed")->capture_default_str();
  train->add_option("--out", train_out, "Output directory")->capture_default_str();
  bool no_flip = false;
  train->add_flag("--no-flip", no_flip, "Keep patch order fixed between layers");

  // bench
  sejd::BenchOptions bo;
  std::string checkpoint;
  std::string modes = "sequential,ujd,sejd";
  std::string json_path;
  std::string csv_path;
  std::size_t max_iters = 0;
  auto* bench = app.add_subcommand("bench", "Time sequential / ujd / sejd decoding");
  bench->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  bench->add_option("--modes", modes, "Comma-separated decode modes")->capture_default_str();
  bench->add_option("--tau", bo.tau, "Jacobi stopping threshold")->capture_default_str();
  bench->add_option("--max-iters", max_iters, "Jacobi iteration cap (default L)");
  bench->add_option("--batch", bo.batch, "Samples per batch")->capture_default_str();
  bench->add_option("--repeats", bo.repeats, "Timed repeats (>= 5)")->capture_default_str();
  bench->add_option("--seed", bo.seed, "Noise seed")->capture_default_str();
  bench->add_option("--sequential-layers", bo.sequential_layers,
                    "1-based layers decoded sequentially in sejd mode")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--json", json_path, "JSON report path (default stdout)");
  bench->add_option("--csv", csv_path, "CSV report path");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Layer redundancy and convergence studies");
  analyze->require_subcommand(1);
  std::size_t mask_offset = sejd::kDefaultMaskOffset;
  std::size_t analyze_batch = 64;
  std::uint64_t analyze_seed = 0;
  std::string analyze_out;
  auto* redundancy = analyze->add_subcommand("redundancy", "layer,cos_sim CSV");
  auto* convergence = analyze->add_subcommand("convergence", "layer,iter,step_inf,err_l2 CSV");
  for (auto* sub : {redundancy, convergence}) {
    sub->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    sub->add_option("--batch", analyze_batch, "Samples")->capture_default_str();
    sub->add_option("--seed", analyze_seed, "Noise seed")->capture_default_str();
    sub->add_option("--csv", analyze_out, "Output path (default stdout)");
  }
  redundancy->add_option("--o", mask_offset, "Masked predecessors")->capture_default_str();
  convergence->add_option("--max-iters", max_iters, "Iterations per layer (default L)");

  // ablate-tau
  std::vector<double> taus = sejd::kDefaultTaus;
  auto* ablate = app.add_subcommand("ablate-tau", "tau,time_s,max_dev,mean_iters CSV");
  ablate->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ablate->add_option("--taus", taus, "Comma-separated thresholds")
      ->delimiter(',')
      ->capture_default_str();
  ablate->add_option("--batch", bo.batch, "Samples per batch")->capture_default_str();
  ablate->add_option("--repeats", bo.repeats, "Timed repeats (>= 5)")->capture_default_str();
  ablate->add_option("--seed", bo.seed, "Noise seed")->capture_default_str();
  ablate->add_option("--sequential-layers", bo.sequential_layers,
                     "1-based layers decoded sequentially")
      ->delimiter(',')
      ->capture_default_str();
  ablate->add_option("--csv", csv_path, "Output path (default stdout)");

  for (auto* sub : {train, bench, redundancy, convergence, ablate}) {
    sub->add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    threads = sejd::threads_from_env(threads);
    if (train->parsed()) {
      tc.threads = threads;
      tc.flip = !no_flip;
      if (tc.steps == 0) {
        sejd::TrainConfig probe = tc;
        probe.steps = 1;
        probe.validate();
      } else {
        tc.validate();
      }
      const auto result = sejd::cmd_train(tc, train_out);
      const double gain = (result.baseline_nll - result.heldout_nll) / result.baseline_nll;
      std::fprintf(stderr, "held-out NLL %.6f vs identity %.6f (%.2f%% better)\n",
                   result.heldout_nll, result.baseline_nll, 100.0 * gain);
      std::fprintf(stderr, "wrote %s/%s and %s/%s\n", train_out.c_str(), sejd::kCheckpointFile,
                   train_out.c_str(), sejd::kLossFile);
      return 0;
    }

    bo.threads = threads;
    if (max_iters > 0) bo.max_iters = max_iters;
    const auto model = sejd::load_checkpoint(checkpoint);

    if (bench->parsed()) {
      bo.modes = parse_modes(modes);
      const auto report = sejd::cmd_bench(model, bo);
      emit(json_path, [&](std::ostream& os) { os << sejd::bench_report_json(report) << '\n'; });
      if (!csv_path.empty()) {
        emit(csv_path, [&](std::ostream& os) { sejd::write_bench_csv(os, report); });
      }
    } else if (redundancy->parsed()) {
      const auto rows =
          sejd::cmd_analyze_redundancy(model, mask_offset, analyze_batch, analyze_seed, threads);
      emit(analyze_out, [&](std::ostream& os) { sejd::write_redundancy_csv(os, rows); });
    } else if (convergence->parsed()) {
      std::optional<std::size_t> cap;
      if (max_iters > 0) cap = max_iters;
      const auto rows =
          sejd::cmd_analyze_convergence(model, cap, analyze_batch, analyze_seed, threads);
      emit(analyze_out, [&](std::ostream& os) { sejd::write_convergence_csv(os, rows); });
    } else if (ablate->parsed()) {
      const auto rows = sejd::cmd_ablate_tau(model, taus, bo);
      emit(csv_path, [&](std::ostream& os) { sejd::write_tau_csv(os, rows); });
    }
    return 0;
  } catch (const sejd::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const sejd::ContractError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const sejd::TrainingDivergenceError& e) {
    std::fprintf(stderr, "error: %s (step %lld)\n", e.what(), static_cast<long long>(e.step()));
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
