#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>
#include <vector>

#include "sejd/commands.hpp"
#include "sejd/data.hpp"
#include "sejd/decode.hpp"
#include "sejd/parallel.hpp"
#include "sejd/train.hpp"

namespace py = pybind11;
using namespace pybind11::literals;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

sejd::Matrix to_matrix(const Array& a, std::size_t rows, std::size_t cols) {
  if (a.ndim() != 2 || static_cast<std::size_t>(a.shape(0)) != rows ||
      static_cast<std::size_t>(a.shape(1)) != cols) {
    throw py::value_error("expected an array of shape (" + std::to_string(rows) + ", " +
                          std::to_string(cols) + ")");
  }
  return sejd::Matrix(rows, cols, std::vector<float>(a.data(), a.data() + a.size()));
}

std::vector<sejd::Matrix> to_batch(const Array& a, std::size_t rows, std::size_t cols) {
  if (a.ndim() == 2) return {to_matrix(a, rows, cols)};
  if (a.ndim() != 3 || static_cast<std::size_t>(a.shape(1)) != rows ||
      static_cast<std::size_t>(a.shape(2)) != cols) {
    throw py::value_error("expected an array of shape (n, " + std::to_string(rows) + ", " +
                          std::to_string(cols) + ")");
  }
  std::vector<sejd::Matrix> out;
  const std::size_t stride = rows * cols;
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    const float* p = a.data() + i * stride;
    out.emplace_back(rows, cols, std::vector<float>(p, p + stride));
  }
  return out;
}

py::array_t<float> to_array(const sejd::Matrix& m) {
  py::array_t<float> out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

py::array_t<float> to_array(const std::vector<sejd::Matrix>& batch, std::size_t rows,
                            std::size_t cols) {
  py::array_t<float> out({batch.size(), rows, cols});
  float* p = out.mutable_data();
  for (const auto& m : batch) p = std::copy(m.data(), m.data() + m.size(), p);
  return out;
}

py::list trace_to_list(const sejd::ConvergenceTrace& trace) {
  py::list layers;
  for (const auto& t : trace.layers) {
    py::list steps;
    for (const auto& it : t.iterations) steps.append(it.step_inf);
    layers.append(py::dict("layer"_a = t.layer, "sequential"_a = t.sequential,
                           "iterations"_a = t.iterations_used, "truncated"_a = t.truncated,
                           "step_inf"_a = steps));
  }
  return layers;
}

sejd::DecodeConfig decode_config(const std::string& mode, double tau,
                                 std::optional<std::size_t> max_iters,
                                 std::vector<std::size_t> sequential_layers) {
  sejd::DecodeConfig cfg;
  cfg.mode = sejd::parse_decode_mode(mode);
  cfg.tau = tau;
  cfg.max_iters = max_iters;
  cfg.sequential_layers = std::move(sequential_layers);
  return cfg;
}

sejd::BenchOptions bench_options(double tau, std::optional<std::size_t> max_iters,
                                 std::size_t batch, std::size_t repeats, std::uint64_t seed,
                                 std::vector<std::size_t> sequential_layers, std::size_t threads) {
  sejd::BenchOptions o;
  o.tau = tau;
  o.max_iters = max_iters;
  o.batch = batch;
  o.repeats = repeats;
  o.seed = seed;
  o.sequential_layers = std::move(sequential_layers);
  o.threads = threads;
  return o;
}

}  // namespace

PYBIND11_MODULE(_sejd, m) {
  m.doc() = "Selective Jacobi decoding for autoregressive flows";

  py::register_exception<sejd::CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<sejd::TrainingDivergenceError>(m, "TrainingDivergenceError",
                                                        PyExc_RuntimeError);
  py::register_exception<sejd::CacheDesyncError>(m, "CacheDesyncError", PyExc_RuntimeError);
  // ContractError, UsageError and UndefinedSimilarityError
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const std::invalid_argument& e) {
      py::set_error(PyExc_ValueError, e.what());
    } catch (const std::domain_error& e) {
      py::set_error(PyExc_ValueError, e.what());
    }
  });

  py::class_<sejd::FlowModel<float>>(m, "FlowModel")
      .def_static(
          "identity",
          [](std::size_t layers, std::size_t seq_len, std::size_t patch_dim, std::size_t channels,
             std::size_t blocks, bool flip) {
            sejd::ConditionerHyper hp;
            hp.seq_len = seq_len;
            hp.patch_dim = patch_dim;
            hp.channels = channels;
            hp.blocks = blocks;
            hp.validate();
            sejd::Rng rng(0);
            std::vector<sejd::ConditionerParams<float>> params;
            for (std::size_t k = 0; k < layers; ++k) params.push_back(sejd::init_params<float>(rng, hp));
            return sejd::FlowModel<float>::from_params(std::move(params), flip);
          },
          "layers"_a = 4, "seq_len"_a = 16, "patch_dim"_a = 4, "channels"_a = 32, "blocks"_a = 2,
          "flip"_a = true, "Freshly initialized network model (zero output heads).")
      .def_static("load", &sejd::load_checkpoint, "path"_a)
      .def("save", [](const sejd::FlowModel<float>& model,
                      const std::filesystem::path& path) { sejd::save_checkpoint(model, path); },
           "path"_a)
      .def("to_bytes",
           [](const sejd::FlowModel<float>& model) {
             const auto bytes = sejd::serialize_checkpoint(model);
             return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
           })
      .def_static("from_bytes",
                  [](const py::bytes& data) {
                    const std::string s = data;
                    return sejd::parse_checkpoint(std::span(
                        reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
                  })
      .def_property_readonly("num_layers", &sejd::FlowModel<float>::num_layers)
      .def_property_readonly("seq_len", &sejd::FlowModel<float>::seq_len)
      .def_property_readonly("patch_dim", &sejd::FlowModel<float>::patch_dim)
      .def_property_readonly("flip", &sejd::FlowModel<float>::flip_between_layers)
      .def(
          "generate",
          [](const sejd::FlowModel<float>& model, const Array& noise, const std::string& mode,
             double tau, std::optional<std::size_t> max_iters,
             std::vector<std::size_t> sequential_layers) {
            const auto cfg = decode_config(mode, tau, max_iters, std::move(sequential_layers));
            const auto z = to_matrix(noise, model.seq_len(), model.patch_dim());
            sejd::DecodeResult<float> r;
            {
              py::gil_scoped_release release;
              r = sejd::decode(model, z, cfg);
            }
            return py::make_tuple(to_array(r.x), trace_to_list(r.trace));
          },
          "noise"_a, "mode"_a = "sequential", "tau"_a = sejd::kDefaultTau,
          "max_iters"_a = py::none(), "sequential_layers"_a = std::vector<std::size_t>{1},
          "Decodes one (L, D) noise array; returns (x, per-layer trace).")
      .def(
          "generate_batch",
          [](const sejd::FlowModel<float>& model, const Array& noise, const std::string& mode,
             double tau, std::optional<std::size_t> max_iters,
             std::vector<std::size_t> sequential_layers, std::size_t threads) {
            const auto cfg = decode_config(mode, tau, max_iters, std::move(sequential_layers));
            const auto batch = to_batch(noise, model.seq_len(), model.patch_dim());
            std::vector<sejd::Matrix> xs;
            {
              py::gil_scoped_release release;
              for (auto& r : sejd::decode_batch(model, batch, cfg, threads)) xs.push_back(std::move(r.x));
            }
            return to_array(xs, model.seq_len(), model.patch_dim());
          },
          "noise"_a, "mode"_a = "sequential", "tau"_a = sejd::kDefaultTau,
          "max_iters"_a = py::none(), "sequential_layers"_a = std::vector<std::size_t>{1},
          "threads"_a = 0)
      .def(
          "normalize",
          [](const sejd::FlowModel<float>& model, const Array& x) {
            const auto r = sejd::model_normalize(model, to_matrix(x, model.seq_len(), model.patch_dim()));
            return py::make_tuple(to_array(r.output), r.logdet);
          },
          "x"_a, "Returns (z, total log-det).")
      .def(
          "log_likelihood",
          [](const sejd::FlowModel<float>& model, const Array& x) {
            return sejd::log_likelihood(model, to_matrix(x, model.seq_len(), model.patch_dim()));
          },
          "x"_a)
      .def(
          "mean_nll",
          [](const sejd::FlowModel<float>& model, const Array& data, std::size_t threads) {
            return sejd::mean_nll(model, to_batch(data, model.seq_len(), model.patch_dim()), threads);
          },
          "data"_a, "threads"_a = 0);

  m.def(
      "gradient_patches",
      [](std::uint64_t seed, std::size_t n) {
        const auto data = sejd::gen_gradient_patches(seed, n);
        return to_array(data.samples, data.seq_len, data.patch_dim);
      },
      "seed"_a, "n"_a, "Standardized synthetic ramps as an (n, 16, 4) float32 array.");

  m.def(
      "train",
      [](std::size_t steps, std::uint64_t seed, std::size_t layers, std::size_t channels,
         std::size_t blocks, std::size_t batch, double lr, double clip, std::size_t dataset_size,
         bool flip, std::size_t threads) {
        sejd::TrainConfig cfg;
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.layers = layers;
        cfg.hyper.channels = channels;
        cfg.hyper.blocks = blocks;
        cfg.batch = batch;
        cfg.adam.lr = lr;
        cfg.adam.grad_clip = clip;
        cfg.dataset_size = dataset_size;
        cfg.flip = flip;
        cfg.threads = threads;
        std::optional<sejd::TrainResult> result;
        {
          py::gil_scoped_release release;
          result = sejd::train(cfg);
        }
        auto& r = *result;
        py::list losses;
        for (const auto& rec : r.loss_log) losses.append(rec.loss);
        py::dict info("loss"_a = losses, "heldout_nll"_a = r.heldout_nll,
                      "baseline_nll"_a = r.baseline_nll, "diverged"_a = r.diverged,
                      "diverged_at"_a = r.diverged_at);
        return py::make_tuple(std::move(r.model), info);
      },
      "steps"_a = 2000, "seed"_a = 0, "layers"_a = 4, "channels"_a = 32, "blocks"_a = 2,
      "batch"_a = 32, "lr"_a = 1e-3, "clip"_a = 1.0, "dataset_size"_a = 4000, "flip"_a = true,
      "threads"_a = 0, "Trains on gradient-patches; returns (model, info).");

  m.def(
      "bench",
      [](const sejd::FlowModel<float>& model, const std::vector<std::string>& modes, double tau,
         std::optional<std::size_t> max_iters, std::size_t batch, std::size_t repeats,
         std::uint64_t seed, std::vector<std::size_t> sequential_layers, std::size_t threads) {
        auto o = bench_options(tau, max_iters, batch, repeats, seed, std::move(sequential_layers), threads);
        o.modes.clear();
        for (const auto& name : modes) o.modes.push_back(sejd::parse_decode_mode(name));
        std::string json;
        {
          py::gil_scoped_release release;
          json = sejd::bench_report_json(sejd::cmd_bench(model, o));
        }
        return py::module_::import("json").attr("loads")(json);
      },
      "model"_a, "modes"_a = std::vector<std::string>{"sequential", "ujd", "sejd"},
      "tau"_a = sejd::kDefaultTau, "max_iters"_a = py::none(), "batch"_a = 64, "repeats"_a = 5,
      "seed"_a = 0, "sequential_layers"_a = std::vector<std::size_t>{1}, "threads"_a = 0,
      "Bench report as a dict (same layout as the CLI JSON).");

  m.def(
      "analyze_redundancy",
      [](const sejd::FlowModel<float>& model, std::size_t o, std::size_t batch, std::uint64_t seed,
         std::size_t threads) {
        py::list rows;
        for (const auto& r : sejd::cmd_analyze_redundancy(model, o, batch, seed, threads)) {
          rows.append(py::dict("layer"_a = r.layer, "cos_sim"_a = r.cos_sim));
        }
        return rows;
      },
      "model"_a, "o"_a = sejd::kDefaultMaskOffset, "batch"_a = 64, "seed"_a = 0, "threads"_a = 0);

  m.def(
      "analyze_convergence",
      [](const sejd::FlowModel<float>& model, std::optional<std::size_t> max_iters,
         std::size_t batch, std::uint64_t seed, std::size_t threads) {
        py::list rows;
        for (const auto& r : sejd::cmd_analyze_convergence(model, max_iters, batch, seed, threads)) {
          rows.append(py::dict("layer"_a = r.layer, "iter"_a = r.iter, "step_inf"_a = r.step_inf,
                               "err_l2"_a = r.err_l2));
        }
        return rows;
      },
      "model"_a, "max_iters"_a = py::none(), "batch"_a = 64, "seed"_a = 0, "threads"_a = 0);

  m.def(
      "ablate_tau",
      [](const sejd::FlowModel<float>& model, std::vector<double> taus, std::size_t batch,
         std::size_t repeats, std::uint64_t seed, std::vector<std::size_t> sequential_layers,
         std::size_t threads) {
        const auto o = bench_options(sejd::kDefaultTau, std::nullopt, batch, repeats, seed,
                                     std::move(sequential_layers), threads);
        std::vector<sejd::TauRow> rows;
        {
          py::gil_scoped_release release;
          rows = sejd::cmd_ablate_tau(model, std::move(taus), o);
        }
        py::list out;
        for (const auto& r : rows) {
          out.append(py::dict("tau"_a = r.tau, "time_s"_a = r.time_s, "max_dev"_a = r.max_dev,
                              "mean_iters"_a = r.mean_iters));
        }
        return out;
      },
      "model"_a, "taus"_a = sejd::kDefaultTaus, "batch"_a = 64, "repeats"_a = 5, "seed"_a = 0,
      "sequential_layers"_a = std::vector<std::size_t>{1}, "threads"_a = 0);

  m.attr("DEFAULT_TAU") = sejd::kDefaultTau;
  m.attr("CHECKPOINT_VERSION") = sejd::kCheckpointVersion;
}
