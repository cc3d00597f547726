#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sejd/decode.hpp"
#include "support.hpp"

using namespace sejd;
using namespace sejd::testing;

namespace {

ConditionerHyper small_hyper(std::size_t L, std::size_t D, std::size_t C = 8, std::size_t B = 2) {
  ConditionerHyper hp;
  hp.seq_len = L;
  hp.patch_dim = D;
  hp.channels = C;
  hp.blocks = B;
  return hp;
}

DecodeConfig config(DecodeMode mode, double tau, std::optional<std::size_t> max_iters = {}) {
  DecodeConfig cfg;
  cfg.mode = mode;
  cfg.tau = tau;
  cfg.max_iters = max_iters;
  return cfg;
}

}  // namespace

TEST_CASE("decode mode names roundtrip") {
  for (const auto m : {DecodeMode::kSequential, DecodeMode::kUjd, DecodeMode::kSejd}) {
    CHECK(parse_decode_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_decode_mode("jacobi"), ContractError);
}

TEST_CASE("decode config validation") {
  CHECK_NOTHROW(config(DecodeMode::kSejd, 0.5).validate(4));
  CHECK_THROWS_AS(config(DecodeMode::kSejd, -0.1).validate(4), ContractError);
  CHECK_THROWS_AS(config(DecodeMode::kSejd, NAN).validate(4), ContractError);
  CHECK_THROWS_AS(config(DecodeMode::kSejd, 0.5, 0).validate(4), ContractError);
  auto cfg = config(DecodeMode::kSejd, 0.5);
  cfg.sequential_layers = {5};
  CHECK_THROWS_AS(cfg.validate(4), ContractError);
  cfg.sequential_layers = {0};
  CHECK_THROWS_AS(cfg.validate(4), ContractError);
  CHECK(kDefaultTau == 0.5);
}

TEST_CASE("Jacobi on an identity layer converges at the second iteration") {
  const IdentityConditioner<double> id(5, 2);
  Rng rng(1);
  const auto u = gaussian_matrix<double>(rng, 5, 2);
  const auto jr = layer_generate_jacobi(id, u, 0.5, 5);
  CHECK(jr.output == u);
  CHECK(jr.trace.iterations_used == 2);
  CHECK(jr.trace.iterations[1].step_inf == 0.0);
  CHECK_FALSE(jr.trace.truncated);
}

TEST_CASE("Jacobi on the prefix-sum stub follows the hand iterates") {
  const PrefixSumConditioner<double> stub(3, 1);
  const auto u = column<double>({1, 1, 1});
  std::vector<MatrixD> iterates;
  const auto jr = layer_generate_jacobi<double>(stub, u, 0.5, 10, nullptr, false,
                                                [&](std::size_t, const MatrixD& z) {
                                                  iterates.push_back(z);
                                                });
  REQUIRE(iterates.size() == 4);
  CHECK(iterates[0] == column<double>({1, 1, 1}));
  CHECK(iterates[1] == column<double>({1, 2, 3}));
  CHECK(iterates[2] == column<double>({1, 2, 4}));
  CHECK(iterates[3] == column<double>({1, 2, 4}));
  CHECK(jr.trace.iterations_used == 4);
  CHECK(jr.trace.iterations[3].step_inf == 0.0);
  CHECK(jr.output == column<double>({1, 2, 4}));
  CHECK(jr.output == layer_generate_sequential(stub, u));
  CHECK_FALSE(jr.trace.truncated);
}

TEST_CASE("Jacobi truncation flag") {
  const PrefixSumConditioner<double> stub(3, 1);
  const auto u = column<double>({1, 1, 1});
  const auto capped = layer_generate_jacobi(stub, u, 0.5, 2);
  CHECK(capped.trace.truncated);
  CHECK(capped.output == column<double>({1, 2, 3}));
  // With tau = 0 the cap is the intended stopping rule.
  const auto exact = layer_generate_jacobi(stub, u, 0.0, 3);
  CHECK_FALSE(exact.trace.truncated);
  CHECK(exact.output == column<double>({1, 2, 4}));
}

TEST_CASE("Jacobi rejects bad arguments") {
  const PrefixSumConditioner<double> stub(3, 1);
  CHECK_THROWS_AS(layer_generate_jacobi(stub, MatrixD(4, 1), 0.5, 3), ContractError);
  CHECK_THROWS_AS(layer_generate_jacobi(stub, MatrixD(3, 1), -1.0, 3), ContractError);
  CHECK_THROWS_AS(layer_generate_jacobi(stub, MatrixD(3, 1), 0.5, 0), ContractError);
}

TEST_CASE("Jacobi with tau = 0 and L iterations equals sequential generation") {
  constexpr float kTol = 1e-5f;
  Rng rng(2);
  for (const std::size_t L : {4u, 8u, 16u}) {
    const auto hp = small_hyper(L, 4, 16, 2);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const AttentionConditioner<float> layer(active_params<float>(seed + 100 * L, hp, 0.5));
      for (int i = 0; i < 3; ++i) {
        const auto u = gaussian_matrix<float>(rng, L, 4);
        const auto jr = layer_generate_jacobi(layer, u, 0.0, L);
        CHECK(inf_norm_diff(jr.output, layer_generate_sequential(layer, u)) <= kTol);
        CHECK(jr.trace.iterations_used == L);
      }
    }
  }
}

TEST_CASE("row 1 is exact after the first Jacobi iteration") {
  const auto hp = small_hyper(8, 3, 12, 2);
  const AttentionConditioner<float> layer(active_params<float>(4, hp, 0.5));
  Rng rng(4);
  const auto u = gaussian_matrix<float>(rng, 8, 3);
  const auto jr = layer_generate_jacobi(layer, u, 0.0, 1);
  for (std::size_t d = 0; d < 3; ++d) CHECK(jr.output(0, d) == u(0, d));
}

TEST_CASE("decode modes on identity stacks return the noise") {
  const auto hp = small_hyper(6, 2);
  Rng rng(5);
  const auto noise = gaussian_matrix<float>(rng, 6, 2);
  for (const bool flip : {false, true}) {
    const auto model = FlowModel<float>::identity(3, hp, flip);
    for (const auto m : {DecodeMode::kSequential, DecodeMode::kUjd, DecodeMode::kSejd}) {
      const auto r = decode(model, noise, config(m, 0.5));
      CHECK(r.x == noise);
      CHECK(r.trace.layers.size() == 3);
      CHECK(r.seconds >= 0.0);
    }
  }
}

TEST_CASE("decode mode bookkeeping") {
  const auto hp = small_hyper(8, 2, 8, 2);
  const auto model = active_model<float>(7, hp, 4, true, 0.5);
  Rng rng(7);
  const auto noise = gaussian_matrix<float>(rng, 8, 2);
  const auto seq = decode(model, noise, config(DecodeMode::kSequential, 0.5));
  CHECK(seq.x == model_generate(model, noise));
  for (const auto& t : seq.trace.layers) {
    CHECK(t.sequential);
    CHECK(t.iterations_used == 8);
  }

  SUBCASE("sejd selecting every layer equals sequential bit-exactly") {
    auto cfg = config(DecodeMode::kSejd, 0.5);
    cfg.sequential_layers = {1, 2, 3, 4};
    CHECK(decode(model, noise, cfg).x == seq.x);
  }
  SUBCASE("ujd with tau = 0 and L iterations matches sequential") {
    const auto r = decode(model, noise, config(DecodeMode::kUjd, 0.0, 8));
    CHECK(inf_norm_diff(r.x, seq.x) <= 1e-4f);
    for (const auto& t : r.trace.layers) CHECK_FALSE(t.sequential);
  }
  SUBCASE("sejd decodes only the selected layers sequentially") {
    const auto r = decode(model, noise, config(DecodeMode::kSejd, 0.0));
    CHECK(inf_norm_diff(r.x, seq.x) <= 1e-4f);
    REQUIRE(r.trace.layers.size() == 4);
    CHECK(r.trace.layers[0].sequential);
    for (std::size_t k = 1; k < 4; ++k) {
      CHECK_FALSE(r.trace.layers[k].sequential);
      CHECK(r.trace.layers[k].layer == k + 1);
    }
  }
  SUBCASE("a tight iteration cap with tau > 0 propagates truncation") {
    const auto r = decode(model, noise, config(DecodeMode::kUjd, 1e-9, 1));
    CHECK(r.trace.truncated());
  }
}

TEST_CASE("decode_batch matches per-sample decode for any thread count") {
  const auto hp = small_hyper(8, 2, 8, 2);
  const auto model = active_model<float>(8, hp, 2, true, 0.5);
  Rng rng(8);
  std::vector<Matrix> noise;
  for (int i = 0; i < 6; ++i) noise.push_back(gaussian_matrix<float>(rng, 8, 2));
  const auto cfg = config(DecodeMode::kSejd, 0.5);
  for (const std::size_t threads : {1u, 3u}) {
    const auto batch = decode_batch(model, noise, cfg, threads);
    REQUIRE(batch.size() == noise.size());
    for (std::size_t i = 0; i < noise.size(); ++i) CHECK(batch[i].x == decode(model, noise[i], cfg).x);
  }
}

TEST_CASE("prefix property") {
  SUBCASE("prefix-sum stub") {
    const PrefixSumConditioner<double> stub(3, 1);
    CHECK(prefix_property_check(stub, column<double>({1, 1, 1})).describe() == "none");
  }
  SUBCASE("identity layer") {
    const IdentityConditioner<float> id(4, 2);
    CHECK(prefix_property_check(id, Matrix(4, 2, 0.5f)).holds);
  }
  SUBCASE("random layers and inputs") {
    const auto hp = small_hyper(12, 3, 12, 2);
    const AttentionConditioner<float> layer(active_params<float>(9, hp, 0.5));
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
      const auto report = prefix_property_check(layer, gaussian_matrix<float>(rng, 12, 3));
      CHECK_MESSAGE(report.holds, report.describe());
    }
  }
  SUBCASE("a violation is reported with its location") {
    // A conditioner that peeks at its own row breaks P(t).
    class Peeking final : public Conditioner<double> {
     public:
      std::size_t seq_len() const override { return 3; }
      std::size_t patch_dim() const override { return 1; }
      using Conditioner<double>::forward;
      void forward(const MatrixD& y, std::size_t, ScaleShift<double>& out) const override {
        out.scale = MatrixD(3, 1);
        out.shift = MatrixD(3, 1);
        for (std::size_t l = 0; l < 3; ++l) out.shift(l, 0) = 0.5 * y(l, 0);
      }
    };
    const Peeking peek;
    const auto report = prefix_property_check(peek, column<double>({1, 1, 1}), 1e-5);
    CHECK_FALSE(report.holds);
    CHECK(report.iteration >= 1);
    CHECK(report.position >= 2);
    CHECK(report.describe() != "none");
  }
}

TEST_CASE("redundancy analysis") {
  Rng rng(10);
  std::vector<Matrix> noise;
  for (int i = 0; i < 4; ++i) noise.push_back(gaussian_matrix<float>(rng, 8, 2));
  const auto hp = small_hyper(8, 2, 8, 2);

  SUBCASE("no masking gives similarity one") {
    const auto model = active_model<float>(10, hp, 3, true, 0.5);
    for (const auto& row : redundancy_analysis(model, noise, 0)) {
      CHECK(row.cos_sim == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("identity stacks are unaffected by masking") {
    const auto model = FlowModel<float>::identity(3, hp, true);
    const auto rows = redundancy_analysis(model, noise, 5);
    REQUIRE(rows.size() == 3);
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(rows[k].layer == k + 1);
      CHECK(rows[k].cos_sim == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("masking a genuine layer changes its output") {
    const auto model = active_model<float>(11, hp, 2, true, 1.0);
    for (const auto& row : redundancy_analysis(model, noise, 5)) CHECK(row.cos_sim < 1.0);
  }
  SUBCASE("offset must be below L") {
    const auto model = FlowModel<float>::identity(2, hp, false);
    CHECK_THROWS_AS(redundancy_analysis(model, noise, 8), ContractError);
  }
}

TEST_CASE("convergence study") {
  SUBCASE("prefix-sum stub errors are sqrt(10), 1, 0") {
    const auto model = stub_model<double>({std::make_shared<PrefixSumConditioner<double>>(3, 1)});
    const auto rows = convergence_study(model, column<double>({1, 1, 1}), 3);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].err_l2 == doctest::Approx(std::sqrt(10.0)).epsilon(1e-15));
    CHECK(rows[1].err_l2 == 1.0);
    CHECK(rows[2].err_l2 == 0.0);
    CHECK(rows[0].step_inf == 1.0);
    CHECK(rows[1].step_inf == 2.0);
    CHECK(rows[2].step_inf == 1.0);
  }
  SUBCASE("identity stack has zero error from the first iteration") {
    const auto model = FlowModel<float>::identity(2, small_hyper(4, 2), true);
    Rng rng(11);
    for (const auto& row : convergence_study(model, gaussian_matrix<float>(rng, 4, 2), 4)) {
      CHECK(row.err_l2 == 0.0);
    }
  }
  SUBCASE("random model reaches the sequential answer by t = L") {
    const auto hp = small_hyper(8, 2, 8, 2);
    const auto model = active_model<float>(12, hp, 3, true, 0.5);
    Rng rng(12);
    std::vector<Matrix> noise;
    for (int i = 0; i < 3; ++i) noise.push_back(gaussian_matrix<float>(rng, 8, 2));
    const auto rows = convergence_study(model, noise, 8);
    CHECK(rows.size() == 3 * 8);
    for (const auto& row : rows) {
      if (row.iter == 8) CHECK(row.err_l2 <= 1e-5);
    }
  }
}

TEST_CASE("a larger threshold never needs more iterations") {
  const auto hp = small_hyper(16, 4, 16, 2);
  const AttentionConditioner<float> layer(active_params<float>(13, hp, 0.5));
  Rng rng(13);
  for (int i = 0; i < 5; ++i) {
    const auto u = gaussian_matrix<float>(rng, 16, 4);
    std::size_t prev = 17;
    for (const double tau : {0.0, 0.01, 0.1, 0.5, 1.0, 10.0}) {
      const auto used = layer_generate_jacobi(layer, u, tau, 16).trace.iterations_used;
      CHECK(used <= prev);
      prev = used;
    }
  }
}

TEST_CASE("convergence and redundancy CSV layouts") {
  std::ostringstream a;
  write_convergence_csv(a, {{1, 2, 0.5, 0.25}});
  CHECK(a.str() == "layer,iter,step_inf,err_l2\n1,2,0.5,0.25\n");
  std::ostringstream b;
  write_redundancy_csv(b, {{3, 0.75}});
  CHECK(b.str() == "layer,cos_sim\n3,0.75\n");
}
