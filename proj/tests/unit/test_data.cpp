#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "sejd/data.hpp"
#include "support.hpp"

using namespace sejd;
using namespace sejd::testing;

namespace {

// Byte offsets inside the fixed header.
constexpr std::size_t kVersionAt = 4;
constexpr std::size_t kLayersAt = 8;
constexpr std::size_t kChannelsAt = 20;
constexpr std::size_t kHeaderBytes = 41;

FlowModel<float> small_model(std::uint64_t seed, std::size_t K = 2, bool flip = true) {
  ConditionerHyper hp;
  hp.seq_len = 6;
  hp.patch_dim = 2;
  hp.channels = 8;
  hp.blocks = 2;
  return active_model<float>(seed, hp, K, flip, 0.5);
}

void put_u32(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

CheckpointError parse_error(std::span<const std::uint8_t> bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e;
  }
  FAIL("parse succeeded on malformed input");
  throw std::logic_error("unreachable");
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("sejd_test_" + name);
}

}  // namespace

TEST_CASE("gradient-patches is deterministic per seed") {
  const auto a = gen_gradient_patches(3, 50);
  const auto b = gen_gradient_patches(3, 50);
  const auto c = gen_gradient_patches(4, 50);
  REQUIRE(a.samples.size() == 50);
  CHECK(a.seq_len == 16);
  CHECK(a.patch_dim == 4);
  CHECK(a.generator == "gradient-patches");
  bool differs = false;
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(a.samples[i] == b.samples[i]);
    differs = differs || !(a.samples[i] == c.samples[i]);
  }
  CHECK(differs);
  CHECK_THROWS_AS(gen_gradient_patches(0, 0), ContractError);
  CHECK_THROWS_AS(make_dataset("cifar", 0, 10), ContractError);
}

TEST_CASE("gradient-patches is standardized") {
  const auto data = gen_gradient_patches(1, 2000);
  double sum = 0.0;
  double count = 0.0;
  for (const auto& s : data.samples) {
    for (const float v : s.values()) {
      sum += v;
      count += 1.0;
    }
  }
  const double mean = sum / count;
  double var = 0.0;
  for (const auto& s : data.samples) {
    for (const float v : s.values()) var += (v - mean) * (v - mean);
  }
  var /= count;
  CHECK(std::abs(mean) <= 1e-6);
  CHECK(std::abs(var - 1.0) <= 1e-3);
}

TEST_CASE("neighbouring patches are strongly correlated") {
  constexpr std::size_t kSamples = 10000;
  constexpr std::size_t kGrid = kImageSide / kPatchSide;
  const auto data = gen_gradient_patches(2, kSamples);
  const auto patch_mean = [](const Matrix& s, std::size_t p) {
    double m = 0.0;
    for (std::size_t d = 0; d < s.cols(); ++d) m += s(p, d);
    return m / static_cast<double>(s.cols());
  };
  const auto pearson = [&](std::size_t p, std::size_t q) {
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (const auto& s : data.samples) {
      const double a = patch_mean(s, p);
      const double b = patch_mean(s, q);
      sa += a;
      sb += b;
      saa += a * a;
      sbb += b * b;
      sab += a * b;
    }
    const double n = kSamples;
    const double cov = sab / n - (sa / n) * (sb / n);
    const double va = saa / n - (sa / n) * (sa / n);
    const double vb = sbb / n - (sb / n) * (sb / n);
    return cov / std::sqrt(va * vb);
  };
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t r = 0; r < kGrid; ++r) {
    for (std::size_t c = 0; c < kGrid; ++c) {
      const std::size_t p = r * kGrid + c;
      if (c + 1 < kGrid) {
        total += pearson(p, p + 1);
        ++pairs;
      }
      if (r + 1 < kGrid) {
        total += pearson(p, p + kGrid);
        ++pairs;
      }
    }
  }
  CHECK(pairs == 24);
  CHECK(total / static_cast<double>(pairs) > 0.5);
}

TEST_CASE("held-out split takes every tenth sample") {
  const auto data = gen_gradient_patches(5, 35);
  const auto [train, held] = split_holdout(data);
  CHECK(train.size() == 32);
  REQUIRE(held.size() == 3);
  CHECK(held[0] == data.samples[9]);
  CHECK(held[2] == data.samples[29]);
  CHECK(train[9] == data.samples[10]);
}

TEST_CASE("patchify") {
  SUBCASE("constant image") {
    const auto seq = patchify(Matrix(8, 8, 2.5f));
    CHECK(seq.rows() == 16);
    CHECK(seq.cols() == 4);
    for (const float v : seq.values()) CHECK(v == 2.5f);
  }
  SUBCASE("single hot pixel lands in patch 1") {
    Matrix img(8, 8);
    img(0, 0) = 1.0f;
    const auto seq = patchify(img);
    CHECK(seq(0, 0) == 1.0f);
    float rest = 0.0f;
    for (std::size_t i = 1; i < seq.size(); ++i) rest += std::abs(seq.data()[i]);
    CHECK(rest == 0.0f);
  }
  SUBCASE("row-major patch order and in-patch layout") {
    Matrix img(8, 8);
    img(1, 3) = 7.0f;  // patch row 0, patch col 1, in-patch (1, 1)
    img(6, 0) = 9.0f;  // patch row 3, patch col 0, in-patch (0, 0)
    const auto seq = patchify(img);
    CHECK(seq(1, 3) == 7.0f);
    CHECK(seq(12, 0) == 9.0f);
  }
  SUBCASE("roundtrip is bit-exact") {
    Rng rng(6);
    const auto img = gaussian_matrix<float>(rng, 8, 8);
    CHECK(unpatchify(patchify(img)) == img);
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(patchify(Matrix(7, 8)), ContractError);
    CHECK_THROWS_AS(unpatchify(Matrix(15, 4)), ContractError);
  }
}

TEST_CASE("checkpoint roundtrip is bit-exact") {
  const auto model = small_model(1);
  const auto bytes = serialize_checkpoint(model);
  const auto loaded = parse_checkpoint(bytes);
  CHECK(loaded.num_layers() == 2);
  CHECK(loaded.flip_between_layers());
  REQUIRE(loaded.hyper().has_value());
  CHECK(*loaded.hyper() == *model.hyper());
  for (std::size_t k = 0; k < 2; ++k) {
    auto a = model.params(k);
    auto b = loaded.params(k);
    const auto ta = tensors_of(a);
    const auto tb = tensors_of(b);
    for (std::size_t t = 0; t < ta.size(); ++t) {
      REQUIRE(ta[t]->size() == tb[t]->size());
      CHECK(std::memcmp(ta[t]->data(), tb[t]->data(), ta[t]->size() * sizeof(float)) == 0);
    }
  }
  CHECK(serialize_checkpoint(loaded) == bytes);

  const auto path = temp_path("roundtrip.sejd");
  save_checkpoint(model, path);
  const auto again = load_checkpoint(path);
  const auto path2 = temp_path("roundtrip2.sejd");
  save_checkpoint(again, path2);
  std::ifstream f1(path, std::ios::binary);
  std::ifstream f2(path2, std::ios::binary);
  const std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint header layout") {
  const auto bytes = serialize_checkpoint(small_model(2, 3, false));
  CHECK(std::memcmp(bytes.data(), "SEJD", 4) == 0);
  CHECK(bytes[kVersionAt] == kCheckpointVersion);
  CHECK(bytes[kLayersAt] == 3);
  CHECK(bytes[kChannelsAt] == 8);
  CHECK(bytes[kHeaderBytes - 9] == 0);  // flip flag
  // First record follows the header: name length, then the name.
  const std::string first = "layers.0.in_proj.weight";
  CHECK(bytes[kHeaderBytes] == first.size());
  CHECK(std::string(bytes.begin() + kHeaderBytes + 4, bytes.begin() + kHeaderBytes + 4 + first.size()) ==
        first);
}

TEST_CASE("checkpoint parse errors") {
  const auto good = serialize_checkpoint(small_model(3));

  SUBCASE("truncation by one byte names the last record") {
    const auto e = parse_error(std::span(good).first(good.size() - 1));
    CHECK(e.kind() == CheckpointErrorKind::kTruncated);
    CHECK(e.record() == "layers.1.head.bias");
  }
  SUBCASE("truncated header") {
    const auto e = parse_error(std::span(good).first(10));
    CHECK(e.kind() == CheckpointErrorKind::kTruncated);
    CHECK(e.offset() <= 10);
  }
  SUBCASE("bad magic") {
    auto bytes = good;
    bytes[1] ^= 0xff;
    const auto e = parse_error(bytes);
    CHECK(e.kind() == CheckpointErrorKind::kBadMagic);
    CHECK(e.offset() == 0);
  }
  SUBCASE("unknown version") {
    auto bytes = good;
    put_u32(bytes, kVersionAt, kCheckpointVersion + 1);
    const auto e = parse_error(bytes);
    CHECK(e.kind() == CheckpointErrorKind::kVersionMismatch);
    CHECK(e.offset() == kVersionAt);
  }
  SUBCASE("oversized dimensions are rejected before allocation") {
    auto bytes = good;
    put_u32(bytes, kChannelsAt, 60000);
    CHECK(parse_error(bytes).kind() == CheckpointErrorKind::kDimensionOverflow);
    bytes = good;
    put_u32(bytes, kLayersAt, 0xffffffffu);
    CHECK(parse_error(bytes).kind() == CheckpointErrorKind::kDimensionOverflow);
    bytes = good;
    put_u32(bytes, kLayersAt, 4000);
    put_u32(bytes, kChannelsAt, 1024);
    CHECK(parse_error(bytes).kind() == CheckpointErrorKind::kDimensionOverflow);
  }
  SUBCASE("payload corruption fails the checksum") {
    auto bytes = good;
    bytes[bytes.size() - 2] ^= 0x10;
    CHECK(parse_error(bytes).kind() == CheckpointErrorKind::kSchemaMismatch);
  }
  SUBCASE("trailing bytes") {
    auto bytes = good;
    bytes.push_back(0);
    CHECK(parse_error(bytes).kind() == CheckpointErrorKind::kSchemaMismatch);
  }
  SUBCASE("missing file") {
    try {
      load_checkpoint(temp_path("does_not_exist.sejd"));
      FAIL("expected an error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointErrorKind::kIo);
    }
  }
}

TEST_CASE("random truncations and corruptions give structured errors") {
  const auto good = serialize_checkpoint(small_model(4));
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::uint8_t> bytes;
    if (i % 2 == 0) {
      bytes.assign(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(rng.below(good.size())));
    } else {
      bytes = good;
      const auto flips = 1 + rng.below(4);
      for (std::uint64_t f = 0; f < flips; ++f) {
        bytes[rng.below(bytes.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
      }
    }
    CHECK_THROWS_AS(parse_checkpoint(bytes), CheckpointError);
  }
}

TEST_CASE("analytic models cannot be saved") {
  const auto model = FlowModel<float>::identity(2, ConditionerHyper{}, false);
  CHECK_THROWS_AS(serialize_checkpoint(model), ContractError);
}
