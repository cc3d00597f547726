#include "sejd/data.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace sejd {

// ---------------------------------------------------------------------------
// Datasets

Matrix patchify(const Matrix& image, std::size_t patch) {
  if (patch == 0 || image.rows() % patch != 0 || image.cols() % patch != 0) {
    throw ContractError("patchify: image " + std::to_string(image.rows()) + "x" +
                        std::to_string(image.cols()) + " not divisible by patch " +
                        std::to_string(patch));
  }
  const std::size_t grid_cols = image.cols() / patch;
  const std::size_t count = (image.rows() / patch) * grid_cols;
  Matrix seq(count, patch * patch);
  for (std::size_t r = 0; r < image.rows(); ++r) {
    for (std::size_t c = 0; c < image.cols(); ++c) {
      const std::size_t p = (r / patch) * grid_cols + c / patch;
      seq(p, (r % patch) * patch + c % patch) = image(r, c);
    }
  }
  return seq;
}

Matrix unpatchify(const Matrix& seq, std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0 ||
      seq.rows() != (height / patch) * (width / patch) || seq.cols() != patch * patch) {
    throw ContractError("unpatchify: sequence shape does not match image geometry");
  }
  const std::size_t grid_cols = width / patch;
  Matrix image(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      image(r, c) = seq((r / patch) * grid_cols + c / patch, (r % patch) * patch + c % patch);
    }
  }
  return image;
}

Dataset gen_gradient_patches(std::uint64_t seed, std::size_t n) {
  if (n < 1) throw ContractError("gen_gradient_patches: n must be >= 1");
  constexpr double kNoise = 0.05;
  constexpr double kHalf = (kImageSide - 1) / 2.0;
  Rng rng(seed);
  std::vector<std::vector<double>> images(n, std::vector<double>(kImageSide * kImageSide));
  double sum = 0.0;
  for (auto& img : images) {
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    const double offset = 2.0 * rng.uniform() - 1.0;
    const double dx = std::cos(angle);
    const double dy = std::sin(angle);
    for (std::size_t r = 0; r < kImageSide; ++r) {
      for (std::size_t c = 0; c < kImageSide; ++c) {
        const double x = (static_cast<double>(c) - kHalf) / kHalf;
        const double y = (static_cast<double>(r) - kHalf) / kHalf;
        const double v = dx * x + dy * y + offset + kNoise * rng.normal();
        img[r * kImageSide + c] = v;
        sum += v;
      }
    }
  }
  const double count = static_cast<double>(n * kImageSide * kImageSide);
  const double mean = sum / count;
  double var = 0.0;
  for (const auto& img : images) {
    for (const double v : img) var += (v - mean) * (v - mean);
  }
  const double inv_std = 1.0 / std::sqrt(var / count);

  Dataset data;
  data.generator = "gradient-patches";
  data.seed = seed;
  data.samples.reserve(n);
  for (const auto& img : images) {
    Matrix image(kImageSide, kImageSide);
    for (std::size_t i = 0; i < img.size(); ++i) {
      image.data()[i] = static_cast<float>((img[i] - mean) * inv_std);
    }
    data.samples.push_back(patchify(image));
  }
  data.seq_len = data.samples.front().rows();
  data.patch_dim = data.samples.front().cols();
  return data;
}

Dataset make_dataset(const std::string& generator, std::uint64_t seed, std::size_t n) {
  if (generator == "gradient-patches") return gen_gradient_patches(seed, n);
  throw ContractError("unknown dataset '" + generator + "'");
}

std::pair<std::vector<Matrix>, std::vector<Matrix>> split_holdout(const Dataset& data) {
  std::vector<Matrix> train;
  std::vector<Matrix> held_out;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    (i % 10 == 9 ? held_out : train).push_back(data.samples[i]);
  }
  return {std::move(train), std::move(held_out)};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'S', 'E', 'J', 'D'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 5 * 4 + 4 + 1 + 4 + 4;
constexpr std::uint32_t kMaxLayers = 4096;
constexpr std::uint32_t kMaxHyperDim = 1u << 16;
constexpr std::uint32_t kMaxBlocks = 1024;
constexpr std::uint32_t kMaxNameLen = 256;
constexpr std::uint32_t kMaxRank = 4;
constexpr std::uint64_t kMaxDim = 1u << 24;
constexpr std::uint64_t kMaxElements = 1ull << 26;

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const std::string& record, const char* what) const {
    if (remaining() < n) {
      throw CheckpointError(CheckpointErrorKind::kTruncated, bytes_.size(), record,
                            std::string("file ends while reading ") + what + " (need " +
                                std::to_string(n) + " bytes, have " +
                                std::to_string(remaining()) + ")");
    }
  }
  std::uint8_t u8(const std::string& record, const char* what) {
    need(1, record, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const std::string& record, const char* what) {
    need(4, record, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const std::string& record, const char* what) {
    return std::bit_cast<float>(u32(record, what));
  }
  std::span<const std::uint8_t> take(std::size_t n, const std::string& record, const char* what) {
    need(n, record, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Header fields before the checksum, then the tensor records.
std::uint32_t crc_of(std::span<const std::uint8_t> header, std::span<const std::uint8_t> body) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, header.data(), static_cast<uInt>(header.size()));
  crc = crc32(crc, body.data(), static_cast<uInt>(body.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string layer_record_name(std::size_t k, const std::string& name) {
  return "layers." + std::to_string(k) + "." + name;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const FlowModel<float>& model) {
  if (!model.hyper()) throw ContractError("save_checkpoint: model has analytic layers");
  const ConditionerHyper& hp = *model.hyper();
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.num_layers()));
  w.u32(static_cast<std::uint32_t>(hp.seq_len));
  w.u32(static_cast<std::uint32_t>(hp.patch_dim));
  w.u32(static_cast<std::uint32_t>(hp.channels));
  w.u32(static_cast<std::uint32_t>(hp.blocks));
  w.f32(static_cast<float>(hp.scale_clamp));
  w.u8(model.flip_between_layers() ? 1 : 0);
  const std::size_t count_at = w.bytes().size();
  w.u32(0);
  const std::size_t crc_at = w.bytes().size();
  w.u32(0);

  std::uint32_t records = 0;
  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    model.params(k).for_each([&](const std::string& name, const Matrix& m) {
      const std::string full = layer_record_name(k, name);
      w.u32(static_cast<std::uint32_t>(full.size()));
      w.raw(full.data(), full.size());
      w.u32(2);
      w.u32(static_cast<std::uint32_t>(m.rows()));
      w.u32(static_cast<std::uint32_t>(m.cols()));
      for (const float v : m.values()) w.f32(v);
      ++records;
    });
  }
  w.patch_u32(count_at, records);
  auto& bytes = w.bytes();
  w.patch_u32(crc_at, crc_of(std::span(bytes).first(crc_at), std::span(bytes).subspan(kHeaderBytes)));
  return std::move(bytes);
}

FlowModel<float> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::string header = "header";
  const auto magic = r.take(4, header, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic)) {
    throw CheckpointError(CheckpointErrorKind::kBadMagic, 0, "", "expected \"SEJD\"");
  }
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32(header, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::kVersionMismatch, version_at, "",
                          "unsupported version " + std::to_string(version));
  }
  const std::size_t hyper_at = r.offset();
  const std::uint32_t K = r.u32(header, "layer count");
  ConditionerHyper hp;
  hp.seq_len = r.u32(header, "seq_len");
  hp.patch_dim = r.u32(header, "patch_dim");
  hp.channels = r.u32(header, "channels");
  hp.blocks = r.u32(header, "blocks");
  hp.scale_clamp = r.f32(header, "scale_clamp");
  const std::uint8_t flip = r.u8(header, "flip flag");
  const std::uint32_t record_count = r.u32(header, "record count");
  const std::uint32_t expected_crc = r.u32(header, "checksum");

  if (K > kMaxLayers || hp.seq_len > kMaxHyperDim || hp.patch_dim > kMaxHyperDim ||
      hp.channels > kMaxHyperDim || hp.blocks > kMaxBlocks) {
    throw CheckpointError(CheckpointErrorKind::kDimensionOverflow, hyper_at, "",
                          "hyperparameters exceed hard limits");
  }
  if (K < 1 || flip > 1) {
    throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, hyper_at, "",
                          "invalid layer count or flip flag");
  }
  try {
    hp.validate();
  } catch (const ContractError& e) {
    throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, hyper_at, "", e.what());
  }

  {
    const std::uint64_t L = hp.seq_len, D = hp.patch_dim, C = hp.channels, B = hp.blocks;
    const std::uint64_t per_layer =
        D * C + C + L * C + B * (12 * C * C + 9 * C) + 2 * D * C + 2 * D;
    if (per_layer > kMaxElements || per_layer * K > kMaxElements) {
      throw CheckpointError(CheckpointErrorKind::kDimensionOverflow, hyper_at, "",
                            "parameter count exceeds hard limit");
    }
  }
  // Expected record layout for these hyperparameters.
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> layout;
  const auto shape_template = ConditionerParams<float>::zeros(hp);
  for (std::size_t k = 0; k < K; ++k) {
    shape_template.for_each([&](const std::string& name, const Matrix& m) {
      layout.push_back({layer_record_name(k, name), {m.rows(), m.cols()}});
    });
  }
  if (record_count != layout.size()) {
    throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, hyper_at, "",
                          "record count " + std::to_string(record_count) + " but expected " +
                              std::to_string(layout.size()));
  }

  const std::size_t body_at = r.offset();
  std::vector<Matrix> tensors;
  tensors.reserve(layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::string& expected_name = layout[i].first;
    const std::size_t record_at = r.offset();
    const std::uint32_t name_len = r.u32(expected_name, "name length");
    if (name_len > kMaxNameLen) {
      throw CheckpointError(CheckpointErrorKind::kDimensionOverflow, record_at, expected_name,
                            "name length " + std::to_string(name_len) + " exceeds limit");
    }
    const auto name_bytes = r.take(name_len, expected_name, "name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    if (name != expected_name) {
      throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, record_at, expected_name,
                            "found record '" + name + "'");
    }
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32(name, "rank");
    if (rank > kMaxRank) {
      throw CheckpointError(CheckpointErrorKind::kDimensionOverflow, rank_at, name,
                            "rank " + std::to_string(rank) + " exceeds limit");
    }
    std::vector<std::uint64_t> dims(rank);
    std::uint64_t elements = 1;
    for (auto& d : dims) {
      const std::size_t dim_at = r.offset();
      d = r.u32(name, "dims");
      if (d > kMaxDim || (elements *= std::max<std::uint64_t>(d, 1)) > kMaxElements) {
        throw CheckpointError(CheckpointErrorKind::kDimensionOverflow, dim_at, name,
                              "tensor dimensions exceed hard limits");
      }
    }
    const auto [rows, cols] = layout[i].second;
    if (rank != 2 || dims[0] != rows || dims[1] != cols) {
      throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, rank_at, name,
                            "expected shape " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    r.need(rows * cols * 4, name, "payload");
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = r.f32(name, "payload");
    tensors.push_back(std::move(m));
  }
  const auto body = bytes.subspan(body_at, r.offset() - body_at);
  if (crc_of(bytes.first(kHeaderBytes - 4), body) != expected_crc) {
    throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, body_at, "",
                          "checksum mismatch");
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, r.offset(), "",
                          std::to_string(r.remaining()) + " trailing bytes");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!all_finite(tensors[i])) {
      throw CheckpointError(CheckpointErrorKind::kSchemaMismatch, body_at, layout[i].first,
                            "non-finite weights");
    }
  }

  std::vector<ConditionerParams<float>> params;
  std::size_t next = 0;
  for (std::size_t k = 0; k < K; ++k) {
    auto p = ConditionerParams<float>::zeros(hp);
    p.for_each([&](const std::string&, Matrix& m) { m = std::move(tensors[next++]); });
    params.push_back(std::move(p));
  }
  return FlowModel<float>::from_params(std::move(params), flip == 1);
}

void save_checkpoint(const FlowModel<float>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError(CheckpointErrorKind::kIo, 0, "", "cannot open " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointErrorKind::kIo, 0, "", "write failed: " + path.string());
}

FlowModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::kIo, 0, "", "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace sejd
