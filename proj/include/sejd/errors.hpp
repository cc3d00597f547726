#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sejd {

// Shape or precondition mismatch in a call.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UndefinedSimilarityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// KV cache does not describe the prefix it was handed.
class CacheDesyncError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class TrainingDivergenceError : public std::runtime_error {
 public:
  TrainingDivergenceError(const std::string& what, std::int64_t step)
      : std::runtime_error(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

enum class CheckpointErrorKind {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kDimensionOverflow,
  kSchemaMismatch,
};

const char* to_string(CheckpointErrorKind kind);

// Structured checkpoint parse failure. `offset` is the byte position where
// the problem was detected; `record` names the tensor being read, if any.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, std::uint64_t offset, std::string record,
                  const std::string& detail);

  CheckpointErrorKind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }
  const std::string& record() const noexcept { return record_; }

 private:
  CheckpointErrorKind kind_;
  std::uint64_t offset_;
  std::string record_;
};

}  // namespace sejd
