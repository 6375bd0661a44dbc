#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace simclip {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclass onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or embedding widths disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid hyperparameter or option (exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Labels, ids or counts that violate the dataset contract (exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

/// A file that does not follow its declared binary or JSON layout (exit code 3).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Structurally broken file; carries the byte offset where reading failed.
class CorruptionError : public FormatError {
public:
    CorruptionError(const std::string& what, std::uint64_t offset)
        : FormatError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// NaN or Inf produced during computation (exit code 4).
class NumericError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. backward from a non-scalar.
class ContractError : public Error {
public:
    using Error::Error;
};

/// A metric that has no value for the given input, e.g. AUROC with one class.
class UndefinedMetric : public Error {
public:
    using Error::Error;
};

}  // namespace simclip
