#pragma once

#include <stdexcept>
#include <string>

namespace dmilab {

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A value left the finite domain or violated a probability invariant.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed configuration or argument outside its documented range.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Base for binary container failures.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MagicMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CorruptFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Training produced a non-finite loss. Carries where it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& stage, long epoch, long batch)
      : std::runtime_error("non-finite loss in " + stage + " at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(batch)),
        stage_(stage),
        epoch_(epoch),
        batch_(batch) {}

  const std::string& stage() const { return stage_; }
  long epoch() const { return epoch_; }
  long batch() const { return batch_; }

 private:
  std::string stage_;
  long epoch_;
  long batch_;
};

}  // namespace dmilab
