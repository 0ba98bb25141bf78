// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mtr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated (e.g. non-positive timescale).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class InvalidRatioError : public Error {
 public:
  using Error::Error;
};

class InvalidPartitionError : public Error {
 public:
  using Error::Error;
};

// Token bookkeeping is inconsistent (duplicate original indices, ...).
class CorruptionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UnattainableTargetError : public Error {
 public:
  UnattainableTargetError(const std::string& what, double max_achievable)
      : Error(what), max_achievable_(max_achievable) {}
  double max_achievable() const noexcept { return max_achievable_; }

 private:
  double max_achievable_;
};

// Non-finite values showed up during inference.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int layer) : Error(what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

// Checkpoint / file errors.
class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public Error {
 public:
  using Error::Error;
};

class PayloadMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtr
