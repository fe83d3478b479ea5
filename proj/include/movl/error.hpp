#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace movl {

/// Invalid user-facing configuration (bad alpha, bad geometry, bad schedule).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a shape or precondition contract.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class GeometryError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class MalformedDatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptLabelsError : public MalformedDatasetError {
 public:
  using MalformedDatasetError::MalformedDatasetError;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Label matching cannot be injective (fewer source classes than target classes).
class InfeasibleError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Exhaustive search refused because the problem exceeds its size bound.
class SizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Pretraining finished but missed its accuracy gate.
class TrainingFailureError : public std::runtime_error {
 public:
  TrainingFailureError(const std::string& what, double accuracy)
      : std::runtime_error(what), accuracy_(accuracy) {}
  double accuracy() const { return accuracy_; }

 private:
  double accuracy_;
};

}  // namespace movl
