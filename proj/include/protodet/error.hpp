#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace protodet {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension incompatibility between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Out-of-range numeric parameter (rates, eps, counts).
class ParameterError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// backward() was handed a tensor that was never recorded on a tape.
class MissingTapeError : public Error {
 public:
  using Error::Error;
};

// A non-finite value was produced or supplied.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Two forward passes of a function under gradient check disagreed.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

// Empty support set, empty query set or empty RoI set.
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during optimization; carries the offending step.
class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : Error("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace protodet
