#pragma once

#include <stdexcept>
#include <string>

namespace chartnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes, batch sizes or dimensions.
class ShapeError : public Error {
  public:
    using Error::Error;
};

/// Argument outside the domain of an operation (log of a negative, bad index, ...).
class DomainError : public Error {
  public:
    using Error::Error;
};

/// An operation produced NaN or Inf.
class NonFiniteError : public Error {
  public:
    using Error::Error;
};

/// Malformed files, checkpoints and configs.
class FormatError : public Error {
  public:
    using Error::Error;
};

/// Training produced a non-finite loss or parameter.
class DivergenceError : public Error {
  public:
    DivergenceError(std::size_t step, const std::string& what)
        : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

    std::size_t step() const noexcept { return step_; }

  private:
    std::size_t step_;
};

} // namespace chartnet
