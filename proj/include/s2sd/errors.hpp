#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace s2sd {

/// Primitive received operands with incompatible shapes.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A graph node produced a NaN or infinity.
class NonFiniteError : public std::runtime_error {
public:
  NonFiniteError(std::size_t node, std::string op, const std::string& what)
      : std::runtime_error(what), node_(node), op_(std::move(op)) {}

  std::size_t node() const noexcept { return node_; }
  const std::string& op() const noexcept { return op_; }

private:
  std::size_t node_;
  std::string op_;
};

class ConfigError : public std::invalid_argument {
public:
  ConfigError(std::string key, const std::string& what)
      : std::invalid_argument(what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

private:
  std::string key_;
};

/// File could not be read or written, or its contents are malformed.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss term.
class NumericalAbort : public std::runtime_error {
public:
  NumericalAbort(std::size_t step, std::string term, const std::string& what)
      : std::runtime_error(what), step_(step), term_(std::move(term)) {}

  std::size_t step() const noexcept { return step_; }
  const std::string& term() const noexcept { return term_; }

private:
  std::size_t step_;
  std::string term_;
};

}  // namespace s2sd
