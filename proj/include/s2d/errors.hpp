#pragma once

#include <stdexcept>
#include <string>

namespace s2d {

/// Argument outside the mathematical domain of an operation (negative kappa, delta not in (0,1), ...).
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Two operands disagree on the ambient dimension.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A normalization or estimate hit a singular configuration
/// (zero pooled representation, collapsed EMA vector, resultant length one).
class DegenerateError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration (missing key, unknown key, empty class, bad table).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data.
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Remote observer replied with something that violates the wire protocol.
class ProtocolError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Remote observer process could not be reached or went away.
class TransportError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace s2d
