#pragma once

#include <stdexcept>
#include <string>

namespace atbias {

// All engine errors derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid BiasConfig / FilterConfig values or incompatible settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A caller violated an operation precondition (empty input, bad count).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Backend unreachable, timed out, or unable to answer a request.
class TransportError : public Error {
 public:
  using Error::Error;
};

// Backend answered but the payload breaks the wire contract.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Malformed file content. The message names the line and field.
class ParseError : public Error {
 public:
  using Error::Error;
};

class VersionError : public ParseError {
 public:
  using ParseError::ParseError;
};

}  // namespace atbias
