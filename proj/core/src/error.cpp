#include "sit/error.hpp"

namespace sit {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape error";
    case ErrorKind::parse: return "parse error";
    case ErrorKind::validation: return "validation error";
    case ErrorKind::structural: return "structural error";
    case ErrorKind::argument: return "argument error";
    case ErrorKind::resource_limit: return "resource limit error";
    case ErrorKind::state: return "state error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::configuration: return "configuration error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

ParseError::ParseError(const std::string& m, std::size_t line)
    : Error(ErrorKind::parse, "line " + std::to_string(line) + ": " + m), line_(line), reason_(m) {}

NumericError::NumericError(const std::string& m, long iteration)
    : Error(ErrorKind::numeric, m), iteration_(iteration) {}

}  // namespace sit
