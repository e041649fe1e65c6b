#pragma once

#include <stdexcept>
#include <string>

namespace fairbranch {

// Root of every error the library throws. Subclasses map onto the error
// kinds the CLI reports (usage vs runtime).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class SplitError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class MetricError : public Error { using Error::Error; };
class InternalError : public Error { using Error::Error; };

}  // namespace fairbranch
