#pragma once

#include <stdexcept>
#include <string>

namespace diffdyg {

// Every failure raised by the library carries a short machine-readable kind
// ("parse", "ordering", "config", ...) so the CLI can emit it as JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("parse", "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class OrderingError : public Error {
 public:
  OrderingError(std::size_t line, const std::string& what)
      : Error("ordering", "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

#define DIFFDYG_DEFINE_ERROR(Name, kind_str)                              \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(kind_str, what) {}     \
  };

DIFFDYG_DEFINE_ERROR(SchemaError, "schema")
DIFFDYG_DEFINE_ERROR(SplitError, "split")
DIFFDYG_DEFINE_ERROR(SamplingError, "sampling")
DIFFDYG_DEFINE_ERROR(GenerationError, "generation")
DIFFDYG_DEFINE_ERROR(ConfigError, "config")
DIFFDYG_DEFINE_ERROR(NumericError, "numeric")
DIFFDYG_DEFINE_ERROR(MissingGradientError, "missing_gradient")
DIFFDYG_DEFINE_ERROR(UpdateError, "update")
DIFFDYG_DEFINE_ERROR(BatchError, "batch")
DIFFDYG_DEFINE_ERROR(MetricError, "metric")
DIFFDYG_DEFINE_ERROR(TrainingError, "training")
DIFFDYG_DEFINE_ERROR(PreconditionError, "precondition")
DIFFDYG_DEFINE_ERROR(IoError, "io")

#undef DIFFDYG_DEFINE_ERROR

}  // namespace diffdyg
