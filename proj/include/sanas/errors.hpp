#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace sanas {

// Error categories map one-to-one onto the CLI's machine-parseable
// failure lines ("error: <category>: <message>").
struct Error : std::runtime_error {
  Error(std::string cat, const std::string& msg)
      : std::runtime_error(msg), category(std::move(cat)) {}
  std::string category;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error("validation", m) {}
};
struct InfeasibleError : Error {
  explicit InfeasibleError(const std::string& m) : Error("infeasible", m) {}
};

}  // namespace sanas
