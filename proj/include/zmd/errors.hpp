#pragma once

#include <stdexcept>
#include <string>

namespace zmd {

enum class ErrorCode {
  invalid_geometry,
  invalid_profile,
  store,
  adapter,
  contract,
  training,
  registration,
  numeric,
  config,
  generation,
  report,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_geometry: return "invalid_geometry";
    case ErrorCode::invalid_profile: return "invalid_profile";
    case ErrorCode::store: return "store";
    case ErrorCode::adapter: return "adapter";
    case ErrorCode::contract: return "contract";
    case ErrorCode::training: return "training";
    case ErrorCode::registration: return "registration";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::config: return "config";
    case ErrorCode::generation: return "generation";
    case ErrorCode::report: return "report";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace zmd
