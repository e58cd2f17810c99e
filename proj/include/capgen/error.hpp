#pragma once

#include <stdexcept>
#include <string>

namespace capgen {

/// Failure categories. The CLI maps these onto exit codes, so keep the
/// distinction between caller mistakes (usage) and bad inputs (everything
/// else except `internal`).
enum class Errc {
  usage,
  io,
  parse,
  duplicate,
  format,
  corruption,
  version,
  shape,
  range,
  missing,
  mismatch,
  numeric,
  internal,
};

const char* to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace capgen
