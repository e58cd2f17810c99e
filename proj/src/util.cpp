#include "capgen/error.hpp"
#include "capgen/util.hpp"

#include <cstdio>

namespace capgen {

const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::usage: return "usage";
    case Errc::io: return "io";
    case Errc::parse: return "parse";
    case Errc::duplicate: return "duplicate";
    case Errc::format: return "format";
    case Errc::corruption: return "corruption";
    case Errc::version: return "version";
    case Errc::shape: return "shape";
    case Errc::range: return "range";
    case Errc::missing: return "missing";
    case Errc::mismatch: return "mismatch";
    case Errc::numeric: return "numeric";
    case Errc::internal: return "internal";
  }
  return "unknown";
}

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace capgen
