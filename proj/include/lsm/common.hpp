#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace lsm {

// Error taxonomy. Everything user-facing derives from lsm::error so the CLI
// can map library failures to a single exit code.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / OS-level I/O failure (missing file, short write, ...).
struct io_error : error {
  using error::error;
};

// Malformed on-disk or in-memory data: bad sidecar, truncated payload,
// token framing violations. `offset` is the byte (or token) position of the
// first offending unit when known.
struct format_error : error {
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit format_error(const std::string& msg, std::size_t off = npos)
      : error(off == npos ? msg : msg + " (offset " + std::to_string(off) + ")"),
        offset(off) {}

  std::size_t offset = npos;
};

// Invalid arguments, scene specifications, or model configurations.
struct spec_error : error {
  using error::error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw spec_error(msg);
}

}  // namespace lsm
