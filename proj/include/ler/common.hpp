#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>

namespace ler {

inline constexpr const char* kVersion = "0.1.0";

// Error hierarchy. Everything user-facing derives from Error so the CLI can
// catch one type and print the message.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

class MappingError : public Error {
 public:
  using Error::Error;
};

// Non-fatal diagnostics go through a process-wide sink (stderr by default).
// Tests swap the sink to assert on emitted warnings.
namespace detail {
inline std::mutex& warn_mutex() {
  static std::mutex m;
  return m;
}
inline std::function<void(const std::string&)>& warn_sink() {
  static std::function<void(const std::string&)> sink;
  return sink;
}
}  // namespace detail

inline void set_warning_sink(std::function<void(const std::string&)> sink) {
  std::lock_guard<std::mutex> lock(detail::warn_mutex());
  detail::warn_sink() = std::move(sink);
}

inline void warn(const std::string& message) {
  std::lock_guard<std::mutex> lock(detail::warn_mutex());
  if (detail::warn_sink()) {
    detail::warn_sink()(message);
  } else {
    std::fprintf(stderr, "warning: %s\n", message.c_str());
  }
}

// FNV-1a 64-bit, used for input/output digests in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t hash = 0xcbf29ce484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

inline std::uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    hash = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), hash);
    if (!in) break;
  }
  return hash;
}

inline std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return std::string(buf);
}

// Fixed-width numeric formatting for CSV output; %.10g keeps files stable
// across runs while staying readable.
inline std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", value);
  return std::string(buf);
}

}  // namespace ler
