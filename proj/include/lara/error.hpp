#pragma once

#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lara {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: templates, task files, weight files, flags.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Backend unreachable or failing after retries.
class ProviderError : public Error {
 public:
  using Error::Error;
};

/// Backend answered, but not in the expected wire shape.
class ProtocolError : public ProviderError {
 public:
  using ProviderError::ProviderError;
};

/// Internal contract broken (should never surface to users).
class InvariantError : public Error {
 public:
  using Error::Error;
};

namespace detail {

/// Rethrows the in-flight exception with `where` prepended, keeping its
/// library type. Foreign exceptions become lara::Error.
[[noreturn]] inline void rethrow_with_context(const std::string& where) {
  try {
    throw;
  } catch (const ProtocolError& e) {
    throw ProtocolError(where + ": " + e.what());
  } catch (const ProviderError& e) {
    throw ProviderError(where + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError(where + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(where + ": " + e.what());
  }
}

}  // namespace detail

/// Writes one warning line to stderr in a single stream insertion.
inline void warn(std::string_view message) {
  std::string line = "warning: ";
  line.append(message);
  line.push_back('\n');
  std::cerr << line;
}

}  // namespace lara
