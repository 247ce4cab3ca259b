#pragma once

#include <stdexcept>
#include <string>

namespace efi {

// Invalid layer geometry, incompatible parameter shapes, bad presets.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed runtime inputs: shape mismatches, out-of-range labels, empty data.
class InputError : public std::runtime_error {
 public:
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse, e.g. backward() on a non-scalar node.
class UsageError : public std::logic_error {
 public:
  explicit UsageError(const std::string& msg) : std::logic_error(msg) {}
};

// A wire message that fails CRC, length or index-range validation.
class CorruptMessageError : public std::runtime_error {
 public:
  explicit CorruptMessageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Endpoint/model incompatibility discovered while processing a valid message.
class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or inconsistent persisted artifacts (checkpoints, datasets).
class LoadError : public std::runtime_error {
 public:
  explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted (e.g. non-finite loss); carries the diagnostic context.
class TrainError : public std::runtime_error {
 public:
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace efi
