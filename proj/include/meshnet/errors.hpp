#pragma once

#include <stdexcept>
#include <string>

namespace meshnet {

/// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File access problems: missing, unreadable, unwritable.
struct IoError : Error {
  using Error::Error;
};

/// Malformed or unsupported on-disk content (bad magic, truncated blob,
/// checksum mismatch, unknown datatype). Messages carry a byte offset
/// where one is meaningful.
struct FormatError : Error {
  using Error::Error;
};

/// Shape or precondition violations in numeric code.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid model/sampler/training configuration.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace meshnet
