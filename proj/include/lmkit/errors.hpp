#pragma once

#include <stdexcept>
#include <string>

namespace lmkit {

// Base class for everything thrown by the library. The CLI maps these to
// exit status 1 with a one-line diagnostic.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration (model dims, hyperparameters, task specs).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed runtime input (batch/plan mismatches, oversize sequences).
struct InputError : Error {
  using Error::Error;
};

// Filesystem-level failure (unreadable/unwritable paths).
struct IoError : Error {
  using Error::Error;
};

// Checkpoint file does not start with the expected magic.
struct FormatError : Error {
  using Error::Error;
};

// Checkpoint format version is not supported.
struct VersionError : Error {
  using Error::Error;
};

// Checkpoint or shard file is truncated or internally inconsistent.
struct CorruptionError : Error {
  using Error::Error;
};

// Bad dataset contents (unknown label, ragged NER sentence).
struct DataError : Error {
  using Error::Error;
};

// Non-finite loss or gradient; message names the offending tensor.
struct NumericError : Error {
  using Error::Error;
};

// Metric called on empty or mismatched inputs.
struct MetricError : Error {
  using Error::Error;
};

// Aggregation/selection over an empty or incomplete record set.
struct SelectionError : Error {
  using Error::Error;
};

// Bad command line; the CLI maps this to exit status 2.
struct UsageError : Error {
  using Error::Error;
};

}  // namespace lmkit
