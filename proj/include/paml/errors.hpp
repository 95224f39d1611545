#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace paml {

// Error taxonomy shared across the library. Every failure mode surfaced to
// callers is one of these; anything else escaping is a bug.

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidHyperparameter : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyTargetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyDataset : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InsufficientDialogues : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-fatal conditions (skipped tasks, clamped arguments) go to stderr.
inline void warn(const std::string& msg) {
  std::fprintf(stderr, "warning: %s\n", msg.c_str());
}

}  // namespace paml
