#pragma once

#include <stdexcept>
#include <string>

namespace ccl {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes incompatible with the requested operation.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid argument value (not a shape problem).
struct InvalidArgumentError : Error {
  using Error::Error;
};

// backward() called on a tensor that was never recorded on a tape.
struct DetachedTensorError : Error {
  using Error::Error;
};

// KL(q || p) requested with q_v > 0 where p_v == 0 exactly.
struct DivergenceUndefinedError : Error {
  using Error::Error;
};

// Token id outside the embedding table / vocabulary.
struct InvalidTokenError : Error {
  using Error::Error;
};

// Sequence longer than the model's positional table.
struct LengthError : Error {
  using Error::Error;
};

// grad_check saw two different values for the same inputs.
struct DeterminismError : Error {
  using Error::Error;
};

// Generator alphabets cannot satisfy the requested corpus size.
struct CapacityError : Error {
  using Error::Error;
};

// Prompt template missing or duplicating a placeholder.
struct TemplateError : Error {
  using Error::Error;
};

// Symbol not in the tokenizer vocabulary (or id out of range).
struct VocabularyError : Error {
  using Error::Error;
};

// Malformed input file (JSONL line, checkpoint, config).
struct ParseError : Error {
  using Error::Error;
};

// Inconsistent or incomplete run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// File system failure.
struct IoError : Error {
  using Error::Error;
};

// Training aborted (NaN loss); message carries step/lr/grad diagnostics.
struct TrainAbortError : Error {
  using Error::Error;
};

}  // namespace ccl
