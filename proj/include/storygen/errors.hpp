#pragma once

#include <stdexcept>
#include <string>

namespace storygen {

// Exception taxonomy. The CLI maps each family onto an exit code.

/// Tensor extents do not agree with what an operation requires.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// An index (token id, position, row) falls outside its table.
struct BoundsError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

/// The API was driven in an order or mode it does not support.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Invalid model, sampler or run configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (corpus, vocab, checkpoint, report).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Decoding past the model's position table.
struct LengthError : std::length_error {
    using std::length_error::length_error;
};

}  // namespace storygen
