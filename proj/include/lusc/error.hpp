#pragma once

#include <stdexcept>
#include <string>

namespace lusc {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not satisfy an op's precondition.
struct ShapeError : Error {
    using Error::Error;
};

// A scalar argument is out of its legal range.
struct ValueError : Error {
    using Error::Error;
};

// Filesystem / serialization failures (bad magic, truncation, unreadable file).
struct IoError : Error {
    using Error::Error;
};

// Experiment configuration problems; message carries the offending field path.
struct ConfigError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
    DivergenceError(int epoch, int batch, const std::string& what)
        : Error(what), epoch(epoch), batch(batch) {}
    int epoch;
    int batch;
};

// A stored artifact does not match the requested configuration
// (e.g. loading a checkpoint into a different architecture).
struct ArtifactMismatchError : Error {
    using Error::Error;
};

}  // namespace lusc
