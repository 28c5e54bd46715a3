#pragma once

#include <stdexcept>
#include <string>

namespace fssam {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or grid sizes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, empty support, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A LoRA adapter was routed to the wrong layer.
class WiringError : public Error {
public:
    using Error::Error;
};

/// Not enough images to draw the requested episode.
class SamplingError : public Error {
public:
    using Error::Error;
};

/// Malformed or missing files while reading a dataset or checkpoint.
class IngestionError : public Error {
public:
    using Error::Error;
};

/// Training diverged; carries the optimizer step at which it happened.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// Evaluation protocol violated (e.g. class overlap in a domain-shift run).
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// A finite-difference check could not be carried out (non-deterministic function).
class CheckInvalid : public Error {
public:
    using Error::Error;
};

}  // namespace fssam
