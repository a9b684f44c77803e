#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fedsim {

/// Error category used by the CLI to pick an exit code: configuration and
/// input problems exit with 1, numerical failures during a run with 2.
enum class ErrorKind { config, numeric };

/// Base error carrying a stable machine-parsable code (the CLI prints
/// `ERROR <code>: <message>` on standard error).
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message, ErrorKind kind = ErrorKind::config)
        : std::runtime_error(message), code_(std::move(code)), kind_(kind) {}

    const std::string& code() const { return code_; }
    ErrorKind kind() const { return kind_; }

private:
    std::string code_;
    ErrorKind kind_;
};

#define FEDSIM_DEFINE_ERROR(NAME, KIND)                       \
    class NAME : public Error {                               \
    public:                                                   \
        explicit NAME(const std::string& message)             \
            : Error(#NAME, message, ErrorKind::KIND) {}       \
    };

FEDSIM_DEFINE_ERROR(NotPositiveDefinite, numeric)
FEDSIM_DEFINE_ERROR(NumericalError, numeric)
FEDSIM_DEFINE_ERROR(DimensionMismatch, config)
FEDSIM_DEFINE_ERROR(ShapeMismatch, config)
FEDSIM_DEFINE_ERROR(EmptyList, config)
FEDSIM_DEFINE_ERROR(EmptyBatch, config)
FEDSIM_DEFINE_ERROR(EmptyDataset, config)
FEDSIM_DEFINE_ERROR(LengthMismatch, config)
FEDSIM_DEFINE_ERROR(MalformedLine, config)
FEDSIM_DEFINE_ERROR(NonBinaryLabel, config)
FEDSIM_DEFINE_ERROR(TooManyClients, config)
FEDSIM_DEFINE_ERROR(InvalidAlpha, config)
FEDSIM_DEFINE_ERROR(ModelMismatch, config)
FEDSIM_DEFINE_ERROR(UnknownKey, config)
FEDSIM_DEFINE_ERROR(MissingKey, config)
FEDSIM_DEFINE_ERROR(TypeError, config)
FEDSIM_DEFINE_ERROR(IncompatibleMethodModel, config)
FEDSIM_DEFINE_ERROR(IoError, config)

#undef FEDSIM_DEFINE_ERROR

/// Numerical failure annotated with the communication round it occurred in.
class RoundError : public Error {
public:
    RoundError(std::size_t round, const Error& cause)
        : Error(cause.code(), "round " + std::to_string(round) + ": " + cause.what(),
                ErrorKind::numeric),
          round_(round) {}

    std::size_t round() const { return round_; }

private:
    std::size_t round_;
};

}  // namespace fedsim
