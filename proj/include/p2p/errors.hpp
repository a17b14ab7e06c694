#pragma once

#include <stdexcept>
#include <string>

namespace p2p {

// Exit-code categories used by the CLI: UsageError -> 1, DataError -> 2,
// NumericError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

// packet_ingest
struct TooShort : DataError {
    using DataError::DataError;
};
struct BadVersion : DataError {
    using DataError::DataError;
};
struct UnreadableFile : DataError {
    using DataError::DataError;
};
struct NoRtpFound : DataError {
    using DataError::DataError;
};
struct MalformedLine : DataError {
    using DataError::DataError;
};
struct NonMonotonicTime : DataError {
    using DataError::DataError;
};

// flow_windowing
struct WrongCount : DataError {
    using DataError::DataError;
};

// diff_engine / lf_transformer
struct ShapeMismatch : NumericError {
    using NumericError::NumericError;
};
struct EmptyRow : NumericError {
    using NumericError::NumericError;
};
struct BadDegree : NumericError {
    using NumericError::NumericError;
};

// trainer
struct TooFewSessions : DataError {
    using DataError::DataError;
};
struct EmptySplit : DataError {
    using DataError::DataError;
};
struct DivergedLoss : NumericError {
    using NumericError::NumericError;
};

// evaluator
struct AllMasked : DataError {
    using DataError::DataError;
};

// synth_traffic
struct InvalidScenario : DataError {
    using DataError::DataError;
};

// cli
struct NoActiveFlows : DataError {
    using DataError::DataError;
};

}  // namespace p2p
