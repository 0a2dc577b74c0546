#pragma once

#include <stdexcept>
#include <string>

namespace fregsel {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct GridMismatchError : Error {
    using Error::Error;
};

struct DimensionMismatchError : Error {
    using Error::Error;
};

struct DegenerateVarianceError : Error {
    using Error::Error;
};

struct RankDeficientError : Error {
    using Error::Error;
};

struct FactorizationError : Error {
    using Error::Error;
};

struct UnsupportedSmoothnessError : Error {
    using Error::Error;
};

struct ZeroBlockError : Error {
    using Error::Error;
};

struct SoftDegenerateError : Error {
    using Error::Error;
};

struct EmptyInitialSelectionError : Error {
    using Error::Error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

}  // namespace fregsel
