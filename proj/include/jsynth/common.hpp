#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace jsynth {

using Dim = std::int64_t;
using Shape = std::vector<Dim>;

// Error hierarchy. The CLI maps these onto exit codes, tests match on type.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct BadMagic : DataError {
    using DataError::DataError;
};
struct IoError : DataError {
    using DataError::DataError;
};
struct NumericError : Error {
    using Error::Error;
};

namespace detail {

template <class... Ts>
std::string msg(Ts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    return os.str();
}

}  // namespace detail

inline Dim shape_numel(const Shape& s) {
    Dim n = 1;
    for (Dim d : s) {
        if (d < 0) throw ShapeError(detail::msg("negative dimension ", d, " in shape"));
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

}  // namespace jsynth
