#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace repformer {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define REPFORMER_DEFINE_ERROR(Name)            \
    class Name : public Error {                 \
    public:                                     \
        using Error::Error;                     \
    }

REPFORMER_DEFINE_ERROR(ShapeMismatch);
REPFORMER_DEFINE_ERROR(NotScalar);
REPFORMER_DEFINE_ERROR(BadWidth);
REPFORMER_DEFINE_ERROR(BadTarget);
REPFORMER_DEFINE_ERROR(BadResolution);
REPFORMER_DEFINE_ERROR(BadTemperature);
REPFORMER_DEFINE_ERROR(BadStageCount);
REPFORMER_DEFINE_ERROR(BadSpec);
REPFORMER_DEFINE_ERROR(CountMismatch);
REPFORMER_DEFINE_ERROR(BadRef);
REPFORMER_DEFINE_ERROR(DivergedError);
REPFORMER_DEFINE_ERROR(ConfigError);
REPFORMER_DEFINE_ERROR(IoError);

#undef REPFORMER_DEFINE_ERROR

// Carries the 1-based line where parsing stopped.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

}  // namespace repformer
