#pragma once

#include <stdexcept>
#include <string>

namespace evmdoc {

// Base for everything this library throws. `category()` is the stable
// machine-readable name the CLI prints on stderr.
class Error : public std::runtime_error {
  public:
    Error(std::string category, const std::string& what)
        : std::runtime_error(what), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

  private:
    std::string category_;
};

#define EVMDOC_DEFINE_ERROR(NAME)                                       \
    class NAME : public Error {                                         \
      public:                                                           \
        explicit NAME(const std::string& what) : Error(#NAME, what) {}  \
    }

EVMDOC_DEFINE_ERROR(MalformedHex);
EVMDOC_DEFINE_ERROR(EmptyCode);
EVMDOC_DEFINE_ERROR(EmptyCfg);
EVMDOC_DEFINE_ERROR(EmptyComment);
EVMDOC_DEFINE_ERROR(EmptyCodebase);
EVMDOC_DEFINE_ERROR(InsufficientData);
EVMDOC_DEFINE_ERROR(ShapeError);
EVMDOC_DEFINE_ERROR(MaskError);
EVMDOC_DEFINE_ERROR(StepError);
EVMDOC_DEFINE_ERROR(EmptyInput);
EVMDOC_DEFINE_ERROR(UndefinedReference);
EVMDOC_DEFINE_ERROR(AlignmentError);
EVMDOC_DEFINE_ERROR(ConfigError);

// Numeric faults get their own root so the CLI can map them to a distinct
// exit code.
class NumericFault : public Error {
  public:
    explicit NumericFault(const std::string& what) : Error("NumericFault", what) {}
};

#undef EVMDOC_DEFINE_ERROR

}  // namespace evmdoc
