#pragma once

#include <stdexcept>
#include <string>

namespace raypose {

// Base class for all library errors.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define RAYPOSE_DEFINE_ERROR(Name)                                            \
    class Name : public Error {                                               \
      public:                                                                 \
        explicit Name(const std::string& msg) : Error(#Name ": " + msg) {}    \
    }

// liegroup
RAYPOSE_DEFINE_ERROR(RotationNearPi);

// tensor_autodiff
RAYPOSE_DEFINE_ERROR(ShapeMismatch);
RAYPOSE_DEFINE_ERROR(NotScalarLoss);
RAYPOSE_DEFINE_ERROR(ConvergenceFailure);

// epipolar
RAYPOSE_DEFINE_ERROR(DegenerateConfiguration);
RAYPOSE_DEFINE_ERROR(IllConditioned);
RAYPOSE_DEFINE_ERROR(AmbiguousChirality);

// pipeline
RAYPOSE_DEFINE_ERROR(InsufficientImages);
RAYPOSE_DEFINE_ERROR(NoCorrespondences);

// synthscene
RAYPOSE_DEFINE_ERROR(EmptyVisibility);
RAYPOSE_DEFINE_ERROR(InsufficientCovisibility);

// eval
RAYPOSE_DEFINE_ERROR(DegenerateGeometry);
RAYPOSE_DEFINE_ERROR(DimensionMismatch);

// file handling
RAYPOSE_DEFINE_ERROR(IoError);
RAYPOSE_DEFINE_ERROR(ParseError);

#undef RAYPOSE_DEFINE_ERROR

}  // namespace raypose
