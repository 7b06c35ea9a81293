#ifndef POLARLAB_ERROR_HPP
#define POLARLAB_ERROR_HPP

#include <stdexcept>
#include <string>

namespace polarlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define POLARLAB_DEFINE_ERROR(Name)          \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  }

POLARLAB_DEFINE_ERROR(NonConvergence);
POLARLAB_DEFINE_ERROR(ZeroMatrix);
POLARLAB_DEFINE_ERROR(ShapeMismatch);
POLARLAB_DEFINE_ERROR(SpecMismatch);
POLARLAB_DEFINE_ERROR(NotOrthogonal);
POLARLAB_DEFINE_ERROR(EpochOutOfRange);
POLARLAB_DEFINE_ERROR(StaleCache);
POLARLAB_DEFINE_ERROR(DivergenceDetected);
POLARLAB_DEFINE_ERROR(BadFlag);
POLARLAB_DEFINE_ERROR(IoError);

#undef POLARLAB_DEFINE_ERROR

}  // namespace polarlab

#endif  // POLARLAB_ERROR_HPP
