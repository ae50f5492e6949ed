#pragma once

#include <stdexcept>
#include <string>

namespace prp {

// Exception categories map one-to-one onto the CLI exit codes.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kData = 3,
  kVerification = 4,
};

}  // namespace prp
