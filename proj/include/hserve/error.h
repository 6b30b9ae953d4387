#pragma once

#include <stdexcept>
#include <string>

namespace hserve {

// Base for every error raised by the library. Scheduling rejections are
// values, never exceptions.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(const std::string& what)
      : Error("invalid config: " + what) {}
};

class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what)
      : Error("invalid input: " + what) {}
};

class FitDegenerate : public Error {
 public:
  explicit FitDegenerate(const std::string& what)
      : Error("fit degenerate: " + what) {}
};

// Broken bookkeeping between the GPU stream and the offload path
// (residual store, queues).
class IntegrityFault : public Error {
 public:
  explicit IntegrityFault(const std::string& what)
      : Error("integrity fault: " + what) {}
};

class ScenarioError : public Error {
 public:
  explicit ScenarioError(const std::string& what)
      : Error("scenario error: " + what) {}
};

}  // namespace hserve
