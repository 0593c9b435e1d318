#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace fogdetr {

struct SuiteInfo {
  std::string name;       // module.property
  std::string invariant;  // what the suite asserts
};

struct SuiteResult {
  std::string name;
  std::string invariant;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  /// Added to every softmax output while the suites run (mutation smoke test).
  double softmax_fault = 0.0;
  /// Run only these suites; empty runs all.
  std::vector<std::string> only;
  /// Scratch space for the harness suites; a temporary directory when empty.
  std::filesystem::path scratch;
};

struct VerifyReport {
  std::vector<SuiteResult> suites;

  bool passed() const;
  std::vector<std::string> failures() const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Every suite, in run order.
const std::vector<SuiteInfo>& verify_suites();

VerifyReport run_verify(const VerifyOptions& options,
                        const std::function<void(const SuiteResult&)>& on_result = {});

}  // namespace fogdetr
