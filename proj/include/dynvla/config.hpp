// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/harness.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynvla {

inline constexpr int kConfigSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const AttackConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
AttackConfig attack_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const HarnessConfig& cfg);
HarnessConfig harness_config_from_json(const nlohmann::json& j);

/// Everything a CLI command needs to run reproducibly.
struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::string zoo_dir;
  int corpus_size = 3000;
  std::uint64_t corpus_seed = 11;
  HarnessConfig harness;
  std::vector<std::string> methods = {"PGD", "DYNVLA"};
  std::string sweep_parameter;
  std::vector<std::string> sweep_values;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dynvla
