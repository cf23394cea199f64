// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/harness.hpp"
#include "dynvla/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dynvla {

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct ZooVariant {
  ModelSpec spec;
  std::uint64_t train_seed = 1;
};

/// How a zoo is built. Every member copies and freezes the vision encoder of a donor
/// model, so the members differ in connector and language model only.
struct ZooPlan {
  int corpus_size = 3000;
  std::uint64_t corpus_seed = 11;
  ModelSpec donor;
  VisionPretrainOptions pretrain;
  TrainOptions donor_training;
  TrainOptions member_training;
  std::vector<ZooVariant> variants;
};

/// Six variants, three per family, varying d_lm, lm_depth, heads and seeds.
ZooPlan default_zoo_plan();

inline constexpr const char* kZooManifestName = "zoo.json";

struct ZooTrainResult {
  Zoo zoo;
  std::vector<std::pair<std::string, double>> accuracy;  // member id, held-out accuracy
  std::vector<std::string> below_bar;
  std::vector<std::string> reused;
};

/// Trains the donor and all members into `dir` and writes the manifest after every stage.
/// Without `force`, members whose spec, training options and file hash match the
/// existing manifest are reused. Members under the accuracy bar are kept but listed in
/// `below_bar`. `log` receives one line per finished stage.
ZooTrainResult train_zoo(const std::filesystem::path& dir, const ZooPlan& plan,
                         const std::function<void(const std::string&)>& log = {}, bool force = false);

/// Loads a zoo written by train_zoo, verifying every parameter file hash.
Zoo load_zoo(const std::filesystem::path& dir);

/// Corpus the zoo in `dir` was trained on.
Corpus zoo_corpus(const std::filesystem::path& dir);

}  // namespace dynvla
