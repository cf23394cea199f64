// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/corpus.hpp"
#include "dynvla/model.hpp"

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynvla {

struct TrainOptions {
  int epochs = 8;
  std::uint64_t train_seed = 1;
  double learning_rate = 1e-3;
  int batch_size = 16;
  int warmup_steps = 100;
  double grad_clip = 1.0;
  double min_accuracy = 0.9;
  /// When set, the vision encoder is copied from this bundle (and kept frozen if freeze_vision).
  const ModelBundle* vision_donor = nullptr;
  bool freeze_vision = true;
  /// Fresh sign images per epoch, as a fraction of the corpus samples. Every task prompt on
  /// a sign is answered with its word, which teaches the model to read.
  double sign_fraction = 0.5;
  /// Extra samples, as a fraction of the corpus samples, showing a training scene with its
  /// patches shuffled; every prompt on them is answered with `scramble_answer`.
  double scramble_fraction = 0.0;
  std::string scramble_answer = "unknown";
  /// Called after every epoch with (epoch, mean training loss).
  std::function<void(int, double)> on_epoch;
};

/// Held-out exact-match accuracy fell short of the required bar.
class TrainingQualityError : public std::runtime_error {
 public:
  TrainingQualityError(std::string model_id, double accuracy, double required);
  const std::string& model_id() const { return model_id_; }
  double accuracy() const { return accuracy_; }

 private:
  std::string model_id_;
  double accuracy_;
};

struct VisionPretrainOptions {
  int epochs = 60;
  /// Fresh scenes rendered for every epoch (never drawn from the evaluation corpus).
  int images_per_epoch = 3000;
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  int batch_size = 16;
  std::function<void(int, double)> on_epoch;
};

/// Trains only the vision encoder of a fresh bundle with a mean-pooled linear probe on
/// shape and color labels of newly generated scenes. The probe is discarded; the
/// returned bundle serves as a vision donor.
ModelBundle pretrain_vision(const ModelSpec& spec, const VisionPretrainOptions& options);

/// Reduced toy prompt lists for all four tasks.
std::vector<PromptSet> toy_prompt_sets();

/// Exact-match accuracy over held-out records, one assigned prompt per task per record.
double heldout_accuracy(const ModelBundle& model, const Corpus& corpus, const std::vector<PromptSet>& prompt_sets,
                        std::uint64_t seed = 7);

struct TrainedModel {
  ModelBundle bundle;
  double heldout_accuracy = 0;
  std::vector<double> epoch_loss;
};

/// Trains a bundle on (image, task prompt, answer) triples. The result is frozen.
/// Throws TrainingQualityError if held-out accuracy stays below `min_accuracy`.
TrainedModel train_toy_model(const ModelSpec& spec, const Corpus& corpus, const TrainOptions& options);

}  // namespace dynvla
