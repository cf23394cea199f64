// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/image.hpp"
#include "dynvla/model.hpp"
#include "dynvla/perturbation.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <functional>
#include <string>
#include <vector>

namespace dynvla {

/// Composable attack components. PGD alone is the empty set.
struct MethodSet {
  bool dynvla = false;
  bool mi = false;
  bool di = false;
  bool ti = false;
  bool sit = false;

  bool operator==(const MethodSet&) const = default;
};

/// Parses labels like "PGD", "DYNVLA", "DYNVLA+DI", "MI+TI".
MethodSet parse_method(const std::string& label);
/// Canonical label: "PGD" or components joined with '+' in the order DYNVLA, MI, DI, TI, SIT.
std::string method_label(const MethodSet& m);

inline constexpr int kProgressInterval = 50;

struct AttackConfig {
  double epsilon = 16.0 / 255.0;
  double alpha = 1.0 / 255.0;
  int steps = 300;
  MethodSet method;
  IntRange kernel_size{3, 5};
  RealRange kernel_sigma{3.0, 5.0};
  double kernel_amplitude = 1.0;
  double mi_mu = 1.0;
  double di_prob = 0.7;
  double di_ratio = 1.1;
  int ti_kernel_side = 5;
  int sit_blocks = 4;
  std::uint64_t seed = 0;
  /// Step along +sign(grad) instead of descending the loss.
  bool ascent = false;
  /// Verify the epsilon-ball and pixel-range invariants after every iteration.
  bool check_invariants = false;
  /// Record the adversarial image every this many iterations (0 disables).
  int checkpoint_every = 0;
  /// Called with (iterations done, loss) every kProgressInterval iterations. Not serialized.
  std::function<void(int, double)> on_progress;

  void validate() const;
};

struct AdvExample {
  ImageTensor delta;
  ImageTensor adversarial_image;
  std::string surrogate_id;
  std::string prompt;
  std::string target_text;
  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> loss_trace;
  /// (iteration count, adversarial image) pairs when checkpointing is enabled.
  std::vector<std::pair<int, ImageTensor>> checkpoints;
};

class NumericalError : public std::runtime_error {
 public:
  NumericalError(int iteration, const std::string& what);
  int iteration() const { return iteration_; }

 private:
  int iteration_;
};

class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Uniform(-epsilon, epsilon) entries shaped like `shape`.
ImageTensor pgd_init(std::mt19937_64& rng, double epsilon, const ImageTensor& shape);

/// delta' = clip_eps(delta - alpha * sign(grad)), then clipped so image + delta' stays in [0, 1].
/// Throws NumericalError when `grad` holds a non-finite entry.
ImageTensor pgd_step(const ImageTensor& delta, const ImageTensor& grad, double alpha, double epsilon,
                     const ImageTensor& image, int iteration = 0);

/// Largest float not exceeding `epsilon`.
float float_budget(double epsilon);

/// Sparse affine pixel map y = clip01?(A x + b) with its adjoint.
struct PixelTransform {
  int height = 0, width = 0, channels = 0;
  struct Entry {
    int out;
    int in;
    float weight;
  };
  std::vector<Entry> entries;  // empty with identity == true means y = x
  std::vector<float> offset;   // optional additive term
  bool identity = true;
  bool clip01 = false;

  ImageTensor apply(const ImageTensor& x) const;
  /// Gradient with respect to x given the gradient at the output of apply(x).
  ImageTensor adjoint(const ImageTensor& x, const ImageTensor& grad_out) const;
};

struct DiSample {
  bool applied = false;
  int resized_side = 0;
  int padded_side = 0;
  int top = 0;
  int left = 0;
};

/// Admissible resize sides {s : W <= s < W * ratio} (always contains W).
std::vector<int> di_sides(int side, double ratio);
PixelTransform di_transform_map(const ImageTensor& shape, std::mt19937_64& rng, double prob, double ratio,
                                DiSample* sample = nullptr);
ImageTensor di_transform(const ImageTensor& image, std::mt19937_64& rng, double prob, double ratio);

/// Depthwise same-size convolution with a normalized Gaussian (sigma = side / 3).
ImageTensor ti_smooth(const ImageTensor& grad, int kernel_side);
std::vector<double> ti_kernel(int kernel_side);

struct MomentumStep {
  ImageTensor momentum;
  ImageTensor direction;
};
/// g' = mu * g + grad / ||grad||_1 and direction sign(g').
MomentumStep mi_update(const ImageTensor& momentum, const ImageTensor& grad, double mu);

enum class TileOp { Identity, FlipH, FlipV, Rot90, Scale, Noise, Zero };
inline constexpr int kTileOpCount = 7;

struct SitAssignment {
  std::vector<TileOp> ops;  // row-major over tiles
};

PixelTransform sit_transform_map(const ImageTensor& shape, std::mt19937_64& rng, int blocks,
                                 SitAssignment* assignment = nullptr, std::optional<TileOp> forced = std::nullopt);
ImageTensor sit_transform(const ImageTensor& image, std::mt19937_64& rng, int blocks,
                          std::optional<TileOp> forced = std::nullopt);

/// Runs the configured attack for `steps` iterations against a frozen surrogate.
AdvExample attack(const ModelBundle& model, const ImageTensor& image, const std::string& prompt,
                  const std::string& target, const AttackConfig& cfg);

/// Same as attack() but against a prepared runtime.
AdvExample attack_with(ModelRuntime<float>& rt, const ModelBundle& model, const ImageTensor& image,
                       const std::string& prompt, const std::string& target, const AttackConfig& cfg);

}  // namespace dynvla
