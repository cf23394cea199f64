// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/attack.hpp"
#include "dynvla/corpus.hpp"
#include "dynvla/model.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace dynvla {

enum class MatchMode { Exact, FirstSentence };
std::string match_mode_name(MatchMode m);
MatchMode parse_match_mode(const std::string& s);

/// Text before the first of '.', '!' or '?', whitespace-normalized.
std::string first_sentence(const std::string& text);
/// Case-sensitive comparison after whitespace normalization.
bool matches(const std::string& output, const std::string& target, MatchMode mode);

struct EvalOutcome {
  std::vector<bool> success;
  std::vector<std::string> outputs;
  double rate = 0;
};

/// Greedy-decodes every adversarial image with the prompt stored in the example and
/// scores it against `target_text`. Throws on an empty example set.
EvalOutcome evaluate_asr(const ModelBundle& target, const std::vector<AdvExample>& examples,
                         const std::string& target_text, MatchMode mode, bool quantize = false, int max_len = 24);

/// A named, frozen model collection sharing one image geometry.
struct Zoo {
  std::vector<ModelBundle> models;
  std::uint64_t manifest_hash = 0;

  const ModelBundle& at(const std::string& id) const;
  std::vector<std::string> ids() const;
};

struct HarnessConfig {
  AttackConfig attack;
  Task task = Task::Classification;
  PromptSource prompt_source = PromptSource::Toy;
  std::string target_text = "unknown";
  MatchMode match = MatchMode::Exact;
  /// Round adversarial images to 8 bits before evaluation.
  bool quantize = false;
  int images = 128;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t prompt_seed = 7;
  int max_len = 24;
  int jobs = 1;
};

struct ASRMatrix {
  std::vector<std::string> surrogates;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> rate;   // [surrogate][target]
  std::vector<std::vector<int>> samples;   // images per run
  std::vector<std::vector<int>> runs;
  std::string method;
  std::string task;
  std::string target_text;

  bool white_box(size_t s, size_t t) const { return surrogates[s] == targets[t]; }
  double mean_off_diagonal() const;
  std::string to_csv() const;
};

/// Replayable outcome of one (surrogate, method, run seed) attack batch.
struct RunRecord {
  std::string config_json;
  std::uint64_t zoo_manifest_hash = 0;
  std::string surrogate;
  std::string method;
  std::uint64_t run_seed = 0;
  std::vector<int> image_ids;
  std::vector<std::string> prompts;
  std::vector<std::uint64_t> image_seeds;
  std::vector<std::uint64_t> adversarial_hashes;
  std::map<std::string, std::vector<bool>> success;  // target id -> per-image bits
  double seconds = 0;
};

struct TransferResult {
  ASRMatrix matrix;                  // averaged over runs
  std::vector<ASRMatrix> per_run;    // one per seed, same order as the config
  std::vector<RunRecord> records;
};

/// Held-out images used by the harness, first `count` in id order.
std::vector<int> harness_images(const Corpus& corpus, int count);

/// Attacks every surrogate once per run seed and evaluates on every zoo model.
/// `progress` receives (finished jobs, total jobs).
TransferResult transfer_matrix(const Zoo& zoo, const Corpus& corpus, const HarnessConfig& cfg,
                               const std::function<void(int, int)>& progress = {});

/// Attacks and evaluates one surrogate for a single run seed. The optional outputs receive
/// the final examples and one example set per attack checkpoint.
RunRecord run_surrogate(const Zoo& zoo, const Corpus& corpus, const HarnessConfig& cfg, const std::string& surrogate,
                        std::uint64_t run_seed, std::vector<std::vector<AdvExample>>* checkpoint_examples = nullptr,
                        std::vector<AdvExample>* final_examples = nullptr);

/// Recomputes a record from its stored config and reports whether the success bits and
/// adversarial image hashes are identical.
bool replay_matches(const RunRecord& record, const Zoo& zoo, const Corpus& corpus, const HarnessConfig& cfg,
                    std::string* diff = nullptr);

struct SignTest {
  int positive = 0;
  int negative = 0;
  int ties = 0;
  double p_value = 1;  // one-sided, H1: positive deltas dominate
};
/// One-sided sign test; ties are dropped.
SignTest sign_test(const std::vector<double>& deltas);

struct Comparison {
  std::vector<std::string> methods;
  std::vector<TransferResult> results;
  /// results[i] - results[0] per cell, for every i.
  std::vector<std::vector<std::vector<double>>> delta;
  /// Per-seed mean off-diagonal deltas of the last method against the first.
  std::vector<double> seed_deltas;
  SignTest test;
  double mean_delta = 0;
};

Comparison compare_methods(const Zoo& zoo, const Corpus& corpus, const std::vector<std::string>& methods,
                           const HarnessConfig& shared, const std::function<void(int, int)>& progress = {});
/// Assembles a comparison from finished results; throws if their images or seeds differ.
Comparison compare_results(const std::vector<std::string>& methods, std::vector<TransferResult> results);

struct CurvePoint {
  double x = 0;
  double asr = 0;
};
struct AblationCurve {
  std::string value;
  std::vector<CurvePoint> points;
};
struct AblationResult {
  std::string parameter;
  std::string method;
  std::vector<AblationCurve> curves;
  std::vector<std::string> annotations;
};

inline const std::vector<std::string> kSweepParameters = {"kernel_size", "kernel_sigma", "epsilon",
                                                          "steps",       "target_text",  "task"};
inline constexpr int kCheckpointInterval = 200;

/// Applies one sweep value to a config copy. Throws for unknown parameters or malformed values.
HarnessConfig apply_sweep_value(const HarnessConfig& base, const std::string& parameter, const std::string& value);
/// Parses "8/255" style fractions as well as plain reals.
double parse_fraction(const std::string& s);

/// One averaged off-diagonal ASR curve per value. The steps sweep records a point every
/// kCheckpointInterval iterations; the other parameters give a single point per value.
AblationResult ablation_sweep(const Zoo& zoo, const Corpus& corpus, const std::string& parameter,
                              const std::vector<std::string>& values, const HarnessConfig& fixed,
                              const std::function<void(int, int)>& progress = {});

/// Runs fn(index, worker) for index in [0, count) on at most `jobs` threads.
void parallel_for(int count, int jobs, const std::function<void(int, int)>& fn);

}  // namespace dynvla
