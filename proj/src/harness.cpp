// SPDX-License-Identifier: Apache-2.0
#include "dynvla/harness.hpp"

#include "dynvla/config.hpp"
#include "dynvla/util.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

namespace dynvla {

std::string match_mode_name(MatchMode m) { return m == MatchMode::Exact ? "EXACT" : "FIRST_SENTENCE"; }

MatchMode parse_match_mode(const std::string& s) {
  if (s == "EXACT") return MatchMode::Exact;
  if (s == "FIRST_SENTENCE") return MatchMode::FirstSentence;
  throw std::invalid_argument("unknown match mode '" + s + "' (expected EXACT or FIRST_SENTENCE)");
}

std::string first_sentence(const std::string& text) {
  const std::string norm = normalize_whitespace(text);
  const size_t cut = norm.find_first_of(".!?");
  return normalize_whitespace(cut == std::string::npos ? norm : norm.substr(0, cut));
}

bool matches(const std::string& output, const std::string& target, MatchMode mode) {
  const std::string want = normalize_whitespace(target);
  if (mode == MatchMode::Exact) return normalize_whitespace(output) == want;
  return first_sentence(output) == want;
}

void parallel_for(int count, int jobs, const std::function<void(int, int)>& fn) {
  if (count <= 0) return;
  const int workers = std::clamp(jobs, 1, count);
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i, 0);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i, w);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

EvalOutcome evaluate_parallel(const ModelBundle& target, const std::vector<AdvExample>& examples,
                              const std::string& target_text, MatchMode mode, bool quantize, int max_len, int jobs) {
  if (examples.empty()) throw std::invalid_argument("evaluate_asr: no adversarial examples");
  const Tokenizer tok = target.tokenizer();
  const int workers = std::clamp(jobs, 1, static_cast<int>(examples.size()));
  std::vector<std::unique_ptr<ModelRuntime<float>>> runtimes;
  for (int w = 0; w < workers; ++w) runtimes.push_back(std::make_unique<ModelRuntime<float>>(target));
  EvalOutcome out;
  out.success.assign(examples.size(), false);
  out.outputs.assign(examples.size(), "");
  parallel_for(static_cast<int>(examples.size()), workers, [&](int i, int w) {
    const AdvExample& ex = examples[static_cast<size_t>(i)];
    const ImageTensor img = quantize ? quantize_8bit(ex.adversarial_image) : ex.adversarial_image;
    const TokenSequence text = generate_with(*runtimes[static_cast<size_t>(w)], tok, img, tok.tokenize(ex.prompt), max_len);
    out.outputs[static_cast<size_t>(i)] = text.text;
    out.success[static_cast<size_t>(i)] = matches(text.text, target_text, mode);
  });
  const auto hits = std::count(out.success.begin(), out.success.end(), true);
  out.rate = static_cast<double>(hits) / static_cast<double>(examples.size());
  return out;
}

std::uint64_t image_hash(const ImageTensor& img) {
  return fnv1a64(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(img.data.data()),
                                                img.data.size() * sizeof(float)));
}

ASRMatrix empty_matrix(const Zoo& zoo, const HarnessConfig& cfg) {
  ASRMatrix m;
  m.surrogates = zoo.ids();
  m.targets = zoo.ids();
  const size_t n = m.surrogates.size();
  m.rate.assign(n, std::vector<double>(n, 0.0));
  m.samples.assign(n, std::vector<int>(n, 0));
  m.runs.assign(n, std::vector<int>(n, 0));
  m.method = method_label(cfg.attack.method);
  m.task = task_name(cfg.task);
  m.target_text = cfg.target_text;
  return m;
}

double success_rate(const std::vector<bool>& bits) {
  if (bits.empty()) return 0;
  return static_cast<double>(std::count(bits.begin(), bits.end(), true)) / static_cast<double>(bits.size());
}

}  // namespace

EvalOutcome evaluate_asr(const ModelBundle& target, const std::vector<AdvExample>& examples,
                         const std::string& target_text, MatchMode mode, bool quantize, int max_len) {
  return evaluate_parallel(target, examples, target_text, mode, quantize, max_len, 1);
}

const ModelBundle& Zoo::at(const std::string& id) const {
  for (const auto& m : models)
    if (m.spec.id == id) return m;
  throw std::out_of_range("zoo has no model '" + id + "'");
}

std::vector<std::string> Zoo::ids() const {
  std::vector<std::string> out;
  for (const auto& m : models) out.push_back(m.spec.id);
  return out;
}

double ASRMatrix::mean_off_diagonal() const {
  double total = 0;
  int cells = 0;
  for (size_t s = 0; s < surrogates.size(); ++s)
    for (size_t t = 0; t < targets.size(); ++t)
      if (!white_box(s, t)) {
        total += rate[s][t];
        ++cells;
      }
  return cells == 0 ? 0.0 : total / cells;
}

std::string ASRMatrix::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "surrogate";
  for (const auto& t : targets) os << ',' << t;
  os << '\n';
  for (size_t s = 0; s < surrogates.size(); ++s) {
    os << surrogates[s];
    for (size_t t = 0; t < targets.size(); ++t) os << ',' << rate[s][t];
    os << '\n';
  }
  return os.str();
}

std::vector<int> harness_images(const Corpus& corpus, int count) {
  if (count < 1) throw std::invalid_argument("image count must be positive");
  if (static_cast<size_t>(count) > corpus.heldout.size())
    throw std::invalid_argument("corpus holds only " + std::to_string(corpus.heldout.size()) +
                                " held-out images, " + std::to_string(count) + " requested");
  return {corpus.heldout.begin(), corpus.heldout.begin() + count};
}

RunRecord run_surrogate(const Zoo& zoo, const Corpus& corpus, const HarnessConfig& cfg, const std::string& surrogate,
                        std::uint64_t run_seed, std::vector<std::vector<AdvExample>>* checkpoint_examples,
                        std::vector<AdvExample>* final_examples) {
  const auto start = std::chrono::steady_clock::now();
  const ModelBundle& model = zoo.at(surrogate);
  RunRecord rec;
  rec.config_json = to_json(cfg).dump();
  rec.zoo_manifest_hash = zoo.manifest_hash;
  rec.surrogate = surrogate;
  rec.method = method_label(cfg.attack.method);
  rec.run_seed = run_seed;
  rec.image_ids = harness_images(corpus, cfg.images);

  const PromptSet prompts = load_prompt_fixtures(cfg.task, cfg.prompt_source);
  const auto assignment = assign_prompts(corpus, rec.image_ids, {prompts}, cfg.prompt_seed);
  for (const auto& a : assignment) rec.prompts.push_back(a.at(cfg.task));
  for (int id : rec.image_ids) rec.image_seeds.push_back(derive_seed(run_seed, static_cast<std::uint64_t>(id)));

  const size_t n = rec.image_ids.size();
  const int workers = std::clamp(cfg.jobs, 1, static_cast<int>(n));
  std::vector<std::unique_ptr<ModelRuntime<float>>> runtimes;
  for (int w = 0; w < workers; ++w) runtimes.push_back(std::make_unique<ModelRuntime<float>>(model));
  std::vector<AdvExample> examples(n);
  parallel_for(static_cast<int>(n), workers, [&](int i, int w) {
    AttackConfig a = cfg.attack;
    a.seed = rec.image_seeds[static_cast<size_t>(i)];
    const CorpusRecord& img = corpus.records[static_cast<size_t>(rec.image_ids[static_cast<size_t>(i)])];
    examples[static_cast<size_t>(i)] =
        attack_with(*runtimes[static_cast<size_t>(w)], model, img.image, rec.prompts[static_cast<size_t>(i)],
                    cfg.target_text, a);
  });
  for (const auto& ex : examples) rec.adversarial_hashes.push_back(image_hash(ex.adversarial_image));

  for (const auto& target : zoo.models)
    rec.success[target.spec.id] =
        evaluate_parallel(target, examples, cfg.target_text, cfg.match, cfg.quantize, cfg.max_len, cfg.jobs).success;

  if (checkpoint_examples != nullptr) {
    checkpoint_examples->clear();
    const size_t checkpoints = examples.front().checkpoints.size();
    for (size_t k = 0; k < checkpoints; ++k) {
      std::vector<AdvExample> at_k = examples;
      for (auto& ex : at_k) ex.adversarial_image = ex.checkpoints[k].second;
      checkpoint_examples->push_back(std::move(at_k));
    }
  }
  if (final_examples != nullptr) *final_examples = std::move(examples);
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

TransferResult transfer_matrix(const Zoo& zoo, const Corpus& corpus, const HarnessConfig& cfg,
                               const std::function<void(int, int)>& progress) {
  if (zoo.models.size() < 2) throw std::invalid_argument("transfer_matrix needs at least two models");
  if (cfg.seeds.empty()) throw std::invalid_argument("transfer_matrix needs at least one run seed");
  TransferResult result;
  result.matrix = empty_matrix(zoo, cfg);
  const auto ids = zoo.ids();
  const int total = static_cast<int>(ids.size() * cfg.seeds.size());
  int done = 0;
  for (std::uint64_t seed : cfg.seeds) {
    ASRMatrix run = empty_matrix(zoo, cfg);
    for (size_t s = 0; s < ids.size(); ++s) {
      RunRecord rec = run_surrogate(zoo, corpus, cfg, ids[s], seed);
      for (size_t t = 0; t < ids.size(); ++t) {
        const auto& bits = rec.success.at(ids[t]);
        run.rate[s][t] = success_rate(bits);
        run.samples[s][t] = static_cast<int>(bits.size());
        run.runs[s][t] = 1;
      }
      result.records.push_back(std::move(rec));
      if (progress) progress(++done, total);
    }
    result.per_run.push_back(std::move(run));
  }
  const double runs = static_cast<double>(result.per_run.size());
  for (size_t s = 0; s < ids.size(); ++s)
    for (size_t t = 0; t < ids.size(); ++t) {
      double sum = 0;
      for (const auto& run : result.per_run) sum += run.rate[s][t];
      result.matrix.rate[s][t] = sum / runs;
      result.matrix.samples[s][t] = result.per_run.front().samples[s][t];
      result.matrix.runs[s][t] = static_cast<int>(result.per_run.size());
    }
  return result;
}

bool replay_matches(const RunRecord& record, const Zoo& zoo, const Corpus& corpus, const HarnessConfig& cfg,
                    std::string* diff) {
  auto report = [&](const std::string& what) {
    if (diff != nullptr) *diff = what;
    return false;
  };
  if (record.zoo_manifest_hash != zoo.manifest_hash) return report("zoo manifest hash differs");
  if (to_json(cfg).dump() != record.config_json) return report("config snapshot differs");
  const RunRecord again = run_surrogate(zoo, corpus, cfg, record.surrogate, record.run_seed);
  if (again.image_ids != record.image_ids) return report("image ids differ");
  if (again.prompts != record.prompts) return report("prompts differ");
  if (again.adversarial_hashes != record.adversarial_hashes) return report("adversarial image hashes differ");
  if (again.success != record.success) return report("success bits differ");
  return true;
}

SignTest sign_test(const std::vector<double>& deltas) {
  SignTest t;
  for (double d : deltas) {
    if (d > 0) ++t.positive;
    else if (d < 0) ++t.negative;
    else ++t.ties;
  }
  const int n = t.positive + t.negative;
  if (n == 0) return t;
  // P(X >= positive) for X ~ Binomial(n, 1/2)
  double p = 0;
  for (int k = t.positive; k <= n; ++k)
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  t.p_value = std::min(1.0, p);
  return t;
}

Comparison compare_results(const std::vector<std::string>& methods, std::vector<TransferResult> results) {
  if (methods.size() != results.size() || methods.size() < 2)
    throw std::invalid_argument("compare needs at least two methods with one result each");
  const TransferResult& base = results.front();
  for (size_t i = 1; i < results.size(); ++i) {
    const TransferResult& r = results[i];
    if (r.records.size() != base.records.size() || r.per_run.size() != base.per_run.size() ||
        r.matrix.surrogates != base.matrix.surrogates)
      throw std::invalid_argument("method '" + methods[i] + "' ran on a different zoo or seed set");
    for (size_t k = 0; k < r.records.size(); ++k)
      if (r.records[k].image_ids != base.records[k].image_ids || r.records[k].run_seed != base.records[k].run_seed ||
          r.records[k].image_seeds != base.records[k].image_seeds)
        throw std::invalid_argument("method '" + methods[i] + "' used different images or seeds");
  }
  Comparison c;
  c.methods = methods;
  const size_t n = base.matrix.surrogates.size();
  for (const auto& r : results) {
    std::vector<std::vector<double>> d(n, std::vector<double>(n));
    for (size_t s = 0; s < n; ++s)
      for (size_t t = 0; t < n; ++t) d[s][t] = r.matrix.rate[s][t] - base.matrix.rate[s][t];
    c.delta.push_back(std::move(d));
  }
  const TransferResult& last = results.back();
  for (size_t k = 0; k < base.per_run.size(); ++k)
    c.seed_deltas.push_back(last.per_run[k].mean_off_diagonal() - base.per_run[k].mean_off_diagonal());
  c.test = sign_test(c.seed_deltas);
  c.mean_delta = last.matrix.mean_off_diagonal() - base.matrix.mean_off_diagonal();
  c.results = std::move(results);
  return c;
}

Comparison compare_methods(const Zoo& zoo, const Corpus& corpus, const std::vector<std::string>& methods,
                           const HarnessConfig& shared, const std::function<void(int, int)>& progress) {
  std::vector<TransferResult> results;
  const int per_method = static_cast<int>(zoo.models.size() * shared.seeds.size());
  const int total = per_method * static_cast<int>(methods.size());
  for (size_t i = 0; i < methods.size(); ++i) {
    HarnessConfig cfg = shared;
    cfg.attack.method = parse_method(methods[i]);
    results.push_back(transfer_matrix(zoo, corpus, cfg, [&](int done, int) {
      if (progress) progress(static_cast<int>(i) * per_method + done, total);
    }));
  }
  return compare_results(methods, std::move(results));
}

double parse_fraction(const std::string& s) {
  const size_t slash = s.find('/');
  try {
    size_t used = 0;
    if (slash == std::string::npos) {
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    }
    const std::string num = s.substr(0, slash), den = s.substr(slash + 1);
    const double a = std::stod(num, &used);
    if (used != num.size()) throw std::invalid_argument(s);
    const double b = std::stod(den, &used);
    if (used != den.size() || b == 0) throw std::invalid_argument(s);
    return a / b;
  } catch (const std::logic_error&) {
    throw std::invalid_argument("not a number or fraction: '" + s + "'");
  }
}

HarnessConfig apply_sweep_value(const HarnessConfig& base, const std::string& parameter, const std::string& value) {
  HarnessConfig cfg = base;
  auto as_int = [&] {
    const double v = parse_fraction(value);
    if (v != std::floor(v)) throw std::invalid_argument(parameter + " needs an integer, got '" + value + "'");
    return static_cast<int>(v);
  };
  if (parameter == "kernel_size") {
    const int m = as_int();
    if (m < 1 || m % 2 == 0) throw std::invalid_argument("kernel size must be odd and positive, got " + value);
    cfg.attack.kernel_size = {m, m};
  } else if (parameter == "kernel_sigma") {
    const double s = parse_fraction(value);
    cfg.attack.kernel_sigma = {s, s};
  } else if (parameter == "epsilon") {
    cfg.attack.epsilon = parse_fraction(value);
    cfg.attack.alpha = std::min(cfg.attack.alpha, cfg.attack.epsilon);
  } else if (parameter == "steps") {
    cfg.attack.steps = as_int();
  } else if (parameter == "target_text") {
    cfg.target_text = value;
  } else if (parameter == "task") {
    cfg.task = parse_task(value);
  } else {
    throw std::invalid_argument("unknown sweep parameter '" + parameter + "'");
  }
  cfg.attack.validate();
  return cfg;
}

AblationResult ablation_sweep(const Zoo& zoo, const Corpus& corpus, const std::string& parameter,
                              const std::vector<std::string>& values, const HarnessConfig& fixed,
                              const std::function<void(int, int)>& progress) {
  if (std::find(kSweepParameters.begin(), kSweepParameters.end(), parameter) == kSweepParameters.end())
    throw std::invalid_argument("unknown sweep parameter '" + parameter + "'");
  if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
  if (zoo.models.size() < 2) throw std::invalid_argument("sweep needs at least two models");
  AblationResult result;
  result.parameter = parameter;
  result.method = method_label(fixed.attack.method);
  const auto ids = zoo.ids();
  const int total = static_cast<int>(values.size() * ids.size() * fixed.seeds.size());
  int done = 0;
  for (size_t v = 0; v < values.size(); ++v) {
    HarnessConfig cfg = apply_sweep_value(fixed, parameter, values[v]);
    const bool steps = parameter == "steps";
    cfg.attack.checkpoint_every = steps ? kCheckpointInterval : 0;
    const size_t checkpoints = steps ? static_cast<size_t>(cfg.attack.steps / kCheckpointInterval) : 0;
    std::vector<double> sums(steps ? checkpoints : 1, 0.0);
    int cells = 0;
    for (std::uint64_t seed : cfg.seeds) {
      for (const auto& surrogate : ids) {
        std::vector<std::vector<AdvExample>> at_checkpoint;
        RunRecord rec = run_surrogate(zoo, corpus, cfg, surrogate, seed, steps ? &at_checkpoint : nullptr);
        for (const auto& target : zoo.models) {
          if (target.spec.id == surrogate) continue;
          if (steps) {
            for (size_t k = 0; k < checkpoints; ++k)
              sums[k] += evaluate_parallel(target, at_checkpoint[k], cfg.target_text, cfg.match, cfg.quantize,
                                           cfg.max_len, cfg.jobs)
                             .rate;
          } else {
            sums[0] += success_rate(rec.success.at(target.spec.id));
          }
          ++cells;
        }
        if (progress) progress(++done, total);
      }
    }
    AblationCurve curve;
    curve.value = values[v];
    if (steps) {
      for (size_t k = 0; k < checkpoints; ++k)
        curve.points.push_back({static_cast<double>((k + 1) * kCheckpointInterval), sums[k] / cells});
    } else {
      double x = static_cast<double>(v);
      try {
        x = parse_fraction(values[v]);
      } catch (const std::invalid_argument&) {
      }
      curve.points.push_back({x, sums[0] / cells});
    }
    result.curves.push_back(std::move(curve));
  }
  if (parameter == "epsilon")
    result.annotations.push_back(
        "reference observation: baseline ASR may plateau once epsilon exceeds 8/255 while DYNVLA keeps rising");
  if (parameter == "steps")
    result.annotations.push_back("checkpoints every " + std::to_string(kCheckpointInterval) + " iterations");
  return result;
}

}  // namespace dynvla
