// SPDX-License-Identifier: Apache-2.0
#include "dynvla/config.hpp"

#include "dynvla/io.hpp"

#include <set>

namespace dynvla {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where + ": " + e.what());
  }
}

}  // namespace

json to_json(const AttackConfig& c) {
  return json{{"epsilon", c.epsilon},
              {"alpha", c.alpha},
              {"steps", c.steps},
              {"method", method_label(c.method)},
              {"kernel_size", {c.kernel_size.lo, c.kernel_size.hi}},
              {"kernel_sigma", {c.kernel_sigma.lo, c.kernel_sigma.hi}},
              {"kernel_amplitude", c.kernel_amplitude},
              {"mi_mu", c.mi_mu},
              {"di_prob", c.di_prob},
              {"di_ratio", c.di_ratio},
              {"ti_kernel_side", c.ti_kernel_side},
              {"sit_blocks", c.sit_blocks},
              {"seed", c.seed},
              {"ascent", c.ascent},
              {"check_invariants", c.check_invariants},
              {"checkpoint_every", c.checkpoint_every}};
}

AttackConfig attack_config_from_json(const json& j) {
  const std::string where = "attack config";
  reject_unknown(j,
                 {"epsilon", "alpha", "steps", "method", "kernel_size", "kernel_sigma", "kernel_amplitude", "mi_mu",
                  "di_prob", "di_ratio", "ti_kernel_side", "sit_blocks", "seed", "ascent", "check_invariants",
                  "checkpoint_every"},
                 where);
  AttackConfig c;
  read(j, "epsilon", c.epsilon, where);
  read(j, "alpha", c.alpha, where);
  read(j, "steps", c.steps, where);
  std::string method = method_label(c.method);
  read(j, "method", method, where);
  try {
    c.method = parse_method(method);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::vector<int> size{c.kernel_size.lo, c.kernel_size.hi};
  read(j, "kernel_size", size, where);
  std::vector<double> sigma{c.kernel_sigma.lo, c.kernel_sigma.hi};
  read(j, "kernel_sigma", sigma, where);
  if (size.size() != 2 || sigma.size() != 2) throw ConfigError("kernel ranges must be [lo, hi] pairs");
  c.kernel_size = {size[0], size[1]};
  c.kernel_sigma = {sigma[0], sigma[1]};
  read(j, "kernel_amplitude", c.kernel_amplitude, where);
  read(j, "mi_mu", c.mi_mu, where);
  read(j, "di_prob", c.di_prob, where);
  read(j, "di_ratio", c.di_ratio, where);
  read(j, "ti_kernel_side", c.ti_kernel_side, where);
  read(j, "sit_blocks", c.sit_blocks, where);
  read(j, "seed", c.seed, where);
  read(j, "ascent", c.ascent, where);
  read(j, "check_invariants", c.check_invariants, where);
  read(j, "checkpoint_every", c.checkpoint_every, where);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

json to_json(const HarnessConfig& c) {
  return json{{"attack", to_json(c.attack)},
              {"task", task_name(c.task)},
              {"prompt_source", c.prompt_source == PromptSource::Paper ? "paper" : "toy"},
              {"target_text", c.target_text},
              {"match", match_mode_name(c.match)},
              {"quantize", c.quantize},
              {"images", c.images},
              {"seeds", c.seeds},
              {"prompt_seed", c.prompt_seed},
              {"max_len", c.max_len}};
}

HarnessConfig harness_config_from_json(const json& j) {
  const std::string where = "harness config";
  reject_unknown(j,
                 {"attack", "task", "prompt_source", "target_text", "match", "quantize", "images", "seeds",
                  "prompt_seed", "max_len", "jobs"},
                 where);
  HarnessConfig c;
  if (j.contains("attack")) c.attack = attack_config_from_json(j.at("attack"));
  std::string task = task_name(c.task), source = "toy", match = match_mode_name(c.match);
  read(j, "task", task, where);
  read(j, "prompt_source", source, where);
  read(j, "match", match, where);
  try {
    c.task = parse_task(task);
    c.match = parse_match_mode(match);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (source != "toy" && source != "paper") throw ConfigError("prompt_source must be 'toy' or 'paper'");
  c.prompt_source = source == "paper" ? PromptSource::Paper : PromptSource::Toy;
  read(j, "target_text", c.target_text, where);
  read(j, "quantize", c.quantize, where);
  read(j, "images", c.images, where);
  read(j, "seeds", c.seeds, where);
  read(j, "prompt_seed", c.prompt_seed, where);
  read(j, "max_len", c.max_len, where);
  read(j, "jobs", c.jobs, where);
  if (c.images < 1) throw ConfigError("images must be positive");
  if (c.seeds.empty()) throw ConfigError("at least one run seed is required");
  if (c.max_len < 1) throw ConfigError("max_len must be positive");
  if (c.jobs < 1) throw ConfigError("jobs must be positive");
  if (c.target_text.empty()) throw ConfigError("target_text must be non-empty");
  return c;
}

json to_json(const RunConfig& c) {
  return json{{"schema_version", c.schema_version},
              {"zoo_dir", c.zoo_dir},
              {"corpus_size", c.corpus_size},
              {"corpus_seed", c.corpus_seed},
              {"harness", to_json(c.harness)},
              {"methods", c.methods},
              {"sweep_parameter", c.sweep_parameter},
              {"sweep_values", c.sweep_values}};
}

RunConfig run_config_from_json(const json& j) {
  const std::string where = "run config";
  reject_unknown(j,
                 {"schema_version", "zoo_dir", "corpus_size", "corpus_seed", "harness", "methods", "sweep_parameter",
                  "sweep_values"},
                 where);
  RunConfig c;
  if (!j.contains("schema_version")) throw ConfigError("run config lacks schema_version");
  read(j, "schema_version", c.schema_version, where);
  if (c.schema_version != kConfigSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  read(j, "zoo_dir", c.zoo_dir, where);
  read(j, "corpus_size", c.corpus_size, where);
  read(j, "corpus_seed", c.corpus_seed, where);
  if (j.contains("harness")) c.harness = harness_config_from_json(j.at("harness"));
  read(j, "methods", c.methods, where);
  read(j, "sweep_parameter", c.sweep_parameter, where);
  read(j, "sweep_values", c.sweep_values, where);
  if (c.corpus_size < 10) throw ConfigError("corpus_size must be at least 10");
  for (const auto& m : c.methods) {
    try {
      parse_method(m);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dynvla
