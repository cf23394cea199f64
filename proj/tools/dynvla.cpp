// SPDX-License-Identifier: Apache-2.0
// Command-line driver: zoo-train, attack, transfer, ablate, report.
#include "dynvla/config.hpp"
#include "dynvla/harness.hpp"
#include "dynvla/io.hpp"
#include "dynvla/report.hpp"
#include "dynvla/training.hpp"
#include "dynvla/util.hpp"
#include "dynvla/zoo.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dynvla;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitFailure = 2;
constexpr const char* kOutputRootEnv = "DYNVLA_OUTPUT_ROOT";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

fs::path make_run_dir(const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", &tm);
  const fs::path root = output_root();
  fs::path dir = root / (std::string(stamp) + "-" + command);
  for (int n = 2; fs::exists(dir); ++n) dir = root / (std::string(stamp) + "-" + command + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

// Lists every file in the run directory with its hash, next to the command line.
void write_run_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                        int exit_code) {
  json files = json::object();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) files[fs::relative(p, dir).generic_string()] = hex64(file_hash(p));
  const json manifest{{"command", command}, {"argv", argv}, {"exit_code", exit_code}, {"files", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

int default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Flags shared by attack, transfer and ablate. Each overrides the config file only when given.
struct CommonFlags {
  std::string config;
  std::string zoo;
  int jobs = default_jobs();
  std::string method, task, target, match, prompt_source;
  double epsilon = 0, alpha = 0;
  int steps = 0, images = 0;
  std::string seeds;
  bool quantize = false;
  std::vector<CLI::Option*> set;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Run configuration file (JSON, schema version 1)")->check(CLI::ExistingFile);
    app->add_option("--zoo", zoo, "Zoo directory (default: $" + std::string(kOutputRootEnv) + "/zoo)");
    app->add_option("--jobs", jobs, "Parallel attack jobs (default: logical cores)")->check(CLI::PositiveNumber);
    opt(app->add_option("--method", method, "Attack: PGD or '+'-joined subset of DYNVLA,MI,DI,TI,SIT"));
    opt(app->add_option("--task", task, "CLASSIFICATION, CAPTIONING, VQA_GENERAL or VQA_SPECIFIC"));
    opt(app->add_option("--target", target, "Target text"));
    opt(app->add_option("--match", match, "EXACT or FIRST_SENTENCE"));
    opt(app->add_option("--prompt-source", prompt_source, "TOY or PAPER prompt lists"));
    opt(app->add_option("--epsilon", epsilon, "L-infinity budget (default 16/255)"));
    opt(app->add_option("--alpha", alpha, "Step size (default 1/255)"));
    opt(app->add_option("--steps", steps, "Attack iterations (default 300)"));
    opt(app->add_option("--images", images, "Held-out images per run"));
    opt(app->add_option("--seeds", seeds, "Comma-separated run seeds"));
    opt(app->add_flag("--quantize", quantize, "Round adversarial images to 8 bits before evaluation"));
  }
  void opt(CLI::Option* o) {
    o->group("Attack");
    set.push_back(o);
  }
  bool given(const std::string& flag) const {
    for (auto* o : set)
      if (o->get_name() == flag) return o->count() > 0;
    return false;
  }

  RunConfig resolve() const {
    RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
    if (!zoo.empty()) rc.zoo_dir = zoo;
    if (rc.zoo_dir.empty()) rc.zoo_dir = (output_root() / "zoo").string();
    HarnessConfig& h = rc.harness;
    h.jobs = jobs;
    if (given("--method")) h.attack.method = parse_method(method);
    if (given("--task")) h.task = parse_task(task);
    if (given("--target")) h.target_text = target;
    if (given("--match")) h.match = parse_match_mode(match);
    if (given("--prompt-source")) {
      if (prompt_source == "TOY" || prompt_source == "toy") h.prompt_source = PromptSource::Toy;
      else if (prompt_source == "PAPER" || prompt_source == "paper") h.prompt_source = PromptSource::Paper;
      else throw UsageError("unknown prompt source '" + prompt_source + "'");
    }
    if (given("--epsilon")) h.attack.epsilon = epsilon;
    if (given("--alpha")) h.attack.alpha = alpha;
    if (given("--steps")) h.attack.steps = steps;
    if (given("--images")) h.images = images;
    if (given("--quantize")) h.quantize = quantize;
    if (given("--seeds")) {
      h.seeds.clear();
      for (const auto& s : split_list(seeds)) h.seeds.push_back(std::stoull(s));
    }
    h.attack.validate();
    return rc;
  }
};

Zoo open_zoo(const RunConfig& rc) {
  if (!fs::exists(fs::path(rc.zoo_dir) / kZooManifestName))
    throw UsageError("no trained zoo in " + rc.zoo_dir + "; run zoo-train first");
  Zoo zoo = load_zoo(rc.zoo_dir);
  if (zoo.models.empty()) throw UsageError("zoo in " + rc.zoo_dir + " is empty");
  return zoo;
}

std::function<void(int, int)> progress_printer(const std::string& what) {
  return [what](int done, int total) { std::cerr << what << ' ' << done << '/' << total << std::endl; };
}

void save_run_config(const fs::path& dir, const RunConfig& rc) {
  write_text(dir / "config.json", to_json(rc).dump(2) + "\n");
}

int cmd_zoo_train(const std::string& zoo_dir, bool force, int pretrain_epochs, int donor_epochs, int member_epochs) {
  ZooPlan plan = default_zoo_plan();
  if (pretrain_epochs > 0) plan.pretrain.epochs = pretrain_epochs;
  if (donor_epochs > 0) plan.donor_training.epochs = donor_epochs;
  if (member_epochs > 0) plan.member_training.epochs = member_epochs;
  const fs::path dir = zoo_dir.empty() ? output_root() / "zoo" : fs::path(zoo_dir);
  const auto result = train_zoo(dir, plan, [](const std::string& line) { std::cout << line << std::endl; }, force);
  for (const auto& [id, acc] : result.accuracy) std::cout << id << " held-out accuracy " << acc << "\n";
  if (!result.below_bar.empty()) {
    std::cerr << "below the " << plan.member_training.min_accuracy << " accuracy bar:";
    for (const auto& id : result.below_bar) std::cerr << ' ' << id;
    std::cerr << "\n";
    return kExitFailure;
  }
  std::cout << "zoo written to " << dir.string() << "\n";
  return 0;
}

int cmd_attack(const CommonFlags& flags, const std::string& surrogate, std::uint64_t seed, const fs::path& dir) {
  RunConfig rc = flags.resolve();
  const Zoo zoo = open_zoo(rc);
  const auto ids = zoo.ids();
  if (std::find(ids.begin(), ids.end(), surrogate) == ids.end())
    throw UsageError("no model '" + surrogate + "' in the zoo");
  const Corpus corpus = generate_corpus(rc.corpus_size, rc.corpus_seed);
  rc.harness.seeds = {seed};
  std::mutex mu;
  HarnessConfig h = rc.harness;
  h.attack.on_progress = [&mu](int it, double loss) {
    std::lock_guard<std::mutex> lock(mu);
    std::cerr << "iteration " << it << " loss " << loss << std::endl;
  };
  std::vector<AdvExample> examples;
  const RunRecord rec = run_surrogate(zoo, corpus, h, surrogate, seed, nullptr, &examples);
  save_run_config(dir, rc);
  json metas = json::array();
  for (size_t i = 0; i < examples.size(); ++i) {
    const AdvExample& ex = examples[i];
    const std::string stem = "image_" + std::to_string(rec.image_ids[i]);
    write_png(dir / (stem + "_adv.png"), ex.adversarial_image);
    write_named_arrays(dir / (stem + "_delta.dvna"), NamedArrays{{"delta", ex.delta.to_matrix<float>()}});
    json meta{{"image_id", rec.image_ids[i]}, {"surrogate_id", ex.surrogate_id}, {"prompt", ex.prompt},
              {"target_text", ex.target_text}, {"method", ex.method}, {"seed", ex.seed},
              {"loss_trace", ex.loss_trace}};
    write_text(dir / (stem + "_meta.json"), meta.dump(2) + "\n");
  }
  write_text(dir / "records.json", json::array({to_json(rec)}).dump(2) + "\n");
  std::cout << "attacked " << examples.size() << " images on " << surrogate << " with " << rec.method << "\n";
  for (const auto& [target, bits] : rec.success) {
    int hits = 0;
    for (bool b : bits) hits += b;
    std::cout << "  " << target << (target == surrogate ? " (white-box)" : "") << ": " << hits << '/' << bits.size()
              << "\n";
  }
  return 0;
}

int cmd_replay(const fs::path& run, const std::string& zoo_override, int jobs) {
  RunConfig rc = load_run_config(run / "config.json");
  if (!zoo_override.empty()) rc.zoo_dir = zoo_override;
  const Zoo zoo = open_zoo(rc);
  const Corpus corpus = generate_corpus(rc.corpus_size, rc.corpus_seed);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(run))
    if (e.path().filename().string().rfind("records", 0) == 0 && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no records in " + run.string());
  int bad = 0, total = 0;
  for (const auto& f : files)
    for (const auto& j : json::parse(read_text(f))) {
      const RunRecord rec = run_record_from_json(j);
      HarnessConfig h = harness_config_from_json(json::parse(rec.config_json));
      h.jobs = jobs;
      std::string diff;
      const RunRecord again = run_surrogate(zoo, corpus, h, rec.surrogate, rec.run_seed);
      ++total;
      if (rec.zoo_manifest_hash != zoo.manifest_hash) diff = "zoo manifest hash differs";
      else if (again.adversarial_hashes != rec.adversarial_hashes) diff = "adversarial image hashes differ";
      else if (again.success != rec.success) diff = "success bits differ";
      std::cout << rec.surrogate << ' ' << rec.method << " seed " << rec.run_seed << ": "
                << (diff.empty() ? "identical" : diff) << "\n";
      if (!diff.empty()) ++bad;
    }
  std::cout << total - bad << '/' << total << " records replayed identically\n";
  return bad == 0 ? 0 : kExitFailure;
}

int cmd_transfer(const CommonFlags& flags, const std::string& methods_flag, const fs::path& dir) {
  RunConfig rc = flags.resolve();
  if (!methods_flag.empty()) rc.methods = split_list(methods_flag);
  else if (flags.given("--method")) rc.methods = {flags.method};
  if (rc.methods.empty()) throw UsageError("no methods to run");
  for (const auto& m : rc.methods) parse_method(m);
  const Zoo zoo = open_zoo(rc);
  if (zoo.models.size() < 2) throw UsageError("transfer needs a zoo of at least two models");
  const Corpus corpus = generate_corpus(rc.corpus_size, rc.corpus_seed);
  save_run_config(dir, rc);
  std::vector<TransferResult> results;
  for (const auto& m : rc.methods) {
    HarnessConfig h = rc.harness;
    h.attack.method = parse_method(m);
    results.push_back(transfer_matrix(zoo, corpus, h, progress_printer(m)));
    json records = json::array();
    for (const auto& r : results.back().records) records.push_back(to_json(r));
    write_text(dir / ("records_" + m + ".json"), records.dump(2) + "\n");
  }
  write_text(dir / kTransferFile, transfer_json(rc.methods, results).dump(2) + "\n");
  emit_reports(dir);
  std::cout << read_text(dir / "transfer.md");
  return 0;
}

int cmd_ablate(const CommonFlags& flags, std::string parameter, const std::string& values_flag, const fs::path& dir) {
  RunConfig rc = flags.resolve();
  if (parameter.empty()) parameter = rc.sweep_parameter;
  std::vector<std::string> values = values_flag.empty() ? rc.sweep_values : split_list(values_flag);
  if (parameter.empty()) throw UsageError("no sweep parameter given");
  if (values.empty()) throw UsageError("no sweep values given");
  rc.sweep_parameter = parameter;
  rc.sweep_values = values;
  const Zoo zoo = open_zoo(rc);
  if (zoo.models.size() < 2) throw UsageError("ablation needs a zoo of at least two models");
  const Corpus corpus = generate_corpus(rc.corpus_size, rc.corpus_seed);
  save_run_config(dir, rc);
  const AblationResult r = ablation_sweep(zoo, corpus, parameter, values, rc.harness, progress_printer(parameter));
  write_text(dir / kAblationFile, to_json(r).dump(2) + "\n");
  emit_reports(dir);
  std::cout << read_text(dir / "ablation.md");
  return 0;
}

int cmd_report(const std::string& run, const std::string& reference, const std::string& out) {
  if (!reference.empty()) {
    const std::string md = render_comparison_markdown(load_reference_table(reference));
    if (out.empty()) std::cout << md;
    else write_text(out, md);
    return 0;
  }
  if (run.empty()) throw UsageError("report needs --run or --reference");
  const auto written = emit_reports(run);
  if (written.empty()) throw UsageError("no transfer or ablation results in " + run);
  for (const auto& f : written) std::cout << (fs::path(run) / f).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer attacks with dynamic attention perturbation on toy vision-language models.\n"
               "Outputs go to a timestamped directory under $" + std::string(kOutputRootEnv) + " (default ./runs)."};
  app.require_subcommand(1);
  std::vector<std::string> args(argv, argv + argc);

  auto* zoo_train = app.add_subcommand("zoo-train", "Train the model zoo (reuses finished members unless --force)");
  std::string zoo_dir;
  bool force = false;
  int pretrain_epochs = 0, donor_epochs = 0, member_epochs = 0;
  zoo_train->add_option("--zoo", zoo_dir, "Zoo directory (default: $" + std::string(kOutputRootEnv) + "/zoo)");
  zoo_train->add_flag("--force", force, "Retrain every member");
  zoo_train->add_option("--pretrain-epochs", pretrain_epochs, "Vision pretraining epochs (default 200)");
  zoo_train->add_option("--donor-epochs", donor_epochs, "Donor training epochs (default 40)");
  zoo_train->add_option("--member-epochs", member_epochs, "Member training epochs (default 30)");

  auto* attack = app.add_subcommand("attack", "Attack held-out images on one surrogate and save the examples");
  CommonFlags attack_flags;
  attack_flags.add(attack);
  std::string surrogate, replay;
  std::uint64_t seed = 1;
  attack->add_option("--surrogate", surrogate, "Surrogate model id");
  attack->add_option("--seed", seed, "Run seed");
  attack->add_option("--replay", replay, "Re-run every record in this run directory and compare")
      ->check(CLI::ExistingDirectory);

  auto* transfer = app.add_subcommand("transfer", "Transfer ASR matrix for one or more methods");
  CommonFlags transfer_flags;
  transfer_flags.add(transfer);
  std::string methods;
  transfer->add_option("--methods", methods, "Comma-separated methods; the last is compared against the first");

  auto* ablate = app.add_subcommand("ablate", "Sweep one attack parameter");
  CommonFlags ablate_flags;
  ablate_flags.add(ablate);
  std::string parameter, values;
  ablate->add_option("--parameter", parameter, "kernel_size, kernel_sigma, epsilon, steps, target_text or task");
  ablate->add_option("--values", values, "Comma-separated values, e.g. 4/255,8/255,16/255");

  auto* report = app.add_subcommand("report", "Regenerate CSV, SVG and Markdown from a run directory");
  std::string run, reference, out;
  report->add_option("--run", run, "Run directory")->check(CLI::ExistingDirectory);
  report->add_option("--reference", reference, "Render a reference comparison table (JSON)")->check(CLI::ExistingFile);
  report->add_option("--out", out, "Write the reference table here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  fs::path dir;
  int code = 0;
  try {
    if (zoo_train->parsed()) return cmd_zoo_train(zoo_dir, force, pretrain_epochs, donor_epochs, member_epochs);
    if (report->parsed()) return cmd_report(run, reference, out);
    if (attack->parsed() && !replay.empty()) return cmd_replay(replay, attack_flags.zoo, attack_flags.jobs);
    if (attack->parsed() && surrogate.empty()) throw UsageError("attack needs --surrogate or --replay");
    dir = make_run_dir(command);
    std::cerr << "run directory " << dir.string() << std::endl;
    if (attack->parsed()) code = cmd_attack(attack_flags, surrogate, seed, dir);
    else if (transfer->parsed()) code = cmd_transfer(transfer_flags, methods, dir);
    else code = cmd_ablate(ablate_flags, parameter, values, dir);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    code = kExitUsage;
  } catch (const FixtureError& e) {
    std::cerr << "fixture error: " << e.what() << "\n";
    code = kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    code = kExitFailure;
  } catch (const TrainingQualityError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    code = kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    code = kExitFailure;
  }
  if (!dir.empty()) write_run_manifest(dir, command, args, code);
  return code;
}
