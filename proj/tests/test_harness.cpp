// SPDX-License-Identifier: Apache-2.0
#include "dynvla/harness.hpp"

#include <doctest.h>

#include <atomic>
#include <cmath>

using namespace dynvla;

namespace {

ModelBundle untrained(const std::string& id, Family f, std::uint64_t seed) {
  ModelSpec spec;
  spec.id = id;
  spec.family = f;
  if (f == Family::CrossAttn) spec.query_tokens = 8;
  spec.init_seed = seed;
  ModelBundle b = init_model(spec);
  b.frozen = true;
  return b;
}

HarnessConfig tiny_config() {
  HarnessConfig cfg;
  cfg.attack.steps = 3;
  cfg.images = 3;
  cfg.seeds = {1, 2};
  cfg.max_len = 8;
  return cfg;
}

const Corpus& corpus() {
  static const Corpus c = generate_corpus(60, 21);
  return c;
}

}  // namespace

TEST_SUITE("transfer_harness") {
  TEST_CASE("exact and first-sentence matching") {
    CHECK(matches("unknown", "unknown", MatchMode::Exact));
    CHECK_FALSE(matches("Unknown.", "unknown", MatchMode::Exact));
    CHECK(matches("unknown. The image shows a dog.", "unknown", MatchMode::FirstSentence));
    CHECK(matches("  unknown \n", "unknown", MatchMode::Exact));
    CHECK(matches("a  red   circle", "a red circle", MatchMode::Exact));
    CHECK_FALSE(matches("unknown. The image shows a dog.", "unknown", MatchMode::Exact));
    CHECK_FALSE(matches("Unknown! yes", "unknown", MatchMode::FirstSentence));
    CHECK(first_sentence("what? no") == "what");
    CHECK(first_sentence("no punctuation here") == "no punctuation here");
    CHECK(parse_match_mode(match_mode_name(MatchMode::FirstSentence)) == MatchMode::FirstSentence);
    CHECK_THROWS_AS(parse_match_mode("FUZZY"), std::invalid_argument);
  }

  TEST_CASE("one-sided sign test") {
    CHECK(sign_test({0.1, 0.2, 0.05, 0.3, 0.01}).p_value == doctest::Approx(0.03125).epsilon(1e-12));
    CHECK(sign_test({0.1, 0.2, -0.05, 0.3, 0.01}).p_value == doctest::Approx(6.0 / 32).epsilon(1e-12));
    const SignTest ties = sign_test({0.1, 0.0, 0.2, 0.0});
    CHECK(ties.ties == 2);
    CHECK(ties.p_value == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(sign_test({0.0, 0.0}).p_value == 1.0);
  }

  TEST_CASE("evaluation rejects an empty batch") {
    CHECK_THROWS_AS(evaluate_asr(untrained("a", Family::CrossAttn, 1), {}, "unknown", MatchMode::Exact),
                    std::invalid_argument);
  }

  TEST_CASE("identical models transfer exactly like white-box") {
    Zoo zoo;
    zoo.models = {untrained("a", Family::MlpProj, 4), untrained("b", Family::MlpProj, 4)};
    HarnessConfig cfg = tiny_config();
    cfg.target_text = "a";
    cfg.match = MatchMode::FirstSentence;
    const TransferResult r = transfer_matrix(zoo, corpus(), cfg);
    CHECK(r.matrix.surrogates == std::vector<std::string>{"a", "b"});
    CHECK(r.matrix.white_box(0, 0));
    CHECK_FALSE(r.matrix.white_box(0, 1));
    CHECK(r.matrix.rate[0][1] == r.matrix.rate[0][0]);
    CHECK(r.matrix.rate[1][0] == r.matrix.rate[1][1]);
    CHECK(r.records.size() == 4);
    CHECK(r.per_run.size() == 2);
    CHECK(r.matrix.runs[0][0] == 2);
    CHECK(r.matrix.samples[0][0] == 3);
  }

  TEST_CASE("matrices are reproducible and independent of the job count") {
    Zoo zoo;
    zoo.models = {untrained("c", Family::CrossAttn, 1), untrained("m", Family::MlpProj, 2)};
    HarnessConfig cfg = tiny_config();
    cfg.attack.method = parse_method("DYNVLA");
    const TransferResult a = transfer_matrix(zoo, corpus(), cfg);
    cfg.jobs = 3;
    const TransferResult b = transfer_matrix(zoo, corpus(), cfg);
    CHECK(a.matrix.rate == b.matrix.rate);
    for (size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].adversarial_hashes == b.records[i].adversarial_hashes);
      CHECK(a.records[i].success == b.records[i].success);
      CHECK(a.records[i].config_json == b.records[i].config_json);
      CHECK(a.records[i].prompts.size() == 3);
    }
    std::string diff;
    CHECK(replay_matches(a.records[0], zoo, corpus(), cfg, &diff));
    HarnessConfig other = cfg;
    other.attack.steps = 4;
    CHECK_FALSE(replay_matches(a.records[0], zoo, corpus(), other, &diff));
    CHECK(diff == "config snapshot differs");
  }

  TEST_CASE("comparisons") {
    Zoo zoo;
    zoo.models = {untrained("c", Family::CrossAttn, 1), untrained("m", Family::MlpProj, 2)};
    const HarnessConfig cfg = tiny_config();
    const TransferResult pgd = transfer_matrix(zoo, corpus(), cfg);
    const Comparison self = compare_results({"PGD", "PGD"}, {pgd, pgd});
    for (const auto& row : self.delta.back())
      for (double d : row) CHECK(d == 0.0);
    CHECK(self.test.ties == 2);
    CHECK(self.mean_delta == 0.0);

    HarnessConfig shifted = cfg;
    shifted.seeds = {1, 3};
    const TransferResult other = transfer_matrix(zoo, corpus(), shifted);
    CHECK_THROWS_AS(compare_results({"PGD", "DYNVLA"}, {pgd, other}), std::invalid_argument);
  }

  TEST_CASE("mean off-diagonal ignores the diagonal") {
    ASRMatrix m;
    m.surrogates = m.targets = {"a", "b", "c"};
    m.rate = {{1.0, 0.2, 0.4}, {0.0, 1.0, 0.6}, {0.8, 0.0, 1.0}};
    CHECK(m.mean_off_diagonal() == doctest::Approx(2.0 / 6).epsilon(1e-12));
  }

  TEST_CASE("sweep values") {
    CHECK(parse_fraction("8/255") == doctest::Approx(8.0 / 255).epsilon(1e-15));
    CHECK(parse_fraction("0.25") == 0.25);
    CHECK_THROWS_AS(parse_fraction("8/0"), std::invalid_argument);
    const HarnessConfig base = tiny_config();
    CHECK(apply_sweep_value(base, "kernel_size", "5").attack.kernel_size.lo == 5);
    CHECK(apply_sweep_value(base, "kernel_size", "5").attack.kernel_size.hi == 5);
    CHECK(apply_sweep_value(base, "kernel_sigma", "3.5").attack.kernel_sigma.lo == 3.5);
    CHECK(apply_sweep_value(base, "epsilon", "4/255").attack.epsilon == doctest::Approx(4.0 / 255));
    CHECK(apply_sweep_value(base, "steps", "600").attack.steps == 600);
    CHECK(apply_sweep_value(base, "target_text", "cat").target_text == "cat");
    CHECK(apply_sweep_value(base, "task", "CAPTIONING").task == Task::Captioning);
    CHECK_THROWS_AS(apply_sweep_value(base, "momentum", "1"), std::invalid_argument);
    CHECK_THROWS_AS(apply_sweep_value(base, "kernel_size", "4"), std::invalid_argument);
  }

  TEST_CASE("steps sweep checkpoints every 200 iterations") {
    Zoo zoo;
    zoo.models = {untrained("c", Family::CrossAttn, 1), untrained("m", Family::MlpProj, 2)};
    HarnessConfig cfg = tiny_config();
    cfg.images = 1;
    cfg.seeds = {1};
    cfg.attack.method = parse_method("DYNVLA");
    const AblationResult r = ablation_sweep(zoo, corpus(), "steps", {"400"}, cfg);
    REQUIRE(r.curves.size() == 1);
    REQUIRE(r.curves[0].points.size() == 2);
    CHECK(r.curves[0].points[0].x == 200);
    CHECK(r.curves[0].points[1].x == 400);
    const AblationResult partial = ablation_sweep(zoo, corpus(), "steps", {"300"}, cfg);
    REQUIRE(partial.curves[0].points.size() == 1);
    CHECK(partial.curves[0].points[0].x == 200);
  }

  TEST_CASE("kernel sweeps cover the configured values") {
    Zoo zoo;
    zoo.models = {untrained("c", Family::CrossAttn, 1), untrained("m", Family::MlpProj, 2)};
    HarnessConfig cfg = tiny_config();
    cfg.images = 1;
    cfg.seeds = {1};
    cfg.attack.method = parse_method("DYNVLA");
    const AblationResult sizes = ablation_sweep(zoo, corpus(), "kernel_size", {"3", "5"}, cfg);
    CHECK(sizes.curves.size() == 2);
    CHECK(sizes.curves[0].value == "3");
    CHECK(sizes.curves[1].points.size() == 1);
    const AblationResult eps = ablation_sweep(zoo, corpus(), "epsilon", {"4/255", "16/255"}, cfg);
    CHECK(eps.curves[1].points[0].x == doctest::Approx(16.0 / 255));
    CHECK_FALSE(eps.annotations.empty());
  }

  TEST_CASE("parallel_for covers every index and rethrows") {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, 4, [&](int i, int) { ++hits[static_cast<size_t>(i)]; });
    for (auto& h : hits) CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(10, 3, [](int i, int) {
                      if (i == 7) throw std::runtime_error("boom");
                    }),
                    std::runtime_error);
  }
}
