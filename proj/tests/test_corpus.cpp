// SPDX-License-Identifier: Apache-2.0
#include "dynvla/corpus.hpp"
#include "dynvla/training.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

using namespace dynvla;

TEST_SUITE("data_corpus") {
  TEST_CASE("same seed gives an identical corpus") {
    const Corpus a = generate_corpus(120, 5), b = generate_corpus(120, 5);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
      CHECK(a.records[i].image == b.records[i].image);
      CHECK(a.records[i].caption == b.records[i].caption);
    }
    CHECK(a.train == b.train);
    CHECK(a.heldout == b.heldout);
    CHECK(generate_corpus(120, 6).records[0].image != a.records[0].image);
  }

  TEST_CASE("split and coverage of a 3000-scene corpus") {
    const Corpus c = generate_corpus(3000, 11);
    CHECK(c.train.size() == 2700);
    CHECK(c.heldout.size() == 300);
    std::set<int> all(c.train.begin(), c.train.end());
    for (int id : c.heldout) CHECK(all.insert(id).second);
    CHECK(all.size() == 3000);
    std::set<std::pair<int, int>> combos;
    for (const auto& r : c.records) {
      combos.insert({static_cast<int>(r.scene.shape), r.scene.color});
      CHECK(r.caption.find("unknown") == std::string::npos);
      CHECK(r.caption.find("cat") == std::string::npos);
      for (float v : r.image.data) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
      }
    }
    CHECK(combos.size() == 32);
  }

  TEST_CASE("answers follow the scene") {
    const Corpus c = generate_corpus(40, 2);
    const CorpusRecord& r = c.records[0];
    CHECK(answer_for(r, Task::Captioning, "describe the image.") == r.caption);
    CHECK(answer_for(r, Task::Classification, "what is this?") == r.label);
    CHECK(answer_for(r, Task::VqaGeneral, "what color is it?") == r.color);
    CHECK(answer_for(r, Task::VqaSpecific, "is it a " + r.label + "?") == "yes");
    CHECK_THROWS_AS(answer_for(r, Task::VqaGeneral, "Where is the brightest point in the image?"), std::invalid_argument);
  }

  TEST_CASE("prompt fixtures load with pinned hashes") {
    const PromptSet paper = load_prompt_fixtures(Task::Classification, PromptSource::Paper);
    CHECK(std::find(paper.prompts.begin(), paper.prompts.end(),
                    "Identify the primary theme of this image in one word.") != paper.prompts.end());
    for (Task t : kTasks)
      for (PromptSource s : {PromptSource::Paper, PromptSource::Toy}) {
        const PromptSet set = load_prompt_fixtures(t, s);
        CHECK(set.content_hash == pinned_fixture_hash(t, s));
        CHECK_FALSE(set.prompts.empty());
        for (const auto& p : set.prompts) {
          CHECK_FALSE(p.empty());
          CHECK(p.find('\n') == std::string::npos);
        }
      }
  }

  TEST_CASE("tampered fixtures are rejected") {
    const auto dir = std::filesystem::temp_directory_path() / "dynvla_fixture_test";
    std::filesystem::create_directories(dir);
    std::filesystem::copy_file(default_fixture_dir() / fixture_filename(Task::Captioning, PromptSource::Toy),
                               dir / fixture_filename(Task::Captioning, PromptSource::Toy),
                               std::filesystem::copy_options::overwrite_existing);
    {
      std::ofstream out(dir / fixture_filename(Task::Captioning, PromptSource::Toy), std::ios::app);
      out << "an extra prompt\n";
    }
    CHECK_THROWS_AS(load_prompt_fixtures(Task::Captioning, PromptSource::Toy, dir), FixtureError);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("prompt assignment") {
    const Corpus c = generate_corpus(40, 2);
    const PromptSet one{Task::Classification, PromptSource::Toy, {"what is this?"}, 0};
    CHECK(assign_prompts(c, {3}, {one}, 1)[0].at(Task::Classification) == "what is this?");
    const auto sets = toy_prompt_sets();
    CHECK(assign_prompts(c, {1, 2, 3}, sets, 9) == assign_prompts(c, {1, 2, 3}, sets, 9));
    // the draw for a record does not depend on its neighbours
    CHECK(assign_prompts(c, {2}, sets, 9)[0] == assign_prompts(c, {1, 2, 3}, sets, 9)[1]);
    CHECK_THROWS_AS(assign_prompts(c, {40}, sets, 9), std::out_of_range);
  }

  TEST_CASE("prompt draws are uniform") {
    const Corpus c = generate_corpus(40, 2);
    const PromptSet five{Task::Captioning, PromptSource::Toy, {"a", "b", "c", "d", "e"}, 0};
    std::map<std::string, int> hist;
    for (std::uint64_t s = 0; s < 10000; ++s) ++hist[assign_prompts(c, {7}, {five}, s)[0].at(Task::Captioning)];
    double chi2 = 0;
    for (const auto& [p, n] : hist) chi2 += (n - 2000.0) * (n - 2000.0) / 2000.0;
    CHECK(hist.size() == 5);
    // chi-square with 4 dof, 0.999 quantile is 18.47
    CHECK(chi2 < 18.47);
  }

  TEST_CASE("sign words and rendering") {
    const auto words = load_sign_words();
    CHECK(words.size() > 500);
    const std::set<std::string> forbidden = {"circle", "square", "triangle", "cross", "red",    "green",  "blue",
                                             "yellow", "purple", "orange", "white", "black", "yes", "no"};
    for (const auto& w : words) {
      CHECK(forbidden.count(w) == 0);
      CHECK(static_cast<int>(w.size()) * kGlyphAdvance <= 32);
    }
    SignSpec sign;
    sign.word = "ab";
    sign.x = 4;
    sign.y = 8;
    const ImageTensor img = render_sign(sign);
    int ink = 0;
    for (int r = 0; r < kGlyphHeight; ++r)
      for (int col = 0; col < kGlyphWidth; ++col) ink += glyph_pixel('a', r, col);
    CHECK(ink > 0);
    sign.x = 30;
    CHECK_THROWS(render_sign(sign));
    std::mt19937_64 a(1), b(1);
    const SignSpec sa = sample_sign(a, words), sb = sample_sign(b, words);
    CHECK(sa.word == sb.word);
    CHECK(sa.x % 4 == 0);
    CHECK(sa.y % 4 == 0);
  }

  TEST_CASE("scrambling permutes whole tiles") {
    const Corpus c = generate_corpus(10, 4);
    const ImageTensor& scene = c.records[1].image;
    std::mt19937_64 rng(3);
    const ImageTensor img = scramble_patches(scene, 4, rng);
    auto tile = [](const ImageTensor& im, int t) {
      std::vector<float> v;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
          for (int ch = 0; ch < 3; ++ch) v.push_back(im.at(t / 8 * 4 + y, t % 8 * 4 + x, ch));
      return v;
    };
    std::multiset<std::vector<float>> before, after;
    for (int t = 0; t < 64; ++t) {
      before.insert(tile(scene, t));
      after.insert(tile(img, t));
    }
    CHECK(before == after);
    CHECK(img != scene);
    std::mt19937_64 again(3);
    CHECK(scramble_patches(scene, 4, again) == img);
    CHECK_THROWS_AS(scramble_patches(scene, 5, rng), std::invalid_argument);
  }

  TEST_CASE("corpus persistence round trip") {
    const Corpus c = generate_corpus(30, 4);
    const auto dir = std::filesystem::temp_directory_path() / "dynvla_corpus_test";
    save_corpus(c, dir);
    const Corpus back = load_corpus(dir);
    REQUIRE(back.records.size() == c.records.size());
    CHECK(back.heldout == c.heldout);
    for (size_t i = 0; i < c.records.size(); ++i) {
      CHECK(back.records[i].caption == c.records[i].caption);
      CHECK(back.records[i].image == quantize_8bit(c.records[i].image));
    }
    std::filesystem::remove_all(dir);
  }
}
