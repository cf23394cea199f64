// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace dynvla {

enum class Shape { Circle, Square, Triangle, Cross };
inline constexpr std::array<Shape, 4> kShapes = {Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross};
inline constexpr std::array<const char*, 8> kColorNames = {"red",    "green",  "blue",  "yellow",
                                                           "purple", "orange", "white", "black"};

std::string shape_name(Shape s);

/// Description of one synthetic scene; rendering is a pure function of this struct.
struct SceneSpec {
  Shape shape = Shape::Circle;
  int color = 0;  // index into kColorNames
  int center_x = 16;
  int center_y = 16;
  int size = 8;  // half extent in pixels
  std::array<float, 3> background{0.5f, 0.5f, 0.5f};
  std::uint64_t seed = 0;  // pixel-noise stream
};

std::array<float, 3> color_rgb(int color);
ImageTensor render_scene(const SceneSpec& scene, int side = 32);

struct CorpusRecord {
  int id = 0;
  SceneSpec scene;
  ImageTensor image;
  std::string caption;
  std::string label;
  std::string color;
};

struct Corpus {
  std::uint64_t seed = 0;
  std::vector<CorpusRecord> records;
  std::vector<int> train;
  std::vector<int> heldout;
};

/// Deterministic scenes with a 90/10 train/held-out split.
Corpus generate_corpus(int size, std::uint64_t seed, int side = 32);

enum class Task { Classification, Captioning, VqaGeneral, VqaSpecific };
inline constexpr std::array<Task, 4> kTasks = {Task::Classification, Task::Captioning, Task::VqaGeneral,
                                               Task::VqaSpecific};
std::string task_name(Task t);
Task parse_task(const std::string& s);

/// Which bundled prompt list to load: the verbatim lists used with real models, or
/// the reduced lists expressed in the toy corpus vocabulary.
enum class PromptSource { Paper, Toy };

struct PromptSet {
  Task task = Task::Classification;
  PromptSource source = PromptSource::Toy;
  std::vector<std::string> prompts;
  std::uint64_t content_hash = 0;
};

class FixtureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::filesystem::path default_fixture_dir();
std::string fixture_filename(Task task, PromptSource source);
/// Pinned FNV-1a hash of each bundled fixture file.
std::uint64_t pinned_fixture_hash(Task task, PromptSource source);

/// Loads a prompt list, verifying the pinned content hash.
PromptSet load_prompt_fixtures(Task task, PromptSource source = PromptSource::Toy,
                               const std::filesystem::path& dir = default_fixture_dir());

/// Expected model answer for a toy prompt. Throws for prompts the toy vocabulary cannot answer.
std::string answer_for(const CorpusRecord& record, Task task, const std::string& prompt);

using PromptAssignment = std::map<Task, std::string>;

/// One uniformly drawn prompt per task for each listed record id; position i of the
/// result belongs to `ids[i]`. Draws depend only on (seed, record id, task).
std::vector<PromptAssignment> assign_prompts(const Corpus& corpus, const std::vector<int>& ids,
                                             const std::vector<PromptSet>& prompt_sets, std::uint64_t seed);

/// A rendered word ("sign") used while pretraining models to read. Any task prompt
/// on a sign is answered with the word itself.
struct SignSpec {
  std::string word;
  int color = 7;
  int x = 2;  // left edge of the first glyph
  int y = 13;
  std::array<float, 3> background{0.5f, 0.5f, 0.5f};
  std::uint64_t seed = 0;
};

inline constexpr int kGlyphWidth = 3;
inline constexpr int kGlyphHeight = 5;
inline constexpr int kGlyphAdvance = 4;

/// True if pixel (row, col) of the 3x5 glyph for `c` is set. Supports a-z and '\''.
bool glyph_pixel(char c, int row, int col);
ImageTensor render_sign(const SignSpec& sign, int side = 32);
/// Uniform word, placement, ink color and background; the ink always contrasts.
SignSpec sample_sign(std::mt19937_64& rng, const std::vector<std::string>& words, int side = 32);
/// Scene with its patch x patch tiles randomly permuted: colors survive, the shape does not.
ImageTensor scramble_patches(const ImageTensor& scene, int patch, std::mt19937_64& rng);

std::uint64_t pinned_word_list_hash();
/// Bundled word list for signs. It never contains a corpus answer, so clean scenes never
/// elicit one of these words.
std::vector<std::string> load_sign_words(const std::filesystem::path& dir = default_fixture_dir().parent_path());

/// Persists the corpus as 8-bit PNGs plus index.json.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace dynvla
