// SPDX-License-Identifier: Apache-2.0
#include "dynvla/corpus.hpp"

#include "dynvla/io.hpp"
#include "dynvla/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

namespace dynvla {

std::string shape_name(Shape s) {
  switch (s) {
    case Shape::Circle: return "circle";
    case Shape::Square: return "square";
    case Shape::Triangle: return "triangle";
    case Shape::Cross: return "cross";
  }
  return "?";
}

std::array<float, 3> color_rgb(int color) {
  static constexpr std::array<std::array<float, 3>, 8> table = {{
      {0.90f, 0.10f, 0.10f},  // red
      {0.10f, 0.75f, 0.20f},  // green
      {0.15f, 0.25f, 0.95f},  // blue
      {0.95f, 0.90f, 0.10f},  // yellow
      {0.60f, 0.15f, 0.75f},  // purple
      {1.00f, 0.55f, 0.05f},  // orange
      {0.97f, 0.97f, 0.97f},  // white
      {0.04f, 0.04f, 0.04f},  // black
  }};
  if (color < 0 || color >= static_cast<int>(table.size())) throw std::out_of_range("color index out of range");
  return table[static_cast<size_t>(color)];
}

namespace {

bool inside(const SceneSpec& s, double x, double y) {
  const double dx = x - s.center_x;
  const double dy = y - s.center_y;
  const double r = s.size;
  switch (s.shape) {
    case Shape::Circle: return dx * dx + dy * dy <= r * r;
    case Shape::Square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case Shape::Triangle: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
    case Shape::Cross:
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
  }
  return false;
}

double color_distance(const std::array<float, 3>& a, const std::array<float, 3>& b) {
  double d = 0;
  for (size_t i = 0; i < 3; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

}  // namespace

ImageTensor render_scene(const SceneSpec& scene, int side) {
  if (scene.size < 1 || scene.center_x - scene.size < 0 || scene.center_x + scene.size >= side ||
      scene.center_y - scene.size < 0 || scene.center_y + scene.size >= side)
    throw std::invalid_argument("scene shape does not fit inside the canvas");
  ImageTensor img(side, side, 3);
  const auto fg = color_rgb(scene.color);
  std::mt19937_64 rng(scene.seed);
  std::uniform_real_distribution<float> noise(-0.02f, 0.02f);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const bool on = inside(scene, x + 0.5, y + 0.5);
      for (int c = 0; c < 3; ++c) {
        const float base = on ? fg[static_cast<size_t>(c)] : scene.background[static_cast<size_t>(c)];
        img.at(y, x, c) = std::clamp(base + noise(rng), 0.0f, 1.0f);
      }
    }
  }
  return img;
}

Corpus generate_corpus(int size, std::uint64_t seed, int side) {
  if (size < 1) throw std::invalid_argument("corpus size must be at least 1");
  Corpus corpus;
  corpus.seed = seed;
  corpus.records.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    SceneSpec s;
    s.shape = kShapes[std::uniform_int_distribution<size_t>(0, kShapes.size() - 1)(rng)];
    s.color = std::uniform_int_distribution<int>(0, static_cast<int>(kColorNames.size()) - 1)(rng);
    s.size = std::uniform_int_distribution<int>(side / 5, side / 3)(rng);
    s.center_x = std::uniform_int_distribution<int>(s.size + 1, side - s.size - 2)(rng);
    s.center_y = std::uniform_int_distribution<int>(s.size + 1, side - s.size - 2)(rng);
    std::uniform_real_distribution<float> gray(0.35f, 0.65f);
    std::uniform_real_distribution<float> tint(-0.05f, 0.05f);
    do {
      const float g = gray(rng);
      for (auto& ch : s.background) ch = g + tint(rng);
    } while (color_distance(s.background, color_rgb(s.color)) < 0.3);
    s.seed = rng();

    CorpusRecord r;
    r.id = i;
    r.scene = s;
    r.image = render_scene(s, side);
    r.label = shape_name(s.shape);
    r.color = kColorNames[static_cast<size_t>(s.color)];
    r.caption = "a " + r.color + " " + r.label;
    corpus.records.push_back(std::move(r));
  }

  std::vector<int> order(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i) order[static_cast<size_t>(i)] = i;
  std::mt19937_64 split_rng(derive_seed(seed, 0x5b117ULL, 1));
  std::shuffle(order.begin(), order.end(), split_rng);
  int held = size / 10;
  if (held == 0 && size >= 2) held = 1;
  corpus.heldout.assign(order.begin(), order.begin() + held);
  corpus.train.assign(order.begin() + held, order.end());
  std::sort(corpus.heldout.begin(), corpus.heldout.end());
  std::sort(corpus.train.begin(), corpus.train.end());
  return corpus;
}

namespace {

// 3x5 glyph rows, most significant of three bits on the left.
const std::map<char, std::array<std::uint8_t, kGlyphHeight>>& font() {
  static const std::map<char, std::array<std::uint8_t, kGlyphHeight>> table = {
      {'a', {2, 5, 7, 5, 5}}, {'b', {6, 5, 6, 5, 6}}, {'c', {3, 4, 4, 4, 3}}, {'d', {6, 5, 5, 5, 6}},
      {'e', {7, 4, 6, 4, 7}}, {'f', {7, 4, 6, 4, 4}}, {'g', {3, 4, 5, 5, 3}}, {'h', {5, 5, 7, 5, 5}},
      {'i', {7, 2, 2, 2, 7}}, {'j', {1, 1, 1, 5, 2}}, {'k', {5, 5, 6, 5, 5}}, {'l', {4, 4, 4, 4, 7}},
      {'m', {5, 7, 7, 5, 5}}, {'n', {6, 5, 5, 5, 5}}, {'o', {2, 5, 5, 5, 2}}, {'p', {6, 5, 6, 4, 4}},
      {'q', {2, 5, 5, 6, 3}}, {'r', {6, 5, 6, 5, 5}}, {'s', {3, 4, 2, 1, 6}}, {'t', {7, 2, 2, 2, 2}},
      {'u', {5, 5, 5, 5, 7}}, {'v', {5, 5, 5, 5, 2}}, {'w', {5, 5, 7, 7, 5}}, {'x', {5, 5, 2, 5, 5}},
      {'y', {5, 5, 2, 2, 2}}, {'z', {7, 1, 2, 4, 7}}, {'\'', {2, 2, 0, 0, 0}},
  };
  return table;
}

}  // namespace

bool glyph_pixel(char c, int row, int col) {
  const auto it = font().find(c);
  if (it == font().end()) throw std::invalid_argument(std::string("no glyph for '") + c + "'");
  if (row < 0 || row >= kGlyphHeight || col < 0 || col >= kGlyphWidth) return false;
  return ((it->second[static_cast<size_t>(row)] >> (kGlyphWidth - 1 - col)) & 1) != 0;
}

ImageTensor render_sign(const SignSpec& sign, int side) {
  const int width = static_cast<int>(sign.word.size()) * kGlyphAdvance - 1;
  if (sign.word.empty() || sign.x < 0 || sign.y < 0 || sign.x + width > side || sign.y + kGlyphHeight > side)
    throw std::invalid_argument("sign '" + sign.word + "' does not fit inside the canvas");
  ImageTensor img(side, side, 3);
  const auto ink = color_rgb(sign.color);
  std::mt19937_64 rng(sign.seed);
  std::uniform_real_distribution<float> noise(-0.02f, 0.02f);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int gx = x - sign.x;
      const int gy = y - sign.y;
      const int k = gx >= 0 ? gx / kGlyphAdvance : -1;
      const bool on = k >= 0 && k < static_cast<int>(sign.word.size()) &&
                      glyph_pixel(sign.word[static_cast<size_t>(k)], gy, gx % kGlyphAdvance);
      for (int c = 0; c < 3; ++c) {
        const float base = on ? ink[static_cast<size_t>(c)] : sign.background[static_cast<size_t>(c)];
        img.at(y, x, c) = std::clamp(base + noise(rng), 0.0f, 1.0f);
      }
    }
  return img;
}

ImageTensor scramble_patches(const ImageTensor& scene, int patch, std::mt19937_64& rng) {
  if (patch < 1 || scene.height % patch != 0 || scene.width % patch != 0)
    throw std::invalid_argument("patch size must divide the image");
  const int rows = scene.height / patch, cols = scene.width / patch;
  std::vector<int> order(static_cast<size_t>(rows * cols));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  ImageTensor img(scene.height, scene.width, scene.channels);
  for (int t = 0; t < rows * cols; ++t) {
    const int src = order[static_cast<size_t>(t)];
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x)
        for (int c = 0; c < scene.channels; ++c)
          img.at(t / cols * patch + y, t % cols * patch + x, c) =
              scene.at(src / cols * patch + y, src % cols * patch + x, c);
  }
  return img;
}

SignSpec sample_sign(std::mt19937_64& rng, const std::vector<std::string>& words, int side) {
  if (words.empty()) throw std::invalid_argument("empty sign word list");
  SignSpec s;
  s.word = words[std::uniform_int_distribution<size_t>(0, words.size() - 1)(rng)];
  const int width = static_cast<int>(s.word.size()) * kGlyphAdvance - 1;
  if (width > side) throw std::invalid_argument("sign word '" + s.word + "' is wider than the canvas");
  s.color = std::uniform_int_distribution<int>(0, static_cast<int>(kColorNames.size()) - 1)(rng);
  // glyphs start on the 4-pixel patch grid
  s.x = kGlyphAdvance * std::uniform_int_distribution<int>(0, (side - width) / kGlyphAdvance)(rng);
  s.y = kGlyphAdvance * std::uniform_int_distribution<int>(0, (side - kGlyphHeight) / kGlyphAdvance)(rng);
  std::uniform_real_distribution<float> gray(0.35f, 0.65f);
  std::uniform_real_distribution<float> tint(-0.05f, 0.05f);
  do {
    const float g = gray(rng);
    for (auto& ch : s.background) ch = g + tint(rng);
  } while (color_distance(s.background, color_rgb(s.color)) < 0.3);
  s.seed = rng();
  return s;
}

std::uint64_t pinned_word_list_hash() { return 0xa0df47e82cd07090ULL; }

std::vector<std::string> load_sign_words(const std::filesystem::path& dir) {
  const auto path = dir / "words.txt";
  const std::string content = [&] {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FixtureError("word list missing: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }();
  const std::uint64_t h = fnv1a64(content);
  if (h != pinned_word_list_hash())
    throw FixtureError("word list " + path.string() + " has hash " + hex64(h) + ", expected " +
                       hex64(pinned_word_list_hash()));
  std::vector<std::string> words;
  std::istringstream lines(content);
  for (std::string line; std::getline(lines, line);)
    if (!line.empty()) words.push_back(line);
  return words;
}

std::string task_name(Task t) {
  switch (t) {
    case Task::Classification: return "CLASSIFICATION";
    case Task::Captioning: return "CAPTIONING";
    case Task::VqaGeneral: return "VQA_GENERAL";
    case Task::VqaSpecific: return "VQA_SPECIFIC";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  for (Task t : kTasks)
    if (task_name(t) == s) return t;
  throw std::invalid_argument("unknown task '" + s + "'");
}

std::filesystem::path default_fixture_dir() {
  if (const char* env = std::getenv("DYNVLA_FIXTURES")) return env;
  return std::filesystem::path(DYNVLA_FIXTURE_DIR) / "prompts";
}

std::string fixture_filename(Task task, PromptSource source) {
  static const std::map<Task, std::string> stem = {{Task::Classification, "classification"},
                                                   {Task::Captioning, "captioning"},
                                                   {Task::VqaGeneral, "vqa_general"},
                                                   {Task::VqaSpecific, "vqa_specific"}};
  return std::string(source == PromptSource::Paper ? "paper_" : "toy_") + stem.at(task) + ".txt";
}

std::uint64_t pinned_fixture_hash(Task task, PromptSource source) {
  if (source == PromptSource::Paper) {
    switch (task) {
      case Task::Classification: return 0xff90d42bced80926ULL;
      case Task::Captioning: return 0xe72331a19d5d6242ULL;
      case Task::VqaGeneral: return 0x6db6e859d7d0f904ULL;
      case Task::VqaSpecific: return 0x32cd3a9d13c79ca0ULL;
    }
  }
  switch (task) {
    case Task::Classification: return 0x82e92ca772b4a958ULL;
    case Task::Captioning: return 0x9c32b33b81de1fdeULL;
    case Task::VqaGeneral: return 0xb6215e6b389845e8ULL;
    case Task::VqaSpecific: return 0x4931206a7530e2caULL;
  }
  return 0;
}

PromptSet load_prompt_fixtures(Task task, PromptSource source, const std::filesystem::path& dir) {
  const auto path = dir / fixture_filename(task, source);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FixtureError("prompt fixture missing: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string content = buf.str();
  PromptSet set;
  set.task = task;
  set.source = source;
  set.content_hash = fnv1a64(content);
  if (set.content_hash != pinned_fixture_hash(task, source))
    throw FixtureError("prompt fixture " + path.string() + " has hash " + hex64(set.content_hash) + ", expected " +
                       hex64(pinned_fixture_hash(task, source)));
  std::istringstream lines(content);
  for (std::string line; std::getline(lines, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    set.prompts.push_back(line);
  }
  if (set.prompts.empty()) throw FixtureError("prompt fixture " + path.string() + " is empty");
  return set;
}

std::string answer_for(const CorpusRecord& record, Task task, const std::string& prompt) {
  switch (task) {
    case Task::Classification: return record.label;
    case Task::Captioning: return record.caption;
    case Task::VqaGeneral:
      if (prompt.find("color") != std::string::npos) return record.color;
      break;
    case Task::VqaSpecific: {
      const std::string lead = "is it ";
      if (prompt.rfind(lead, 0) == 0 && prompt.size() > lead.size() + 1 && prompt.back() == '?') {
        std::string subject = prompt.substr(lead.size(), prompt.size() - lead.size() - 1);
        if (subject.rfind("a ", 0) == 0) return subject.substr(2) == record.label ? "yes" : "no";
        return subject == record.color ? "yes" : "no";
      }
      break;
    }
  }
  throw std::invalid_argument("no toy answer for " + task_name(task) + " prompt '" + prompt + "'");
}

std::vector<PromptAssignment> assign_prompts(const Corpus& corpus, const std::vector<int>& ids,
                                             const std::vector<PromptSet>& prompt_sets, std::uint64_t seed) {
  std::vector<PromptAssignment> out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(corpus.records.size()))
      throw std::out_of_range("record id " + std::to_string(id) + " not in corpus");
    PromptAssignment a;
    for (const PromptSet& set : prompt_sets) {
      if (set.prompts.empty()) throw std::invalid_argument("prompt set for " + task_name(set.task) + " is empty");
      std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(set.task)));
      std::uniform_int_distribution<size_t> pick(0, set.prompts.size() - 1);
      a[set.task] = set.prompts[pick(rng)];
    }
    out.push_back(std::move(a));
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  nlohmann::json index;
  index["seed"] = corpus.seed;
  index["train"] = corpus.train;
  index["heldout"] = corpus.heldout;
  auto& recs = index["records"] = nlohmann::json::array();
  for (const auto& r : corpus.records) {
    char name[32];
    std::snprintf(name, sizeof name, "%06d.png", r.id);
    write_png(dir / "images" / name, r.image);
    const auto& s = r.scene;
    recs.push_back({{"id", r.id},
                    {"image", std::string("images/") + name},
                    {"caption", r.caption},
                    {"label", r.label},
                    {"color", r.color},
                    {"scene",
                     {{"shape", shape_name(s.shape)},
                      {"color", s.color},
                      {"center_x", s.center_x},
                      {"center_y", s.center_y},
                      {"size", s.size},
                      {"background", s.background},
                      {"seed", s.seed}}}});
  }
  std::ofstream(dir / "index.json") << index.dump(1) << "\n";
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("corpus index missing in " + dir.string());
  const auto index = nlohmann::json::parse(in);
  Corpus c;
  c.seed = index.at("seed").get<std::uint64_t>();
  c.train = index.at("train").get<std::vector<int>>();
  c.heldout = index.at("heldout").get<std::vector<int>>();
  for (const auto& j : index.at("records")) {
    CorpusRecord r;
    r.id = j.at("id").get<int>();
    r.caption = j.at("caption").get<std::string>();
    r.label = j.at("label").get<std::string>();
    r.color = j.at("color").get<std::string>();
    const auto& s = j.at("scene");
    const std::string shape = s.at("shape").get<std::string>();
    for (Shape sh : kShapes)
      if (shape_name(sh) == shape) r.scene.shape = sh;
    r.scene.color = s.at("color").get<int>();
    r.scene.center_x = s.at("center_x").get<int>();
    r.scene.center_y = s.at("center_y").get<int>();
    r.scene.size = s.at("size").get<int>();
    r.scene.background = s.at("background").get<std::array<float, 3>>();
    r.scene.seed = s.at("seed").get<std::uint64_t>();
    r.image = read_png(dir / j.at("image").get<std::string>());
    c.records.push_back(std::move(r));
  }
  return c;
}

}  // namespace dynvla
