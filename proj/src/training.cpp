// SPDX-License-Identifier: Apache-2.0
#include "dynvla/training.hpp"

#include "dynvla/util.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace dynvla {

TrainingQualityError::TrainingQualityError(std::string model_id, double accuracy, double required)
    : std::runtime_error("model '" + model_id + "' reached held-out accuracy " + std::to_string(accuracy) +
                         " (< " + std::to_string(required) + ")"),
      model_id_(std::move(model_id)),
      accuracy_(accuracy) {}

std::vector<PromptSet> toy_prompt_sets() {
  std::vector<PromptSet> sets;
  for (Task t : kTasks) sets.push_back(load_prompt_fixtures(t, PromptSource::Toy));
  return sets;
}

double heldout_accuracy(const ModelBundle& model, const Corpus& corpus, const std::vector<PromptSet>& prompt_sets,
                        std::uint64_t seed) {
  if (corpus.heldout.empty()) throw std::invalid_argument("corpus has no held-out records");
  ModelRuntime<float> rt(model);
  const Tokenizer tok = model.tokenizer();
  const auto assignment = assign_prompts(corpus, corpus.heldout, prompt_sets, seed);
  int hits = 0;
  int total = 0;
  for (size_t i = 0; i < corpus.heldout.size(); ++i) {
    const CorpusRecord& rec = corpus.records[static_cast<size_t>(corpus.heldout[i])];
    for (const auto& [task, prompt] : assignment[i]) {
      const std::string expected = answer_for(rec, task, prompt);
      const TokenSequence out = generate_with(rt, tok, rec.image, tok.tokenize(prompt), 24);
      hits += normalize_whitespace(out.text) == expected ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(hits) / total;
}

namespace {

struct Sample {
  int record;  // -1 for a sign
  int sign = -1;
  std::vector<int> prompt;
  std::vector<int> target;
};

struct Adam {
  std::vector<Matrix<float>> m, v;
  int step = 0;
  void init(const std::vector<Matrix<float>>& values) {
    for (const auto& p : values) {
      m.push_back(Matrix<float>::Zero(p.rows(), p.cols()));
      v.push_back(Matrix<float>::Zero(p.rows(), p.cols()));
    }
  }
  void apply(std::vector<Matrix<float>>& values, const std::vector<Matrix<float>>& grads, const std::vector<bool>& mask,
             float lr) {
    constexpr float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    ++step;
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(step));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(step));
    for (size_t i = 0; i < values.size(); ++i) {
      if (!mask[i]) continue;
      m[i] = b1 * m[i] + (1 - b1) * grads[i];
      v[i] = b2 * v[i] + (1 - b2) * grads[i].cwiseProduct(grads[i]);
      values[i].array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
  }
};

}  // namespace

ModelBundle pretrain_vision(const ModelSpec& spec, const VisionPretrainOptions& options) {
  if (options.epochs < 1 || options.images_per_epoch < 1)
    throw std::invalid_argument("vision pretraining needs at least one epoch and one image");
  ModelBundle bundle = init_model(spec);
  ModelRuntime<float> rt(bundle);
  rt.set_trainable([](const std::string& name) { return name.rfind("vision.", 0) == 0; });
  Adam adam;
  adam.init(rt.values());

  constexpr int kShapeClasses = static_cast<int>(kShapes.size());
  constexpr int kClasses = kShapeClasses + static_cast<int>(kColorNames.size());
  std::mt19937_64 init_rng(derive_seed(options.seed, 0xbeefULL));
  std::normal_distribution<float> normal(0.0f, 0.02f);
  std::vector<Matrix<float>> head = {Matrix<float>(spec.d_vision, kClasses), Matrix<float>::Zero(1, kClasses)};
  for (Eigen::Index i = 0; i < head[0].size(); ++i) head[0].data()[i] = normal(init_rng);
  std::vector<Matrix<float>> head_grads = {Matrix<float>::Zero(spec.d_vision, kClasses),
                                           Matrix<float>::Zero(1, kClasses)};
  Adam head_adam;
  head_adam.init(head);
  const std::vector<bool> head_mask = {true, true};

  const int tokens = spec.visual_tokens();
  const Matrix<float> pool = Matrix<float>::Constant(1, tokens, 1.0f / static_cast<float>(tokens));
  const auto per_epoch = static_cast<size_t>(options.images_per_epoch);
  const int batches =
      static_cast<int>((per_epoch + static_cast<size_t>(options.batch_size) - 1) / static_cast<size_t>(options.batch_size));
  const int total_steps = options.epochs * batches;
  int step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const Corpus corpus = generate_corpus(options.images_per_epoch,
                                          derive_seed(options.seed, 0x7e57ULL, static_cast<std::uint64_t>(epoch)),
                                          spec.image_side);
    std::vector<int> order(per_epoch);
    for (size_t i = 0; i < per_epoch; ++i) order[i] = static_cast<int>(i);
    double epoch_loss = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(options.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(options.batch_size));
      rt.zero_grads();
      for (auto& g : head_grads) g.setZero();
      for (size_t s = start; s < stop; ++s) {
        const CorpusRecord& rec = corpus.records[static_cast<size_t>(order[s])];
        Graph<float> g;
        ModelRuntime<float>::Pass pass(rt, g);
        Var pooled = g.matmul(g.leaf(pool), pass.encode(g.leaf(rec.image.to_matrix<float>())));
        Var logits = g.add_row(g.matmul(pooled, g.parameter(&head[0], &head_grads[0])),
                               g.parameter(&head[1], &head_grads[1]));
        const int shape_id[] = {static_cast<int>(rec.scene.shape)};
        const int color_id[] = {rec.scene.color};
        Var loss = g.add(g.cross_entropy(g.slice_cols(logits, 0, kShapeClasses), shape_id),
                         g.cross_entropy(g.slice_cols(logits, kShapeClasses, kClasses - kShapeClasses), color_id));
        g.backward(g.scale(loss, 1.0f / static_cast<float>(stop - start)));
        epoch_loss += g.scalar(loss);
      }
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * step / std::max(1, total_steps)));
      const auto lr = static_cast<float>(options.learning_rate * cosine);
      adam.apply(rt.values(), rt.grads(), rt.trainable(), lr);
      head_adam.apply(head, head_grads, head_mask, lr);
      ++step;
    }
    epoch_loss /= static_cast<double>(order.size());
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);
  }
  rt.store(bundle);
  return bundle;
}

TrainedModel train_toy_model(const ModelSpec& spec, const Corpus& corpus, const TrainOptions& options) {
  if (corpus.train.empty()) throw std::invalid_argument("corpus has no training records");
  if (options.epochs < 1) throw std::invalid_argument("epochs must be at least 1");

  ModelBundle bundle = init_model(spec);
  if (options.sign_fraction < 0 || options.scramble_fraction < 0)
    throw std::invalid_argument("sign and scramble fractions must be non-negative");
  const bool frozen_vision = options.vision_donor != nullptr && options.freeze_vision;
  if (options.vision_donor != nullptr) {
    const ModelSpec& d = options.vision_donor->spec;
    if (d.d_vision != spec.d_vision || d.vision_depth != spec.vision_depth || d.patch != spec.patch ||
        d.image_side != spec.image_side || d.vision_heads != spec.vision_heads || d.mlp_ratio != spec.mlp_ratio)
      throw std::invalid_argument("vision donor '" + d.id + "' has an incompatible encoder for '" + spec.id + "'");
    for (const auto& [name, m] : options.vision_donor->parameters)
      if (name.rfind("vision.", 0) == 0) bundle.parameters.at(name) = m;
  }

  ModelRuntime<float> rt(bundle);
  rt.set_trainable([&](const std::string& name) { return !(frozen_vision && name.rfind("vision.", 0) == 0); });
  Adam adam;
  adam.init(rt.values());

  const Tokenizer tok = bundle.tokenizer();
  const auto prompt_sets = toy_prompt_sets();
  const auto sign_words = options.sign_fraction > 0 ? load_sign_words() : std::vector<std::string>{};

  // frozen encoders are evaluated once per image
  std::vector<Matrix<float>> visual_cache;
  if (frozen_vision) {
    visual_cache.resize(corpus.records.size());
    for (int id : corpus.train) {
      Graph<float> g;
      ModelRuntime<float>::Pass pass(rt, g);
      visual_cache[static_cast<size_t>(id)] =
          g.value(pass.encode(g.leaf(corpus.records[static_cast<size_t>(id)].image.to_matrix<float>())));
    }
  }

  TrainedModel result;
  const size_t scene_samples = corpus.train.size() * prompt_sets.size();
  const auto sign_samples = static_cast<size_t>(std::llround(options.sign_fraction * static_cast<double>(scene_samples)));
  const auto scrambled =
      static_cast<size_t>(std::llround(options.scramble_fraction * static_cast<double>(scene_samples)));
  // signs and scrambled scenes share one pool of (image, answer) pairs
  const size_t pool_size = sign_samples + scrambled;
  const size_t per_epoch = scene_samples + pool_size;
  const int total_steps =
      options.epochs * static_cast<int>((per_epoch + static_cast<size_t>(options.batch_size) - 1) /
                                        static_cast<size_t>(options.batch_size));
  int step = 0;
  std::vector<SignSpec> sign_pool;
  std::vector<ImageTensor> sign_images;
  std::vector<Matrix<float>> sign_cache;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(options.train_seed, static_cast<std::uint64_t>(epoch)));
    std::vector<Sample> samples;
    samples.reserve(per_epoch);
    for (int id : corpus.train) {
      const CorpusRecord& rec = corpus.records[static_cast<size_t>(id)];
      for (const PromptSet& set : prompt_sets) {
        const std::string& prompt =
            set.prompts[std::uniform_int_distribution<size_t>(0, set.prompts.size() - 1)(rng)];
        samples.push_back(
            {id, -1, prompt_ids(tok.tokenize(prompt)), tok.tokenize(answer_for(rec, set.task, prompt), true).ids});
      }
    }
    // a frozen encoder reuses one cached sign pool; otherwise signs are fresh every epoch
    if (!frozen_vision || epoch == 0) {
      std::mt19937_64 sign_rng(derive_seed(options.train_seed, 0x5167ULL, frozen_vision ? 0U : static_cast<std::uint64_t>(epoch)));
      sign_pool.clear();
      sign_images.clear();
      sign_cache.clear();
      for (size_t k = 0; k < sign_samples; ++k) {
        sign_pool.push_back(sample_sign(sign_rng, sign_words, spec.image_side));
        sign_images.push_back(render_sign(sign_pool.back(), spec.image_side));
      }
      std::uniform_int_distribution<size_t> scene(0, corpus.train.size() - 1);
      for (size_t k = 0; k < scrambled; ++k) {
        const CorpusRecord& rec = corpus.records[static_cast<size_t>(corpus.train[scene(sign_rng)])];
        SignSpec answer;
        answer.word = options.scramble_answer;
        sign_pool.push_back(answer);
        sign_images.push_back(scramble_patches(rec.image, spec.patch, sign_rng));
      }
      if (frozen_vision)
        for (const ImageTensor& img : sign_images) {
          Graph<float> g;
          ModelRuntime<float>::Pass pass(rt, g);
          sign_cache.push_back(g.value(pass.encode(g.leaf(img.to_matrix<float>()))));
        }
    }
    for (size_t k = 0; k < pool_size; ++k) {
      const PromptSet& set = prompt_sets[std::uniform_int_distribution<size_t>(0, prompt_sets.size() - 1)(rng)];
      const std::string& prompt = set.prompts[std::uniform_int_distribution<size_t>(0, set.prompts.size() - 1)(rng)];
      samples.push_back(
          {-1, static_cast<int>(k), prompt_ids(tok.tokenize(prompt)), tok.tokenize(sign_pool[k].word, true).ids});
    }
    std::shuffle(samples.begin(), samples.end(), rng);

    double epoch_loss = 0;
    for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(options.batch_size)) {
      const size_t stop = std::min(samples.size(), start + static_cast<size_t>(options.batch_size));
      rt.zero_grads();
      for (size_t s = start; s < stop; ++s) {
        const Sample& smp = samples[s];
        Graph<float> g;
        ModelRuntime<float>::Pass pass(rt, g);
        Var visual;
        if (smp.record < 0 && frozen_vision)
          visual = g.leaf(sign_cache[static_cast<size_t>(smp.sign)]);
        else if (smp.record < 0)
          visual = pass.encode(g.leaf(sign_images[static_cast<size_t>(smp.sign)].to_matrix<float>()));
        else if (frozen_vision)
          visual = g.leaf(visual_cache[static_cast<size_t>(smp.record)]);
        else
          visual = pass.encode(g.leaf(corpus.records[static_cast<size_t>(smp.record)].image.to_matrix<float>()));
        Var prefix = pass.connect(visual, nullptr);
        std::vector<int> text = smp.prompt;
        text.insert(text.end(), smp.target.begin(), smp.target.end() - 1);
        Var hidden = pass.lm_hidden(prefix, text, nullptr);
        const int first = static_cast<int>(g.value(prefix).rows() + smp.prompt.size()) - 1;
        Var loss = g.cross_entropy(pass.logits(g.slice_rows(hidden, first, static_cast<int>(smp.target.size()))),
                                   smp.target);
        Var scaled = g.scale(loss, 1.0f / static_cast<float>(stop - start));
        g.backward(scaled);
        epoch_loss += g.scalar(loss);
      }
      double norm2 = 0;
      for (size_t i = 0; i < rt.grads().size(); ++i)
        if (rt.trainable()[i]) norm2 += rt.grads()[i].squaredNorm();
      const double norm = std::sqrt(norm2);
      if (norm > options.grad_clip)
        for (size_t i = 0; i < rt.grads().size(); ++i)
          if (rt.trainable()[i]) rt.grads()[i] *= static_cast<float>(options.grad_clip / norm);
      const double warm = std::min(1.0, (step + 1.0) / std::max(1, options.warmup_steps));
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * step / std::max(1, total_steps)));
      adam.apply(rt.values(), rt.grads(), rt.trainable(), static_cast<float>(options.learning_rate * warm * cosine));
      ++step;
    }
    epoch_loss /= static_cast<double>(samples.size());
    result.epoch_loss.push_back(epoch_loss);
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);
  }

  rt.store(bundle);
  bundle.frozen = true;
  result.heldout_accuracy = heldout_accuracy(bundle, corpus, prompt_sets);
  result.bundle = std::move(bundle);
  if (result.heldout_accuracy < options.min_accuracy)
    throw TrainingQualityError(spec.id, result.heldout_accuracy, options.min_accuracy);
  return result;
}

}  // namespace dynvla
