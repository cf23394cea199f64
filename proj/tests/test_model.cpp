// SPDX-License-Identifier: Apache-2.0
#include "dynvla/corpus.hpp"
#include "dynvla/model.hpp"
#include "dynvla/tokenizer.hpp"
#include "dynvla/training.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace dynvla;

namespace {

ModelSpec small_spec(Family f, std::uint64_t seed = 1, int d_lm = 32) {
  ModelSpec spec;
  spec.id = f == Family::CrossAttn ? "cross" : "mlp";
  spec.family = f;
  if (f == Family::CrossAttn) spec.query_tokens = 8;
  spec.d_lm = d_lm;
  spec.init_seed = seed;
  return spec;
}

ImageTensor random_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.1f, 0.9f);
  ImageTensor img(32, 32, 3);
  for (float& v : img.data) v = u(rng);
  return img;
}

}  // namespace

TEST_SUITE("tokenizer") {
  TEST_CASE("round trip and reserved ids") {
    Tokenizer tok;
    const TokenSequence t = tok.tokenize("a red circle.", true);
    CHECK(t.ids.back() == Tokenizer::kEos);
    CHECK(tok.detokenize(t.ids) == "a red circle.");
    CHECK(tok.detokenize({Tokenizer::kBos, t.ids[0], Tokenizer::kEos, t.ids[1]}) == "a");
    CHECK_THROWS_AS(tok.tokenize("Unknown"), std::invalid_argument);
    CHECK_FALSE(tok.encodable("x7"));
  }
}

TEST_SUITE("toy_mllm") {
  TEST_CASE("visual token grid and connector rows") {
    const ModelBundle cross = init_model(small_spec(Family::CrossAttn));
    const ModelBundle mlp = init_model(small_spec(Family::MlpProj));
    const VisualTokens v = encode_image(cross, random_image(1));
    CHECK(v.grid_side == 8);
    CHECK(v.embeddings.rows() == 64);
    CHECK(connect(cross, v, std::nullopt).embeddings.rows() == 8);
    CHECK(connect(mlp, encode_image(mlp, random_image(1)), std::nullopt).embeddings.rows() == 64);
    CHECK(injection_site_for(cross.spec) != injection_site_for(mlp.spec));
  }

  TEST_CASE("connector without kernel is deterministic") {
    const ModelBundle cross = init_model(small_spec(Family::CrossAttn));
    const VisualTokens v = encode_image(cross, random_image(2));
    CHECK(connect(cross, v, std::nullopt).embeddings == connect(cross, v, std::nullopt).embeddings);
    const KernelSpec k{3, 3, 3.0, 5, 1.0};
    CHECK(connect(cross, v, k).embeddings != connect(cross, v, std::nullopt).embeddings);
    const ModelBundle mlp = init_model(small_spec(Family::MlpProj));
    const ConnectorOutput deferred = connect(mlp, encode_image(mlp, random_image(2)), k);
    REQUIRE(deferred.deferred_kernel.has_value());
    CHECK(*deferred.deferred_kernel == k);
  }

  TEST_CASE("shape errors") {
    const ModelBundle m = init_model(small_spec(Family::CrossAttn));
    CHECK_THROWS_AS(encode_image(m, ImageTensor(16, 16, 3)), ShapeError);
    ModelSpec bad = small_spec(Family::CrossAttn);
    bad.patch = 5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = small_spec(Family::CrossAttn);
    bad.query_tokens.reset();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }

  TEST_CASE("single-token loss is the negative log-probability") {
    const ModelBundle m = init_model(small_spec(Family::MlpProj));
    const Tokenizer tok = m.tokenizer();
    const ImageTensor img = random_image(3);
    const TokenSequence prompt = tok.tokenize("what is this?");
    const TokenSequence target{{tok.tokenize("r").ids[0]}, "r"};
    // independent softmax over the logits of the last prompt position
    ModelRuntime<double> rt(m);
    Graph<double> g;
    ModelRuntime<double>::Pass pass(rt, g);
    Var prefix = pass.connect(pass.encode(g.leaf(img.to_matrix<double>())), nullptr);
    Var hidden = pass.lm_hidden(prefix, prompt_ids(prompt), nullptr);
    const auto& logits = g.value(pass.logits(g.slice_rows(hidden, static_cast<int>(g.value(hidden).rows()) - 1, 1)));
    double z = 0;
    for (Eigen::Index i = 0; i < logits.cols(); ++i) z += std::exp(logits(0, i));
    const double p = std::exp(logits(0, target.ids[0])) / z;
    CHECK(lm_loss(m, img, prompt, target) == doctest::Approx(-std::log(p)).epsilon(1e-10));
  }

  TEST_CASE("loss with a kernel is bit-identical across calls") {
    for (Family f : {Family::CrossAttn, Family::MlpProj}) {
      const ModelBundle m = init_model(small_spec(f));
      const Tokenizer tok = m.tokenizer();
      const KernelSpec k{2, 6, 4.0, 3, 1.0};
      const ImageTensor img = random_image(4);
      const double a = lm_loss(m, img, tok.tokenize("what is this?"), tok.tokenize("unknown", true), k);
      const double b = lm_loss(m, img, tok.tokenize("what is this?"), tok.tokenize("unknown", true), k);
      CHECK(a == b);
      CHECK(a != lm_loss(m, img, tok.tokenize("what is this?"), tok.tokenize("unknown", true)));
    }
  }

  TEST_CASE("pixel gradients match central differences on a 16-pixel patch") {
    for (Family f : {Family::CrossAttn, Family::MlpProj}) {
      const ModelBundle m = init_model(small_spec(f, 3));
      ModelRuntime<double> rt(m);
      const Tokenizer tok = m.tokenizer();
      const auto prompt = prompt_ids(tok.tokenize("what is this?"));
      const auto target = tok.tokenize("unknown", true).ids;
      const KernelGrid k = build_kernel({4, 4, 3.0, 5, 1.0}, 8);
      for (const KernelGrid* kernel : {static_cast<const KernelGrid*>(nullptr), &k}) {
        Matrix<double> img = random_image(5).to_matrix<double>();
        const auto lg = loss_and_pixel_grad(rt, img, prompt, target, kernel);
        const double h = 1e-3;
        // patch rows 8..11, columns 8..11 of the red channel
        for (int y = 8; y < 12; ++y)
          for (int x = 8; x < 12; ++x) {
            const int col = x * 3;
            const double keep = img(y, col);
            img(y, col) = keep + h;
            const double up = loss_and_pixel_grad(rt, img, prompt, target, kernel, false).loss;
            img(y, col) = keep - h;
            const double down = loss_and_pixel_grad(rt, img, prompt, target, kernel, false).loss;
            img(y, col) = keep;
            const double fd = (up - down) / (2 * h);
            const double an = lg.pixel_grad(y, col);
            CHECK(std::abs(fd - an) <= 0.02 * std::max(std::abs(fd), 1e-6) + 1e-9);
          }
      }
    }
  }

  TEST_CASE("encoder input gradient matches central differences") {
    const ModelBundle m = init_model(small_spec(Family::CrossAttn, 4));
    ModelRuntime<double> rt(m);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0, 1);
    Matrix<double> w(m.spec.d_vision, 1);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
    auto value = [&](const Matrix<double>& img, Matrix<double>* grad) {
      Graph<double> g;
      ModelRuntime<double>::Pass pass(rt, g);
      Var in = g.leaf(img, grad != nullptr);
      Var s = g.sum(g.matmul(pass.encode(in), g.leaf(w)));
      if (grad != nullptr) {
        g.backward(s);
        *grad = g.grad(in);
      }
      return g.scalar(s);
    };
    Matrix<double> img = random_image(6).to_matrix<double>();
    Matrix<double> grad;
    value(img, &grad);
    const double h = 1e-3;
    for (int i = 0; i < 12; ++i) {
      const int y = (7 * i) % 32, c = (13 * i + 5) % 96;
      const double keep = img(y, c);
      img(y, c) = keep + h;
      const double up = value(img, nullptr);
      img(y, c) = keep - h;
      const double down = value(img, nullptr);
      img(y, c) = keep;
      const double fd = (up - down) / (2 * h);
      CHECK(std::abs(fd - grad(y, c)) <= 1e-3 * std::max(std::abs(fd), 1e-3));
    }
  }

  TEST_CASE("greedy decoding boundaries") {
    const ModelBundle m = init_model(small_spec(Family::CrossAttn));
    const Tokenizer tok = m.tokenizer();
    const ImageTensor img = random_image(7);
    CHECK_THROWS_AS(generate(m, img, tok.tokenize("what is this?"), 0), std::invalid_argument);
    CHECK(generate(m, img, tok.tokenize("what is this?"), 1).ids.size() <= 1);
    CHECK(generate(m, img, tok.tokenize("what is this?"), 10).ids == generate(m, img, tok.tokenize("what is this?"), 10).ids);
  }
}

TEST_SUITE("training") {
  TEST_CASE("training is seed-deterministic") {
    const Corpus corpus = generate_corpus(60, 3);
    TrainOptions opts;
    opts.epochs = 1;
    opts.min_accuracy = 0;
    opts.sign_fraction = 0.25;
    const TrainedModel a = train_toy_model(small_spec(Family::MlpProj), corpus, opts);
    const TrainedModel b = train_toy_model(small_spec(Family::MlpProj), corpus, opts);
    CHECK(a.bundle.frozen);
    CHECK(a.bundle.parameters == b.bundle.parameters);
    const TrainedModel c = train_toy_model(small_spec(Family::MlpProj, 2), corpus, opts);
    CHECK(a.bundle.parameters != c.bundle.parameters);
  }

  TEST_CASE("a frozen donor encoder is copied unchanged") {
    const Corpus corpus = generate_corpus(60, 3);
    ModelBundle donor = init_model(small_spec(Family::CrossAttn, 9));
    TrainOptions opts;
    opts.epochs = 1;
    opts.min_accuracy = 0;
    opts.vision_donor = &donor;
    const TrainedModel m = train_toy_model(small_spec(Family::MlpProj, 5), corpus, opts);
    int shared = 0;
    for (const auto& [name, value] : donor.parameters)
      if (name.rfind("vision.", 0) == 0) {
        ++shared;
        CHECK(m.bundle.parameters.at(name) == value);
      }
    CHECK(shared > 0);
  }

  TEST_CASE("scrambled scenes teach the scramble answer") {
    const Corpus corpus = generate_corpus(60, 3);
    TrainOptions opts;
    opts.epochs = 1;
    opts.min_accuracy = 0;
    opts.scramble_fraction = -0.1;
    CHECK_THROWS_AS(train_toy_model(small_spec(Family::MlpProj), corpus, opts), std::invalid_argument);
    opts.scramble_fraction = 0.2;
    const TrainedModel a = train_toy_model(small_spec(Family::MlpProj), corpus, opts);
    opts.scramble_fraction = 0;
    CHECK(a.bundle.parameters != train_toy_model(small_spec(Family::MlpProj), corpus, opts).bundle.parameters);
  }

  TEST_CASE("the accuracy bar names the model") {
    const Corpus corpus = generate_corpus(60, 3);
    TrainOptions opts;
    opts.epochs = 1;
    opts.min_accuracy = 1.01;
    try {
      train_toy_model(small_spec(Family::CrossAttn), corpus, opts);
      FAIL("expected a quality error");
    } catch (const TrainingQualityError& e) {
      CHECK(e.model_id() == "cross");
    }
  }
}
