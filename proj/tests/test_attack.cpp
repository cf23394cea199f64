// SPDX-License-Identifier: Apache-2.0
#include "dynvla/attack.hpp"
#include "dynvla/corpus.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

using namespace dynvla;

namespace {

ImageTensor random_image(std::uint64_t seed, int h = 32, int w = 32, int c = 3, float lo = 0, float hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  ImageTensor img(h, w, c);
  for (float& v : img.data) v = u(rng);
  return img;
}

double dot(const ImageTensor& a, const ImageTensor& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += double(a.data[i]) * b.data[i];
  return s;
}

ModelBundle frozen_model(Family f, std::uint64_t seed = 1) {
  ModelSpec spec;
  spec.id = f == Family::CrossAttn ? "c" : "m";
  spec.family = f;
  if (f == Family::CrossAttn) spec.query_tokens = 8;
  spec.init_seed = seed;
  ModelBundle b = init_model(spec);
  b.frozen = true;
  return b;
}

}  // namespace

TEST_SUITE("attack") {
  TEST_CASE("defaults are 16/255, 1/255 and 300 steps") {
    AttackConfig cfg;
    CHECK(cfg.epsilon == 16.0 / 255.0);
    CHECK(cfg.alpha == 1.0 / 255.0);
    CHECK(cfg.steps == 300);
    CHECK(cfg.method.dynvla == false);
    CHECK_NOTHROW(cfg.validate());
  }

  TEST_CASE("method labels") {
    CHECK(method_label(parse_method("PGD")) == "PGD");
    CHECK(method_label(parse_method("SIT+DYNVLA+MI")) == "DYNVLA+MI+SIT");
    CHECK(parse_method("DYNVLA").dynvla);
    CHECK_THROWS_AS(parse_method("PGD+MI"), std::invalid_argument);
    CHECK_THROWS_AS(parse_method("FGSM"), std::invalid_argument);
    CHECK_THROWS_AS(parse_method(""), std::invalid_argument);
  }

  TEST_CASE("config validation") {
    AttackConfig cfg;
    cfg.alpha = 2 * cfg.epsilon;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = AttackConfig{};
    cfg.kernel_size = {4, 4};
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }

  TEST_CASE("float budget never exceeds epsilon") {
    for (double e : {16.0 / 255, 8.0 / 255, 1.0 / 3, 0.1, 1.0}) {
      const float b = float_budget(e);
      CHECK(double(b) <= e);
      CHECK(double(std::nextafter(b, 2.0f)) > e);
    }
  }

  TEST_CASE("uniform init statistics") {
    std::mt19937_64 rng(1);
    const double eps = 16.0 / 255;
    const ImageTensor d = pgd_init(rng, eps, ImageTensor(100, 100, 10));
    double mn = 1, mx = -1, mean = 0;
    for (float v : d.data) {
      mn = std::min(mn, double(v));
      mx = std::max(mx, double(v));
      mean += v;
    }
    mean /= double(d.size());
    CHECK(mn >= -eps);
    CHECK(mx <= eps);
    CHECK(mx > 0.99 * eps);
    CHECK(mn < -0.99 * eps);
    // sd of the mean of U(-e, e) over 1e5 draws is e / sqrt(3e5)
    CHECK(std::abs(mean) < 3 * eps / std::sqrt(3e5));
    std::mt19937_64 a(4), b(4);
    CHECK(pgd_init(a, eps, ImageTensor(8, 8, 3)) == pgd_init(b, eps, ImageTensor(8, 8, 3)));
  }

  TEST_CASE("zero epsilon init is all zeros") {
    std::mt19937_64 rng(1);
    for (float v : pgd_init(rng, 0.0, ImageTensor(4, 4, 3)).data) CHECK(v == 0.0f);
  }

  TEST_CASE("descent step against a negative gradient") {
    const ImageTensor img(1, 1, 1, 0.5f);
    ImageTensor grad(1, 1, 1, -2.3f);
    const ImageTensor d = pgd_step(ImageTensor(1, 1, 1), grad, 1.0 / 255, 16.0 / 255, img);
    CHECK(d.data[0] == float(1.0 / 255));
  }

  TEST_CASE("zero gradient leaves delta unchanged") {
    std::mt19937_64 rng(2);
    const ImageTensor img = random_image(3, 4, 4, 3, 0.2f, 0.8f);
    const ImageTensor d0 = pgd_init(rng, 0.05, img);
    CHECK(pgd_step(d0, ImageTensor(4, 4, 3), 0.01, 0.05, img) == d0);
  }

  TEST_CASE("projection keeps delta at the lower bound") {
    const double eps = 16.0 / 255;
    const ImageTensor img(1, 1, 1, 0.5f);
    ImageTensor d(1, 1, 1, -float_budget(eps));
    ImageTensor grad(1, 1, 1, 5.0f);
    CHECK(pgd_step(d, grad, 4.0 / 255, eps, img).data[0] == -float_budget(eps));
  }

  TEST_CASE("pixel range is enforced") {
    const ImageTensor img(1, 2, 1, 0.0f);
    ImageTensor grad(1, 2, 1, 1.0f);  // descent pushes delta down
    const ImageTensor d = pgd_step(ImageTensor(1, 2, 1), grad, 0.01, 0.05, img);
    for (size_t i = 0; i < d.size(); ++i) CHECK(img.data[i] + d.data[i] >= 0.0f);
  }

  TEST_CASE("non-finite gradients raise a numerical error") {
    ImageTensor grad(1, 1, 1, std::nanf(""));
    CHECK_THROWS_AS(pgd_step(ImageTensor(1, 1, 1), grad, 0.01, 0.05, ImageTensor(1, 1, 1, 0.5f), 7), NumericalError);
  }

  TEST_CASE("DI sides and identity") {
    CHECK(di_sides(32, 1.1) == std::vector<int>{32, 33, 34, 35});
    CHECK(di_sides(32, 1.0) == std::vector<int>{32});
    std::mt19937_64 rng(1);
    const ImageTensor img = random_image(7);
    CHECK(di_transform(img, rng, 0.0, 1.1) == img);
    for (int i = 0; i < 20; ++i) CHECK(di_transform(img, rng, 0.7, 1.1).same_shape(img));
  }

  TEST_CASE("DI resize sides are uniform") {
    std::mt19937_64 rng(8);
    const ImageTensor shape(32, 32, 3);
    std::map<int, int> hist;
    const int draws = 1000;
    for (int i = 0; i < draws; ++i) {
      DiSample s;
      di_transform_map(shape, rng, 1.0, 1.1, &s);
      CHECK(s.applied);
      ++hist[s.resized_side];
      CHECK(s.padded_side == 35);
      CHECK(s.top + s.resized_side <= s.padded_side);
      CHECK(s.left + s.resized_side <= s.padded_side);
    }
    CHECK(hist.size() == 4);
    double chi2 = 0;
    for (auto [side, n] : hist) {
      CHECK(side >= 32);
      CHECK(side <= 35);
      chi2 += (n - 250.0) * (n - 250.0) / 250.0;
    }
    // chi-square with 3 dof, 0.999 quantile is 16.27
    CHECK(chi2 < 16.27);
  }

  TEST_CASE("transform maps have consistent adjoints") {
    std::mt19937_64 rng(21);
    const ImageTensor x = random_image(1), y = random_image(2, 32, 32, 3, -1, 1);
    for (int i = 0; i < 5; ++i) {
      const PixelTransform di = di_transform_map(x, rng, 1.0, 1.1);
      CHECK(dot(di.apply(x), y) == doctest::Approx(dot(x, di.adjoint(x, y))).epsilon(1e-5));
      for (int op = 0; op < kTileOpCount; ++op) {
        PixelTransform sit = sit_transform_map(x, rng, 4, nullptr, static_cast<TileOp>(op));
        sit.clip01 = false;
        // the affine offset does not enter the adjoint, so compare the linear parts
        ImageTensor ax = sit.apply(x);
        for (size_t k = 0; k < sit.offset.size(); ++k) ax.data[k] -= sit.offset[k];
        CHECK(dot(ax, y) == doctest::Approx(dot(x, sit.adjoint(x, y))).epsilon(1e-5));
      }
    }
  }

  TEST_CASE("clip mask zeroes gradients outside the pixel range") {
    std::mt19937_64 rng(3);
    PixelTransform t;
    t.height = 1;
    t.width = 2;
    t.channels = 1;
    t.identity = false;
    t.clip01 = true;
    t.entries = {{0, 0, 2.0f}, {1, 1, 2.0f}};
    ImageTensor x(1, 2, 1);
    x.data = {0.25f, 0.75f};
    ImageTensor g(1, 2, 1, 1.0f);
    const ImageTensor back = t.adjoint(x, g);
    CHECK(back.data[0] == 2.0f);
    CHECK(back.data[1] == 0.0f);
  }

  TEST_CASE("TI smoothing") {
    const ImageTensor g = random_image(5, 12, 12, 2, -1, 1);
    CHECK(ti_smooth(g, 1) == g);
    double total = 0;
    for (double v : ti_kernel(5)) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    const ImageTensor flat(12, 12, 2, 0.3f);
    const ImageTensor sf = ti_smooth(flat, 5);
    for (int y = 2; y < 10; ++y)
      for (int x = 2; x < 10; ++x) CHECK(std::abs(sf.at(y, x, 1) - 0.3f) < 1e-6);

    // brute force with zero padding, Gaussian sigma = 5 / 3
    const double s2 = 2 * (5.0 / 3) * (5.0 / 3);
    double norm = 0;
    for (int a = -2; a <= 2; ++a)
      for (int b = -2; b <= 2; ++b) norm += std::exp(-(a * a + b * b) / s2);
    const ImageTensor out = ti_smooth(g, 5);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x)
        for (int c = 0; c < 2; ++c) {
          double acc = 0;
          for (int a = -2; a <= 2; ++a)
            for (int b = -2; b <= 2; ++b) {
              const int yy = y + a, xx = x + b;
              if (yy >= 0 && yy < 12 && xx >= 0 && xx < 12) acc += std::exp(-(a * a + b * b) / s2) / norm * g.at(yy, xx, c);
            }
          CHECK(std::abs(out.at(y, x, c) - acc) < 1e-6);
        }
  }

  TEST_CASE("momentum update") {
    const ImageTensor g = random_image(6, 4, 4, 3, -1, 1);
    double l1 = 0;
    for (float v : g.data) l1 += std::abs(v);
    const MomentumStep a = mi_update(ImageTensor(4, 4, 3), g, 0.0);
    double norm = 0;
    for (size_t i = 0; i < g.size(); ++i) {
      CHECK(a.direction.data[i] == (g.data[i] > 0 ? 1.0f : -1.0f));
      norm += std::abs(a.momentum.data[i]);
    }
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-6));
    const MomentumStep b = mi_update(a.momentum, g, 1.0);
    for (size_t i = 0; i < g.size(); ++i) CHECK(b.momentum.data[i] == doctest::Approx(2 * g.data[i] / l1).epsilon(1e-5));
  }

  TEST_CASE("SIT contracts") {
    const ImageTensor img = random_image(9);
    std::mt19937_64 rng(1);
    CHECK(sit_transform(img, rng, 1, TileOp::Identity) == img);
    for (int i = 0; i < 20; ++i) {
      const ImageTensor out = sit_transform(img, rng, 4);
      CHECK(out.same_shape(img));
      for (float v : out.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
    std::mt19937_64 a(3), b(3);
    SitAssignment sa, sb;
    sit_transform_map(img, a, 4, &sa);
    sit_transform_map(img, b, 4, &sb);
    CHECK(sa.ops == sb.ops);
    CHECK(sa.ops.size() == 16);
  }

  TEST_CASE("unfrozen surrogates are rejected") {
    ModelBundle b = frozen_model(Family::CrossAttn);
    b.frozen = false;
    CHECK_THROWS(attack(b, random_image(1), "what is this?", "unknown", AttackConfig{}));
  }

  TEST_CASE("zero amplitude reproduces PGD traces bit for bit") {
    for (Family f : {Family::CrossAttn, Family::MlpProj}) {
      const ModelBundle b = frozen_model(f);
      for (std::uint64_t seed : {1, 2}) {
        AttackConfig pgd;
        pgd.steps = 12;
        pgd.seed = seed;
        AttackConfig dyn = pgd;
        dyn.method = parse_method("DYNVLA");
        dyn.kernel_amplitude = 0;
        const ImageTensor img = random_image(seed + 10);
        const AdvExample a = attack(b, img, "what is this?", "unknown", pgd);
        const AdvExample d = attack(b, img, "what is this?", "unknown", dyn);
        CHECK(a.loss_trace == d.loss_trace);
        CHECK(a.adversarial_image == d.adversarial_image);
        dyn.kernel_amplitude = 1;
        CHECK(attack(b, img, "what is this?", "unknown", dyn).loss_trace != a.loss_trace);
      }
    }
  }

  TEST_CASE("every method keeps the invariants") {
    const ModelBundle b = frozen_model(Family::CrossAttn);
    const ImageTensor img = random_image(4);
    for (const char* m : {"PGD", "DYNVLA", "MI", "DI", "TI", "SIT", "DYNVLA+MI+DI+TI+SIT"}) {
      AttackConfig cfg;
      cfg.method = parse_method(m);
      cfg.steps = 6;
      cfg.seed = 5;
      cfg.check_invariants = true;
      cfg.checkpoint_every = 3;
      const AdvExample ex = attack(b, img, "what is this?", "unknown", cfg);
      CHECK(ex.method == m);
      CHECK(ex.loss_trace.size() == 6);
      CHECK(ex.checkpoints.size() == 2);
      const float budget = float_budget(cfg.epsilon);
      for (size_t i = 0; i < img.size(); ++i) {
        CHECK(std::abs(ex.delta.data[i]) <= budget);
        CHECK(ex.adversarial_image.data[i] >= 0.0f);
        CHECK(ex.adversarial_image.data[i] <= 1.0f);
      }
    }
  }

  TEST_CASE("single step and determinism") {
    const ModelBundle b = frozen_model(Family::MlpProj);
    AttackConfig cfg;
    cfg.method = parse_method("DYNVLA+MI");
    cfg.steps = 1;
    cfg.seed = 9;
    const ImageTensor img = random_image(2);
    const AdvExample a = attack(b, img, "what is this?", "unknown", cfg);
    const AdvExample c = attack(b, img, "what is this?", "unknown", cfg);
    CHECK(a.loss_trace.size() == 1);
    CHECK(a.adversarial_image == c.adversarial_image);
    CHECK(a.delta == c.delta);
  }

  TEST_CASE("progress callback fires every 50 iterations") {
    const ModelBundle b = frozen_model(Family::CrossAttn);
    AttackConfig cfg;
    cfg.steps = 120;
    std::vector<int> seen;
    cfg.on_progress = [&](int it, double) { seen.push_back(it); };
    attack(b, random_image(3), "what is this?", "unknown", cfg);
    CHECK(seen == std::vector<int>{50, 100});
  }
}
