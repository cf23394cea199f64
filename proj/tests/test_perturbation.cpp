// SPDX-License-Identifier: Apache-2.0
#include "dynvla/model.hpp"
#include "dynvla/perturbation.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

using namespace dynvla;

namespace {

// Scalar evaluation of the clipped Gaussian, written without the library's loops.
double gaussian_oracle(const KernelSpec& s, int x, int y) {
  const int h = s.support / 2;
  if (std::abs(x - s.mu1) > h || std::abs(y - s.mu2) > h) return 0.0;
  const double pi = 3.14159265358979323846;
  const double r2 = double(x - s.mu1) * (x - s.mu1) + double(y - s.mu2) * (y - s.mu2);
  return s.amplitude * std::exp(-r2 / (2 * s.sigma * s.sigma)) / (2 * pi * s.sigma * s.sigma);
}

}  // namespace

TEST_SUITE("perturbation") {
  TEST_CASE("kernel center value for unit sigma") {
    const KernelGrid k = build_kernel({4, 4, 1.0, 3, 1.0}, 8);
    CHECK(std::abs(k.at(4, 4) - 0.15915494309189535) < 1e-12);
  }

  TEST_CASE("support 1 leaves exactly one cell") {
    const KernelGrid k = build_kernel({2, 5, 3.0, 1, 1.0}, 8);
    int nonzero = 0;
    for (double v : k.values) nonzero += v != 0.0;
    CHECK(nonzero == 1);
    CHECK(k.at(2, 5) > 0);
  }

  TEST_CASE("sigma 3, m 5, centered table") {
    const KernelSpec s{4, 4, 3.0, 5, 1.0};
    const KernelGrid k = build_kernel(s, 8);
    for (int x = 0; x < 8; ++x)
      for (int y = 0; y < 8; ++y) CHECK(std::abs(k.at(x, y) - gaussian_oracle(s, x, y)) < 1e-12);
    // corner of the window: exp(-8/18) / (18 pi)
    CHECK(std::abs(k.at(2, 2) - std::exp(-8.0 / 18.0) / (18.0 * 3.14159265358979323846)) < 1e-12);
  }

  TEST_CASE("edge truncation clips the window instead of shifting it") {
    const KernelGrid k = build_kernel({0, 0, 1.0, 5, 1.0}, 8);
    int nonzero = 0;
    for (int x = 0; x < 8; ++x)
      for (int y = 0; y < 8; ++y)
        if (k.at(x, y) != 0.0) {
          ++nonzero;
          CHECK(x <= 2);
          CHECK(y <= 2);
        }
    CHECK(nonzero == 9);
  }

  TEST_CASE("random specs agree with the scalar formula") {
    std::mt19937_64 rng(17);
    for (int i = 0; i < 200; ++i) {
      KernelSpec s = sample_kernel_spec(rng, 8, {1, 7}, {0.5, 6.0}, 1.0 + (i % 3));
      const KernelGrid k = build_kernel(s, 8);
      for (int x = 0; x < 8; ++x)
        for (int y = 0; y < 8; ++y) REQUIRE(std::abs(k.at(x, y) - gaussian_oracle(s, x, y)) < 1e-12);
    }
  }

  TEST_CASE("invalid specs are rejected") {
    CHECK_THROWS_AS(build_kernel({8, 0, 1.0, 3, 1.0}, 8), std::invalid_argument);
    CHECK_THROWS_AS(build_kernel({0, 0, 0.0, 3, 1.0}, 8), std::invalid_argument);
    CHECK_THROWS_AS(build_kernel({0, 0, 1.0, 4, 1.0}, 8), std::invalid_argument);
    CHECK_THROWS_AS(build_kernel({0, 0, 1.0, 9, 1.0}, 8), std::invalid_argument);
  }

  TEST_CASE("degenerate size range and determinism of sampling") {
    std::mt19937_64 a(5), b(5);
    for (int i = 0; i < 50; ++i) {
      const KernelSpec s = sample_kernel_spec(a, 8, {3, 3}, {3, 5});
      CHECK(s.support == 3);
      CHECK(s == sample_kernel_spec(b, 8, {3, 3}, {3, 5}));
    }
  }

  TEST_CASE("sampled centers are uniform over the grid") {
    std::mt19937_64 rng(99);
    const int draws = 10000;
    std::vector<int> counts(64, 0);
    std::map<int, int> sides;
    for (int i = 0; i < draws; ++i) {
      const KernelSpec s = sample_kernel_spec(rng, 8, {3, 5}, {3, 5});
      ++counts[static_cast<size_t>(s.mu1 * 8 + s.mu2)];
      ++sides[s.support];
      CHECK(s.sigma >= 3.0);
      CHECK(s.sigma <= 5.0);
    }
    const double p = 1.0 / 64, mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
    double chi2 = 0;
    for (int c : counts) {
      CHECK(std::abs(c - mean) < 4 * sd);
      chi2 += (c - mean) * (c - mean) / mean;
    }
    // chi-square with 63 dof, 0.999 quantile is about 103.4
    CHECK(chi2 < 103.4);
    CHECK(sides.size() == 2);
    CHECK(sides.count(3) == 1);
    CHECK(sides.count(5) == 1);
  }

  TEST_CASE("zero kernel leaves the map bit-identical") {
    AttentionMap m{Matrix<double>::Constant(3, 6, 1.0 / 6), 1, 4};
    m.rows(0, 0) = 0.3;
    KernelGrid k = build_kernel({0, 0, 1.0, 1, 0.0}, 2);
    const AttentionMap out = inject(m, k, GridLayout{2});
    CHECK(out.rows == m.rows);
  }

  TEST_CASE("single cell on a one-token grid") {
    AttentionMap m{Matrix<double>::Constant(1, 4, 0.25), 0, 1};
    KernelGrid k;
    k.n = 1;
    k.values = {0.5};
    k.row_end = k.col_end = 1;
    const AttentionMap out = inject(m, k, GridLayout{1});
    CHECK(out.rows(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    for (int c = 1; c < 4; ++c) CHECK(out.rows(0, c) == doctest::Approx(1.0 / 6).epsilon(1e-15));
  }

  TEST_CASE("renormalized rows sum to one over random maps") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 100; ++i) {
      const int rows = 1 + i % 9, offset = i % 5, cols = offset + 64 + i % 3;
      AttentionMap m{Matrix<double>(rows, cols), offset, 64};
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) m.rows(r, c) = u(rng);
        m.rows.row(r) /= m.rows.row(r).sum();
      }
      const KernelGrid k = build_kernel(sample_kernel_spec(rng, 8, {3, 5}, {3, 5}, 0.5 + 4 * u(rng)), 8);
      const AttentionMap out = inject(m, k, GridLayout{8});
      for (int r = 0; r < rows; ++r) {
        CHECK(std::abs(out.rows.row(r).sum() - 1.0) < 1e-6);
        CHECK(out.rows.row(r).minCoeff() >= 0.0);
      }
    }
  }

  TEST_CASE("mismatched grids are rejected") {
    AttentionMap m{Matrix<double>::Constant(2, 10, 0.1), 0, 9};
    CHECK_THROWS_AS(inject(m, build_kernel({0, 0, 1, 1, 1}, 8), GridLayout{8}), std::invalid_argument);
  }

  TEST_CASE("injected rows inside both model families sum to one") {
    for (Family f : {Family::CrossAttn, Family::MlpProj}) {
      ModelSpec spec;
      spec.id = "probe";
      spec.family = f;
      if (f == Family::CrossAttn) spec.query_tokens = 8;
      ModelBundle b = init_model(spec);
      b.frozen = true;
      ModelRuntime<double> rt(b);
      int seen = 0;
      double worst = 0, lowest = 1;
      rt.on_injected_attention = [&](const Matrix<double>& p) {
        ++seen;
        for (Eigen::Index r = 0; r < p.rows(); ++r) worst = std::max(worst, std::abs(p.row(r).sum() - 1.0));
        lowest = std::min(lowest, p.minCoeff());
      };
      std::mt19937_64 rng(11);
      std::uniform_real_distribution<double> u(0, 1);
      Matrix<double> image(32, 96);
      for (Eigen::Index i = 0; i < image.size(); ++i) image.data()[i] = u(rng);
      const KernelGrid k = build_kernel(sample_kernel_spec(rng, 8, {3, 5}, {3, 5}, 2.0), 8);
      loss_and_pixel_grad(rt, image, prompt_ids(b.tokenizer().tokenize("what is this?")),
                          b.tokenizer().tokenize("red", true).ids, &k, false);
      CHECK(seen == spec.heads);
      CHECK(worst < 1e-6);
      CHECK(lowest >= 0.0);
    }
  }
}
