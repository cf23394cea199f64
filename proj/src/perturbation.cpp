// SPDX-License-Identifier: Apache-2.0
#include "dynvla/perturbation.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dynvla {

void validate_kernel_spec(const KernelSpec& spec, int n) {
  if (n < 1) throw std::invalid_argument("kernel grid side must be positive");
  if (spec.mu1 < 0 || spec.mu1 >= n || spec.mu2 < 0 || spec.mu2 >= n)
    throw std::invalid_argument("kernel center (" + std::to_string(spec.mu1) + ", " + std::to_string(spec.mu2) +
                                ") outside the " + std::to_string(n) + "x" + std::to_string(n) + " grid");
  if (!(spec.sigma > 0.0) || !std::isfinite(spec.sigma)) throw std::invalid_argument("kernel sigma must be positive");
  if (spec.support < 1 || spec.support > n || spec.support % 2 == 0)
    throw std::invalid_argument("kernel support must be odd and within [1, n], got " + std::to_string(spec.support));
  if (!(spec.amplitude >= 0.0) || !std::isfinite(spec.amplitude))
    throw std::invalid_argument("kernel amplitude must be non-negative");
}

std::vector<int> odd_supports(IntRange size_range, int n) {
  std::vector<int> out;
  for (int m = std::max(size_range.lo, 1); m <= std::min(size_range.hi, n); ++m)
    if (m % 2 == 1) out.push_back(m);
  return out;
}

KernelSpec sample_kernel_spec(std::mt19937_64& rng, int n, IntRange size_range, RealRange sigma_range,
                              double amplitude) {
  if (n < 1) throw std::invalid_argument("grid side must be positive");
  if (size_range.lo > size_range.hi || size_range.lo < 1 || size_range.hi > n)
    throw std::invalid_argument("kernel size range must be non-empty and inside [1, n]");
  if (!(sigma_range.lo > 0.0) || sigma_range.lo > sigma_range.hi)
    throw std::invalid_argument("kernel sigma range must be non-empty and positive");
  const std::vector<int> sides = odd_supports(size_range, n);
  if (sides.empty()) throw std::invalid_argument("kernel size range contains no odd side");

  KernelSpec spec;
  std::uniform_int_distribution<int> cell(0, n * n - 1);
  const int c = cell(rng);
  spec.mu1 = c / n;
  spec.mu2 = c % n;
  std::uniform_int_distribution<size_t> pick(0, sides.size() - 1);
  spec.support = sides[pick(rng)];
  std::uniform_real_distribution<double> sig(sigma_range.lo, sigma_range.hi);
  spec.sigma = sigma_range.lo == sigma_range.hi ? sigma_range.lo : sig(rng);
  spec.amplitude = amplitude;
  return spec;
}

KernelGrid build_kernel(const KernelSpec& spec, int n) {
  validate_kernel_spec(spec, n);
  KernelGrid g;
  g.n = n;
  g.values.assign(static_cast<size_t>(n * n), 0.0);
  const int half = spec.support / 2;
  g.row_begin = std::max(0, spec.mu1 - half);
  g.row_end = std::min(n, spec.mu1 + half + 1);
  g.col_begin = std::max(0, spec.mu2 - half);
  g.col_end = std::min(n, spec.mu2 + half + 1);
  const double two_var = 2.0 * spec.sigma * spec.sigma;
  const double norm = spec.amplitude / (std::numbers::pi * two_var);
  for (int x = g.row_begin; x < g.row_end; ++x) {
    for (int y = g.col_begin; y < g.col_end; ++y) {
      const double dx = x - spec.mu1;
      const double dy = y - spec.mu2;
      g.values[static_cast<size_t>(x * n + y)] = norm * std::exp(-(dx * dx + dy * dy) / two_var);
    }
  }
  return g;
}

AttentionMap inject(const AttentionMap& attn, const KernelGrid& kernel, const GridLayout& layout) {
  if (layout.n != kernel.n || attn.visual_key_count != layout.count())
    throw std::invalid_argument("visual key span holds " + std::to_string(attn.visual_key_count) +
                                " keys but the kernel grid has " + std::to_string(kernel.n * kernel.n) + " cells");
  if (attn.visual_key_begin < 0 || attn.visual_key_begin + attn.visual_key_count > attn.rows.cols())
    throw std::invalid_argument("visual key span outside the attention map");
  AttentionMap out = attn;
  double added = 0.0;
  for (double v : kernel.values) added += v;
  if (added == 0.0) return out;
  for (Eigen::Index r = 0; r < out.rows.rows(); ++r) {
    for (int x = 0; x < kernel.n; ++x)
      for (int y = 0; y < kernel.n; ++y)
        out.rows(r, attn.visual_key_begin + layout.position(x, y)) += kernel.at(x, y);
    out.rows.row(r) /= out.rows.row(r).sum();
  }
  return out;
}

}  // namespace dynvla
