// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/autodiff.hpp"

#include <random>
#include <vector>

namespace dynvla {

/// Row-major mapping between an n x n token grid and sequence positions.
struct GridLayout {
  int n = 0;
  int position(int row, int col) const { return row * n + col; }
  int count() const { return n * n; }
};

/// Clipped 2D Gaussian kernel parameters: center (mu1, mu2) on the token grid,
/// spread sigma, odd window side `support`, and an overall amplitude.
struct KernelSpec {
  int mu1 = 0;
  int mu2 = 0;
  double sigma = 1.0;
  int support = 1;
  double amplitude = 1.0;

  bool operator==(const KernelSpec&) const = default;
};

/// Throws std::invalid_argument unless the spec is usable on an n x n grid.
void validate_kernel_spec(const KernelSpec& spec, int n);

/// Dense n x n kernel values (row-major) and the inclusive window that holds them.
struct KernelGrid {
  int n = 0;
  std::vector<double> values;
  int row_begin = 0, row_end = 0;  // [begin, end)
  int col_begin = 0, col_end = 0;

  double at(int row, int col) const { return values[static_cast<size_t>(row * n + col)]; }
  bool in_box(int row, int col) const {
    return row >= row_begin && row < row_end && col >= col_begin && col < col_end;
  }
};

struct IntRange {
  int lo = 3;
  int hi = 5;
};

struct RealRange {
  double lo = 3.0;
  double hi = 5.0;
};

/// Draws one kernel spec: uniform center over the grid, uniform odd window side
/// from `size_range`, uniform sigma from `sigma_range`.
KernelSpec sample_kernel_spec(std::mt19937_64& rng, int n, IntRange size_range, RealRange sigma_range,
                              double amplitude = 1.0);

/// Odd window sides admitted by a size range (clipped to [1, n]).
std::vector<int> odd_supports(IntRange size_range, int n);

/// Evaluates the clipped Gaussian on the grid; cells outside the m x m window
/// (truncated at the grid edges, never shifted) are zero.
KernelGrid build_kernel(const KernelSpec& spec, int n);

/// Post-softmax attention probabilities plus the key columns holding the visual tokens.
struct AttentionMap {
  Matrix<double> rows;
  int visual_key_begin = 0;
  int visual_key_count = 0;
};

/// Adds the kernel (mapped through `layout`) to every row's visual keys and
/// renormalizes each row by its new total.
AttentionMap inject(const AttentionMap& attn, const KernelGrid& kernel, const GridLayout& layout);

/// Kernel values laid out over sequence positions, ready to hand to Graph::inject_attention.
template <typename T>
AttentionInjection<T> make_injection(const KernelGrid& kernel, const GridLayout& layout, int key_offset,
                                     bool causal = false, int causal_query_offset = 0) {
  AttentionInjection<T> inj;
  inj.key_values.assign(static_cast<size_t>(layout.count()), T(0));
  for (int r = 0; r < kernel.n; ++r)
    for (int c = 0; c < kernel.n; ++c)
      inj.key_values[static_cast<size_t>(layout.position(r, c))] = static_cast<T>(kernel.at(r, c));
  inj.key_offset = key_offset;
  inj.causal = causal;
  inj.causal_query_offset = causal_query_offset;
  return inj;
}

}  // namespace dynvla
