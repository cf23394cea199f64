// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace dynvla {

/// Height x width x channels pixels in [0, 1], stored (y, x, c) row-major.
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<size_t>(h * w * c), fill) {}

  size_t size() const { return data.size(); }
  float& at(int y, int x, int c) { return data[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data[index(y, x, c)]; }
  size_t index(int y, int x, int c) const { return static_cast<size_t>((y * width + x) * channels + c); }
  bool same_shape(const ImageTensor& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const ImageTensor&) const = default;

  /// H x (W * C) matrix view used by the graph.
  template <typename T>
  Matrix<T> to_matrix() const {
    Matrix<T> m(height, width * channels);
    for (int y = 0; y < height; ++y)
      for (int k = 0; k < width * channels; ++k) m(y, k) = static_cast<T>(data[static_cast<size_t>(y * width * channels + k)]);
    return m;
  }
  template <typename T>
  static ImageTensor from_matrix(const Matrix<T>& m, int channels) {
    ImageTensor img(static_cast<int>(m.rows()), static_cast<int>(m.cols()) / channels, channels);
    for (int y = 0; y < img.height; ++y)
      for (int k = 0; k < img.width * channels; ++k)
        img.data[static_cast<size_t>(y * img.width * channels + k)] = static_cast<float>(m(y, k));
    return img;
  }
};

/// Rounds to 8-bit levels and back, as a PNG round trip would.
ImageTensor quantize_8bit(const ImageTensor& img);
std::vector<std::uint8_t> to_bytes(const ImageTensor& img);
ImageTensor from_bytes(const std::vector<std::uint8_t>& bytes, int h, int w, int c);

}  // namespace dynvla
