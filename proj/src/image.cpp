// SPDX-License-Identifier: Apache-2.0
#include "dynvla/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dynvla {

std::vector<std::uint8_t> to_bytes(const ImageTensor& img) {
  std::vector<std::uint8_t> out(img.size());
  for (size_t i = 0; i < img.size(); ++i) {
    const float v = std::clamp(img.data[i], 0.0f, 1.0f);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

ImageTensor from_bytes(const std::vector<std::uint8_t>& bytes, int h, int w, int c) {
  ImageTensor img(h, w, c);
  if (bytes.size() != img.size()) throw std::invalid_argument("byte buffer does not match image shape");
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

ImageTensor quantize_8bit(const ImageTensor& img) {
  return from_bytes(to_bytes(img), img.height, img.width, img.channels);
}

}  // namespace dynvla
