// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/autodiff.hpp"
#include "dynvla/image.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace dynvla {

/// 8-bit RGB (or gray) PNG round trip.
void write_png(const std::filesystem::path& path, const ImageTensor& image);
ImageTensor read_png(const std::filesystem::path& path);

/// Named float32 array container.
///
/// Layout (all integers little-endian):
///   magic "DVNA", u32 version (1), u32 entry count,
///   per entry: u32 name length, name bytes (UTF-8), u32 rows, u32 cols,
///              rows * cols IEEE-754 float32 values in row-major order.
/// Entries are written in lexicographic name order.
using NamedArrays = std::map<std::string, Matrix<float>>;

void write_named_arrays(const std::filesystem::path& path, const NamedArrays& arrays);
NamedArrays read_named_arrays(const std::filesystem::path& path);

std::uint64_t file_hash(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace dynvla
