// SPDX-License-Identifier: Apache-2.0
#include "dynvla/tokenizer.hpp"

#include <stdexcept>

namespace dynvla {

Tokenizer::Tokenizer(std::string alphabet) : alphabet_(std::move(alphabet)) {
  lookup_.fill(-1);
  if (alphabet_.empty()) throw std::invalid_argument("tokenizer alphabet is empty");
  if (alphabet_.size() + kReserved > 64) throw std::invalid_argument("tokenizer alphabet exceeds 60 symbols");
  for (size_t i = 0; i < alphabet_.size(); ++i) {
    const auto c = static_cast<unsigned char>(alphabet_[i]);
    if (lookup_[c] != -1) throw std::invalid_argument("tokenizer alphabet repeats a symbol");
    lookup_[c] = kReserved + static_cast<int>(i);
  }
}

bool Tokenizer::encodable(std::string_view text) const {
  for (char ch : text)
    if (lookup_[static_cast<unsigned char>(ch)] < 0) return false;
  return true;
}

TokenSequence Tokenizer::tokenize(std::string_view text, bool append_eos) const {
  TokenSequence seq;
  seq.text = std::string(text);
  seq.ids.reserve(text.size() + 1);
  for (char ch : text) {
    const int id = lookup_[static_cast<unsigned char>(ch)];
    if (id < 0) throw std::invalid_argument(std::string("character '") + ch + "' is not in the tokenizer alphabet");
    seq.ids.push_back(id);
  }
  if (append_eos) seq.ids.push_back(kEos);
  return seq;
}

std::string Tokenizer::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id < kReserved || id >= vocab_size()) continue;
    out.push_back(alphabet_[static_cast<size_t>(id - kReserved)]);
  }
  return out;
}

}  // namespace dynvla
