// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace dynvla {

struct TokenSequence {
  std::vector<int> ids;
  std::string text;
};

/// Character-level tokenizer over a fixed alphabet plus four reserved ids.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kReserved = 4;

  static constexpr std::string_view kDefaultAlphabet = " abcdefghijklmnopqrstuvwxyz.,?!'";

  explicit Tokenizer(std::string alphabet = std::string(kDefaultAlphabet));

  /// Throws std::invalid_argument on characters outside the alphabet.
  TokenSequence tokenize(std::string_view text, bool append_eos = false) const;
  /// Reserved ids are dropped; an EOS terminates the text.
  std::string detokenize(const std::vector<int>& ids) const;
  bool encodable(std::string_view text) const;

  int vocab_size() const { return kReserved + static_cast<int>(alphabet_.size()); }
  const std::string& alphabet() const { return alphabet_; }

 private:
  std::string alphabet_;
  std::array<int, 256> lookup_{};
};

}  // namespace dynvla
