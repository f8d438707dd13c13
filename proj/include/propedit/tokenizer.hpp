#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace propedit {

// Closed-vocabulary word-level tokenizer with byte fallback.
//
// Text is split on whitespace, and the punctuation marks . , ? : ; ! are
// separate tokens. A word outside the vocabulary is encoded as one token
// per UTF-8 byte. Ids: 0 <pad>, 1 <bos>, 2 <eos>, 3..258 bytes, then words
// in lexicon order.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kFirstByte = 3;
  static constexpr int kFirstWord = kFirstByte + 256;

  Tokenizer() = default;
  // Duplicates are ignored; order of first appearance is kept.
  explicit Tokenizer(const std::vector<std::string>& words);

  int vocab_size() const { return kFirstWord + static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  // Splits text into the word/punctuation pieces used by encode.
  static std::vector<std::string> split(std::string_view text);

  void save(const std::filesystem::path& file) const;
  static Tokenizer load(const std::filesystem::path& file);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace propedit
