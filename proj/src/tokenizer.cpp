#include "propedit/tokenizer.hpp"

#include <fstream>

#include "json.hpp"
#include "propedit/errors.hpp"

namespace propedit {

namespace {
bool is_punct(char c) {
  return c == '.' || c == ',' || c == '?' || c == ':' || c == ';' || c == '!';
}
bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }
}  // namespace

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  for (const auto& w : words) {
    if (w.empty() || index_.count(w) != 0) continue;
    index_.emplace(w, kFirstWord + static_cast<int>(words_.size()));
    words_.push_back(w);
  }
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& piece : split(text)) {
    auto it = index_.find(piece);
    if (it != index_.end()) {
      ids.push_back(it->second);
    } else {
      for (unsigned char b : piece) ids.push_back(kFirstByte + b);
    }
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  bool in_bytes = false;
  auto sep = [&] {
    if (!out.empty()) out.push_back(' ');
  };
  for (int id : ids) {
    if (id >= kFirstByte && id < kFirstWord) {
      if (!in_bytes) sep();
      out.push_back(static_cast<char>(id - kFirstByte));
      in_bytes = true;
      continue;
    }
    in_bytes = false;
    if (id < kFirstByte) continue;  // specials carry no text
    int w = id - kFirstWord;
    if (w < 0 || w >= static_cast<int>(words_.size())) throw ArgumentError("decode: id out of range");
    const auto& word = words_[w];
    if (!(word.size() == 1 && is_punct(word[0]))) sep();
    out += word;
  }
  return out;
}

void Tokenizer::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw ArgumentError("cannot write tokenizer: " + file.string());
  out << nlohmann::json{{"words", words_}}.dump(1) << "\n";
}

Tokenizer Tokenizer::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw LookupError("missing tokenizer file: " + file.string());
  auto j = nlohmann::json::parse(in);
  return Tokenizer(j.at("words").get<std::vector<std::string>>());
}

}  // namespace propedit
