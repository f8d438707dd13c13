#pragma once

// Token layouts shared by pretraining, editing and evaluation.
//
//   fact          <bos> fact                      every token is a target
//   question      <bos> q : question a :          prompt only
//   qa            question layout + answer <eos>  answer and <eos> are targets
//   atomic        <bos> prompt + answer           answer tokens are targets
//   corpus line   <bos> line <eos>                every token is a target

#include <string>
#include <vector>

#include "propedit/tinylm.hpp"
#include "propedit/tokenizer.hpp"

namespace propedit {

inline std::vector<int> with_bos(const Tokenizer& tok, const std::string& text) {
  std::vector<int> ids{Tokenizer::kBos};
  auto body = tok.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

inline std::string question_text(const std::string& question) {
  return "q : " + question + " a :";
}

inline std::vector<int> question_prompt(const Tokenizer& tok, const std::string& question) {
  return with_bos(tok, question_text(question));
}

inline TokenSeq fact_seq(const Tokenizer& tok, const std::string& fact) {
  return TokenSeq::all_targets(with_bos(tok, fact));
}

inline TokenSeq qa_seq(const Tokenizer& tok, const std::string& question,
                       const std::string& answer) {
  auto a = tok.encode(answer);
  a.push_back(Tokenizer::kEos);
  return TokenSeq::prompt_answer(question_prompt(tok, question), a);
}

inline TokenSeq atomic_seq(const Tokenizer& tok, const std::string& prompt,
                           const std::string& answer) {
  return TokenSeq::prompt_answer(with_bos(tok, prompt), tok.encode(answer));
}

inline TokenSeq corpus_seq(const Tokenizer& tok, const std::string& line) {
  auto ids = with_bos(tok, line);
  ids.push_back(Tokenizer::kEos);
  return TokenSeq::all_targets(ids);
}

}  // namespace propedit
