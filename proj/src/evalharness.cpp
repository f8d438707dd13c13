#include "propedit/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "propedit/errors.hpp"
#include "propedit/optim.hpp"
#include "propedit/prompt_format.hpp"

namespace propedit {

// ------------------------------------------------------------------ scoring

std::string normalize_text(const std::string& s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

int em_score(const std::string& question, const std::string& generated,
             const std::vector<std::string>& answers) {
  if (answers.empty()) throw ArgumentError("em_score: empty answer set");
  const std::string hay = normalize_text(question + " " + generated);
  for (const auto& a : answers) {
    auto na = normalize_text(a);
    if (!na.empty() && hay.find(na) != std::string::npos) return 1;
  }
  return 0;
}

// ------------------------------------------------------------------ editors

EditorHandle identity_editor(std::string name) {
  EditorHandle h;
  h.name = std::move(name);
  h.parametric = true;
  h.apply = [](const WeightCatalog& base, const Episode&) { return EditResult{base, "", false, ""}; };
  return h;
}

EditorHandle prepend_editor() {
  EditorHandle h;
  h.name = "prepend";
  h.parametric = false;
  h.apply = [](const WeightCatalog& base, const Episode& ep) {
    return EditResult{base, prepend_prefix(ep.subject_kind) + ep.fact_text + " ", false, ""};
  };
  return h;
}

void CptConfig::validate(const ModelConfig& model) const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("cpt: lr must be finite and >= 0");
  if (epochs < 0) throw ConfigError("cpt: epochs must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("cpt: weight_decay must be >= 0");
  if (scope == CptScope::LayerRange &&
      (first_layer < 0 || last_layer < first_layer || last_layer >= model.n_layers)) {
    throw ConfigError("cpt: layer range [" + std::to_string(first_layer) + ", " +
                      std::to_string(last_layer) + "] outside the model");
  }
}

void to_json(nlohmann::json& j, const CptConfig& c) {
  j = {{"lr", c.lr},
       {"epochs", c.epochs},
       {"max_grad_norm", c.max_grad_norm},
       {"weight_decay", c.weight_decay},
       {"scope", c.scope == CptScope::Full ? "full" : "layer_range"},
       {"first_layer", c.first_layer},
       {"last_layer", c.last_layer}};
}

void from_json(const nlohmann::json& j, CptConfig& c) {
  c = CptConfig{};
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  auto scope = j.value("scope", std::string("full"));
  if (scope == "full") {
    c.scope = CptScope::Full;
  } else if (scope == "layer_range") {
    c.scope = CptScope::LayerRange;
  } else {
    throw ConfigError("cpt: unknown scope '" + scope + "'");
  }
  c.first_layer = j.value("first_layer", c.first_layer);
  c.last_layer = j.value("last_layer", c.last_layer);
}

WeightCatalog continue_pretrain(const WeightCatalog& base, const TokenSeq& fact,
                                const CptConfig& cfg) {
  cfg.validate(base.config());
  WeightCatalog w = base;
  if (cfg.epochs == 0) return w;

  std::vector<std::size_t> idx;
  if (cfg.scope == CptScope::Full) {
    for (std::size_t i = 0; i < w.size(); ++i) idx.push_back(i);
  } else {
    for (const auto& ref : TargetSpec::layer_range(cfg.first_layer, cfg.last_layer).refs)
      idx.push_back(w.index_of(ref));
  }
  std::vector<Matrix*> params;
  for (auto i : idx) params.push_back(&w.mutable_tensor(i));
  Adam adam(params, {.weight_decay = cfg.weight_decay});
  std::vector<double> lrs(params.size());
  const std::vector<TokenSeq> batch{fact};
  for (int e = 0; e < cfg.epochs; ++e) {
    auto lg = clm_loss_and_grad(w, batch);
    if (!std::isfinite(lg.loss)) throw TrainingError("cpt: non-finite loss", e);
    std::vector<Matrix*> gptr;
    for (auto i : idx) gptr.push_back(&lg.grads.g[i]);
    clip_grad_norm(gptr, cfg.max_grad_norm);
    std::fill(lrs.begin(), lrs.end(),
              cfg.lr * (1.0 - static_cast<double>(e) / static_cast<double>(cfg.epochs)));
    std::vector<const Matrix*> cg(gptr.begin(), gptr.end());
    // Pointers into w stay valid: the tensors were detached above.
    adam.step(params, cg, lrs);
  }
  return w;
}

EditorHandle cpt_editor(const CptConfig& cfg, const Tokenizer& tok, std::string name) {
  EditorHandle h;
  h.name = name.empty() ? (cfg.scope == CptScope::Full ? "cpt-full" : "cpt-layers") : std::move(name);
  h.parametric = true;
  h.apply = [cfg, tok](const WeightCatalog& base, const Episode& ep) {
    EditResult r;
    try {
      r.weights = continue_pretrain(base, fact_seq(tok, ep.fact_text), cfg);
      for (std::size_t i = 0; i < r.weights.size(); ++i) {
        if (!r.weights.tensor(i).allFinite()) throw TrainingError("cpt: non-finite weights", 0);
      }
    } catch (const TrainingError& e) {
      r.weights = base;
      r.failed = true;
      r.error = e.what();
    }
    return r;
  };
  return h;
}

EditorHandle hypernet_editor(std::string name, HypernetParams phi, InnerMode inner,
                             const Tokenizer& tok) {
  EditorHandle h;
  h.name = std::move(name);
  h.parametric = true;
  h.apply = [phi = std::move(phi), inner, tok](const WeightCatalog& base, const Episode& ep) {
    EditRequest req;
    req.mode = inner;
    req.fact_text = ep.fact_text;
    req.atomic_facts = ep.atomic_facts;
    EditResult r;
    r.weights = edit(base, phi, req, tok);
    for (std::size_t i = 0; i < r.weights.size(); ++i) {
      if (!r.weights.tensor(i).allFinite()) {
        r.weights = base;
        r.failed = true;
        r.error = "hypernet edit produced non-finite weights";
        break;
      }
    }
    return r;
  };
  return h;
}

// ------------------------------------------------------------------ report

std::string EvalReport::bucket_key(bool efficacy, bool verbatim, SplitTag split) {
  return std::string(efficacy ? "efficacy" : "specificity") + "/" +
         (verbatim ? "verbatim" : "non_verbatim") + "/" + to_string(split);
}

BucketStats EvalReport::total(bool efficacy, std::optional<bool> verbatim,
                              std::optional<SplitTag> split) const {
  BucketStats out;
  for (const auto& q : questions) {
    if (q.efficacy != efficacy) continue;
    if (verbatim && q.verbatim != *verbatim) continue;
    if (split && q.split != *split) continue;
    ++out.n;
    out.hits += q.score;
    out.answer_in_question += q.answer_in_question ? 1 : 0;
  }
  return out;
}

std::vector<double> EvalReport::scores(bool efficacy) const {
  std::vector<double> out;
  for (const auto& q : questions)
    if (q.efficacy == efficacy) out.push_back(q.score);
  return out;
}

nlohmann::json to_json(const EvalReport& r, bool with_timing) {
  nlohmann::json buckets = nlohmann::json::object();
  for (const auto& [k, b] : r.buckets) {
    buckets[k] = {{"n", b.n}, {"hits", b.hits}, {"em", b.em()},
                  {"answer_in_question", b.answer_in_question}};
  }
  nlohmann::json qs = nlohmann::json::array();
  for (const auto& q : r.questions) {
    qs.push_back({{"episode_id", q.episode_id},
                  {"split", to_string(q.split)},
                  {"kind", q.efficacy ? "efficacy" : "specificity"},
                  {"verbatim", q.verbatim},
                  {"answer_in_question", q.answer_in_question},
                  {"question", q.question},
                  {"answer", q.answer},
                  {"generated", q.generated},
                  {"score", q.score}});
  }
  nlohmann::json j = {{"editor", r.editor},
                      {"efficacy_em", r.efficacy_em()},
                      {"specificity_em", r.specificity_em()},
                      {"buckets", buckets},
                      {"failed_episodes", r.failed_episodes},
                      {"questions", qs}};
  if (with_timing) j["episode_seconds"] = r.episode_seconds;
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.editor = j.at("editor").get<std::string>();
  for (const auto& [k, b] : j.at("buckets").items()) {
    r.buckets[k] = {b.at("n").get<std::int64_t>(), b.at("hits").get<std::int64_t>(),
                    b.at("answer_in_question").get<std::int64_t>()};
  }
  r.failed_episodes = j.at("failed_episodes").get<std::vector<std::int64_t>>();
  for (const auto& q : j.at("questions")) {
    QuestionResult x;
    x.episode_id = q.at("episode_id").get<std::int64_t>();
    x.split = split_tag_from_string(q.at("split").get<std::string>());
    x.efficacy = q.at("kind").get<std::string>() == "efficacy";
    x.verbatim = q.at("verbatim").get<bool>();
    x.answer_in_question = q.at("answer_in_question").get<bool>();
    x.question = q.at("question").get<std::string>();
    x.answer = q.at("answer").get<std::string>();
    x.generated = q.at("generated").get<std::string>();
    x.score = q.at("score").get<int>();
    r.questions.push_back(std::move(x));
  }
  if (j.contains("episode_seconds")) r.episode_seconds = j.at("episode_seconds").get<std::vector<double>>();
  return r;
}

// ------------------------------------------------------------------ run_eval

std::string answer_question(const EditResult& edit, const Tokenizer& tok,
                            const std::string& question, int max_new_tokens) {
  auto prompt = with_bos(tok, edit.prompt_prefix + question_text(question));
  auto raw = tok.decode(greedy_decode(edit.weights, prompt, max_new_tokens, Tokenizer::kEos));
  // Byte-fallback tokens can form invalid UTF-8; keep reports printable.
  std::string out;
  for (unsigned char c : raw) {
    if (c >= 0x20 && c < 0x7f) {
      out.push_back(static_cast<char>(c));
    } else {
      char buf[8];
      std::snprintf(buf, sizeof buf, "<0x%02X>", c);
      out += buf;
    }
  }
  return out;
}

EvalReport run_eval(const EditorHandle& editor, const std::vector<Episode>& episodes,
                    const WeightCatalog& base, const Tokenizer& tok, const EvalOptions& opt) {
  EvalReport rep;
  rep.editor = editor.name;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    auto t0 = std::chrono::steady_clock::now();
    EditResult res;
    try {
      res = editor.apply(base, ep);
    } catch (const std::exception& ex) {
      res.failed = true;
      res.error = ex.what();
    }
    if (res.failed) rep.failed_episodes.push_back(ep.id);

    auto score = [&](bool efficacy, const std::string& q, const std::string& a, bool verbatim) {
      QuestionResult r;
      r.episode_id = ep.id;
      r.split = ep.split_tag;
      r.efficacy = efficacy;
      r.verbatim = verbatim;
      r.question = q;
      r.answer = a;
      r.answer_in_question = em_score(q, "", {a}) == 1;
      if (!res.failed) {
        r.generated = answer_question(res, tok, q, opt.max_new_tokens);
        r.score = em_score(q, r.generated, {a});
      }
      auto& b = rep.buckets[EvalReport::bucket_key(efficacy, verbatim, ep.split_tag)];
      ++b.n;
      b.hits += r.score;
      b.answer_in_question += r.answer_in_question ? 1 : 0;
      rep.questions.push_back(std::move(r));
    };
    for (const auto& qa : ep.prop_qas) score(true, qa.question, qa.answer, qa.verbatim);
    for (const auto& [q, a] : ep.singlehop_qas)
      score(false, q, a, contains_casefold(ep.fact_text, a));

    rep.episode_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (opt.on_episode) opt.on_episode(e + 1, episodes.size());
  }
  return rep;
}

// ------------------------------------------------------------------ bootstrap

BootstrapResult paired_bootstrap(const std::vector<double>& a, const std::vector<double>& b,
                                 int n_resamples, std::uint64_t seed) {
  if (a.size() != b.size()) throw ArgumentError("paired_bootstrap: length mismatch");
  if (a.empty()) throw ArgumentError("paired_bootstrap: empty score vectors");
  if (n_resamples <= 0) throw ArgumentError("paired_bootstrap: n_resamples must be positive");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = a[i] - b[i];
    mean += d[i];
  }
  mean /= static_cast<double>(n);

  // Resampled means centered on the observed one approximate the null
  // distribution; count those at least as extreme as what was observed.
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const double tol = 1e-12;
  std::int64_t extreme = 0;
  for (int r = 0; r < n_resamples; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += d[pick(rng)];
    if (std::abs(s / static_cast<double>(n) - mean) >= std::abs(mean) - tol) ++extreme;
  }
  BootstrapResult out;
  out.mean_diff = mean;
  out.p_value = static_cast<double>(extreme) / static_cast<double>(n_resamples);
  out.significant = out.p_value < 0.05;
  return out;
}

// ------------------------------------------------------------------ output

std::string format_table(const std::vector<EvalReport>& reports) {
  std::set<SplitTag> splits;
  for (const auto& r : reports)
    for (const auto& q : r.questions) splits.insert(q.split);

  std::vector<std::string> header{"system"};
  for (auto s : splits) {
    const auto tag = to_string(s);
    for (const char* col : {"eff verbatim", "eff non-verbatim", "eff all", "spec"})
      header.push_back(tag + " " + col);
  }
  std::vector<std::vector<std::string>> rows{header};
  auto cell = [](const BucketStats& b) {
    if (b.n == 0) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100.0 * b.em() << " (" << b.n << ")";
    return os.str();
  };
  for (const auto& r : reports) {
    std::vector<std::string> row{r.editor};
    for (auto s : splits) {
      row.push_back(cell(r.total(true, true, s)));
      row.push_back(cell(r.total(true, false, s)));
      row.push_back(cell(r.total(true, std::nullopt, s)));
      row.push_back(cell(r.total(false, std::nullopt, s)));
    }
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      if (c) os << " | ";
      os << std::left << std::setw(static_cast<int>(width[c])) << rows[r][c];
    }
    os << '\n';
    if (r == 0) {
      for (std::size_t c = 0; c < width.size(); ++c) {
        if (c) os << "-+-";
        os << std::string(width[c], '-');
      }
      os << '\n';
    }
  }
  return os.str();
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

}  // namespace

std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "editor,episode_id,split,kind,verbatim,answer_in_question,question,answer,generated,score\n";
  for (const auto& q : r.questions) {
    os << csv_field(r.editor) << ',' << q.episode_id << ',' << to_string(q.split) << ','
       << (q.efficacy ? "efficacy" : "specificity") << ',' << (q.verbatim ? 1 : 0) << ','
       << (q.answer_in_question ? 1 : 0) << ',' << csv_field(q.question) << ','
       << csv_field(q.answer) << ',' << csv_field(q.generated) << ',' << q.score << '\n';
  }
  return os.str();
}

std::string fill_judge_prompt(const std::string& question, const std::string& reference,
                              const std::string& prediction) {
  std::string out = llm_judge_prompt();
  for (const auto& [slot, value] : {std::pair<std::string, const std::string*>{"{question}", &question},
                                    {"{reference}", &reference},
                                    {"{prediction}", &prediction}}) {
    auto pos = out.find(slot);
    if (pos != std::string::npos) out.replace(pos, slot.size(), *value);
  }
  return out;
}

}  // namespace propedit
