// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero when any selected criterion fails.
//
//   acceptance --fast           criteria 1-4 and 8-10
//   acceptance --e2e DIR        criteria 5-7 (full pipeline under DIR)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "propedit/datasyn.hpp"
#include "propedit/evalharness.hpp"
#include "propedit/gradcap.hpp"
#include "propedit/hypernet.hpp"
#include "propedit/metatrain.hpp"
#include "propedit/pipeline.hpp"
#include "propedit/prompt_format.hpp"
#include "test_util.hpp"

using namespace propedit;
using propedit::testing::random_tokens;
using propedit::testing::rich_model;
using propedit::testing::tiny_config;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

void run(int id, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, std::string("exception: ") + e.what());
  }
}

std::vector<TokenSeq> random_batch(std::mt19937_64& rng, int vocab, std::initializer_list<int> lens) {
  std::vector<TokenSeq> b;
  for (int len : lens) {
    auto t = random_tokens(rng, len, vocab);
    t.insert(t.begin(), Tokenizer::kBos);
    b.push_back(TokenSeq::all_targets(t));
  }
  return b;
}

// 1: assembled rank-1 sums equal the reverse-mode gradient.
void criterion1() {
  auto t0 = std::chrono::steady_clock::now();
  auto mc = tiny_config(2);
  auto w = rich_model(mc);
  std::mt19937_64 rng(1);
  auto batch = random_batch(rng, mc.vocab_size, {9, 6, 12});
  double err = verify_rank1(w, batch, TargetSpec::layer_range(0, 1));
  double t = seconds_since(t0);
  report(1, err <= 1e-8 && t < 10.0, fmt("max rel Frobenius error %.3e (<= 1e-8), %.2fs", err, t));
}

// 2: identity hypernet with fixed alpha is one SGD step.
void criterion2() {
  auto t0 = std::chrono::steady_clock::now();
  auto mc = tiny_config(2);
  auto w = rich_model(mc);
  auto targets = TargetSpec::layer_range(0, 1);
  HypernetConfig hc;
  hc.hidden_dim = 16;
  auto phi = init_hypernet(mc, targets, hc, 4);
  for (const auto& r : targets.refs) phi.set_alpha(r, 0.25);
  std::mt19937_64 rng(2);
  auto batch = random_batch(rng, mc.vocab_size, {8, 5, 10});
  auto edited = edit(w, phi, batch);
  auto full = clm_loss_and_grad(w, batch);
  double worst = 0.0;
  for (const auto& r : targets.refs) {
    Matrix sgd = w.weight(r) - phi.alpha(r) * full.grads.g[w.index_of(r)];
    worst = std::max(worst, (edited.weight(r) - sgd).cwiseAbs().maxCoeff());
  }
  double t = seconds_since(t0);
  report(2, worst <= 1e-10 && t < 10.0, fmt("max abs deviation %.3e (<= 1e-10), %.2fs", worst, t));
}

// Small world and model shared by the outer-loss criteria.
struct Mini {
  SynWorld world;
  Tokenizer tok;
  WeightCatalog model;
  std::vector<Episode> eps;

  Mini() {
    WorldSpec ws;
    ws.n_types = 2;
    ws.entities_per_type = 6;
    ws.relations_per_type = 3;
    ws.seed = 9;
    world = build_world(ws);
    tok = Tokenizer(world.lexicon());
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_mlp = 24;
    mc.vocab_size = tok.vocab_size();
    mc.max_seq_len = 64;
    mc.seed = 3;
    model = rich_model(mc, 3.0);
    for (std::uint64_t s = 0; s < 2; ++s) eps.push_back(make_instance(world, 100 + s));
  }
};

// 3: meta-gradient against central differences.
void criterion3() {
  auto t0 = std::chrono::steady_clock::now();
  Mini m;
  MetaTrainConfig cfg;
  cfg.c_edit = 0.5;
  std::vector<EpisodeBatch> b;
  for (const auto& e : m.eps) b.push_back(e.to_batch());
  auto prepared = prepare_episodes(b, m.tok, cfg);
  HypernetConfig hc;
  hc.hidden_dim = 10;
  hc.alpha_init = 0.1;
  auto phi = init_hypernet(m.model.config(), TargetSpec::layer_range(0, 1), hc, 5);
  perturb_hypernet(phi, 0.05, 6);
  auto r = check_meta_gradient(phi, m.model, prepared, cfg, 200, 1e-4, 7);
  double t = seconds_since(t0);
  report(3, r.rel_error <= 1e-3 && r.entries >= 200 && t < 300.0,
         fmt("relative error %.3e on %.0f entries (<= 1e-3), %.1fs", r.rel_error, r.entries, t));
}

// 4: KL of a model against itself.
void criterion4() {
  auto mc = tiny_config(2);
  auto w = rich_model(mc);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(1, mc.max_seq_len);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    auto p = random_tokens(rng, len(rng), mc.vocab_size);
    worst = std::max(worst, std::abs(kl_next_token(w, w, p)));
  }
  report(4, worst <= 1e-9, fmt("max |KL(base, base)| over 20 prompts %.3e (<= 1e-9)", worst));
}

// 8: the exact-match metric on a fixed fixture.
void criterion8() {
  struct Case {
    std::string q, gen;
    std::vector<std::string> answers;
    int expected;
  };
  const std::vector<Case> cases{
      {"capital of Malaysia?", "Kuala Lumpur.", {"Kuala Lumpur"}, 1},
      {"who wrote the book about Paris ?", "", {"Paris"}, 1},
      {"capital of Malaysia?", "", {"Kuala Lumpur"}, 0},
      {"capital of Malaysia?", "kuala lumpur", {"Kuala Lumpur"}, 1},
      {"capital of Malaysia?", "Kuala   \t Lumpur", {"Kuala Lumpur"}, 1},
      {"capital of Malaysia?", "Kuala", {"Kuala Lumpur"}, 0},
      {"capital of Malaysia?", "it is Kuala Lumpur, I think", {"Kuala Lumpur"}, 1},
      {"capital of Malaysia?", "Putrajaya", {"Kuala Lumpur", "Putrajaya"}, 1},
      {"capital of Malaysia?", "Singapore", {"Kuala Lumpur", "Putrajaya"}, 0},
      {"capital of", "Malaysia", {"of Malaysia"}, 1},
      {"q : what is the capital of vorta ? a :", "zepami", {"zepami"}, 1},
      {"q : what is the capital of vorta ? a :", "zepamix", {"zepamiy"}, 0},
  };
  int ok = 0;
  for (const auto& c : cases) ok += em_score(c.q, c.gen, c.answers) == c.expected;
  report(8, ok == 12, fmt("%.0f/12 cases", ok));
}

double permutation_p(const std::vector<double>& a, const std::vector<double>& b, int draws,
                     std::uint64_t seed) {
  const std::size_t n = a.size();
  double obs = 0.0;
  for (std::size_t i = 0; i < n; ++i) obs += a[i] - b[i];
  obs = std::abs(obs / n);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(0.5);
  int extreme = 0;
  for (int r = 0; r < draws; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (flip(rng) ? 1.0 : -1.0) * (a[i] - b[i]);
    if (std::abs(s / n) >= obs - 1e-12) ++extreme;
  }
  return static_cast<double>(extreme) / draws;
}

// 9: bootstrap sanity.
void criterion9() {
  std::mt19937_64 rng(42);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> same(200);
  for (auto& x : same) x = coin(rng);
  auto r_same = paired_bootstrap(same, same, 10000, 1);
  auto r_disjoint = paired_bootstrap(std::vector<double>(200, 1.0), std::vector<double>(200, 0.0), 10000, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> a(100), b(100);
  for (int i = 0; i < 100; ++i) {
    a[i] = u(rng);
    b[i] = std::max(0.0, u(rng) - 0.05);
  }
  double p = paired_bootstrap(a, b, 10000, 7).p_value;
  double oracle = permutation_p(a, b, 100000, 9);
  bool pass = r_same.p_value == 1.0 && !r_same.significant && r_disjoint.significant &&
              std::abs(p - oracle) <= 0.02;
  report(9, pass,
         fmt("identical p=%.3f, disjoint p=%.4f, bootstrap %.4f vs permutation %.4f", r_same.p_value,
             r_disjoint.p_value, p, oracle));
}

// 10: dataset invariants.
void criterion10() {
  WorldSpec ws;
  ws.seed = 11;
  DataSpec ds;
  ds.seed = 12;
  auto world = build_world(ws);
  auto data = split_dataset(world, ds);

  std::size_t eff = 0, verbatim = 0;
  for (const auto& name : Dataset::split_names()) {
    for (const auto& e : data.split(name)) {
      for (const auto& q : e.prop_qas) {
        ++eff;
        if (contains_casefold(e.fact_text, q.answer)) ++verbatim;
      }
    }
  }
  std::set<std::string> train_ents, train_rels;
  for (const auto& e : data.train)
    for (const auto& q : e.prop_qas) {
      train_ents.insert(q.object);
      train_rels.insert(q.relation);
    }
  int violations = 0;
  for (const auto& e : data.ood_entity)
    for (const auto& q : e.prop_qas) violations += train_ents.count(q.object) + !train_rels.count(q.relation);
  for (const auto& e : data.ood_relation)
    for (const auto& q : e.prop_qas) violations += train_rels.count(q.relation) + !train_ents.count(q.object);
  for (const auto& e : data.ood_both)
    for (const auto& q : e.prop_qas) violations += train_rels.count(q.relation) + train_ents.count(q.object);

  auto dir = fs::temp_directory_path() / "propedit_acceptance_c10";
  fs::remove_all(dir);
  std::map<std::string, std::string> first;
  bool identical = true;
  for (int run = 0; run < 2; ++run) {
    auto d = split_dataset(build_world(ws), ds);
    for (const auto& name : Dataset::split_names()) {
      auto f = dir / std::to_string(run) / (name + ".jsonl");
      write_episodes(f, d.split(name));
      auto h = sha256_file(f);
      if (run == 0) first[name] = h;
      else identical = identical && first[name] == h;
    }
  }
  fs::remove_all(dir);
  report(10, verbatim == 0 && violations == 0 && identical,
         fmt("verbatim %.0f/%.0f, OOD set violations %.0f, regeneration hash-identical %.0f",
             verbatim, eff, violations, identical ? 1 : 0));
}

// 5-7: the full pipeline on the toy world.
void end_to_end(const fs::path& dir) {
  auto t0 = std::chrono::steady_clock::now();
  auto logger = [t0](const std::string& m) {
    std::fprintf(stderr, "[%7.1fs] %s\n", seconds_since(t0), m.c_str());
  };
  RunConfig cfg = RunConfig::toy();
  Pipeline p{cfg, dir, logger};
  p.datagen();
  p.pretrain();
  const double mt0 = seconds_since(t0);
  p.metatrain("propmend");
  const double mt_seconds = seconds_since(t0) - mt0;
  Pipeline para = p;
  para.cfg.metatrain.outer_mode = OuterMode::Paraphrase;
  para.metatrain("propmend_paraphrase");

  std::map<std::string, EvalReport> rep;
  for (const auto& ed : {"base", "cpt-full", "propmend", "propmend_paraphrase"}) {
    p.eval(ed, "id", &rep[ed]);
  }
  EvalReport ood;
  p.eval("propmend", "ood_both", &ood);
  EvalReport base_ood;
  p.eval("base", "ood_both", &base_ood);

  const double base_e = rep["base"].efficacy_em(), cpt_e = rep["cpt-full"].efficacy_em();
  const double pm_e = rep["propmend"].efficacy_em(), para_e = rep["propmend_paraphrase"].efficacy_em();
  const double base_s = rep["base"].specificity_em(), pm_s = rep["propmend"].specificity_em();
  std::vector<EvalReport> rows{rep["base"], rep["cpt-full"], rep["propmend_paraphrase"], rep["propmend"]};
  std::fprintf(stderr, "%s", format_table(rows).c_str());
  auto sig = paired_bootstrap(rep["propmend"].scores(true), rep["cpt-full"].scores(true), 10000, 0);

  report(5, mt_seconds <= 7200.0 && pm_e >= base_e + 0.30 && pm_e >= cpt_e + 0.20 && pm_s >= base_s - 0.10,
         fmt("ID efficacy base %.3f, cpt-full %.3f, propmend %.3f; specificity base %.3f", base_e, cpt_e,
             pm_e, base_s) +
             fmt(", propmend %.3f; bootstrap p vs cpt %.4f; metatrain %.0fs", pm_s, sig.p_value, mt_seconds));
  report(6, pm_e - para_e >= 0.20,
         fmt("ID efficacy propagation %.3f vs paraphrase %.3f (drop %.3f, need >= 0.20)", pm_e, para_e,
             pm_e - para_e));
  const double ood_e = ood.efficacy_em();
  report(7, ood_e < pm_e,
         fmt("OOD_both efficacy %.3f < ID %.3f (base on OOD_both %.3f, recorded only)", ood_e, pm_e,
             base_ood.efficacy_em()));
}

}  // namespace

int main(int argc, char** argv) {
  bool fast = false;
  std::string e2e_dir;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--fast") == 0) fast = true;
    else if (std::strcmp(argv[i], "--e2e") == 0 && i + 1 < argc) e2e_dir = argv[++i];
  }
  if (!fast && e2e_dir.empty()) fast = true;
  if (fast) {
    run(1, criterion1);
    run(2, criterion2);
    run(3, criterion3);
    run(4, criterion4);
    run(8, criterion8);
    run(9, criterion9);
    run(10, criterion10);
  }
  if (!e2e_dir.empty()) {
    try {
      end_to_end(e2e_dir);
    } catch (const std::exception& e) {
      for (int id : {5, 6, 7}) report(id, false, std::string("exception: ") + e.what());
    }
  }
  return failures == 0 ? 0 : 1;
}
