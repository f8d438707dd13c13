#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "propedit/errors.hpp"
#include "propedit/metatrain.hpp"
#include "propedit/prompt_format.hpp"
#include "test_util.hpp"

using namespace propedit;
using propedit::testing::rich_model;
using propedit::testing::tiny_config;

namespace {

const std::vector<std::string> kFirst{"lena", "omar", "ira", "tom", "eva"};
const std::vector<std::string> kLast{"kovar", "dunn", "pratt", "sol", "mave", "rusk", "yell", "bo",
                                     "nim", "tesh"};
const std::vector<std::string> kCompany{"vorta", "zelk", "quon", "brix", "tamo"};
const std::vector<std::string> kCity{"pell", "doru", "fenn", "kasa", "lomi"};

Tokenizer fixture_tokenizer() {
  std::vector<std::string> words{"works", "at",   "where", "is",     "the", "company", "that",
                                 "based", "?",    "of",    "employer", "q", "a",    ":",
                                 "."};
  for (const auto* list : {&kFirst, &kLast, &kCompany, &kCity})
    words.insert(words.end(), list->begin(), list->end());
  return Tokenizer(words);
}

std::vector<EpisodeBatch> fixture_episodes(int n) {
  std::vector<EpisodeBatch> out;
  for (int i = 0; i < n; ++i) {
    std::string person = kFirst[i % 5] + " " + kLast[(i / 5) % 10];
    int c = (i * 3 + i / 5) % 5;
    EpisodeBatch ep;
    ep.id = i;
    ep.fact_text = person + " works at " + kCompany[c] + " .";
    ep.atomic_facts = {{person + " works at", kCompany[c]}};
    ep.prop_qas = {{"where is the company that " + person + " works at based ?", kCity[c]}};
    ep.paraphrase = "the employer of " + person + " is";
    ep.loc_prompts = {"where is " + kCompany[(c + 1) % 5] + " based ?",
                      "where is " + kCompany[(c + 3) % 5] + " based ?"};
    out.push_back(ep);
  }
  return out;
}

struct Fixture {
  Tokenizer tok = fixture_tokenizer();
  ModelConfig mc;
  WeightCatalog base;
  MetaTrainConfig cfg;
  HypernetConfig hc;

  explicit Fixture(double scale = 3.0) {
    mc = tiny_config();
    mc.vocab_size = tok.vocab_size();
    mc.max_seq_len = 32;
    base = rich_model(mc, scale);
    hc.hidden_dim = 10;
    cfg.lr_phi = 1e-3;
    cfg.lr_alpha = 1e-2;
    cfg.batch_size = 4;
  }
  HypernetParams phi(std::uint64_t seed = 0) const {
    return init_hypernet(mc, TargetSpec::layer_range(0, 1), hc, seed);
  }
};

}  // namespace

TEST(OuterLoss, UneditedModelHasZeroLocality) {
  Fixture f;
  auto eps = fixture_episodes(3);
  for (const auto& ep : eps) {
    auto l = outer_loss(f.base, f.base, ep, f.cfg, f.tok);
    EXPECT_LE(std::abs(l.loc), 1e-12);
    EXPECT_EQ(l.total, f.cfg.c_edit * l.edit + l.loc);
    EXPECT_GT(l.edit, 0.0);
  }
}

TEST(OuterLoss, ZeroEditCoefficientLeavesLocality) {
  Fixture f;
  f.cfg.c_edit = 0.0;
  auto ep = fixture_episodes(1)[0];
  auto phi = f.phi();
  phi.set_alpha({0, WeightKind::MlpUp}, 2.0);
  auto edited = edit(f.base, phi, prepare_episode(ep, f.tok, f.cfg).inner);
  auto l = outer_loss(f.base, edited, ep, f.cfg, f.tok);
  EXPECT_GT(l.loc, 0.0);
  EXPECT_EQ(l.total, l.loc);
}

TEST(OuterLoss, EditTermIsMeanNegativeLogProb) {
  std::vector<double> lp{-1.0, -3.0};
  EXPECT_DOUBLE_EQ(edit_loss_from_logprobs(lp), 2.0);
  EXPECT_THROW(edit_loss_from_logprobs({}), ArgumentError);
}

TEST(OuterLoss, EditTermMatchesSummedAnswerLogProb) {
  Fixture f;
  auto ep = fixture_episodes(1)[0];
  ep.prop_qas.push_back({"where is vorta based ?", "pell"});
  auto l = outer_loss(f.base, f.base, ep, f.cfg, f.tok);
  double want = 0.0;
  for (const auto& [q, a] : ep.prop_qas) {
    auto prompt = question_prompt(f.tok, q);
    auto ans = f.tok.encode(a);
    ans.push_back(Tokenizer::kEos);
    auto seq = prompt;
    seq.insert(seq.end(), ans.begin(), ans.end());
    Matrix lp = log_softmax_rows(logits(f.base, seq));
    for (std::size_t k = 0; k < ans.size(); ++k) want -= lp(prompt.size() - 1 + k, ans[k]);
  }
  EXPECT_NEAR(l.edit, want / 2.0, 1e-12);
}

TEST(OuterLoss, ModeFieldMismatch) {
  Fixture f;
  auto ep = fixture_episodes(1)[0];
  auto no_prop = ep;
  no_prop.prop_qas.clear();
  EXPECT_THROW(prepare_episode(no_prop, f.tok, f.cfg), ArgumentError);
  auto para = f.cfg;
  para.outer_mode = OuterMode::Paraphrase;
  EXPECT_NO_THROW(prepare_episode(no_prop, f.tok, para));
  auto no_para = ep;
  no_para.paraphrase.clear();
  EXPECT_THROW(prepare_episode(no_para, f.tok, para), ArgumentError);
  auto no_loc = ep;
  no_loc.loc_prompts.clear();
  EXPECT_THROW(prepare_episode(no_loc, f.tok, f.cfg), ArgumentError);
  auto sft = f.cfg;
  sft.inner_mode = InnerMode::SftAtomic;
  auto no_atomic = ep;
  no_atomic.atomic_facts.clear();
  EXPECT_THROW(prepare_episode(no_atomic, f.tok, sft), ArgumentError);
}

TEST(OuterLoss, WeightGradientMatchesFiniteDifferences) {
  Fixture f;
  auto ep = prepare_episode(fixture_episodes(1)[0], f.tok, f.cfg);
  auto phi = f.phi();
  for (const auto& r : phi.targets().refs) phi.set_alpha(r, 1.0);
  auto edited = edit(f.base, phi, ep.inner);
  const auto& refs = phi.targets().refs;
  std::map<WeightRef, Matrix> G;
  outer_loss(f.base, edited, ep, f.cfg, refs, &G);

  std::mt19937_64 rng(3);
  for (const auto& r : refs) {
    const Matrix& W = edited.weight(r);
    std::uniform_int_distribution<Eigen::Index> row(0, W.rows() - 1), col(0, W.cols() - 1);
    for (int k = 0; k < 10; ++k) {
      Eigen::Index i = row(rng), j = col(rng);
      auto p = edited, m = edited;
      Matrix wp = W, wm = W;
      wp(i, j) += 1e-5;
      wm(i, j) -= 1e-5;
      p.set_weight(r, wp);
      m.set_weight(r, wm);
      double fd = (outer_loss(f.base, p, ep, f.cfg).total - outer_loss(f.base, m, ep, f.cfg).total) /
                  2e-5;
      EXPECT_NEAR(G.at(r)(i, j), fd, 1e-7 + 1e-5 * std::abs(fd));
    }
  }
}

TEST(MetaStep, ZeroLearningRatesKeepPhi) {
  Fixture f;
  f.cfg.lr_phi = 0.0;
  f.cfg.lr_alpha = 0.0;
  auto eps = prepare_episodes(fixture_episodes(4), f.tok, f.cfg);
  auto phi0 = f.phi();
  auto base_copy = f.base;
  MetaLearner learner(phi0, f.cfg);
  auto m = learner.step(f.base, eps);
  EXPECT_TRUE(learner.phi().bit_equal(phi0));
  EXPECT_GT(m.grad_norm, 0.0);
  EXPECT_EQ(learner.optimizer().steps_taken(), 1);
  EXPECT_TRUE(f.base.bit_equal(base_copy));
}

TEST(MetaStep, OneStepChangesTheTransform) {
  Fixture f;
  auto eps = prepare_episodes(fixture_episodes(4), f.tok, f.cfg);
  MetaLearner learner(f.phi(), f.cfg);
  WeightRef ref{1, WeightKind::MlpDown};
  auto cap = capture(f.base, eps[0].inner, TargetSpec{{ref}});
  const auto& g = cap.grads.at(ref);
  auto before = transform(learner.phi(), ref, g.U, g.D);
  learner.step(f.base, eps);
  auto after = transform(learner.phi(), ref, g.U, g.D);
  EXPECT_TRUE(before.first == g.U && before.second == g.D);
  EXPECT_FALSE(after.first == before.first && after.second == before.second);
}

TEST(MetaStep, NonFiniteLossReportsEpisode) {
  Fixture f;
  auto eps = prepare_episodes(fixture_episodes(3), f.tok, f.cfg);
  eps[1].id = 77;
  auto bad = f.base;
  auto& un = bad.mutable_tensor(bad.layout().unembed);
  un(5, 0) = std::numeric_limits<double>::quiet_NaN();
  MetaLearner learner(f.phi(), f.cfg);
  try {
    learner.step(bad, std::span<const PreparedEpisode>(eps).subspan(1, 1));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.where(), 77);
  }
}

namespace {

// Loss at phi and a central-difference gradient for sampled entries,
// computed by re-running the whole edit at perturbed parameters.
double mean_total(const HypernetParams& phi, const WeightCatalog& base,
                  const std::vector<PreparedEpisode>& eps, const MetaTrainConfig& cfg) {
  double s = 0.0;
  for (const auto& ep : eps) {
    auto edited = edit(base, phi, ep.inner);
    s += outer_loss(base, edited, ep, cfg).total;
  }
  return s / static_cast<double>(eps.size());
}

}  // namespace

TEST(MetaStep, MetaGradientMatchesFiniteDifferences) {
  Fixture f;
  f.cfg.c_edit = 0.5;
  auto eps = prepare_episodes(fixture_episodes(2), f.tok, f.cfg);
  auto phi = f.phi(5);
  perturb_hypernet(phi, 0.1, 6);
  for (const auto& r : phi.targets().refs) phi.set_alpha(r, 0.5);

  auto grads = zeros_like(phi);
  for (const auto& ep : eps) episode_loss(phi, f.base, ep, f.cfg, &grads);
  for (auto& g : grads) g /= 2.0;

  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> pick(0, phi.size() - 1);
  Vector a(200), n(200);
  for (int e = 0; e < 200; ++e) {
    std::size_t i = pick(rng);
    std::uniform_int_distribution<Eigen::Index> at(0, phi.value(i).size() - 1);
    Eigen::Index k = at(rng);
    auto p = phi;
    const double x = p.value(i).data()[k];
    p.value(i).data()[k] = x + 1e-4;
    double up = mean_total(p, f.base, eps, f.cfg);
    p.value(i).data()[k] = x - 1e-4;
    double down = mean_total(p, f.base, eps, f.cfg);
    n[e] = (up - down) / 2e-4;
    a[e] = grads[i].data()[k];
  }
  double rel = (a - n).norm() / std::max(a.norm(), n.norm());
  EXPECT_LE(rel, 1e-3);
  EXPECT_GT(a.norm(), 1e-8);

  auto lib = check_meta_gradient(phi, f.base, eps, f.cfg, 60, 1e-4, 1);
  EXPECT_LE(lib.rel_error, 1e-3);
  EXPECT_EQ(lib.entries, 60);
}

TEST(Train, ZeroStepsReturnsInitialPhi) {
  Fixture f;
  f.cfg.max_steps = 0;
  auto eps = prepare_episodes(fixture_episodes(6), f.tok, f.cfg);
  auto phi0 = f.phi();
  auto r = train(phi0, f.base, eps, eps, f.cfg);
  EXPECT_TRUE(r.best.bit_equal(phi0));
  EXPECT_EQ(r.steps_run, 0);
}

TEST(Train, EmptySplitsAreRejected) {
  Fixture f;
  auto eps = prepare_episodes(fixture_episodes(2), f.tok, f.cfg);
  EXPECT_THROW(train(f.phi(), f.base, {}, eps, f.cfg), ArgumentError);
  EXPECT_THROW(train(f.phi(), f.base, eps, {}, f.cfg), ArgumentError);
}

TEST(Train, FrozenValidationTriggersPatience) {
  Fixture f;
  f.cfg.max_steps = 1000;
  f.cfg.val_every = 3;
  f.cfg.patience_steps = 7;
  f.cfg.batch_size = 1;
  auto eps = prepare_episodes(fixture_episodes(3), f.tok, f.cfg);
  TrainOptions opt;
  opt.validator = [](const HypernetParams&) { return 1.0; };
  auto r = train(f.phi(), f.base, eps, eps, f.cfg, opt);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_LE(r.steps_run, f.cfg.patience_steps + f.cfg.val_every);
  EXPECT_EQ(r.best_step, 0);
}

TEST(Train, LossDropsOnToyEpisodes) {
  Fixture f;
  f.cfg.max_steps = 200;
  f.cfg.batch_size = 10;
  f.cfg.val_every = 50;
  f.cfg.patience_steps = 1000;
  f.cfg.c_edit = 1.0;
  f.hc.alpha_init = 0.05;
  auto eps = prepare_episodes(fixture_episodes(50), f.tok, f.cfg);
  auto phi0 = f.phi();
  auto mean_edit = [&](const HypernetParams& p) {
    double s = 0.0;
    for (const auto& ep : eps) s += episode_loss(p, f.base, ep, f.cfg).edit;
    return s / static_cast<double>(eps.size());
  };
  auto r = train(phi0, f.base, eps, eps, f.cfg);
  EXPECT_EQ(r.steps_run, 200);
  EXPECT_LT(mean_edit(r.best), mean_edit(phi0));
  ASSERT_GE(r.log.size(), 2u);
  EXPECT_LT(r.log.back().edit, r.log[1].edit);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  Fixture f;
  f.cfg.val_every = 5;
  f.cfg.batch_size = 3;
  auto eps = prepare_episodes(fixture_episodes(8), f.tok, f.cfg);
  auto tmp = std::filesystem::temp_directory_path() / "propedit_resume";
  std::filesystem::remove_all(tmp);

  f.cfg.max_steps = 20;
  auto full = train(f.phi(), f.base, eps, eps, f.cfg);

  TrainOptions opt;
  opt.checkpoint_dir = tmp / "ckpt";
  opt.log_path = tmp / "log.jsonl";
  f.cfg.max_steps = 10;
  train(f.phi(), f.base, eps, eps, f.cfg, opt);
  f.cfg.max_steps = 20;
  auto resumed = train(f.phi(), f.base, eps, eps, f.cfg, opt);

  EXPECT_EQ(resumed.steps_run, 20);
  EXPECT_TRUE(resumed.best.bit_equal(full.best));
  EXPECT_EQ(resumed.best_step, full.best_step);

  std::ifstream in(opt.log_path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("L_e") && j.contains("L_loc") && j.contains("grad_norm") &&
                j.contains("val_total"));
    ++lines;
  }
  EXPECT_EQ(lines, 21);  // step-0 validation plus 20 steps
  std::filesystem::remove_all(tmp);
}

TEST(Train, BatchIndicesVisitEveryEpisodeOncePerEpoch) {
  std::multiset<std::size_t> seen;
  for (int s = 0; s < 4; ++s)
    for (auto i : batch_indices(12, 3, s, 5)) seen.insert(i);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(seen.count(i), 1u);
  EXPECT_EQ(batch_indices(12, 3, 2, 5), batch_indices(12, 3, 2, 5));
  EXPECT_NE(batch_indices(12, 3, 0, 5), batch_indices(12, 3, 0, 6));
}

TEST(MetaTrainConfig, JsonRoundTripAndValidation) {
  MetaTrainConfig c;
  c.outer_mode = OuterMode::Paraphrase;
  c.inner_mode = InnerMode::SftAtomic;
  c.lr_phi = 3e-5;
  nlohmann::json j = c;
  auto back = j.get<MetaTrainConfig>();
  EXPECT_EQ(back.outer_mode, OuterMode::Paraphrase);
  EXPECT_EQ(back.inner_mode, InnerMode::SftAtomic);
  EXPECT_EQ(back.lr_phi, 3e-5);
  EXPECT_EQ(MetaTrainConfig{}.c_edit, 0.1);
  EXPECT_EQ(MetaTrainConfig{}.lr_phi, 1e-6);
  EXPECT_EQ(MetaTrainConfig{}.lr_alpha, 1e-4);
  EXPECT_EQ(MetaTrainConfig{}.batch_size, 10);
  EXPECT_EQ(MetaTrainConfig{}.val_every, 100);
  EXPECT_EQ(MetaTrainConfig{}.patience_steps, 2000);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(outer_mode_from_string("both"), ConfigError);
}
