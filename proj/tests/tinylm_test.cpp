#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "propedit/errors.hpp"
#include "propedit/tinylm.hpp"
#include "test_util.hpp"

using namespace propedit;
using propedit::testing::random_tokens;
using propedit::testing::rich_model;
using propedit::testing::tiny_config;

namespace {

// Independent per-position log-probability: log-sum-exp in long double over
// every vocabulary entry of the raw logits.
double oracle_nll(const Matrix& lg, const TokenSeq& seq) {
  long double total = 0.0L;
  int n = 0;
  for (std::size_t t = 1; t < seq.size(); ++t) {
    if (!seq.loss_mask[t]) continue;
    long double sum = 0.0L;
    for (Eigen::Index v = 0; v < lg.cols(); ++v) sum += std::exp(static_cast<long double>(lg(t - 1, v)));
    total += std::log(sum) - lg(t - 1, seq.tokens[t]);
    ++n;
  }
  return static_cast<double>(total / n);
}

double oracle_kl(const Matrix& base_lg, const Matrix& edit_lg) {
  long double total = 0.0L;
  for (Eigen::Index t = 0; t < base_lg.rows(); ++t) {
    long double zp = 0.0L, zq = 0.0L;
    for (Eigen::Index v = 0; v < base_lg.cols(); ++v) {
      zp += std::exp(static_cast<long double>(base_lg(t, v)));
      zq += std::exp(static_cast<long double>(edit_lg(t, v)));
    }
    for (Eigen::Index v = 0; v < base_lg.cols(); ++v) {
      long double p = std::exp(static_cast<long double>(base_lg(t, v))) / zp;
      long double q = std::exp(static_cast<long double>(edit_lg(t, v))) / zq;
      total += p * std::log(p / q);
    }
  }
  return static_cast<double>(total / base_lg.rows());
}

}  // namespace

TEST(BuildModel, DeterministicForSameSeed) {
  auto c = tiny_config();
  c.d_model = 32;
  c.n_heads = 4;
  EXPECT_TRUE(build_model(c).bit_equal(build_model(c)));
  auto c2 = c;
  c2.seed = 8;
  EXPECT_FALSE(build_model(c).bit_equal(build_model(c2)));
}

TEST(BuildModel, EnumeratesTwoEditableMatricesPerLayer) {
  auto c = tiny_config(4);
  auto w = build_model(c);
  auto refs = w.editable_refs();
  ASSERT_EQ(refs.size(), 8u);
  for (const auto& r : refs) {
    const auto& m = w.weight(r);
    if (r.kind == WeightKind::MlpUp) {
      EXPECT_EQ(m.rows(), c.d_mlp);
      EXPECT_EQ(m.cols(), c.d_model);
    } else {
      EXPECT_EQ(m.rows(), c.d_model);
      EXPECT_EQ(m.cols(), c.d_mlp);
    }
  }
  EXPECT_THROW(w.weight({4, WeightKind::MlpUp}), LookupError);
}

TEST(BuildModel, RejectsIndivisibleHeads) {
  auto c = tiny_config();
  c.d_model = 30;
  c.n_heads = 4;
  EXPECT_THROW(build_model(c), ConfigError);
  c = tiny_config();
  c.n_layers = 0;
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(WeightRefTest, NameRoundTrip) {
  WeightRef r{3, WeightKind::MlpDown};
  EXPECT_EQ(r.name(), "layers.3.mlp_down.weight");
  EXPECT_EQ(WeightRef::parse(r.name()), r);
  EXPECT_THROW(WeightRef::parse("tok_emb"), ArgumentError);
}

TEST(ClmLoss, UniformLogitsGiveLogVocab) {
  auto c = tiny_config();
  c.vocab_size = 16;
  auto w = build_model(c);
  w.mutable_tensor(w.layout().unembed).setZero();
  auto seq = TokenSeq::all_targets({1, 5, 6, 7, 8, 9});
  ASSERT_EQ(seq.num_targets(), 5u);
  EXPECT_NEAR(clm_loss(w, seq), std::log(16.0), 1e-12);
}

TEST(ClmLoss, AnswerOnlyMaskScoresOnlyThosePositions) {
  auto c = tiny_config();
  auto w = rich_model(c);
  auto seq = TokenSeq::prompt_answer({1, 4, 9, 12, 5}, {20, 2});
  ASSERT_EQ(seq.num_targets(), 2u);
  Matrix lg = logits(w, seq.tokens);
  EXPECT_NEAR(clm_loss(w, seq), oracle_nll(lg, seq), 1e-10);
  auto all = TokenSeq::all_targets(seq.tokens);
  EXPECT_GT(std::abs(clm_loss(w, all) - clm_loss(w, seq)), 1e-6);
}

TEST(ClmLoss, MatchesLogSoftmaxGatherOracle) {
  auto w = rich_model(tiny_config());
  auto seq = TokenSeq::all_targets({1, 17, 4});
  Matrix lg = logits(w, seq.tokens);
  EXPECT_NEAR(clm_loss(w, seq), oracle_nll(lg, seq), 1e-10);
  EXPECT_GE(clm_loss(w, seq), 0.0);
}

TEST(ClmLoss, EmptyMaskIsArgumentError) {
  auto w = build_model(tiny_config());
  TokenSeq seq{{1, 4, 5}, {0, 0, 0}};
  EXPECT_THROW(clm_loss(w, seq), ArgumentError);
}

TEST(ClmLoss, SoftmaxRowsSumToOne) {
  auto w = rich_model(tiny_config());
  std::mt19937_64 rng(3);
  auto toks = random_tokens(rng, 12, w.config().vocab_size);
  Matrix lp = log_softmax_rows(logits(w, toks));
  for (Eigen::Index t = 0; t < lp.rows(); ++t) EXPECT_NEAR(lp.row(t).array().exp().sum(), 1.0, 1e-6);
}

TEST(ClmLoss, AnalyticGradientMatchesCentralDifferences) {
  auto w = rich_model(tiny_config());
  std::mt19937_64 rng(11);
  std::vector<TokenSeq> batch = {TokenSeq::all_targets(random_tokens(rng, 9, 29)),
                                 TokenSeq::prompt_answer(random_tokens(rng, 6, 29), {8, 2})};
  auto lg = clm_loss_and_grad(w, batch);

  std::uniform_int_distribution<std::size_t> pick_tensor(0, w.size() - 1);
  const double h = 1e-5;
  double worst = 0.0;
  for (int s = 0; s < 120; ++s) {
    std::size_t ti = pick_tensor(rng);
    std::uniform_int_distribution<Eigen::Index> pick(0, w.tensor(ti).size() - 1);
    Eigen::Index k = pick(rng);
    double an = lg.grads.g[ti].data()[k];
    WeightCatalog wp = w, wm = w;
    wp.mutable_tensor(ti).data()[k] += h;
    wm.mutable_tensor(ti).data()[k] -= h;
    double fd = (clm_loss(wp, batch) - clm_loss(wm, batch)) / (2 * h);
    double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, rel);
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(GreedyDecode, ZeroStepsIsEmpty) {
  auto w = build_model(tiny_config());
  std::vector<int> prompt{1, 4, 5};
  EXPECT_TRUE(greedy_decode(w, prompt, 0).empty());
}

TEST(GreedyDecode, StopsImmediatelyOnEos) {
  auto c = tiny_config();
  auto w = build_model(c);
  w.mutable_tensor(w.layout().lnf_gain).setZero();
  w.mutable_tensor(w.layout().lnf_bias).setOnes();
  auto& un = w.mutable_tensor(w.layout().unembed);
  un.setZero();
  un.row(2).setConstant(10.0);
  std::vector<int> prompt{1, 4};
  EXPECT_TRUE(greedy_decode(w, prompt, 20, 2).empty());
}

TEST(GreedyDecode, TiesGoToLowestId) {
  auto w = build_model(tiny_config());
  w.mutable_tensor(w.layout().unembed).setZero();
  std::vector<int> prompt{1};
  auto out = greedy_decode(w, prompt, 3, 2);
  EXPECT_EQ(out, (std::vector<int>{0, 0, 0}));
}

TEST(GreedyDecode, MatchesStepwiseArgmaxOracle) {
  auto w = rich_model(tiny_config(), 4.0);
  std::mt19937_64 rng(5);
  for (int p = 0; p < 10; ++p) {
    auto prompt = random_tokens(rng, 3 + p % 4, 29);
    auto got = greedy_decode(w, prompt, 8, 2);
    std::vector<int> seq = prompt, want;
    for (int step = 0; step < 8; ++step) {
      Matrix lg = logits(w, seq);
      Eigen::Index best;
      lg.row(lg.rows() - 1).maxCoeff(&best);
      if (best == 2) break;
      want.push_back(static_cast<int>(best));
      seq.push_back(static_cast<int>(best));
    }
    EXPECT_EQ(got, want) << "prompt " << p;
  }
}

TEST(GreedyDecode, RejectsOverlongPrompt) {
  auto w = build_model(tiny_config());
  std::vector<int> prompt(w.config().max_seq_len + 1, 4);
  EXPECT_THROW(greedy_decode(w, prompt, 1), ArgumentError);
  EXPECT_THROW(greedy_decode(w, std::vector<int>{}, 1), ArgumentError);
}

TEST(KlNextToken, ZeroForIdenticalModels) {
  auto w = rich_model(tiny_config());
  std::vector<int> prompt{1, 5, 9, 3};
  EXPECT_EQ(kl_next_token(w, w, prompt), 0.0);
}

TEST(KlNextToken, ClosedFormTwoOutcomes) {
  Matrix ref(1, 2), lg(1, 2);
  ref << std::log(0.5), std::log(0.5);
  lg << std::log(0.25), std::log(0.75);
  double kl = add_kl(ref, lg, 1.0, nullptr);
  EXPECT_NEAR(kl, 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-15);
}

TEST(KlNextToken, MatchesFullVocabularyOracle) {
  auto base = rich_model(tiny_config(2, 7));
  auto edited = rich_model(tiny_config(2, 9));
  std::vector<int> prompt{1, 6, 22, 13, 4, 9};
  double kl = kl_next_token(base, edited, prompt);
  EXPECT_GT(kl, 0.0);
  EXPECT_NEAR(kl, oracle_kl(logits(base, prompt), logits(edited, prompt)), 1e-9);
}

TEST(KlNextToken, MismatchedConfigsRejected) {
  auto a = build_model(tiny_config(2));
  auto b = build_model(tiny_config(3));
  std::vector<int> prompt{1, 4};
  EXPECT_THROW(kl_next_token(a, b, prompt), ArgumentError);
}

TEST(Forward, RepeatedCallsBitMatch) {
  auto w = rich_model(tiny_config());
  std::vector<int> toks{1, 5, 8, 20, 11};
  Matrix a = logits(w, toks), b = logits(w, toks);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(Pretrain, ZeroStepsReturnsInitialization) {
  auto c = tiny_config();
  std::vector<TokenSeq> corpus{TokenSeq::all_targets({1, 4, 5, 2})};
  PretrainOptions opt;
  opt.steps = 0;
  EXPECT_TRUE(pretrain(c, corpus, opt).bit_equal(build_model(c)));
  EXPECT_THROW(pretrain(c, std::vector<TokenSeq>{}, opt), ArgumentError);
}

TEST(Pretrain, LossDecreasesOnFiftyFacts) {
  auto c = tiny_config();
  c.vocab_size = 60;
  std::mt19937_64 rng(2);
  std::vector<TokenSeq> corpus;
  for (int i = 0; i < 50; ++i) {
    auto toks = random_tokens(rng, 4, 60);
    toks.insert(toks.begin(), 1);
    toks.push_back(2);
    corpus.push_back(TokenSeq::all_targets(toks));
  }
  double initial = clm_loss(build_model(c), corpus);
  PretrainOptions opt;
  opt.steps = 500;
  opt.lr = 3e-3;
  opt.batch_size = 8;
  auto w = pretrain(c, corpus, opt);
  EXPECT_LT(clm_loss(w, corpus), initial);
}

TEST(Pretrain, MemorizedSequenceIsReproducedByGreedyDecoding) {
  auto c = tiny_config();
  std::vector<int> toks{1, 7, 19, 4, 11, 25, 6, 2};
  std::vector<TokenSeq> corpus{TokenSeq::all_targets(toks)};
  PretrainOptions opt;
  opt.steps = 300;
  opt.lr = 1e-2;
  opt.batch_size = 1;
  auto w = pretrain(c, corpus, opt);
  ASSERT_LT(clm_loss(w, corpus), 0.01);
  auto out = greedy_decode(w, std::vector<int>{1}, 20, 2);
  EXPECT_EQ(out, (std::vector<int>{7, 19, 4, 11, 25, 6}));
}

TEST(Pretrain, NonFiniteLossReportsStep) {
  auto c = tiny_config();
  std::vector<TokenSeq> corpus{TokenSeq::all_targets({1, 4, 5, 2})};
  PretrainOptions opt;
  opt.steps = 5;
  opt.lr = std::numeric_limits<double>::quiet_NaN();
  try {
    pretrain(c, corpus, opt);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.where(), 1);
  }
}

TEST(Checkpoint, ArchiveRoundTripIsBitExact) {
  auto w = rich_model(tiny_config());
  auto dir = std::filesystem::temp_directory_path() / "propedit_tinylm_ckpt";
  std::filesystem::remove_all(dir);
  write_archive(dir, w.to_archive());
  auto back = WeightCatalog::from_archive(read_archive(dir));
  EXPECT_TRUE(back.bit_equal(w));
  std::filesystem::remove_all(dir);
}
