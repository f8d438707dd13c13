#include "propedit/metatrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "propedit/errors.hpp"
#include "propedit/prompt_format.hpp"

namespace propedit {

std::string to_string(OuterMode m) {
  return m == OuterMode::Propagation ? "propagation" : "paraphrase";
}

OuterMode outer_mode_from_string(const std::string& s) {
  if (s == "propagation") return OuterMode::Propagation;
  if (s == "paraphrase") return OuterMode::Paraphrase;
  throw ConfigError("unknown outer mode: " + s);
}

void MetaTrainConfig::validate() const {
  if (!(c_edit >= 0.0)) throw ConfigError("c_edit must be >= 0");
  if (!(lr_phi >= 0.0) || !(lr_alpha >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (val_every < 1) throw ConfigError("val_every must be >= 1");
  if (patience_steps < 0) throw ConfigError("patience_steps must be >= 0");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (val_limit < 0) throw ConfigError("val_limit must be >= 0");
}

void to_json(nlohmann::json& j, const MetaTrainConfig& c) {
  j = {{"c_edit", c.c_edit},
       {"outer_mode", to_string(c.outer_mode)},
       {"inner_mode", to_string(c.inner_mode)},
       {"lr_phi", c.lr_phi},
       {"lr_alpha", c.lr_alpha},
       {"batch_size", c.batch_size},
       {"val_every", c.val_every},
       {"patience_steps", c.patience_steps},
       {"max_steps", c.max_steps},
       {"val_limit", c.val_limit},
       {"max_grad_norm", c.max_grad_norm},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, MetaTrainConfig& c) {
  MetaTrainConfig d;
  c.c_edit = j.value("c_edit", d.c_edit);
  c.outer_mode = outer_mode_from_string(j.value("outer_mode", to_string(d.outer_mode)));
  c.inner_mode = inner_mode_from_string(j.value("inner_mode", to_string(d.inner_mode)));
  c.lr_phi = j.value("lr_phi", d.lr_phi);
  c.lr_alpha = j.value("lr_alpha", d.lr_alpha);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.val_every = j.value("val_every", d.val_every);
  c.patience_steps = j.value("patience_steps", d.patience_steps);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.val_limit = j.value("val_limit", d.val_limit);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  c.seed = j.value("seed", d.seed);
}

PreparedEpisode prepare_episode(const EpisodeBatch& ep, const Tokenizer& tok,
                                const MetaTrainConfig& cfg) {
  PreparedEpisode p;
  p.id = ep.id;
  EditRequest req{cfg.inner_mode, ep.fact_text, ep.atomic_facts};
  p.inner = req.inner_batch(tok);

  if (cfg.outer_mode == OuterMode::Propagation) {
    if (ep.prop_qas.empty())
      throw ArgumentError("episode " + std::to_string(ep.id) + ": propagation mode needs prop_qas");
    for (const auto& [q, a] : ep.prop_qas) p.outer.push_back(qa_seq(tok, q, a));
  } else {
    if (ep.paraphrase.empty() || ep.atomic_facts.empty())
      throw ArgumentError("episode " + std::to_string(ep.id) +
                          ": paraphrase mode needs a paraphrase and an atomic fact");
    p.outer.push_back(atomic_seq(tok, ep.paraphrase, ep.atomic_facts.front().second));
  }
  if (ep.loc_prompts.empty())
    throw ArgumentError("episode " + std::to_string(ep.id) + ": loc_prompts is empty");
  for (const auto& q : ep.loc_prompts) p.loc.push_back(question_prompt(tok, q));
  return p;
}

std::vector<PreparedEpisode> prepare_episodes(std::span<const EpisodeBatch> eps,
                                              const Tokenizer& tok, const MetaTrainConfig& cfg) {
  std::vector<PreparedEpisode> out;
  out.reserve(eps.size());
  for (const auto& e : eps) out.push_back(prepare_episode(e, tok, cfg));
  return out;
}

double edit_loss_from_logprobs(std::span<const double> logprobs) {
  if (logprobs.empty()) throw ArgumentError("edit loss needs at least one term");
  double s = 0.0;
  for (double lp : logprobs) s -= lp;
  return s / static_cast<double>(logprobs.size());
}

OuterLoss outer_loss(const WeightCatalog& base, const WeightCatalog& edited,
                     const PreparedEpisode& ep, const MetaTrainConfig& cfg,
                     std::span<const WeightRef> refs, std::map<WeightRef, Matrix>* weight_grads) {
  if (ep.outer.empty() || ep.loc.empty())
    throw ArgumentError("outer_loss: episode has no edit or locality terms");
  const bool need_grad = weight_grads != nullptr;
  BackwardSpec spec;
  spec.all_params = false;
  spec.weights.assign(refs.begin(), refs.end());
  Gradients g;
  if (need_grad) g = Gradients::zeros_for(edited, refs);

  auto run_backward = [&](const ForwardTrace& tr, const Matrix& dlogits) {
    backward(edited, tr, dlogits, spec, &g);
  };

  OuterLoss out;
  std::vector<double> logps;
  for (const auto& seq : ep.outer) {
    if (need_grad) {
      auto tr = forward(edited, seq.tokens);
      Matrix d = Matrix::Zero(tr.logits.rows(), tr.logits.cols());
      logps.push_back(-add_nll(tr.logits, seq, 1.0, &d));
      d *= cfg.c_edit / static_cast<double>(ep.outer.size());
      run_backward(tr, d);
    } else {
      logps.push_back(-add_nll(logits(edited, seq.tokens), seq, 1.0, nullptr));
    }
  }
  out.edit = edit_loss_from_logprobs(logps);

  const double per_prompt = 1.0 / static_cast<double>(ep.loc.size());
  for (const auto& prompt : ep.loc) {
    Matrix ref = log_softmax_rows(logits(base, prompt));
    const double w = per_prompt / static_cast<double>(prompt.size());
    if (need_grad) {
      auto tr = forward(edited, prompt);
      Matrix d = Matrix::Zero(tr.logits.rows(), tr.logits.cols());
      out.loc += add_kl(ref, tr.logits, w, &d);
      run_backward(tr, d);
    } else {
      out.loc += add_kl(ref, logits(edited, prompt), w, nullptr);
    }
  }
  out.total = cfg.c_edit * out.edit + out.loc;

  if (need_grad) {
    weight_grads->clear();
    for (const auto& r : refs) (*weight_grads)[r] = std::move(g.g[edited.index_of(r)]);
  }
  return out;
}

OuterLoss outer_loss(const WeightCatalog& base, const WeightCatalog& edited,
                     const EpisodeBatch& ep, const MetaTrainConfig& cfg, const Tokenizer& tok) {
  return outer_loss(base, edited, prepare_episode(ep, tok, cfg), cfg);
}

OuterLoss episode_loss(const HypernetParams& phi, const WeightCatalog& base,
                       const PreparedEpisode& ep, const MetaTrainConfig& cfg,
                       std::vector<Matrix>* phi_grads) {
  if (!phi_grads) return outer_loss(base, edit(base, phi, ep.inner), ep, cfg);
  EditTrace trace;
  auto edited = edit(base, phi, ep.inner, &trace);
  std::map<WeightRef, Matrix> G;
  auto loss = outer_loss(base, edited, ep, cfg, phi.targets().refs, &G);
  if (std::isfinite(loss.total)) apply_edit_backward(phi, trace, G, phi_grads);
  return loss;
}

namespace {

std::vector<Matrix*> param_ptrs(HypernetParams& phi) {
  std::vector<Matrix*> p;
  for (std::size_t i = 0; i < phi.size(); ++i) p.push_back(&phi.value(i));
  return p;
}

}  // namespace

MetaLearner::MetaLearner(HypernetParams phi, MetaTrainConfig cfg)
    : phi_(std::move(phi)), cfg_(cfg) {
  cfg_.validate();
  adam_ = Adam(param_ptrs(phi_));
}

StepMetrics MetaLearner::step(const WeightCatalog& base,
                              std::span<const PreparedEpisode> episodes) {
  if (episodes.empty()) throw ArgumentError("meta step needs at least one episode");
  auto grads = zeros_like(phi_);
  StepMetrics m;
  for (const auto& ep : episodes) {
    auto loss = episode_loss(phi_, base, ep, cfg_, &grads);
    if (!std::isfinite(loss.total))
      throw TrainingError("non-finite outer loss in episode " + std::to_string(ep.id), ep.id);
    m.edit += loss.edit;
    m.loc += loss.loc;
    m.total += loss.total;
  }
  const double inv = 1.0 / static_cast<double>(episodes.size());
  m.edit *= inv;
  m.loc *= inv;
  m.total *= inv;
  std::vector<Matrix*> gp;
  for (auto& g : grads) {
    g *= inv;
    gp.push_back(&g);
  }
  m.grad_norm = clip_grad_norm(gp, cfg_.max_grad_norm);

  std::vector<const Matrix*> cg(gp.begin(), gp.end());
  std::vector<double> lrs;
  for (std::size_t i = 0; i < phi_.size(); ++i)
    lrs.push_back(phi_.group(i) == ParamGroup::Alpha ? cfg_.lr_alpha : cfg_.lr_phi);
  adam_.step(param_ptrs(phi_), cg, lrs);
  return m;
}

TensorArchive MetaLearner::to_archive() const {
  TensorArchive a = phi_.to_archive();
  const auto& m = adam_.first_moments();
  const auto& v = adam_.second_moments();
  for (std::size_t i = 0; i < phi_.size(); ++i) {
    a.add("adam.m." + phi_.name(i), m[i]);
    a.add("adam.v." + phi_.name(i), v[i]);
  }
  a.meta["adam_steps"] = adam_.steps_taken();
  a.meta["metatrain_config"] = cfg_;
  return a;
}

void MetaLearner::load_archive(const TensorArchive& a) {
  phi_ = HypernetParams::from_archive(a);
  adam_ = Adam(param_ptrs(phi_));
  auto& m = adam_.first_moments();
  auto& v = adam_.second_moments();
  for (std::size_t i = 0; i < phi_.size(); ++i) {
    m[i] = a.get("adam.m." + phi_.name(i));
    v[i] = a.get("adam.v." + phi_.name(i));
  }
  adam_.set_steps_taken(a.meta.value("adam_steps", std::int64_t{0}));
}

double validation_loss(const HypernetParams& phi, const WeightCatalog& base,
                       std::span<const PreparedEpisode> episodes, const MetaTrainConfig& cfg) {
  std::size_t n = episodes.size();
  if (cfg.val_limit > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.val_limit));
  if (n == 0) throw ArgumentError("validation needs at least one episode");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += episode_loss(phi, base, episodes[i], cfg).total;
  return s / static_cast<double>(n);
}

nlohmann::json to_json(const TrainLogEntry& e) {
  nlohmann::json j = {
      {"step", e.step}, {"L_e", e.edit}, {"L_loc", e.loc}, {"grad_norm", e.grad_norm}};
  j["val_total"] = e.val_total ? nlohmann::json(*e.val_total) : nlohmann::json(nullptr);
  return j;
}

std::vector<std::size_t> batch_indices(std::size_t n, int batch_size, int step,
                                       std::uint64_t seed) {
  if (n == 0) throw ArgumentError("empty training set");
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::size_t> perm(n);
  for (int k = 0; k < batch_size; ++k) {
    std::uint64_t pos = static_cast<std::uint64_t>(step) * batch_size + k;
    std::uint64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + epoch);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

namespace {

struct TrainState {
  int step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int best_step = 0;
};

void save_state(const std::filesystem::path& dir, const MetaLearner& learner,
                const HypernetParams& best, const TrainState& st) {
  auto a = learner.to_archive();
  a.meta["train_state"] = {{"step", st.step}, {"best_val", st.best_val}, {"best_step", st.best_step}};
  write_archive(dir / "current", a);
  save_hypernet(dir / "best", best);
}

}  // namespace

TrainResult train(const HypernetParams& phi0, const WeightCatalog& base,
                  std::span<const PreparedEpisode> train_eps,
                  std::span<const PreparedEpisode> val_eps, const MetaTrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  if (train_eps.empty() || val_eps.empty())
    throw ArgumentError("train needs nonempty train and validation splits");

  MetaLearner learner(phi0, cfg);
  TrainResult res{phi0, 0.0, 0, 0, false, {}};
  TrainState st;

  const bool ckpt = !options.checkpoint_dir.empty();
  bool resumed = false;
  if (ckpt && std::filesystem::exists(options.checkpoint_dir / "current" / "manifest.json")) {
    auto a = read_archive(options.checkpoint_dir / "current");
    learner.load_archive(a);
    const auto& s = a.meta.at("train_state");
    st.step = s.at("step").get<int>();
    st.best_val = s.at("best_val").get<double>();
    st.best_step = s.at("best_step").get<int>();
    res.best = load_hypernet(options.checkpoint_dir / "best");
    resumed = true;
  }

  std::ofstream log;
  if (!options.log_path.empty()) {
    if (options.log_path.has_parent_path())
      std::filesystem::create_directories(options.log_path.parent_path());
    log.open(options.log_path, resumed ? std::ios::app : std::ios::trunc);
  }
  auto emit = [&](const TrainLogEntry& e) {
    res.log.push_back(e);
    if (log.is_open()) log << to_json(e).dump() << '\n' << std::flush;
    if (options.on_log) options.on_log(e);
  };
  auto validate = [&](const HypernetParams& p) {
    return options.validator ? options.validator(p) : validation_loss(p, base, val_eps, cfg);
  };

  if (!resumed) {
    if (cfg.max_steps == 0) {
      res.best_val = validate(phi0);
      return res;
    }
    st.best_val = validate(phi0);
    TrainLogEntry e;
    e.val_total = st.best_val;
    emit(e);
  }

  while (st.step < cfg.max_steps) {
    auto idx = batch_indices(train_eps.size(), cfg.batch_size, st.step, cfg.seed);
    std::vector<PreparedEpisode> batch;
    batch.reserve(idx.size());
    for (auto i : idx) batch.push_back(train_eps[i]);
    auto m = learner.step(base, batch);
    ++st.step;

    TrainLogEntry e{st.step, m.edit, m.loc, m.grad_norm, std::nullopt};
    bool validate_now = st.step % cfg.val_every == 0 || st.step == cfg.max_steps;
    if (validate_now) {
      double v = validate(learner.phi());
      e.val_total = v;
      if (v < st.best_val) {
        st.best_val = v;
        st.best_step = st.step;
        res.best = learner.phi();
      }
    }
    emit(e);
    if (validate_now && ckpt) save_state(options.checkpoint_dir, learner, res.best, st);
    if (validate_now && st.step - st.best_step >= cfg.patience_steps) {
      res.early_stopped = true;
      break;
    }
  }
  res.best_val = st.best_val;
  res.best_step = st.best_step;
  res.steps_run = st.step;
  return res;
}

void perturb_hypernet(HypernetParams& phi, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t i = 0; i < phi.size(); ++i) {
    if (phi.group(i) != ParamGroup::Phi) continue;
    auto& v = phi.value(i);
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += n(rng);
  }
}

MetaGradCheck check_meta_gradient(const HypernetParams& phi, const WeightCatalog& base,
                                  std::span<const PreparedEpisode> episodes,
                                  const MetaTrainConfig& cfg, int n_entries, double h,
                                  std::uint64_t seed) {
  if (episodes.empty()) throw ArgumentError("gradient check needs episodes");
  auto mean_loss = [&](const HypernetParams& p, std::vector<Matrix>* g) {
    double s = 0.0;
    for (const auto& ep : episodes) s += episode_loss(p, base, ep, cfg, g).total;
    return s / static_cast<double>(episodes.size());
  };
  auto grads = zeros_like(phi);
  mean_loss(phi, &grads);
  for (auto& g : grads) g /= static_cast<double>(episodes.size());

  std::vector<std::pair<std::size_t, Eigen::Index>> entries;
  for (std::size_t i = 0; i < phi.size(); ++i)
    if (phi.group(i) == ParamGroup::Alpha) entries.push_back({i, 0});
  std::mt19937_64 rng(seed);
  std::size_t total = 0;
  for (std::size_t i = 0; i < phi.size(); ++i) total += static_cast<std::size_t>(phi.value(i).size());
  std::uniform_int_distribution<std::size_t> flat(0, total - 1);
  while (static_cast<int>(entries.size()) < n_entries) {
    std::size_t f = flat(rng), i = 0;
    while (f >= static_cast<std::size_t>(phi.value(i).size())) f -= phi.value(i++).size();
    entries.push_back({i, static_cast<Eigen::Index>(f)});
  }

  Vector analytic(entries.size()), numeric(entries.size());
  HypernetParams p = phi;
  for (std::size_t e = 0; e < entries.size(); ++e) {
    auto [i, k] = entries[e];
    double x0 = p.value(i).data()[k];
    p.value(i).data()[k] = x0 + h;
    double up = mean_loss(p, nullptr);
    p.value(i).data()[k] = x0 - h;
    double down = mean_loss(p, nullptr);
    p.value(i).data()[k] = x0;
    numeric[e] = (up - down) / (2.0 * h);
    analytic[e] = grads[i].data()[k];
  }
  MetaGradCheck r;
  double denom = std::max(analytic.norm(), numeric.norm());
  r.rel_error = denom > 0.0 ? (analytic - numeric).norm() / denom : 0.0;
  r.analytic_norm = analytic.norm();
  r.entries = static_cast<int>(entries.size());
  return r;
}

}  // namespace propedit
