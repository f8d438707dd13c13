#include "propedit/hypernet.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <set>

#include "propedit/errors.hpp"
#include "propedit/prompt_format.hpp"

namespace propedit {

namespace {

double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double inverse_softplus(double a) {
  if (a == 0.0) return -std::numeric_limits<double>::infinity();
  if (a > 30.0) return a + std::log(-std::expm1(-a));
  return std::log(std::expm1(a));
}

Matrix normal_matrix(std::mt19937_64& rng, int rows, int cols, double std) {
  std::normal_distribution<double> n(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::pair<int, int> pair_dims(const ModelConfig& model, const WeightRef& ref) {
  // (d, m): input dim, output dim of the matrix
  if (ref.kind == WeightKind::MlpUp) return {model.d_model, model.d_mlp};
  return {model.d_mlp, model.d_model};
}

}  // namespace

void HypernetConfig::validate() const {
  if (hidden_dim < 1) throw ConfigError("hypernet hidden_dim must be >= 1");
  if (n_hidden < 1) throw ConfigError("hypernet n_hidden must be >= 1");
  if (activation != "relu") throw ConfigError("unsupported hypernet activation: " + activation);
  if (!(alpha_init >= 0.0) || !std::isfinite(alpha_init))
    throw ConfigError("hypernet alpha_init must be finite and >= 0");
}

void to_json(nlohmann::json& j, const HypernetConfig& c) {
  j = {{"hidden_dim", c.hidden_dim},       {"n_hidden", c.n_hidden},
       {"activation", c.activation},       {"share_params", c.share_params},
       {"identity_init", c.identity_init}, {"alpha_init", c.alpha_init}};
}

void from_json(const nlohmann::json& j, HypernetConfig& c) {
  HypernetConfig d;
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.n_hidden = j.value("n_hidden", d.n_hidden);
  c.activation = j.value("activation", d.activation);
  c.share_params = j.value("share_params", d.share_params);
  c.identity_init = j.value("identity_init", d.identity_init);
  c.alpha_init = j.value("alpha_init", d.alpha_init);
}

std::size_t HypernetParams::add(std::string name, Matrix value, ParamGroup group) {
  std::size_t i = values_.size();
  index_.emplace(name, i);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  groups_.push_back(group);
  return i;
}

std::size_t HypernetParams::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("no hypernet tensor named " + name);
  return it->second;
}

std::size_t HypernetParams::num_scalars() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

const HypernetParams::Target& HypernetParams::target(const WeightRef& ref) const {
  auto it = target_index_.find(ref);
  if (it == target_index_.end()) throw LookupError("hypernet has no target " + ref.name());
  return target_list_[it->second];
}

double HypernetParams::alpha(const WeightRef& ref) const {
  return softplus(values_[target(ref).rho](0, 0));
}

void HypernetParams::set_alpha(const WeightRef& ref, double alpha) {
  if (!(alpha >= 0.0)) throw ArgumentError("step size must be >= 0");
  values_[target(ref).rho](0, 0) = inverse_softplus(alpha);
}

bool HypernetParams::bit_equal(const HypernetParams& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const auto& a = values_[i];
    const auto& b = other.values_[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0) return false;
  }
  return true;
}

HypernetParams init_hypernet(const ModelConfig& model, const TargetSpec& targets,
                             const HypernetConfig& config, std::uint64_t seed) {
  config.validate();
  model.validate();
  {
    // resolvability against the model layout
    if (targets.refs.empty()) throw ArgumentError("target spec is empty");
    std::set<WeightRef> seen;
    for (const auto& r : targets.refs) {
      if (r.layer < 0 || r.layer >= model.n_layers)
        throw LookupError("target not in model: " + r.name());
      if (!seen.insert(r).second) throw ArgumentError("duplicate target: " + r.name());
    }
  }

  HypernetParams p;
  p.config_ = config;
  p.targets_ = targets;
  p.seed_ = seed;
  p.model_ = model;

  std::mt19937_64 rng(seed);
  const int H = config.hidden_dim;
  std::map<std::pair<int, int>, std::size_t> shared;

  auto make_mlp = [&](const std::string& prefix, int in_dim) {
    HypernetParams::Mlp mlp;
    mlp.in_dim = in_dim;
    int fan_in = in_dim;
    for (int k = 0; k < config.n_hidden; ++k) {
      std::string base = prefix + ".hidden." + std::to_string(k);
      mlp.w.push_back(p.add(base + ".weight",
                            normal_matrix(rng, H, fan_in, 1.0 / std::sqrt(double(fan_in))),
                            ParamGroup::Phi));
      mlp.b.push_back(p.add(base + ".bias", Matrix::Zero(H, 1), ParamGroup::Phi));
      fan_in = H;
    }
    Matrix w_out = config.identity_init
                       ? Matrix::Zero(in_dim, H)
                       : normal_matrix(rng, in_dim, H, 1.0 / std::sqrt(double(H)));
    mlp.w_out = p.add(prefix + ".out.weight", std::move(w_out), ParamGroup::Phi);
    mlp.b_out = p.add(prefix + ".out.bias", Matrix::Zero(in_dim, 1), ParamGroup::Phi);
    p.mlps_.push_back(std::move(mlp));
    return p.mlps_.size() - 1;
  };

  for (const auto& ref : targets.refs) {
    auto [d, m] = pair_dims(model, ref);
    HypernetParams::Target t;
    t.ref = ref;
    t.d = d;
    t.m = m;
    if (config.share_params) {
      auto key = std::make_pair(m, d);
      auto it = shared.find(key);
      if (it == shared.end()) {
        std::string prefix = "mlp." + std::to_string(m) + "x" + std::to_string(d);
        it = shared.emplace(key, make_mlp(prefix, d + m)).first;
      }
      t.mlp = it->second;
    } else {
      t.mlp = make_mlp("mlp." + ref.name(), d + m);
    }
    const std::string film = "film." + ref.name();
    t.hidden_scale = p.add(film + ".hidden_scale", Matrix::Ones(H, 1), ParamGroup::Phi);
    t.hidden_offset = p.add(film + ".hidden_offset", Matrix::Zero(H, 1), ParamGroup::Phi);
    t.out_scale = p.add(film + ".out_scale", Matrix::Ones(d + m, 1), ParamGroup::Phi);
    t.out_offset = p.add(film + ".out_offset", Matrix::Zero(d + m, 1), ParamGroup::Phi);
    t.rho = p.add("alpha." + ref.name() + ".rho",
                  Matrix::Constant(1, 1, inverse_softplus(config.alpha_init)), ParamGroup::Alpha);
    p.target_index_.emplace(ref, p.target_list_.size());
    p.target_list_.push_back(t);
  }
  return p;
}

std::vector<Matrix> zeros_like(const HypernetParams& phi) {
  std::vector<Matrix> g;
  g.reserve(phi.size());
  for (std::size_t i = 0; i < phi.size(); ++i)
    g.push_back(Matrix::Zero(phi.value(i).rows(), phi.value(i).cols()));
  return g;
}

std::pair<Matrix, Matrix> transform(const HypernetParams& phi, const WeightRef& ref,
                                    const Matrix& U, const Matrix& D, TransformCache* cache) {
  const auto& t = phi.target(ref);
  if (U.cols() != t.d || D.cols() != t.m || U.rows() != D.rows())
    throw ArgumentError("transform: pair dimensions do not match " + ref.name());
  const auto& mlp = phi.mlps()[t.mlp];
  const Eigen::Index B = U.rows();

  TransformCache local;
  TransformCache& c = cache ? *cache : local;
  c.x.resize(B, t.d + t.m);
  c.x.leftCols(t.d) = U;
  c.x.rightCols(t.m) = D;
  c.pre.clear();
  c.act.clear();

  const Matrix* h = &c.x;
  for (std::size_t k = 0; k < mlp.w.size(); ++k) {
    Matrix a = *h * phi.value(mlp.w[k]).transpose();
    a.rowwise() += phi.value(mlp.b[k]).col(0).transpose();
    c.act.push_back(a.cwiseMax(0.0));
    c.pre.push_back(std::move(a));
    h = &c.act.back();
  }
  c.film = h->array().rowwise() * phi.value(t.hidden_scale).col(0).transpose().array();
  c.film.rowwise() += phi.value(t.hidden_offset).col(0).transpose();
  c.out = c.film * phi.value(mlp.w_out).transpose();
  c.out.rowwise() += phi.value(mlp.b_out).col(0).transpose();

  Matrix y = c.out.array().rowwise() * phi.value(t.out_scale).col(0).transpose().array();
  y.rowwise() += phi.value(t.out_offset).col(0).transpose();
  y += c.x;
  return {y.leftCols(t.d), y.rightCols(t.m)};
}

std::pair<Vector, Vector> transform(const HypernetParams& phi, const WeightRef& ref,
                                    const Vector& u, const Vector& delta) {
  auto [U, D] = transform(phi, ref, Matrix(u.transpose()), Matrix(delta.transpose()));
  return {U.row(0).transpose(), D.row(0).transpose()};
}

void transform_backward(const HypernetParams& phi, const WeightRef& ref,
                        const TransformCache& c, const Matrix& dU, const Matrix& dD,
                        std::vector<Matrix>* grads) {
  const auto& t = phi.target(ref);
  const auto& mlp = phi.mlps()[t.mlp];
  auto& g = *grads;

  Matrix dy(dU.rows(), t.d + t.m);
  dy.leftCols(t.d) = dU;
  dy.rightCols(t.m) = dD;

  g[t.out_offset] += dy.colwise().sum().transpose();
  g[t.out_scale] += dy.cwiseProduct(c.out).colwise().sum().transpose();
  Matrix dout = dy.array().rowwise() * phi.value(t.out_scale).col(0).transpose().array();

  g[mlp.w_out] += dout.transpose() * c.film;
  g[mlp.b_out] += dout.colwise().sum().transpose();
  Matrix dfilm = dout * phi.value(mlp.w_out);

  const Matrix& last = c.act.back();
  g[t.hidden_offset] += dfilm.colwise().sum().transpose();
  g[t.hidden_scale] += dfilm.cwiseProduct(last).colwise().sum().transpose();
  Matrix dh = dfilm.array().rowwise() * phi.value(t.hidden_scale).col(0).transpose().array();

  for (std::size_t k = mlp.w.size(); k-- > 0;) {
    Matrix da = (c.pre[k].array() > 0.0).select(dh, 0.0);
    const Matrix& in = k == 0 ? c.x : c.act[k - 1];
    g[mlp.w[k]] += da.transpose() * in;
    g[mlp.b[k]] += da.colwise().sum().transpose();
    if (k > 0) dh = da * phi.value(mlp.w[k]);
  }
}

WeightCatalog apply_edit(const WeightCatalog& weights, const HypernetParams& phi,
                         const RankOneGrads& taps, EditTrace* trace) {
  const auto& refs = phi.targets().refs;
  if (taps.size() != refs.size())
    throw ArgumentError("apply_edit: taps do not cover exactly the hypernet targets");
  for (const auto& r : refs) {
    if (!taps.count(r)) throw ArgumentError("apply_edit: missing tap for " + r.name());
  }
  WeightCatalog out = weights;
  if (trace) trace->items.clear();
  for (const auto& r : refs) {
    const auto& tap = taps.at(r);
    EditTrace::Item item;
    auto [U, D] = transform(phi, r, tap.U, tap.D, &item.cache);
    const double alpha = phi.alpha(r);
    Matrix w = weights.weight(r);
    if (alpha != 0.0) w.noalias() -= alpha * (D.transpose() * U);
    out.set_weight(r, std::move(w));
    if (trace) {
      item.U = std::move(U);
      item.D = std::move(D);
      trace->items.emplace(r, std::move(item));
    }
  }
  return out;
}

void apply_edit_backward(const HypernetParams& phi, const EditTrace& trace,
                         const std::map<WeightRef, Matrix>& weight_grads,
                         std::vector<Matrix>* grads) {
  for (const auto& [ref, item] : trace.items) {
    auto it = weight_grads.find(ref);
    if (it == weight_grads.end()) continue;
    const Matrix& G = it->second;  // m x d
    const auto& t = phi.target(ref);
    const double rho = phi.value(t.rho)(0, 0);
    const double alpha = softplus(rho);
    Matrix UGt = item.U * G.transpose();  // B x m
    const double dalpha = -UGt.cwiseProduct(item.D).sum();
    (*grads)[t.rho](0, 0) += dalpha * sigmoid(rho);
    Matrix dD = -alpha * UGt;
    Matrix dU = -alpha * (item.D * G);
    transform_backward(phi, ref, item.cache, dU, dD, grads);
  }
}

std::string to_string(InnerMode m) {
  return m == InnerMode::ClmAllTokens ? "clm_all_tokens" : "sft_atomic";
}

InnerMode inner_mode_from_string(const std::string& s) {
  if (s == "clm_all_tokens") return InnerMode::ClmAllTokens;
  if (s == "sft_atomic") return InnerMode::SftAtomic;
  throw ConfigError("unknown inner mode: " + s);
}

void EditRequest::validate() const {
  if (mode == InnerMode::ClmAllTokens && fact_text.empty())
    throw ArgumentError("clm_all_tokens edit needs a fact text");
  if (mode == InnerMode::SftAtomic && atomic_facts.empty())
    throw ArgumentError("sft_atomic edit needs at least one atomic fact");
}

std::vector<TokenSeq> EditRequest::inner_batch(const Tokenizer& tok) const {
  validate();
  std::vector<TokenSeq> out;
  if (mode == InnerMode::ClmAllTokens) {
    out.push_back(fact_seq(tok, fact_text));
  } else {
    for (const auto& [prompt, answer] : atomic_facts) out.push_back(atomic_seq(tok, prompt, answer));
  }
  return out;
}

WeightCatalog edit(const WeightCatalog& weights, const HypernetParams& phi,
                   std::span<const TokenSeq> inner, EditTrace* trace) {
  auto cap = capture(weights, inner, phi.targets());
  return apply_edit(weights, phi, cap.grads, trace);
}

WeightCatalog edit(const WeightCatalog& weights, const HypernetParams& phi,
                   const EditRequest& req, const Tokenizer& tok) {
  auto batch = req.inner_batch(tok);
  return edit(weights, phi, batch);
}

TensorArchive HypernetParams::to_archive() const {
  TensorArchive a;
  for (std::size_t i = 0; i < values_.size(); ++i) a.add(names_[i], values_[i]);
  a.meta["hypernet_config"] = config_;
  a.meta["targets"] = targets_.names();
  a.meta["seed"] = seed_;
  a.meta["model_config"] = model_;
  return a;
}

HypernetParams HypernetParams::from_archive(const TensorArchive& archive) {
  const auto& meta = archive.meta;
  if (!meta.contains("hypernet_config") || !meta.contains("targets") ||
      !meta.contains("model_config"))
    throw LookupError("archive is not a hypernet checkpoint");
  auto config = meta.at("hypernet_config").get<HypernetConfig>();
  auto targets = TargetSpec::from_names(meta.at("targets").get<std::vector<std::string>>());
  auto model = meta.at("model_config").get<ModelConfig>();
  auto p = init_hypernet(model, targets, config, meta.value("seed", std::uint64_t{0}));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Matrix& v = archive.get(p.name(i));
    if (v.rows() != p.values_[i].rows() || v.cols() != p.values_[i].cols())
      throw ConfigError("hypernet tensor has wrong shape: " + p.name(i));
    p.values_[i] = v;
  }
  return p;
}

void save_hypernet(const std::filesystem::path& dir, const HypernetParams& phi) {
  write_archive(dir, phi.to_archive());
}

HypernetParams load_hypernet(const std::filesystem::path& dir) {
  return HypernetParams::from_archive(read_archive(dir));
}

}  // namespace propedit
