#include "propedit/tinylm.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <random>

#include "propedit/errors.hpp"
#include "propedit/optim.hpp"

namespace propedit {
using nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

std::string layer_name(int l, const char* leaf) { return "layers." + std::to_string(l) + "." + leaf; }

// y = (x - mean) * rstd * gain + bias, row-wise.
void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* hat, Vector* rstd,
                Matrix* out) {
  const auto T = x.rows();
  const auto d = x.cols();
  hat->resize(T, d);
  rstd->resize(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    double mean = x.row(t).mean();
    double var = (x.row(t).array() - mean).square().mean();
    double r = 1.0 / std::sqrt(var + kLnEps);
    (*rstd)(t) = r;
    hat->row(t) = (x.row(t).array() - mean) * r;
  }
  *out = (hat->array().rowwise() * gain.col(0).transpose().array()).rowwise() +
         bias.col(0).transpose().array();
}

// Returns dx given dy; accumulates gain/bias gradients when requested.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const Vector& rstd,
                           const Matrix& gain, Matrix* dgain, Matrix* dbias) {
  if (dgain != nullptr && dgain->size() != 0) {
    dgain->col(0) += (dy.array() * hat.array()).colwise().sum().transpose().matrix();
  }
  if (dbias != nullptr && dbias->size() != 0) dbias->col(0) += dy.colwise().sum().transpose();
  Matrix dhat = dy.array().rowwise() * gain.col(0).transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index t = 0; t < dy.rows(); ++t) {
    double m1 = dhat.row(t).mean();
    double m2 = (dhat.row(t).array() * hat.row(t).array()).mean();
    dx.row(t) = rstd(t) * (dhat.row(t).array() - m1 - hat.row(t).array() * m2);
  }
  return dx;
}

double gelu(double z) { return 0.5 * z * (1.0 + std::tanh(kGeluC * (z + 0.044715 * z * z * z))); }

double gelu_grad(double z) {
  double inner = kGeluC * (z + 0.044715 * z * z * z);
  double th = std::tanh(inner);
  double dinner = kGeluC * (1.0 + 3.0 * 0.044715 * z * z);
  return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner;
}

Matrix add_bias_rows(Matrix m, const Matrix& bias) {
  m.rowwise() += bias.col(0).transpose();
  return m;
}

bool wanted(const BackwardSpec& spec, std::size_t index, const WeightCatalog& w) {
  if (spec.all_params) return true;
  for (const auto& ref : spec.weights) {
    if (w.index_of(ref) == index) return true;
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 ||
      max_seq_len < 1) {
    throw ConfigError("model config: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                      ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_layers", c.n_layers},       {"d_model", c.d_model},
           {"n_heads", c.n_heads},         {"d_mlp", c.d_mlp},
           {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_mlp = j.value("d_mlp", d.d_mlp);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.seed = j.value("seed", d.seed);
}

std::string to_string(WeightKind kind) { return kind == WeightKind::MlpUp ? "mlp_up" : "mlp_down"; }

WeightKind weight_kind_from_string(const std::string& s) {
  if (s == "mlp_up") return WeightKind::MlpUp;
  if (s == "mlp_down") return WeightKind::MlpDown;
  throw ArgumentError("unknown weight kind: " + s);
}

std::string WeightRef::name() const { return layer_name(layer, (to_string(kind) + ".weight").c_str()); }

WeightRef WeightRef::parse(const std::string& name) {
  // layers.<l>.<kind>.weight
  auto p1 = name.find('.');
  auto p2 = name.find('.', p1 + 1);
  auto p3 = name.rfind('.');
  if (name.rfind("layers.", 0) != 0 || p2 == std::string::npos || p3 <= p2 ||
      name.substr(p3) != ".weight") {
    throw ArgumentError("not a weight reference: " + name);
  }
  WeightRef ref;
  ref.layer = std::stoi(name.substr(p1 + 1, p2 - p1 - 1));
  ref.kind = weight_kind_from_string(name.substr(p2 + 1, p3 - p2 - 1));
  return ref;
}

// ---------------------------------------------------------------- TokenSeq

std::size_t TokenSeq::num_targets() const {
  std::size_t n = 0;
  for (std::size_t t = 1; t < loss_mask.size(); ++t) n += loss_mask[t] != 0;
  return n;
}

std::size_t TokenSeq::last_target() const {
  for (std::size_t t = loss_mask.size(); t-- > 1;) {
    if (loss_mask[t] != 0) return t;
  }
  return 0;
}

TokenSeq TokenSeq::all_targets(std::vector<int> tokens) {
  TokenSeq s;
  s.loss_mask.assign(tokens.size(), 1);
  if (!s.loss_mask.empty()) s.loss_mask[0] = 0;
  s.tokens = std::move(tokens);
  return s;
}

TokenSeq TokenSeq::prompt_answer(const std::vector<int>& prompt, const std::vector<int>& answer) {
  TokenSeq s;
  s.tokens = prompt;
  s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
  s.loss_mask.assign(prompt.size(), 0);
  s.loss_mask.resize(s.tokens.size(), 1);
  return s;
}

// ---------------------------------------------------------------- layout

std::shared_ptr<const ParamLayout> ParamLayout::make(const ModelConfig& config) {
  auto layout = std::make_shared<ParamLayout>();
  auto add = [&](std::string name, int layer) {
    layout->index.emplace(name, layout->names.size());
    layout->names.push_back(std::move(name));
    layout->layer_of.push_back(layer);
    return layout->names.size() - 1;
  };
  layout->tok_emb = add("tok_emb", -1);
  layout->pos_emb = add("pos_emb", -1);
  for (int l = 0; l < config.n_layers; ++l) {
    Layer li{};
    li.ln1_gain = add(layer_name(l, "ln1.gain"), l);
    li.ln1_bias = add(layer_name(l, "ln1.bias"), l);
    li.wq = add(layer_name(l, "attn.wq"), l);
    li.wk = add(layer_name(l, "attn.wk"), l);
    li.wv = add(layer_name(l, "attn.wv"), l);
    li.wo = add(layer_name(l, "attn.wo"), l);
    li.ln2_gain = add(layer_name(l, "ln2.gain"), l);
    li.ln2_bias = add(layer_name(l, "ln2.bias"), l);
    li.up_w = add(layer_name(l, "mlp_up.weight"), l);
    li.up_b = add(layer_name(l, "mlp_up.bias"), l);
    li.down_w = add(layer_name(l, "mlp_down.weight"), l);
    li.down_b = add(layer_name(l, "mlp_down.bias"), l);
    layout->layers.push_back(li);
  }
  layout->lnf_gain = add("ln_f.gain", -1);
  layout->lnf_bias = add("ln_f.bias", -1);
  layout->unembed = add("unembed", -1);
  return layout;
}

// ---------------------------------------------------------------- catalog

const Matrix& WeightCatalog::tensor(const std::string& name) const { return *tensors_[index_of(name)]; }

std::size_t WeightCatalog::index_of(const std::string& name) const {
  if (!layout_) throw LookupError("empty catalog");
  auto it = layout_->index.find(name);
  if (it == layout_->index.end()) throw LookupError("no such parameter: " + name);
  return it->second;
}

Matrix& WeightCatalog::mutable_tensor(std::size_t i) {
  if (tensors_[i].use_count() > 1) tensors_[i] = std::make_shared<Matrix>(*tensors_[i]);
  return *tensors_[i];
}

std::size_t WeightCatalog::index_of(const WeightRef& ref) const {
  if (!layout_ || ref.layer < 0 || ref.layer >= config_.n_layers) {
    throw LookupError("weight reference out of range: " + ref.name());
  }
  const auto& li = layout_->layers[ref.layer];
  return ref.kind == WeightKind::MlpUp ? li.up_w : li.down_w;
}

const Matrix& WeightCatalog::weight(const WeightRef& ref) const { return *tensors_[index_of(ref)]; }

void WeightCatalog::set_weight(const WeightRef& ref, Matrix value) {
  auto i = index_of(ref);
  if (value.rows() != tensors_[i]->rows() || value.cols() != tensors_[i]->cols()) {
    throw ArgumentError("set_weight: shape mismatch for " + ref.name());
  }
  tensors_[i] = std::make_shared<Matrix>(std::move(value));
}

std::vector<WeightRef> WeightCatalog::editable_refs() const {
  std::vector<WeightRef> refs;
  for (int l = 0; l < config_.n_layers; ++l) {
    refs.push_back({l, WeightKind::MlpUp});
    refs.push_back({l, WeightKind::MlpDown});
  }
  return refs;
}

bool WeightCatalog::bit_equal(const WeightCatalog& other) const {
  if (!(config_ == other.config_) || tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = *tensors_[i];
    const auto& b = *other.tensors_[i];
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) != 0) return false;
  }
  return true;
}

TensorArchive WeightCatalog::to_archive() const {
  TensorArchive archive;
  archive.meta["config"] = config_;
  archive.meta["seed"] = config_.seed;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& m = *tensors_[i];
    archive.add(name(i), m, m.cols() == 1 ? 1 : 2);
  }
  return archive;
}

WeightCatalog WeightCatalog::from_archive(const TensorArchive& archive) {
  ModelConfig config = archive.meta.at("config").get<ModelConfig>();
  WeightCatalog w = build_model(config);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto& src = archive.get(w.name(i));
    if (src.rows() != w.tensors_[i]->rows() || src.cols() != w.tensors_[i]->cols()) {
      throw ArgumentError("archive tensor has wrong shape: " + w.name(i));
    }
    w.tensors_[i] = std::make_shared<Matrix>(src);
  }
  return w;
}

WeightCatalog build_model(const ModelConfig& config) {
  config.validate();
  WeightCatalog w;
  w.config_ = config;
  w.layout_ = ParamLayout::make(config);
  const int d = config.d_model, m = config.d_mlp, V = config.vocab_size;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](int r, int c, double std) {
    Matrix x(r, c);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = std * normal(rng);
    return std::make_shared<Matrix>(std::move(x));
  };
  auto filled = [](int r, double v) { return std::make_shared<Matrix>(Matrix::Constant(r, 1, v)); };
  const double proj_std = 0.02 / std::sqrt(2.0 * config.n_layers);
  w.tensors_.resize(w.layout_->names.size());
  const auto& L = *w.layout_;
  w.tensors_[L.tok_emb] = randn(V, d, 0.02);
  w.tensors_[L.pos_emb] = randn(config.max_seq_len, d, 0.01);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& li = L.layers[l];
    w.tensors_[li.ln1_gain] = filled(d, 1.0);
    w.tensors_[li.ln1_bias] = filled(d, 0.0);
    w.tensors_[li.wq] = randn(d, d, 0.02);
    w.tensors_[li.wk] = randn(d, d, 0.02);
    w.tensors_[li.wv] = randn(d, d, 0.02);
    w.tensors_[li.wo] = randn(d, d, proj_std);
    w.tensors_[li.ln2_gain] = filled(d, 1.0);
    w.tensors_[li.ln2_bias] = filled(d, 0.0);
    w.tensors_[li.up_w] = randn(m, d, 0.02);
    w.tensors_[li.up_b] = filled(m, 0.0);
    w.tensors_[li.down_w] = randn(d, m, proj_std);
    w.tensors_[li.down_b] = filled(d, 0.0);
  }
  w.tensors_[L.lnf_gain] = filled(d, 1.0);
  w.tensors_[L.lnf_bias] = filled(d, 0.0);
  w.tensors_[L.unembed] = randn(V, d, 0.02);
  return w;
}

// ---------------------------------------------------------------- gradients

Gradients Gradients::zeros_like(const WeightCatalog& weights) {
  Gradients g;
  g.g.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    g.g.push_back(Matrix::Zero(weights.tensor(i).rows(), weights.tensor(i).cols()));
  }
  return g;
}

Gradients Gradients::zeros_for(const WeightCatalog& weights, std::span<const WeightRef> refs) {
  Gradients g;
  g.g.resize(weights.size());
  for (const auto& ref : refs) {
    const auto& w = weights.weight(ref);
    g.g[weights.index_of(ref)] = Matrix::Zero(w.rows(), w.cols());
  }
  return g;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& m : g) s += m.squaredNorm();
  return s;
}

void Gradients::scale(double s) {
  for (auto& m : g) m *= s;
}

// ---------------------------------------------------------------- forward

ForwardTrace forward(const WeightCatalog& w, std::span<const int> tokens) {
  const auto& cfg = w.config();
  const auto& L = w.layout();
  const auto T = static_cast<Eigen::Index>(tokens.size());
  if (T == 0) throw ArgumentError("forward: empty sequence");
  if (T > cfg.max_seq_len) throw ArgumentError("forward: sequence longer than max_seq_len");
  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  Matrix x(T, d);
  const auto& emb = w.tensor(L.tok_emb);
  const auto& pos = w.tensor(L.pos_emb);
  for (Eigen::Index t = 0; t < T; ++t) {
    int id = tokens[t];
    if (id < 0 || id >= cfg.vocab_size) throw ArgumentError("forward: token id out of range");
    x.row(t) = emb.row(id) + pos.row(t);
  }
  tr.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& li = L.layers[l];
    auto& lt = tr.layers[l];
    layer_norm(x, w.tensor(li.ln1_gain), w.tensor(li.ln1_bias), &lt.ln1_hat, &lt.ln1_rstd, &lt.a);
    lt.q.noalias() = lt.a * w.tensor(li.wq).transpose();
    lt.k.noalias() = lt.a * w.tensor(li.wk).transpose();
    lt.v.noalias() = lt.a * w.tensor(li.wv).transpose();
    lt.attn.resize(T, d);
    lt.probs.resize(H);
    for (int h = 0; h < H; ++h) {
      Matrix s = lt.q.middleCols(h * dh, dh) * lt.k.middleCols(h * dh, dh).transpose() * scale;
      Matrix& p = lt.probs[h];
      p = Matrix::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = s.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(s(i, j) - mx);
          sum += p(i, j);
        }
        p.row(i).head(i + 1) /= sum;
      }
      lt.attn.middleCols(h * dh, dh).noalias() = p * lt.v.middleCols(h * dh, dh);
    }
    x.noalias() += lt.attn * w.tensor(li.wo).transpose();
    layer_norm(x, w.tensor(li.ln2_gain), w.tensor(li.ln2_bias), &lt.ln2_hat, &lt.ln2_rstd, &lt.h);
    lt.z = add_bias_rows(lt.h * w.tensor(li.up_w).transpose(), w.tensor(li.up_b));
    lt.g = lt.z.unaryExpr([](double v) { return gelu(v); });
    x += add_bias_rows(lt.g * w.tensor(li.down_w).transpose(), w.tensor(li.down_b));
  }
  layer_norm(x, w.tensor(L.lnf_gain), w.tensor(L.lnf_bias), &tr.lnf_hat, &tr.lnf_rstd, &tr.xf);
  tr.logits.noalias() = tr.xf * w.tensor(L.unembed).transpose();
  return tr;
}

Matrix logits(const WeightCatalog& weights, std::span<const int> tokens) {
  return forward(weights, tokens).logits;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    double mx = logits.row(t).maxCoeff();
    double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
    out.row(t) = logits.row(t).array() - lse;
  }
  return out;
}

// ---------------------------------------------------------------- backward

void backward(const WeightCatalog& w, const ForwardTrace& tr, const Matrix& dlogits,
              const BackwardSpec& spec, Gradients* grads, std::map<WeightRef, TapRows>* taps) {
  const auto& cfg = w.config();
  const auto& L = w.layout();
  const auto T = static_cast<Eigen::Index>(tr.tokens.size());
  const int H = cfg.n_heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto want = [&](std::size_t idx) { return grads != nullptr && wanted(spec, idx, w); };
  auto grad = [&](std::size_t idx) -> Matrix& { return grads->g[idx]; };
  auto tapped = [&](WeightRef ref) {
    return taps != nullptr && std::find(spec.taps.begin(), spec.taps.end(), ref) != spec.taps.end();
  };

  // Lowest layer the pass has to reach.
  int lowest = 0;
  if (!spec.all_params) {
    lowest = cfg.n_layers;
    for (const auto& r : spec.weights) lowest = std::min(lowest, r.layer);
    for (const auto& r : spec.taps) lowest = std::min(lowest, r.layer);
  }

  if (want(L.unembed)) grad(L.unembed).noalias() += dlogits.transpose() * tr.xf;
  Matrix dxf = dlogits * w.tensor(L.unembed);
  Matrix dx = layer_norm_backward(dxf, tr.lnf_hat, tr.lnf_rstd, w.tensor(L.lnf_gain),
                                  want(L.lnf_gain) ? &grad(L.lnf_gain) : nullptr,
                                  want(L.lnf_bias) ? &grad(L.lnf_bias) : nullptr);

  for (int l = cfg.n_layers - 1; l >= lowest; --l) {
    const auto& li = L.layers[l];
    const auto& lt = tr.layers[l];

    // MLP: x += gelu(h Wup^T + bup) Wdown^T + bdown
    const Matrix& d_down = dx;
    if (want(li.down_w)) grad(li.down_w).noalias() += d_down.transpose() * lt.g;
    if (want(li.down_b)) grad(li.down_b).col(0) += d_down.colwise().sum().transpose();
    if (tapped({l, WeightKind::MlpDown})) (*taps)[{l, WeightKind::MlpDown}] = {lt.g, d_down};
    Matrix dz = (d_down * w.tensor(li.down_w)).cwiseProduct(
        lt.z.unaryExpr([](double v) { return gelu_grad(v); }));
    if (want(li.up_w)) grad(li.up_w).noalias() += dz.transpose() * lt.h;
    if (want(li.up_b)) grad(li.up_b).col(0) += dz.colwise().sum().transpose();
    if (tapped({l, WeightKind::MlpUp})) (*taps)[{l, WeightKind::MlpUp}] = {lt.h, dz};
    if (l == lowest && !spec.all_params) break;
    Matrix dh_ = dz * w.tensor(li.up_w);
    dx += layer_norm_backward(dh_, lt.ln2_hat, lt.ln2_rstd, w.tensor(li.ln2_gain),
                              want(li.ln2_gain) ? &grad(li.ln2_gain) : nullptr,
                              want(li.ln2_bias) ? &grad(li.ln2_bias) : nullptr);

    // Attention: x += attn Wo^T
    if (want(li.wo)) grad(li.wo).noalias() += dx.transpose() * lt.attn;
    Matrix dattn = dx * w.tensor(li.wo);
    Matrix dq(T, cfg.d_model), dk(T, cfg.d_model), dv(T, cfg.d_model);
    for (int h = 0; h < H; ++h) {
      const Matrix& p = lt.probs[h];
      auto dO = dattn.middleCols(h * dh, dh);
      Matrix dp = dO * lt.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = p.transpose() * dO;
      Matrix ds(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double dot = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
      }
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * lt.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * lt.q.middleCols(h * dh, dh);
    }
    if (want(li.wq)) grad(li.wq).noalias() += dq.transpose() * lt.a;
    if (want(li.wk)) grad(li.wk).noalias() += dk.transpose() * lt.a;
    if (want(li.wv)) grad(li.wv).noalias() += dv.transpose() * lt.a;
    Matrix da = dq * w.tensor(li.wq) + dk * w.tensor(li.wk) + dv * w.tensor(li.wv);
    dx += layer_norm_backward(da, lt.ln1_hat, lt.ln1_rstd, w.tensor(li.ln1_gain),
                              want(li.ln1_gain) ? &grad(li.ln1_gain) : nullptr,
                              want(li.ln1_bias) ? &grad(li.ln1_bias) : nullptr);
  }
  if (lowest == 0 && spec.all_params) {
    if (want(L.tok_emb)) {
      for (Eigen::Index t = 0; t < T; ++t) grad(L.tok_emb).row(tr.tokens[t]) += dx.row(t);
    }
    if (want(L.pos_emb)) grad(L.pos_emb).topRows(T) += dx;
  }
}

// ---------------------------------------------------------------- losses

double add_nll(const Matrix& logits, const TokenSeq& seq, double weight, Matrix* dlogits) {
  if (seq.loss_mask.size() != seq.tokens.size()) throw ArgumentError("loss mask length mismatch");
  double total = 0.0;
  for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
    if (seq.loss_mask[t] == 0) continue;
    auto row = logits.row(static_cast<Eigen::Index>(t - 1));
    double mx = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - mx).exp();
    double sum = e.sum();
    int target = seq.tokens[t];
    total += weight * (std::log(sum) + mx - row(target));
    if (dlogits != nullptr) {
      dlogits->row(static_cast<Eigen::Index>(t - 1)) += weight * e / sum;
      (*dlogits)(static_cast<Eigen::Index>(t - 1), target) -= weight;
    }
  }
  return total;
}

double add_kl(const Matrix& ref_logp, const Matrix& logits, double weight, Matrix* dlogits) {
  Matrix logq = log_softmax_rows(logits);
  double total = 0.0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::RowVectorXd p = ref_logp.row(t).array().exp();
    total += weight * (p.array() * (ref_logp.row(t).array() - logq.row(t).array())).sum();
    if (dlogits != nullptr) {
      dlogits->row(t) += weight * (logq.row(t).array().exp().matrix() - p);
    }
  }
  return total;
}

double clm_loss(const WeightCatalog& weights, std::span<const TokenSeq> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.num_targets();
  if (n == 0) throw ArgumentError("clm_loss: no masked target positions");
  double total = 0.0;
  for (const auto& s : batch) {
    if (s.num_targets() == 0) continue;
    total += add_nll(logits(weights, s.tokens), s, 1.0 / static_cast<double>(n), nullptr);
  }
  return total;
}

double clm_loss(const WeightCatalog& weights, const TokenSeq& seq) {
  return clm_loss(weights, std::span<const TokenSeq>(&seq, 1));
}

LossAndGrad clm_loss_and_grad(const WeightCatalog& weights, std::span<const TokenSeq> batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.num_targets();
  if (n == 0) throw ArgumentError("clm_loss: no masked target positions");
  LossAndGrad out;
  out.grads = Gradients::zeros_like(weights);
  BackwardSpec spec;
  for (const auto& s : batch) {
    if (s.num_targets() == 0) continue;
    auto tr = forward(weights, s.tokens);
    Matrix dlogits = Matrix::Zero(tr.logits.rows(), tr.logits.cols());
    out.loss += add_nll(tr.logits, s, 1.0 / static_cast<double>(n), &dlogits);
    backward(weights, tr, dlogits, spec, &out.grads);
  }
  return out;
}

// ---------------------------------------------------------------- decoding

std::vector<int> greedy_decode(const WeightCatalog& weights, std::span<const int> prompt,
                               int max_new, int eos_id) {
  if (prompt.empty()) throw ArgumentError("greedy_decode: empty prompt");
  if (static_cast<int>(prompt.size()) > weights.config().max_seq_len) {
    throw ArgumentError("greedy_decode: prompt exceeds max_seq_len");
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= weights.config().max_seq_len) break;
    Matrix lg = logits(weights, seq);
    auto last = lg.row(lg.rows() - 1);
    int best = 0;
    for (Eigen::Index v = 1; v < last.size(); ++v) {
      if (last(v) > last(best)) best = static_cast<int>(v);
    }
    if (best == eos_id) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

double kl_next_token(const WeightCatalog& base, const WeightCatalog& edited,
                     std::span<const int> prompt) {
  if (!base.config().same_architecture(edited.config())) {
    throw ArgumentError("kl_next_token: catalogs have different configurations");
  }
  if (prompt.empty()) throw ArgumentError("kl_next_token: empty prompt");
  Matrix ref = log_softmax_rows(logits(base, prompt));
  double w = 1.0 / static_cast<double>(prompt.size());
  return add_kl(ref, logits(edited, prompt), w, nullptr);
}

// ---------------------------------------------------------------- pretraining

WeightCatalog pretrain(const ModelConfig& config, std::span<const TokenSeq> corpus,
                       const PretrainOptions& options) {
  if (corpus.empty()) throw ArgumentError("pretrain: empty corpus");
  WeightCatalog w = build_model(config);
  if (options.steps <= 0) return w;

  std::vector<Matrix*> params;
  for (std::size_t i = 0; i < w.size(); ++i) params.push_back(&w.mutable_tensor(i));
  Adam adam(params, {.weight_decay = options.weight_decay});
  std::vector<double> lrs(params.size(), options.lr);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const int bs = std::max(1, options.batch_size);
  std::vector<TokenSeq> batch;
  double running = 0.0;
  int running_n = 0;
  for (int step = 0; step < options.steps; ++step) {
    batch.clear();
    for (int b = 0; b < bs; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(corpus[order[cursor++]]);
    }
    auto lg = clm_loss_and_grad(w, batch);
    if (!std::isfinite(lg.loss)) {
      throw TrainingError("pretrain: non-finite loss at step " + std::to_string(step), step);
    }
    std::vector<Matrix*> gptr;
    for (auto& g : lg.grads.g) gptr.push_back(&g);
    clip_grad_norm(gptr, options.max_grad_norm);
    // Linear warmup over the first 5% of steps, cosine decay afterwards.
    int warm = std::max(1, options.steps / 20);
    double frac = step < warm ? static_cast<double>(step + 1) / warm
                              : 0.5 * (1.0 + std::cos(M_PI * (step - warm) /
                                                      std::max(1, options.steps - warm)));
    std::fill(lrs.begin(), lrs.end(), options.lr * std::max(frac, 0.05));
    std::vector<const Matrix*> cg(gptr.begin(), gptr.end());
    adam.step(params, cg, lrs);
    running += lg.loss;
    ++running_n;
    bool last = step + 1 == options.steps;
    if (options.on_log && (last || (options.log_every > 0 && (step + 1) % options.log_every == 0) ||
                           step == 0)) {
      options.on_log(step + 1, running / running_n);
      running = 0.0;
      running_n = 0;
    }
  }
  return w;
}

}  // namespace propedit
