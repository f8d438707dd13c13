#include "propedit/pipeline.hpp"

#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "propedit/errors.hpp"
#include "propedit/gradcap.hpp"
#include "propedit/prompt_format.hpp"
#include "propedit/tensor_archive.hpp"

extern char** environ;

namespace propedit {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ config

void to_json(json& j, const PretrainOptions& o) {
  j = {{"steps", o.steps},
       {"lr", o.lr},
       {"batch_size", o.batch_size},
       {"weight_decay", o.weight_decay},
       {"max_grad_norm", o.max_grad_norm},
       {"seed", o.seed},
       {"log_every", o.log_every}};
}

void from_json(const json& j, PretrainOptions& o) {
  PretrainOptions d;
  o.steps = j.value("steps", d.steps);
  o.lr = j.value("lr", d.lr);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
  o.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  o.seed = j.value("seed", d.seed);
  o.log_every = j.value("log_every", d.log_every);
}

RunConfig RunConfig::toy() {
  RunConfig c;
  c.world.fake_first_names = 64;
  c.world.fake_last_names = 64;
  c.data.n_train = 3000;
  c.model.n_layers = 4;
  c.model.d_model = 64;
  c.model.n_heads = 4;
  c.model.d_mlp = 128;
  c.model.max_seq_len = 80;
  c.pretrain.steps = 6000;
  c.pretrain.lr = 2e-3;
  c.pretrain.batch_size = 32;
  c.pretrain.log_every = 500;
  c.hypernet.hidden_dim = 128;
  c.hypernet.alpha_init = 1e-2;
  c.metatrain.lr_phi = 1e-3;
  c.metatrain.lr_alpha = 1e-3;
  c.metatrain.val_every = 100;
  c.metatrain.patience_steps = 1500;
  c.metatrain.max_steps = 6000;
  c.metatrain.val_limit = 30;
  return c;
}

void RunConfig::set_seed(std::uint64_t seed) {
  world.seed = seed;
  data.seed = seed;
  corpus.seed = seed;
  model.seed = seed;
  pretrain.seed = seed;
  metatrain.seed = seed;
  hypernet_seed = seed;
}

void RunConfig::validate() const {
  world.validate();
  data.validate();
  metatrain.validate();
  hypernet.validate();
  if (pretrain.steps < 0 || pretrain.batch_size <= 0 || !(pretrain.lr > 0.0))
    throw ConfigError("pretrain: steps >= 0, batch_size > 0 and lr > 0 required");
  if (target_first_layer < 0 || target_last_layer < target_first_layer ||
      target_last_layer >= model.n_layers) {
    throw ConfigError("targets: layer range outside the model");
  }
  if (eval_limit < 0) throw ConfigError("eval: limit must be >= 0");
  auto m = model;
  m.vocab_size = std::max(m.vocab_size, 1);
  m.validate();
  cpt.validate(m);
}

json to_json(const RunConfig& c) {
  json hypernet = c.hypernet;
  hypernet["seed"] = c.hypernet_seed;
  return {{"world", c.world},
          {"data", c.data},
          {"corpus", c.corpus},
          {"model", c.model},
          {"pretrain", c.pretrain},
          {"targets", {{"first_layer", c.target_first_layer}, {"last_layer", c.target_last_layer}}},
          {"hypernet", hypernet},
          {"metatrain", c.metatrain},
          {"cpt", c.cpt},
          {"eval", {{"limit", c.eval_limit}}}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  json doc = to_json(RunConfig::toy());
  for (const auto& [k, v] : j.items()) {
    if (!doc.contains(k)) throw ConfigError("unknown config section '" + k + "'");
    if (!v.is_object()) throw ConfigError("config section '" + k + "' must be an object");
    for (const auto& [kk, vv] : v.items()) {
      if (!doc[k].contains(kk)) throw ConfigError("unknown key '" + k + "." + kk + "'");
      doc[k][kk] = vv;
    }
  }
  try {
    RunConfig c;
    c.world = doc.at("world").get<WorldSpec>();
    c.data = doc.at("data").get<DataSpec>();
    c.corpus = doc.at("corpus").get<CorpusOptions>();
    c.model = doc.at("model").get<ModelConfig>();
    c.pretrain = doc.at("pretrain").get<PretrainOptions>();
    c.target_first_layer = doc.at("targets").at("first_layer").get<int>();
    c.target_last_layer = doc.at("targets").at("last_layer").get<int>();
    c.hypernet = doc.at("hypernet").get<HypernetConfig>();
    c.hypernet_seed = doc.at("hypernet").at("seed").get<std::uint64_t>();
    c.metatrain = doc.at("metatrain").get<MetaTrainConfig>();
    c.cpt = doc.at("cpt").get<CptConfig>();
    c.eval_limit = doc.at("eval").at("limit").get<int>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

void apply_env_overrides(json& doc, const std::vector<std::pair<std::string, std::string>>& env) {
  const std::string prefix = "PROPEDIT_";
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string rest = name.substr(prefix.size());
    auto us = rest.find('_');
    if (us == std::string::npos || us == 0 || us + 1 == rest.size()) {
      throw ConfigError("environment override " + name + " is not PROPEDIT_<SECTION>_<KEY>");
    }
    std::string section = rest.substr(0, us), key = rest.substr(us + 1);
    for (auto& ch : section) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    json v = json::parse(value, nullptr, false);
    if (v.is_discarded()) v = value;
    doc[section][key] = v;
  }
}

std::vector<std::pair<std::string, std::string>> propedit_environment() {
  std::vector<std::pair<std::string, std::string>> out;
  for (char** e = environ; e && *e; ++e) {
    std::string kv(*e);
    if (kv.rfind("PROPEDIT_", 0) != 0) continue;
    auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string sha256_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LookupError("missing file: " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

// ------------------------------------------------------------------ helpers

namespace {

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + file.string());
  out << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LookupError("missing artifact: " + file.string());
  return json::parse(in);
}

void require(const fs::path& p) {
  if (!fs::exists(p)) throw LookupError("missing artifact: " + p.string());
}

// `dir` itself or every regular file under it, sorted, with hashes relative to `root`.
json hash_tree(const fs::path& root, const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_regular_file(dir)) {
    files.push_back(dir);
  } else if (fs::exists(dir)) {
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json out = json::object();
  for (const auto& f : files) out[fs::relative(f, root).generic_string()] = sha256_file(f);
  return out;
}

void record_manifest(const fs::path& out, const std::string& command, const json& inputs,
                     const std::vector<fs::path>& output_dirs, const RunConfig& cfg) {
  fs::path file = out / "MANIFEST.json";
  json m = fs::exists(file) ? read_json(file) : json::object();
  m["tool"] = "propedit";
  m["version"] = "1.0.0";
  json outputs = json::object();
  for (const auto& d : output_dirs) outputs.update(hash_tree(out, d));
  m["commands"][command] = {{"config", to_json(cfg)}, {"inputs", inputs}, {"outputs", outputs}};
  write_json(file, m);
}

json input_hashes(const fs::path& out, const std::vector<fs::path>& files) {
  json j = json::object();
  for (const auto& f : files) j[fs::relative(f, out).generic_string()] = sha256_file(f);
  return j;
}

ModelConfig model_config_for(const RunConfig& cfg, const Tokenizer& tok) {
  ModelConfig m = cfg.model;
  m.vocab_size = tok.vocab_size();
  return m;
}

std::vector<EpisodeBatch> batches_of(const std::vector<Episode>& eps) {
  std::vector<EpisodeBatch> out;
  out.reserve(eps.size());
  for (const auto& e : eps) out.push_back(e.to_batch());
  return out;
}

}  // namespace

double singlehop_em(const SynWorld& world, const WeightCatalog& model, const Tokenizer& tok) {
  auto qas = kb_questions(world);
  if (qas.empty()) return 0.0;
  int hits = 0;
  for (const auto& [q, a] : qas) {
    auto gen = tok.decode(greedy_decode(model, question_prompt(tok, q), 20, Tokenizer::kEos));
    hits += em_score(q, gen, {a});
  }
  return static_cast<double>(hits) / static_cast<double>(qas.size());
}

// ------------------------------------------------------------------ loaders

SynWorld Pipeline::load_world() const { return world_from_json(read_json(out / "data" / "world.json")); }

Tokenizer Pipeline::load_tokenizer() const {
  require(out / "data" / "tokenizer.json");
  return Tokenizer::load(out / "data" / "tokenizer.json");
}

std::vector<Episode> Pipeline::load_split(const std::string& split) const {
  const std::string stem = split == "id" ? "test_id" : split;
  bool known = false;
  for (const auto& n : Dataset::split_names()) known = known || n == stem;
  if (!known) throw ConfigError("unknown split '" + split + "'");
  return read_episodes(out / "data" / (stem + ".jsonl"));
}

WeightCatalog Pipeline::load_model() const {
  require(out / "model" / "weights" / "manifest.json");
  return WeightCatalog::from_archive(read_archive(out / "model" / "weights"));
}

HypernetParams Pipeline::load_hypernet_label(const std::string& label) const {
  fs::path dir = out / "hypernet" / label / "best";
  require(dir / "manifest.json");
  return load_hypernet(dir);
}

MetaTrainConfig Pipeline::metatrain_config_for(const std::string& label) const {
  MetaTrainConfig m = cfg.metatrain;
  if (label == "mend") {
    m.outer_mode = OuterMode::Paraphrase;
    m.inner_mode = InnerMode::SftAtomic;
  }
  return m;
}

EditorHandle Pipeline::make_editor(const std::string& name) const {
  if (name == "base") return identity_editor("base");
  if (name == "prepend") return prepend_editor();
  auto tok = load_tokenizer();
  if (name == "cpt-full" || name == "cpt-layers") {
    CptConfig c = cfg.cpt;
    c.scope = name == "cpt-full" ? CptScope::Full : CptScope::LayerRange;
    if (name == "cpt-layers") {
      c.first_layer = cfg.target_first_layer;
      c.last_layer = cfg.target_last_layer;
    }
    return cpt_editor(c, tok, name);
  }
  fs::path meta = out / "hypernet" / name / "metatrain.json";
  require(meta);
  auto mc = read_json(meta).get<MetaTrainConfig>();
  return hypernet_editor(name, load_hypernet_label(name), mc.inner_mode, tok);
}

// ------------------------------------------------------------------ commands

CommandResult Pipeline::datagen() const {
  cfg.validate();
  auto world = build_world(cfg.world);
  auto ds = split_dataset(world, cfg.data);
  auto corpus = pretrain_corpus(world, cfg.corpus);
  Tokenizer tok(world.lexicon());
  const fs::path dir = out / "data";
  fs::create_directories(dir);
  write_json(dir / "world.json", to_json(world));
  tok.save(dir / "tokenizer.json");
  json stats = {{"kb_entries", world.kb.size()}, {"vocab_size", tok.vocab_size()},
                {"corpus_lines", corpus.size()}};
  for (const auto& n : Dataset::split_names()) {
    const auto& eps = ds.split(n);
    write_episodes(dir / (n + ".jsonl"), eps);
    std::size_t eff = 0, eff_verbatim = 0, spec = 0;
    for (const auto& e : eps) {
      eff += e.prop_qas.size();
      spec += e.singlehop_qas.size();
      for (const auto& q : e.prop_qas) eff_verbatim += q.verbatim ? 1 : 0;
    }
    stats["splits"][n] = {{"episodes", eps.size()},
                          {"efficacy_questions", eff},
                          {"specificity_questions", spec},
                          {"efficacy_verbatim_rate",
                           eff == 0 ? 0.0 : static_cast<double>(eff_verbatim) / eff}};
  }
  std::string text;
  for (const auto& l : corpus) text += l + "\n";
  write_text(dir / "corpus.txt", text);
  write_json(dir / "stats.json", stats);
  write_json(out / "config.json", to_json(cfg));
  record_manifest(out, "datagen", json::object(), {dir}, cfg);
  if (log) log("datagen: wrote " + dir.string());
  return {0, "ok"};
}

CommandResult Pipeline::pretrain() const {
  cfg.validate();
  require(out / "data" / "corpus.txt");
  auto world = load_world();
  auto tok = load_tokenizer();
  std::vector<TokenSeq> corpus;
  {
    std::ifstream in(out / "data" / "corpus.txt");
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) corpus.push_back(corpus_seq(tok, line));
  }
  const fs::path dir = out / "model";
  fs::create_directories(dir);
  std::ofstream logf(dir / "pretrain_log.jsonl", std::ios::trunc);
  PretrainOptions opt = cfg.pretrain;
  opt.on_log = [&](int step, double loss) {
    logf << json{{"step", step}, {"loss", loss}}.dump() << '\n' << std::flush;
    if (log) log("pretrain step " + std::to_string(step) + " loss " + std::to_string(loss));
  };
  auto model = propedit::pretrain(model_config_for(cfg, tok), corpus, opt);
  write_archive(dir / "weights", model.to_archive());
  double em = singlehop_em(world, model, tok);
  write_json(dir / "stats.json", {{"singlehop_em", em}, {"corpus_sequences", corpus.size()}});
  if (log) log("pretrain: single-hop EM " + std::to_string(em));
  record_manifest(out, "pretrain",
                  input_hashes(out, {out / "data" / "corpus.txt", out / "data" / "tokenizer.json"}),
                  {dir}, cfg);
  return {0, "single-hop EM " + std::to_string(em)};
}

CommandResult Pipeline::metatrain(const std::string& label, bool resume) const {
  cfg.validate();
  if (label.empty() || label.find('/') != std::string::npos)
    throw ConfigError("invalid hypernet label '" + label + "'");
  auto tok = load_tokenizer();
  auto base = load_model();
  auto mc = metatrain_config_for(label);
  auto train_b = batches_of(load_split("train"));
  auto val_b = batches_of(load_split("val"));
  auto train_eps = prepare_episodes(train_b, tok, mc);
  auto val_eps = prepare_episodes(val_b, tok, mc);
  if (mc.val_limit > 0 && static_cast<std::size_t>(mc.val_limit) < val_eps.size())
    val_eps.resize(static_cast<std::size_t>(mc.val_limit));

  const fs::path dir = out / "hypernet" / label;
  if (!resume) fs::remove_all(dir);
  fs::create_directories(dir);
  write_json(dir / "metatrain.json", mc);
  auto phi0 = init_hypernet(base.config(), cfg.targets(), cfg.hypernet, cfg.hypernet_seed);
  TrainOptions opt;
  opt.log_path = dir / "train_log.jsonl";
  opt.checkpoint_dir = dir / "checkpoints";
  opt.on_log = [&](const TrainLogEntry& e) {
    if (!log) return;
    std::ostringstream os;
    os << "metatrain[" << label << "] step " << e.step << " L_e " << e.edit << " L_loc " << e.loc
       << " |g| " << e.grad_norm;
    if (e.val_total) os << " val " << *e.val_total;
    log(os.str());
  };
  auto res = train(phi0, base, train_eps, val_eps, mc, opt);
  save_hypernet(dir / "best", res.best);
  write_json(dir / "summary.json", {{"best_step", res.best_step},
                                    {"best_val", res.best_val},
                                    {"steps_run", res.steps_run},
                                    {"early_stopped", res.early_stopped}});
  record_manifest(out, "metatrain:" + label,
                  input_hashes(out, {out / "data" / "train.jsonl", out / "data" / "val.jsonl",
                                     out / "model" / "weights" / "manifest.json"}),
                  {dir / "best", dir / "metatrain.json", dir / "summary.json"}, cfg);
  return {0, "best step " + std::to_string(res.best_step)};
}

CommandResult Pipeline::eval(const std::string& editor, const std::string& split,
                             EvalReport* report) const {
  cfg.validate();
  static const std::vector<std::string> editors{"base", "prepend", "cpt-full",
                                                "cpt-layers", "mend", "propmend"};
  if (std::find(editors.begin(), editors.end(), editor) == editors.end() &&
      !fs::exists(out / "hypernet" / editor)) {
    throw ConfigError("unknown editor '" + editor + "'");
  }
  auto tok = load_tokenizer();
  auto base = load_model();
  auto eps = load_split(split);
  if (cfg.eval_limit > 0 && static_cast<std::size_t>(cfg.eval_limit) < eps.size())
    eps.resize(static_cast<std::size_t>(cfg.eval_limit));
  auto handle = make_editor(editor);
  EvalOptions opt;
  opt.on_episode = [&](std::size_t i, std::size_t n) {
    if (log && (i % 20 == 0 || i == n))
      log("eval[" + editor + "/" + split + "] " + std::to_string(i) + "/" + std::to_string(n));
  };
  auto rep = run_eval(handle, eps, base, tok, opt);
  const fs::path dir = out / "eval" / (editor + "_" + split);
  fs::create_directories(dir);
  write_json(dir / "report.json", to_json(rep));
  write_text(dir / "table.txt", format_table({rep}));
  write_text(dir / "results.csv", to_csv(rep));
  write_json(dir / "timing.json", {{"episode_seconds", rep.episode_seconds}});
  record_manifest(out, "eval:" + editor + "_" + split,
                  input_hashes(out, {out / "data" / ((split == "id" ? "test_id" : split) + ".jsonl"),
                                     out / "model" / "weights" / "manifest.json"}),
                  {dir / "report.json", dir / "table.txt", dir / "results.csv"}, cfg);
  if (log) log(format_table({rep}));
  if (report) *report = std::move(rep);
  return {0, "ok"};
}

CommandResult Pipeline::gradcheck() const {
  cfg.validate();
  SynWorld world;
  Tokenizer tok;
  WeightCatalog model;
  if (fs::exists(out / "model" / "weights" / "manifest.json")) {
    world = load_world();
    tok = load_tokenizer();
    model = load_model();
  } else {
    world = build_world(cfg.world);
    tok = Tokenizer(world.lexicon());
    model = build_model(model_config_for(cfg, tok));
  }
  std::vector<Episode> eps;
  for (std::uint64_t s = 0; s < 3; ++s) eps.push_back(make_instance(world, cfg.data.seed + s));

  std::vector<TokenSeq> batch;
  for (const auto& e : eps) batch.push_back(fact_seq(tok, e.fact_text));
  double rank1 = verify_rank1(model, batch, cfg.targets());

  MetaTrainConfig mc = cfg.metatrain;
  std::vector<EpisodeBatch> bs;
  for (std::size_t i = 0; i < 2; ++i) bs.push_back(eps[i].to_batch());
  auto prepared = prepare_episodes(bs, tok, mc);
  HypernetConfig hc = cfg.hypernet;
  hc.alpha_init = std::max(hc.alpha_init, 0.05);
  auto phi = init_hypernet(model.config(), cfg.targets(), hc, cfg.hypernet_seed);
  perturb_hypernet(phi, 0.05, cfg.hypernet_seed + 1);
  auto mg = check_meta_gradient(phi, model, prepared, mc, 200, 1e-4, cfg.hypernet_seed);

  std::ostringstream os;
  os << std::scientific << std::setprecision(3) << "rank1_max_rel_error " << rank1
     << "\nmeta_gradient_rel_error " << mg.rel_error << " (" << mg.entries << " entries)";
  const bool ok = rank1 <= 1e-8 && mg.rel_error <= 1e-3;
  fs::create_directories(out);
  write_json(out / "gradcheck.json", {{"rank1_max_rel_error", rank1},
                                      {"meta_gradient_rel_error", mg.rel_error},
                                      {"entries", mg.entries},
                                      {"pass", ok}});
  if (log) log(os.str());
  return {ok ? 0 : 2, os.str()};
}

}  // namespace propedit
