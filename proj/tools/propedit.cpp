#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "propedit/errors.hpp"
#include "propedit/pipeline.hpp"

using namespace propedit;

namespace {

RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed,
                      std::optional<int> max_steps) {
  nlohmann::json doc = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
  }
  apply_env_overrides(doc, propedit_environment());
  RunConfig cfg = run_config_from_json(doc);
  if (seed) cfg.set_seed(*seed);
  if (max_steps) cfg.metatrain.max_steps = *max_steps;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hypernetwork knowledge editing on a synthetic world"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", editor = "propmend", split = "id";
  std::optional<std::uint64_t> seed;
  std::optional<int> max_steps;
  bool resume = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "Override every seed");
    sub->add_option("--out", out_dir, "Artifact directory")->capture_default_str();
  };
  auto* datagen = app.add_subcommand("datagen", "Generate the world, episodes and corpus");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base model");
  auto* metatrain = app.add_subcommand("metatrain", "Train a hypernetwork editor");
  auto* eval = app.add_subcommand("eval", "Evaluate an editor on a split");
  auto* gradcheck = app.add_subcommand("gradcheck", "Rank-1 and meta-gradient checks");
  for (auto* s : {datagen, pretrain, metatrain, eval, gradcheck}) common(s);
  metatrain->add_option("--editor", editor, "Hypernet label (propmend, mend, ...)")
      ->capture_default_str();
  metatrain->add_option("--max-steps", max_steps, "Override metatrain.max_steps");
  metatrain->add_flag("--resume", resume, "Continue from the last checkpoint");
  eval->add_option("--editor", editor, "base, prepend, cpt-full, cpt-layers, mend, propmend")
      ->capture_default_str();
  eval->add_option("--split", split, "id, ood_entity, ood_relation, ood_both")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    Pipeline p{load_config(config_path, seed, max_steps), out_dir,
               [](const std::string& m) { std::cerr << m << '\n'; }};
    CommandResult r;
    if (*datagen) r = p.datagen();
    if (*pretrain) r = p.pretrain();
    if (*metatrain) r = p.metatrain(editor, resume);
    if (*eval) r = p.eval(editor, split);
    if (*gradcheck) {
      r = p.gradcheck();
      std::cout << r.message << '\n';
      if (r.exit_code != 0) std::cerr << "gradcheck: tolerance violated\n";
    }
    return r.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const LookupError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
