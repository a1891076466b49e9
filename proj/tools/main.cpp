#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lga/attention.hpp"
#include "lga/checks.hpp"
#include "lga/complexity.hpp"
#include "lga/config.hpp"
#include "lga/data.hpp"
#include "lga/errors.hpp"
#include "lga/inference.hpp"
#include "lga/kernels.hpp"
#include "lga/model.hpp"
#include "lga/trainer.hpp"

namespace {

using namespace lga;

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Per-key flags shared by the config-driven subcommands.
struct KeyFlags {
  std::optional<std::string> config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "key=value config file");
    for (const auto& spec : config::key_specs()) {
      const std::string def = spec.default_value.empty() ? "unset" : spec.default_value;
      app->add_option("--" + spec.key, values[spec.key], spec.help + " [default: " + def + "]");
    }
  }

  config::RunConfig resolve(CLI::App* app) const {
    KeyValues flags;
    for (const auto& spec : config::key_specs()) {
      if (app->count("--" + spec.key) > 0) flags[spec.key] = values.at(spec.key);
    }
    std::optional<std::filesystem::path> file;
    if (config_path) file = *config_path;
    auto cfg = config::parse_config(file, flags);
    std::istringstream lines(cfg.render());
    for (std::string line; std::getline(lines, line);) std::cerr << "# " << line << '\n';
    return cfg;
  }
};

bool is_blob(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  char magic[5] = {};
  in.read(magic, 5);
  return in && std::string(magic, 5) == kBlobMagic;
}

std::vector<data::PackedBatch> training_batches(const config::RunConfig& cfg) {
  if (!cfg.is_set("train_data")) throw ConfigError("train_data", "required for train");
  const std::filesystem::path path = cfg.get("train_data");
  const std::size_t batch = cfg.get_size("batch_size"), seq = cfg.get_size("seq_len");
  if (is_blob(path)) {
    auto batches = data::load_packed(path, batch);
    if (!batches.empty() && batches.front().seq_len != seq) {
      throw ConfigError("seq_len", "packed data has seq_len " + std::to_string(batches.front().seq_len));
    }
    return batches;
  }
  auto docs = data::shuffled(data::read_corpus(path), cfg.get_size("seed"));
  return data::pack_documents(docs, seq, batch, cfg.get_bool("mask_cross_doc"));
}

int run_train(const config::RunConfig& cfg) {
  const auto batches = training_batches(cfg);
  trainer::TrainOptions opts;
  opts.schedule = cfg.schedule();
  opts.adam = cfg.adam();
  opts.steps = cfg.get_size("steps");
  opts.log_every = cfg.get_size("log_every");
  opts.checkpoint = cfg.get("checkpoint");

  std::ofstream file;
  std::ostream* log = &std::cout;
  if (cfg.is_set("metrics_log")) {
    file.open(cfg.get("metrics_log"));
    if (!file) throw std::runtime_error("cannot write " + cfg.get("metrics_log"));
    log = &file;
  }
  *log << "step,lr,loss\n";
  log->precision(9);
  opts.on_log = [log](const trainer::LogRow& r) { *log << r.step << ',' << r.lr << ',' << r.loss << '\n'; };
  trainer::train(model::Model<float>::init(cfg.model()), batches, opts);
  std::cerr << "# wrote " << cfg.get("checkpoint") << '\n';
  return 0;
}

int run_eval(const config::RunConfig& cfg) {
  if (!cfg.is_set("eval_data")) throw ConfigError("eval_data", "required for eval");
  const auto m = model::load_checkpoint<float>(cfg.get("checkpoint"));
  const auto docs = data::read_corpus(cfg.get("eval_data"));
  const auto buckets = data::bucket_by_length(docs, static_cast<unsigned>(cfg.get_size("max_exponent")));
  std::cout << trainer::ppl_csv(trainer::eval_ppl(m, docs, buckets, m.config().max_seq_len));
  return 0;
}

int run_generate(const std::string& checkpoint, const std::string& prompt, std::size_t max_new,
                 const std::optional<std::string>& attn_override, const std::optional<std::size_t>& group_size,
                 const std::optional<std::size_t>& window) {
  auto m = model::load_checkpoint<float>(checkpoint);
  model::ModelConfig c = m.config();
  if (attn_override) c.attn = model::parse_attn_type(*attn_override);
  if (group_size) c.group_size = *group_size;
  if (window) c.window = *window;
  const model::Model<float> run(c, m.weights());
  std::vector<std::int32_t> tokens{data::kBos};
  const auto ids = data::tokenize(prompt);
  tokens.insert(tokens.end(), ids.begin(), ids.end());
  inference::DecodeSession<float> session(run);
  const auto out = inference::generate(session, tokens, max_new);
  std::cout << data::detokenize(out) << '\n';
  return 0;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  kernels::make_blas_deterministic();
  CLI::App app{"Grouped local-global attention: train, evaluate, decode and verify"};
  app.require_subcommand(1);
  app.footer(config::keys_help());

  KeyFlags train_flags, eval_flags;
  auto* train = app.add_subcommand("train", "train a model from a corpus or packed file");
  train_flags.attach(train);
  auto* eval = app.add_subcommand("eval", "length-bucketed perplexity of a checkpoint");
  eval_flags.attach(eval);

  auto* gen = app.add_subcommand("generate", "greedy continuation of a prompt");
  std::string gen_ckpt = "model.ckpt", prompt;
  std::size_t max_new = 32;
  std::optional<std::string> attn_override;
  std::optional<std::size_t> gen_group, gen_window;
  gen->add_option("--checkpoint", gen_ckpt, "checkpoint to load")->capture_default_str();
  gen->add_option("--prompt", prompt, "prompt text")->required();
  gen->add_option("--max-new", max_new, "tokens to generate")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--attn-override", attn_override, "decode with another attention strategy")
      ->check(CLI::IsMember({"global", "local", "global_approx", "group"}));
  gen->add_option("--group_size", gen_group, "group size for --attn-override group");
  gen->add_option("--window", gen_window, "local window for decoding");

  auto* flops = app.add_subcommand("flops", "leading-order attention cost estimates as CSV");
  std::string flops_kinds = "global,local,global_approx,group";
  complexity::CostModel cost;
  std::string grid;
  bool block_banded = false;
  flops->add_option("--attn", flops_kinds, "comma-separated strategies")->capture_default_str();
  flops->add_option("--D", cost.D, "model width")->capture_default_str();
  flops->add_option("--N", cost.N, "sequence length")->capture_default_str();
  flops->add_option("--W", cost.W, "window")->capture_default_str();
  flops->add_option("--C", cost.C, "chunk")->capture_default_str();
  flops->add_option("--L", cost.L, "group size")->capture_default_str();
  flops->add_option("--grid", grid, "comma-separated N values (overrides --N)");
  flops->add_flag("--block-banded", block_banded, "also emit rows with the two-block window cost");

  auto* data_cmd = app.add_subcommand("data", "corpus utilities");
  data_cmd->require_subcommand(1);
  auto* pack = data_cmd->add_subcommand("pack", "pack a corpus into BOS/EOS rows");
  std::string pack_in, pack_out;
  std::size_t pack_seq = 256;
  bool pack_mask = false;
  std::uint64_t pack_seed = 0;
  pack->add_option("--input", pack_in, "lines file or directory of .txt files")->required();
  pack->add_option("--seq-len", pack_seq, "row length")->capture_default_str();
  pack->add_option("--out", pack_out, "output file")->required();
  pack->add_option("--seed", pack_seed, "document shuffle seed")->capture_default_str();
  pack->add_flag("--mask-cross-doc", pack_mask, "mask cross-document predictions");

  auto* check = app.add_subcommand("check", "run the equivalence checks; exit 0 iff all pass");
  std::vector<std::string> suites;
  std::vector<std::string> faults;
  std::uint64_t check_seed = 0;
  check->add_option("--suite", suites, "suites to run (blockwise, ga, group, rope, alibi, cache, grad)")
      ->delimiter(',');
  check->add_option("--fault", faults, "inject a fault (blockwise)")->delimiter(',');
  check->add_option("--seed", check_seed, "random draw seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return run_train(train_flags.resolve(train));
    if (*eval) return run_eval(eval_flags.resolve(eval));
    if (*gen) return run_generate(gen_ckpt, prompt, max_new, attn_override, gen_group, gen_window);
    if (*flops) {
      std::vector<model::AttnType> kinds;
      for (const auto& k : split_commas(flops_kinds)) kinds.push_back(model::parse_attn_type(k));
      std::vector<double> ns;
      for (const auto& n : split_commas(grid)) ns.push_back(std::stod(n));
      if (ns.empty()) ns.push_back(cost.N);
      std::cout << complexity::to_csv(complexity::sweep(cost, ns, kinds, block_banded));
      return 0;
    }
    if (*pack) {
      auto docs = data::shuffled(data::read_corpus(pack_in), pack_seed);
      auto batches = data::pack_documents(docs, pack_seq, 1, pack_mask);
      data::save_packed(pack_out, batches);
      std::cerr << "# packed " << batches.size() << " rows of " << pack_seq << " tokens into " << pack_out << '\n';
      return 0;
    }
    if (*check) {
      for (const auto& f : faults) {
        if (f != "blockwise") throw ConfigError("fault", "unknown fault '" + f + "'");
        attention::set_blockwise_mask_fault(true);
      }
      const auto results = checks::run_checks(suites, check_seed);
      std::cout << checks::report_csv(results);
      for (const auto& r : results) {
        if (!r.pass) return kExitCheckFailed;
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
