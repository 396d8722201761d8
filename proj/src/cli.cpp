// SPDX-License-Identifier: Apache-2.0

#include "hipo/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "hipo/checkpoint.hpp"
#include "hipo/error.hpp"
#include "hipo/llm.hpp"
#include "hipo/lm.hpp"
#include "hipo/segdata.hpp"
#include "hipo/synth.hpp"
#include "hipo/trainer.hpp"
#include "hipo/verify.hpp"

#ifndef HIPO_PRESET_DIR
#define HIPO_PRESET_DIR "presets"
#endif

namespace hipo::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kOracleTolerance = 1e-10;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(ckpt::read_file(path));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
  return lines;
}

json parse_line(const std::string& line, std::size_t number) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError("line " + std::to_string(number) + ": " + e.what(), e.byte);
  }
}

std::string string_field(const json& j, const std::string& key) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string()) throw SchemaError(key);
  return j[key].get<std::string>();
}

struct ModelFlags {
  std::size_t layers = lm::ModelConfig{}.n_layers;
  std::size_t embed = lm::ModelConfig{}.embed_dim;
  std::size_t heads = lm::ModelConfig{}.n_heads;
  std::size_t context = lm::ModelConfig{}.context_length;

  void add_to(CLI::App& app) {
    app.add_option("--layers", layers, "Transformer layers of a fresh model")->capture_default_str();
    app.add_option("--embed", embed, "Embedding width of a fresh model")->capture_default_str();
    app.add_option("--heads", heads, "Attention heads of a fresh model")->capture_default_str();
    app.add_option("--context", context, "Context length of a fresh model")->capture_default_str();
  }
  lm::ModelConfig config(std::uint64_t seed) const {
    lm::ModelConfig c;
    c.n_layers = layers;
    c.embed_dim = embed;
    c.n_heads = heads;
    c.context_length = context;
    c.seed = seed;
    c.validate();
    return c;
  }
};

struct EndpointFlags {
  std::string url, model, key;
  std::size_t in_flight = 4;
  std::size_t attempts = 5;

  void add_to(CLI::App& app) {
    app.add_option("--endpoint", url, "Chat-completions URL (default $HIPO_LLM_ENDPOINT)");
    app.add_option("--llm-model", model, "Model name (default $HIPO_LLM_MODEL)");
    app.add_option("--api-key", key, "Bearer token (default $HIPO_LLM_KEY)");
    app.add_option("--max-in-flight", in_flight, "Concurrent requests")->capture_default_str();
    app.add_option("--max-attempts", attempts, "Tries per request")->capture_default_str();
  }
  llm::EndpointConfig config() const {
    llm::EndpointConfig c;
    if (url.empty()) {
      c = llm::EndpointConfig::from_env();
    } else {
      c.url = url;
      if (const char* m = std::getenv("HIPO_LLM_MODEL")) c.model = m;
      if (const char* k = std::getenv("HIPO_LLM_KEY")) c.api_key = k;
    }
    if (!model.empty()) c.model = model;
    if (!key.empty()) c.api_key = key;
    c.max_in_flight = in_flight;
    c.max_attempts = attempts;
    return c;
  }
};

// --- gen-synthetic -----------------------------------------------------------

struct GenArgs {
  std::size_t n = 512;
  std::uint64_t seed = 0;
  long long max_operand = 99;
  std::string out;
};

int gen_synthetic(const GenArgs& a, std::ostream& out) {
  const auto pairs = synth::gen_dataset(a.n, a.seed, a.max_operand);
  seg::write_jsonl(a.out, pairs);
  out << "wrote " << pairs.size() << " pairs to " << a.out << "\n";
  return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string regime, matrix, data, out, init, reference, objective = "hipo";
  bool stepwise = false;
  std::uint64_t seed = 0;
  std::optional<double> beta, lr, max_grad_norm;
  std::optional<std::size_t> epochs;
  std::size_t batch_size = 8;
  ModelFlags model;
};

train::ConfigMatrix select_rows(const TrainArgs& a) {
  if (a.matrix.empty() && a.regime.empty())
    throw UsageError("train needs --regime or --matrix");
  train::ConfigMatrix m;
  if (!a.matrix.empty()) {
    m = train::load_matrix(resolve_matrix(a.matrix));
  } else {
    // A bare regime name is looked up in the shipped presets, individual
    // regimes first.
    for (const char* preset : {"paper-individual", "paper-stepwise"}) {
      m = train::load_matrix(resolve_matrix(preset));
      if (std::any_of(m.rows.begin(), m.rows.end(),
                      [&](const auto& r) { return r.name == a.regime; }))
        break;
    }
  }
  if (!a.regime.empty()) {
    const train::RegimeRow row = m.find(a.regime);
    m.rows = {row};
  }
  if (a.beta) m.beta = *a.beta;
  for (auto& row : m.rows) {
    if (a.lr) row.lr = *a.lr;
    if (a.epochs) row.epochs = *a.epochs;
  }
  m.validate();
  return m;
}

int train_cmd(const TrainArgs& a, std::ostream& out) {
  const train::ConfigMatrix matrix = select_rows(a);
  if (a.stepwise && !a.regime.empty()) throw UsageError("--stepwise needs a matrix, not --regime");
  const auto data = seg::load_jsonl(a.data);

  const lm::Model init =
      a.init.empty() ? lm::init_model(a.model.config(a.seed)) : ckpt::load_checkpoint(a.init);
  const lm::Model reference = a.reference.empty() ? init : ckpt::load_checkpoint(a.reference);

  train::TrainOptions options;
  options.batch_size = a.batch_size;
  options.beta = matrix.beta;
  options.max_grad_norm = a.max_grad_norm;
  if (a.objective == "dpo") {
    options.objective = train::Objective::Dpo;
  } else if (a.objective != "hipo") {
    throw UsageError("--objective must be hipo or dpo");
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  ckpt::save_checkpoint(reference, dir / "reference");
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw DataError("cannot write " + (dir / "metrics.jsonl").string());
  options.metrics = &metrics;

  train::TrainLog log;
  if (a.stepwise || matrix.rows.size() == 1) {
    lm::Model policy = init;
    log = train::run_stepwise(policy, reference, data, matrix, a.seed, options);
    ckpt::save_checkpoint(policy, dir / "policy");
  } else {
    // Independent runs: every row starts from the same initial policy.
    for (const auto& row : matrix.rows) {
      lm::Model policy = init;
      train::TrainLog part = train::train_regime(policy, reference, data, row, a.seed, options);
      ckpt::save_checkpoint(policy, dir / "rows" / row.name);
      for (auto& s : part.steps) log.steps.push_back(std::move(s));
      for (auto& r : part.regimes) log.regimes.push_back(std::move(r));
      log.wall_seconds += part.wall_seconds;
    }
  }
  metrics.close();
  write_text(dir / "train_log.json", train::summary_json(log));
  out << "trained " << log.regimes.size() << " regime(s), " << log.steps.size()
      << " steps; reference " << ckpt::checkpoint_checksum(dir / "reference") << "\n";
  return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string model, out;
  std::size_t n = 64;
  std::uint64_t seed = 0;
  long long max_operand = 99;
  double temperature = synth::kEvalTemperature;
  std::size_t max_new = 64;
};

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  const lm::Model model = ckpt::load_checkpoint(a.model);
  const auto tasks = synth::gen_tasks(a.n, a.seed, a.max_operand);
  const auto report = synth::eval_accuracy(model, tasks, a.temperature, a.seed, a.max_new);
  if (!a.out.empty()) write_text(a.out, synth::report_json(report));
  out << "accuracy " << report.accuracy << " (" << report.n_correct << "/" << report.n_items
      << ")\n";
  return kOk;
}

// --- augment / judge -----------------------------------------------------------

struct AugmentArgs {
  std::string in, out;
  std::uint64_t seed = 0;
  EndpointFlags endpoint;
};

// Input lines: {"instruction", "output_a", "output_b", "preferred": "output_a"|"output_b"}
int augment_cmd(const AugmentArgs& a, std::ostream& out) {
  std::vector<llm::AugmentInput> inputs;
  const auto lines = read_lines(a.in);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json j = parse_line(lines[i], i + 1);
    llm::AugmentInput in;
    in.instruction = string_field(j, "instruction");
    in.output_a = string_field(j, "output_a");
    in.output_b = string_field(j, "output_b");
    const std::string pref = j.contains("preferred") ? string_field(j, "preferred") : "output_a";
    if (pref != "output_a" && pref != "output_b") throw SchemaError("preferred");
    in.preferred = pref == "output_a" ? llm::Preferred::A : llm::Preferred::B;
    inputs.push_back(std::move(in));
  }
  const llm::Client client(a.endpoint.config());
  const auto records = client.augment_all(inputs);
  std::vector<seg::PreferencePair> pairs;
  for (std::size_t i = 0; i < records.size(); ++i)
    pairs.push_back(llm::to_preference_pair(records[i], inputs[i]));
  seg::write_jsonl(a.out, pairs);
  out << "wrote " << pairs.size() << " pairs to " << a.out << "\n";
  return kOk;
}

struct JudgeArgs {
  std::string in, out, radar;
  std::uint64_t seed = 0;
  EndpointFlags endpoint;
};

// Input lines: {"problem", "response"}
int judge_cmd(const JudgeArgs& a, std::ostream& out) {
  std::vector<llm::JudgeInput> inputs;
  const auto lines = read_lines(a.in);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json j = parse_line(lines[i], i + 1);
    inputs.push_back(llm::JudgeInput{string_field(j, "problem"), string_field(j, "response")});
  }
  const llm::Client client(a.endpoint.config());
  const auto scores = client.judge_all(inputs);
  std::string text;
  for (const auto& s : scores) text += llm::scores_json(s) + "\n";
  write_text(a.out, text);
  const std::string radar = llm::radar_json(llm::aggregate_scores(scores));
  if (!a.radar.empty()) write_text(a.radar, radar);
  out << radar;
  return kOk;
}

// --- checks --------------------------------------------------------------------

struct GradArgs {
  std::uint64_t seed = 1;
  double epsilon = 1e-5;
  std::vector<std::string> matrices{"paper-stepwise", "paper-individual"};
  std::string out;
};

int gradcheck_cmd(const GradArgs& a, std::ostream& out) {
  std::vector<train::RegimeRow> rows;
  double beta = loss::kDefaultBeta;
  for (const auto& name : a.matrices) {
    const fs::path path = resolve_matrix(name);
    const auto m = train::load_matrix(path);
    beta = m.beta;
    for (auto row : m.rows) {
      row.name = path.stem().string() + "/" + row.name;
      rows.push_back(std::move(row));
    }
  }
  lm::ModelConfig config;
  config.seed = a.seed;
  const lm::Model policy = lm::init_model(config);
  config.seed = a.seed + 1;
  lm::Model reference = lm::init_model(config);
  reference.config.seed = a.seed;
  const auto report =
      verify::grad_check_loss(policy, reference, verify::gradcheck_batch(), rows, beta, a.epsilon);
  const std::string text = verify::gradcheck_json(report);
  if (!a.out.empty()) write_text(a.out, text + "\n");
  out << "max relative error " << report.max_error << " (" << report.worst_row << ", "
      << report.worst_param << "); max reference gradient " << report.max_reference_grad << "\n";
  return report.max_error < kGradTolerance && report.max_reference_grad == 0.0 ? kOk : kNumeric;
}

struct OracleArgs {
  std::uint64_t seed = 0;
  std::size_t cases = 50;
  std::string out;
};

int oracle_cmd(const OracleArgs& a, std::ostream& out) {
  const auto report = verify::run_oracle(a.seed, a.cases);
  const std::string text = verify::oracle_json(report);
  if (!a.out.empty()) write_text(a.out, text + "\n");
  out << text << "\n";
  return report.max_error() <= kOracleTolerance ? kOk : kNumeric;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kUsage;
  if (dynamic_cast<const EndpointError*>(&e)) return kEndpoint;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const DataError*>(&e)) return kData;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return kData;
  return kNumeric;
}

fs::path preset_dir() {
  if (const char* dir = std::getenv("HIPO_PRESET_DIR")) return dir;
  return HIPO_PRESET_DIR;
}

fs::path resolve_matrix(const std::string& name_or_path) {
  const fs::path given(name_or_path);
  if (fs::is_regular_file(given)) return given;
  for (const fs::path& candidate : {preset_dir() / given, preset_dir() / (name_or_path + ".json")})
    if (fs::is_regular_file(candidate)) return candidate;
  throw UsageError("no matrix file or preset named " + name_or_path);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"HiPO desk-scale lab: segment-level preference optimization on a tiny LM", "hipo"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write synthetic addition preference pairs");
  gen_cmd->add_option("--n", gen.n, "Number of pairs")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--max-operand", gen.max_operand, "Largest operand")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output JSONL")->required();

  AugmentArgs aug;
  auto* aug_cmd = app.add_subcommand("augment", "Rewrite raw preference pairs into segments with an LLM");
  aug_cmd->add_option("--in", aug.in, "JSONL of {instruction, output_a, output_b, preferred}")->required();
  aug_cmd->add_option("--out", aug.out, "Output segmented JSONL")->required();
  aug_cmd->add_option("--seed", aug.seed, "Accepted for uniformity; requests are deterministic");
  aug.endpoint.add_to(*aug_cmd);

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Train a policy with one regime or a configuration matrix");
  tr_cmd->add_option("--regime", tr.regime, "Regime name from --matrix or the shipped presets");
  tr_cmd->add_option("--matrix", tr.matrix, "Matrix JSON file or preset name");
  tr_cmd->add_flag("--stepwise", tr.stepwise, "Apply the rows in order to one policy");
  tr_cmd->add_option("--data", tr.data, "Segmented JSONL")->required();
  tr_cmd->add_option("--out", tr.out, "Output directory")->required();
  tr_cmd->add_option("--seed", tr.seed, "Initialization and shuffle seed")->capture_default_str();
  tr_cmd->add_option("--init", tr.init, "Initial policy checkpoint (default: fresh model)");
  tr_cmd->add_option("--reference", tr.reference, "Reference checkpoint (default: initial policy)");
  tr_cmd->add_option("--beta", tr.beta, "Override the matrix beta");
  tr_cmd->add_option("--lr", tr.lr, "Override every row's learning rate");
  tr_cmd->add_option("--epochs", tr.epochs, "Override every row's epoch count");
  tr_cmd->add_option("--batch-size", tr.batch_size, "Pairs per step")->capture_default_str();
  tr_cmd->add_option("--max-grad-norm", tr.max_grad_norm, "Global gradient-norm clip");
  tr_cmd->add_option("--objective", tr.objective, "hipo or dpo")->capture_default_str();
  tr.model.add_to(*tr_cmd);

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Answer accuracy on synthetic tasks");
  ev_cmd->add_option("--model", ev.model, "Checkpoint directory")->required();
  ev_cmd->add_option("--n", ev.n, "Number of tasks")->capture_default_str();
  ev_cmd->add_option("--seed", ev.seed, "Task and sampling seed")->capture_default_str();
  ev_cmd->add_option("--max-operand", ev.max_operand, "Largest operand")->capture_default_str();
  ev_cmd->add_option("--temperature", ev.temperature, "Sampling temperature")->capture_default_str();
  ev_cmd->add_option("--max-new", ev.max_new, "Generation budget in tokens")->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "EvalReport JSON");

  JudgeArgs jd;
  auto* jd_cmd = app.add_subcommand("judge", "Score responses with the rubric judge");
  jd_cmd->add_option("--in", jd.in, "JSONL of {problem, response}")->required();
  jd_cmd->add_option("--out", jd.out, "JSONL of scores")->required();
  jd_cmd->add_option("--radar", jd.radar, "RadarSummary JSON");
  jd_cmd->add_option("--seed", jd.seed, "Accepted for uniformity; the judge runs at temperature 0");
  jd.endpoint.add_to(*jd_cmd);

  GradArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  gc_cmd->add_option("--seed", gc.seed, "Model seed")->capture_default_str();
  gc_cmd->add_option("--epsilon", gc.epsilon, "Central-difference step")->capture_default_str();
  gc_cmd->add_option("--matrix", gc.matrices, "Matrices whose rows are checked")->capture_default_str();
  gc_cmd->add_option("--out", gc.out, "Report JSON");

  OracleArgs oc;
  auto* oc_cmd = app.add_subcommand("oracle", "Compare tiny models against brute-force enumeration");
  oc_cmd->add_option("--seed", oc.seed, "Case seed")->capture_default_str();
  oc_cmd->add_option("--cases", oc.cases, "Number of random cases")->capture_default_str();
  oc_cmd->add_option("--out", oc.out, "Report JSON");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return gen_synthetic(gen, out);
    if (*aug_cmd) return augment_cmd(aug, out);
    if (*tr_cmd) return train_cmd(tr, out);
    if (*ev_cmd) return eval_cmd(ev, out);
    if (*jd_cmd) return judge_cmd(jd, out);
    if (*gc_cmd) return gradcheck_cmd(gc, out);
    if (*oc_cmd) return oracle_cmd(oc, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kUsage;
}

}  // namespace hipo::cli
