#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "atbias/backend.hpp"
#include "atbias/biaser.hpp"
#include "atbias/decode.hpp"
#include "atbias/error.hpp"
#include "atbias/eval_bench.hpp"
#include "atbias/knowledge_store.hpp"

namespace {

using namespace atbias;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CliConfig {
  BiasConfig bias;
  std::string backend = "mock";
  std::string endpoint;
  std::string script;
  std::string config_file;
  std::size_t top_n = 0;
  std::optional<std::uint64_t> seed;
  bool sample = false;
  std::size_t jobs = 1;
  double timeout = 30.0;
  bool allow_renormalize = false;
  bool verbose = false;
};

// Fills every option the user did not pass from the config file, then the
// endpoint from the environment. Flags win over both.
void apply_config_file(CLI::App& app, CliConfig& cfg) {
  if (cfg.config_file.empty()) return;
  std::ifstream in(cfg.config_file);
  if (!in) throw Error("config file not found: " + cfg.config_file);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + cfg.config_file + ": " + e.what());
  }
  auto unset = [&](const char* flag) { return app.count(flag) == 0; };
  try {
    if (unset("--alpha") && j.contains("alpha")) cfg.bias.filter.alpha = j.at("alpha").get<double>();
    if (unset("--k") && j.contains("k")) cfg.bias.filter.k = j.at("k").get<std::size_t>();
    if (unset("--ngram") && j.contains("ngram")) cfg.bias.n = j.at("ngram").get<std::size_t>();
    if (unset("--lambda-new") && j.contains("lambda_new")) {
      cfg.bias.lambda_new = j.at("lambda_new").get<double>();
    }
    if (unset("--lambda-para") && j.contains("lambda_para")) {
      cfg.bias.lambda_para = j.at("lambda_para").get<double>();
    }
    if (unset("--backend") && j.contains("backend")) cfg.backend = j.at("backend").get<std::string>();
    if (unset("--script") && j.contains("script")) cfg.script = j.at("script").get<std::string>();
    if (unset("--top-n") && j.contains("top_n")) cfg.top_n = j.at("top_n").get<std::size_t>();
    if (unset("--seed") && j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (unset("--jobs") && j.contains("jobs")) cfg.jobs = j.at("jobs").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + cfg.config_file + ": " + e.what());
  }
  if (unset("--endpoint") && std::getenv("ATBIAS_ENDPOINT") == nullptr &&
      j.contains("endpoint")) {
    cfg.endpoint = j.at("endpoint").get<std::string>();
  }
}

void resolve_endpoint(CLI::App& app, CliConfig& cfg) {
  if (app.count("--endpoint") != 0) return;
  if (const char* env = std::getenv("ATBIAS_ENDPOINT"); env != nullptr && *env != '\0') {
    cfg.endpoint = env;
  }
}

std::unique_ptr<ModelBackend> make_backend(const CliConfig& cfg) {
  if (cfg.backend == "mock") {
    if (cfg.script.empty()) throw UsageError("--backend mock needs --script");
    return std::make_unique<MockLM>(MockLM::load(cfg.script));
  }
  if (cfg.endpoint.empty()) {
    throw UsageError("--backend remote needs --endpoint, ATBIAS_ENDPOINT or a config file");
  }
  RemoteOptions ro;
  ro.endpoint = cfg.endpoint;
  ro.timeout_seconds = cfg.timeout;
  ro.allow_renormalize = cfg.allow_renormalize;
  return std::make_unique<RemoteBackend>(ro);
}

SelectMode select_mode(const CliConfig& cfg, bool require_seed) {
  if (!cfg.sample) return SelectMode::greedy();
  if (!cfg.seed) {
    if (require_seed) throw UsageError("sampling in evaluation commands requires --seed");
    return SelectMode::sample(std::random_device{}());
  }
  return SelectMode::sample(*cfg.seed);
}

nlohmann::json transcript_json(const Transcript& t) {
  auto steps = nlohmann::json::array();
  for (const auto& s : t.steps()) {
    auto raw = nlohmann::json::array();
    for (const auto& e : s.raw.entries()) {
      raw.push_back({{"id", e.token.value}, {"piece", e.piece.raw}, {"prob", e.prob}});
    }
    auto scores = nlohmann::json::array();
    for (const auto& e : s.scores.entries) {
      scores.push_back({{"id", e.token.value}, {"score", e.score}});
    }
    steps.push_back({{"index", s.index},
                     {"chosen", s.chosen.value},
                     {"basis", s.scores.basis},
                     {"fell_back", s.scores.fell_back},
                     {"raw", raw},
                     {"scores", scores}});
  }
  return {{"total_steps", t.total_steps()}, {"dropped", t.dropped()}, {"steps", steps}};
}

void print_failures(const std::vector<CacheFailure>& failures) {
  for (const auto& f : failures) {
    std::cerr << "cache-build: fact " << f.fact_id << ": " << f.message << "\n";
  }
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--values: not a number: '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--values: empty list");
  return out;
}

struct EvalFlags {
  std::string dataset;
  std::string format = "mquake_like";
  std::string cache;
  std::string memory_batch = "1";
  std::string report;
  std::size_t max_tokens = 16;
  bool timing = false;
};

void add_eval_flags(CLI::App* cmd, EvalFlags& f) {
  cmd->add_option("--dataset", f.dataset, "Evaluation dataset (JSON array or JSON Lines)")
      ->required();
  cmd->add_option("--format", f.format, "Dataset format")
      ->check(CLI::IsMember({"mquake_like", "counterfact_like"}));
  cmd->add_option("--cache", f.cache, "Knowledge cache built for the dataset edits")
      ->required();
  cmd->add_option("--memory-batch", f.memory_batch,
                  "Instances sharing one edit memory: a positive integer or 'full'");
  cmd->add_option("--report", f.report, "Report output path");
  cmd->add_option("--max-tokens", f.max_tokens, "Tokens generated per answer");
}

Dataset load_eval_dataset(const EvalFlags& f) {
  const auto format = parse_dataset_format(f.format);
  if (!format) throw UsageError("unknown dataset format: " + f.format);
  auto ds = load_dataset(f.dataset, *format);
  for (const auto& d : ds.diagnostics) {
    std::cerr << f.dataset << ": record " << d.line << ": " << d.message << "\n";
  }
  return ds;
}

EvalOptions eval_options(const EvalFlags& f, const CliConfig& cfg) {
  EvalOptions opts;
  if (f.memory_batch == "full") {
    opts.memory_batch = std::nullopt;
  } else {
    try {
      std::size_t used = 0;
      const auto b = std::stoul(f.memory_batch, &used);
      if (used != f.memory_batch.size() || b == 0) throw std::invalid_argument("batch");
      opts.memory_batch = b;
    } catch (const std::exception&) {
      throw UsageError("--memory-batch must be a positive integer or 'full'");
    }
  }
  opts.decode.mode = select_mode(cfg, true);
  opts.decode.max_tokens = f.max_tokens;
  opts.decode.top_n = cfg.top_n;
  opts.jobs = cfg.jobs;
  return opts;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ATBias: decoding-time knowledge editing"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", "atbias 0.1.0");

  CliConfig cfg;
  app.add_option("--alpha", cfg.bias.filter.alpha, "Probabilistic filter threshold");
  app.add_option("--k", cfg.bias.filter.k, "Rank filter size");
  app.add_option("--ngram", cfg.bias.n, "Character n-gram size");
  app.add_option("--lambda-new", cfg.bias.lambda_new, "Weight for new-knowledge entities");
  app.add_option("--lambda-para", cfg.bias.lambda_para,
                 "Weight for parametric-knowledge entities");
  app.add_option("--backend", cfg.backend, "Model backend")
      ->check(CLI::IsMember({"mock", "remote"}));
  app.add_option("--endpoint", cfg.endpoint,
                 "Remote endpoint URL (fallback: ATBIAS_ENDPOINT, then config file)");
  app.add_option("--script", cfg.script, "MockLM script for --backend mock");
  app.add_option("--config", cfg.config_file, "JSON config file");
  app.add_option("--top-n", cfg.top_n, "Tokens requested per step (0: max(4k, 64))");
  app.add_option("--seed", cfg.seed, "Seed for sampling mode");
  app.add_flag("--sample", cfg.sample, "Sample from the score vector instead of greedy");
  app.add_option("--jobs", cfg.jobs, "Parallel workers")->check(CLI::PositiveNumber);
  app.add_option("--timeout", cfg.timeout, "Remote request timeout in seconds");
  app.add_flag("--allow-renormalize", cfg.allow_renormalize,
               "Renormalize remote probabilities reported as unnormalized");
  app.add_flag("-v,--verbose", cfg.verbose, "Log progress to stderr");

  // cache-build
  auto* cache_cmd = app.add_subcommand("cache-build", "Induce parametric knowledge offline");
  cache_cmd->fallthrough();
  std::string cb_memory, cb_dataset, cb_format = "mquake_like", cb_out, cb_stop_words;
  auto* cb_mem_opt = cache_cmd->add_option("--memory", cb_memory, "Edit memory (JSON Lines)");
  cache_cmd->add_option("--dataset", cb_dataset, "Take edits from an evaluation dataset")
      ->excludes(cb_mem_opt);
  cache_cmd->add_option("--format", cb_format, "Dataset format")
      ->check(CLI::IsMember({"mquake_like", "counterfact_like"}));
  cache_cmd->add_option("--cache", cb_out, "Cache output path")->required();
  cache_cmd->add_option("--stop-words", cb_stop_words, "Stop-word file for free-text facts");

  // decode
  auto* decode_cmd = app.add_subcommand("decode", "Decode one prompt with the bias hook");
  decode_cmd->fallthrough();
  std::string d_prompt, d_cache, d_memory, d_transcript;
  std::size_t d_max_tokens = 64;
  std::size_t d_retrieve = 1;
  bool d_no_bias = false;
  decode_cmd->add_option("--prompt", d_prompt, "Prompt text")->required();
  decode_cmd->add_option("--cache", d_cache, "Knowledge cache supplying entities");
  decode_cmd->add_option("--memory", d_memory,
                         "Edit memory; restricts entities to facts retrieved for the prompt");
  decode_cmd->add_option("--retrieve", d_retrieve, "Facts retrieved with --memory");
  decode_cmd->add_option("--max-tokens", d_max_tokens, "Maximum generated tokens");
  decode_cmd->add_flag("--no-bias", d_no_bias, "Run the lambda = 0 control");
  decode_cmd->add_option("--transcript", d_transcript, "Write step records as JSON ('-' for stdout)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Editing accuracy on a dataset");
  eval_cmd->fallthrough();
  EvalFlags ef;
  add_eval_flags(eval_cmd, ef);
  eval_cmd->add_flag("--timing", ef.timing, "Include wall-clock fields in the report");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Per-token latency, biased vs control");
  bench_cmd->fallthrough();
  BenchOptions bo;
  std::size_t b_vocab = 32000, b_entities = 16;
  std::string b_report, b_cache;
  bench_cmd->add_option("--steps", bo.steps, "Decode steps per run")
      ->check(CLI::Range(std::size_t{100}, std::numeric_limits<std::size_t>::max()));
  bench_cmd->add_option("--repetitions", bo.repetitions, "Timed runs per arm")
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--vocab-size", b_vocab, "Synthetic vocabulary size");
  bench_cmd->add_option("--entities", b_entities, "Synthetic entity count");
  bench_cmd->add_option("--cache", b_cache, "Use entities from this cache instead");
  bench_cmd->add_option("--bench-prompt", bo.prompt, "Prompt for remote benchmarks");
  bench_cmd->add_option("--report", b_report, "Report output path");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Ablation sweep over one hyperparameter");
  sweep_cmd->fallthrough();
  EvalFlags sf;
  std::string s_axis, s_values = "0,1,2";
  add_eval_flags(sweep_cmd, sf);
  sweep_cmd->add_option("--axis", s_axis, "n | alpha | k | lambda_new | lambda_para")->required();
  sweep_cmd->add_option("--values", s_values, "Comma-separated values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  spdlog::set_level(cfg.verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    apply_config_file(app, cfg);
    resolve_endpoint(app, cfg);
    cfg.bias.validate();

    if (*cache_cmd) {
      EditMemory memory;
      if (!cb_dataset.empty()) {
        const auto format = parse_dataset_format(cb_format);
        auto ds = load_dataset(cb_dataset, *format);
        for (const auto& d : ds.diagnostics) {
          std::cerr << cb_dataset << ": record " << d.line << ": " << d.message << "\n";
        }
        for (const auto& inst : ds.instances) {
          for (const auto& e : inst.edits) memory.records.push_back(e);
        }
      } else if (!cb_memory.empty()) {
        memory = load_memory(cb_memory);
      } else {
        throw UsageError("cache-build needs --memory or --dataset");
      }
      const auto backend = make_backend(cfg);
      std::optional<std::vector<KnowledgeCacheRecord>> existing;
      if (std::filesystem::exists(cb_out)) existing = load_cache(cb_out);
      std::optional<RuleExtractor> extractor;
      if (!cb_stop_words.empty()) extractor = RuleExtractor::from_stop_word_file(cb_stop_words);

      CacheBuildOptions opts;
      opts.existing = existing ? &*existing : nullptr;
      opts.jobs = cfg.jobs;
      opts.extractor = extractor ? &*extractor : nullptr;
      const auto result = build_cache(memory, *backend, opts);
      save_cache(cb_out, result.records);
      print_failures(result.failures);
      std::cout << "cache-build: " << result.records.size() << " records written to " << cb_out
                << " (" << result.induced << " induced, " << result.reused << " reused, "
                << result.failures.size() << " failed)\n";
      return result.failures.empty() ? kExitOk : kExitRuntime;
    }

    if (*decode_cmd) {
      const auto backend = make_backend(cfg);
      EntitySet entities;
      if (!d_cache.empty()) {
        const auto records = load_cache(d_cache);
        if (!d_memory.empty()) {
          const auto memory = load_memory(d_memory);
          for (const auto& f : retrieve_facts(memory, d_prompt, d_retrieve)) {
            for (const auto& r : records) {
              if (r.fact_id == f.id) entities.merge(r.entities);
            }
          }
        } else {
          for (const auto& r : records) entities.merge(r.entities);
        }
      } else if (!d_memory.empty()) {
        throw UsageError("--memory needs --cache");
      }
      DecodeOptions opts;
      opts.mode = select_mode(cfg, false);
      opts.max_tokens = d_max_tokens;
      opts.top_n = cfg.top_n;
      const auto bias = d_no_bias ? cfg.bias.as_control() : cfg.bias;
      DecodeResult result;
      try {
        result = decode(*backend, d_prompt, entities, bias, opts);
      } catch (const DecodeError& e) {
        std::cout << e.partial().text << "\n";
        throw;
      }
      std::cout << result.text << "\n";
      if (!d_transcript.empty()) {
        const auto dump = transcript_json(result.transcript).dump(2);
        if (d_transcript == "-") {
          std::cout << dump << "\n";
        } else {
          std::ofstream out(d_transcript);
          if (!out) throw Error("cannot write " + d_transcript);
          out << dump << "\n";
        }
      }
      return kExitOk;
    }

    if (*eval_cmd) {
      const auto ds = load_eval_dataset(ef);
      const auto opts = eval_options(ef, cfg);
      const auto backend = make_backend(cfg);
      const auto cache = load_cache(ef.cache);
      const auto report = evaluate(ds.instances, *backend, cfg.bias, cache, opts);
      if (!ef.report.empty()) write_eval_report(ef.report, report, ef.timing);
      std::cout << format_eval_summary(report);
      for (const auto& v : report.verdicts) {
        if (!v.error.empty()) std::cerr << "instance " << v.id << ": " << v.error << "\n";
      }
      return kExitOk;
    }

    if (*bench_cmd) {
      bo.top_n = cfg.top_n;
      std::unique_ptr<ModelBackend> backend;
      EntitySet entities;
      if (!b_cache.empty()) {
        for (const auto& r : load_cache(b_cache)) entities.merge(r.entities);
      } else {
        entities = synthetic_bench_entities(b_entities);
      }
      if (cfg.backend == "mock" && cfg.script.empty()) {
        backend = std::make_unique<MockLM>(synthetic_bench_backend(b_vocab, entities));
      } else {
        backend = make_backend(cfg);
      }
      const auto report = measure_latency(*backend, cfg.bias, entities, bo);
      if (!b_report.empty()) write_latency_report(b_report, report);
      std::cout << format_latency_summary(report);
      return kExitOk;
    }

    if (*sweep_cmd) {
      const auto axis = parse_sweep_axis(s_axis);
      if (!axis) throw UsageError("unknown sweep axis: " + s_axis);
      const auto values = parse_values(s_values);
      const auto ds = load_eval_dataset(sf);
      auto opts = eval_options(sf, cfg);
      const auto backend = make_backend(cfg);
      const auto cache = load_cache(sf.cache);
      const auto table =
          ablation_sweep(*axis, values, ds.instances, *backend, cache, cfg.bias, opts);
      if (!sf.report.empty()) write_sweep_table(sf.report, table);
      std::cout << format_sweep_summary(table);
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "atbias: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "atbias: configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "atbias: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
