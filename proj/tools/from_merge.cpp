// from-merge: command-line front end for checkpoint and LoRA adapter merging.
//
//   from-merge merge      --base b.safetensors --model m1.safetensors --model m2.safetensors --out o.safetensors
//   from-merge lora-merge --adapter a1.safetensors --adapter-config a1.json ... --rank 8 --out m.safetensors
//   from-merge synth      --out-dir fixtures --norms 3,1
//   from-merge sweep      --base b.safetensors --model ... --out results/sweep
//   from-merge inspect    file.safetensors [--base b.safetensors]
//
// Exit codes: 0 ok, 1 validation, 2 I/O or malformed input, 3 numeric.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "frommerge/checkpoint.hpp"
#include "frommerge/errors.hpp"
#include "frommerge/harness.hpp"
#include "frommerge/kernels.hpp"
#include "frommerge/linalg.hpp"
#include "frommerge/lora_merge.hpp"
#include "frommerge/merge.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace frommerge;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

struct CommonOptions {
  std::uint64_t seed = 0;
  int threads = 0;
  std::string config;
};

void add_common(CLI::App* cmd, CommonOptions& common) {
  cmd->add_option("--seed", common.seed, "Seed for every stochastic step");
  cmd->add_option("--threads", common.threads, "Worker threads (0 = runtime default)")->check(CLI::NonNegativeNumber);
  cmd->add_option("--config", common.config, "JSON file of option values; command-line flags take precedence");
}

void setup_logging() {
  auto logger = spdlog::stderr_logger_st("from-merge");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("FROM_MERGE_LOG")) {
    const std::string level(env);
    if (level == "error") spdlog::set_level(spdlog::level::err);
    else if (level == "debug") spdlog::set_level(spdlog::level::debug);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
  }
}

// ---------------------------------------------------------------------------
// JSON config: a flat object whose keys are long option names of the chosen
// subcommand ("k", "model", "norm_scope" or "norm-scope"). Values are spliced
// into argv right after the subcommand unless the flag already appears there.

bool flag_present(const std::vector<std::string>& args, const std::string& flag) {
  for (const auto& a : args) {
    if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
  }
  return false;
}

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::vector<std::string> expand_config(const std::vector<std::string>& args, const std::vector<std::string>& subcommands) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw IoError("cannot open config file '" + config_path + "'");
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config file is not valid JSON: ") + e.what(), e.byte);
  }
  if (!cfg.is_object()) throw ValidationError("config file must hold a JSON object");

  std::vector<std::string> injected;
  for (const auto& [key, value] : cfg.items()) {
    std::string name = key;
    for (char& c : name) {
      if (c == '_') c = '-';
    }
    const std::string flag = "--" + name;
    if (flag == "--config" || flag_present(args, flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& item : value) {
        injected.push_back(flag);
        injected.push_back(scalar_text(item));
      }
    } else if (!value.is_null()) {
      injected.push_back(flag);
      injected.push_back(scalar_text(value));
    }
  }

  std::vector<std::string> out;
  bool spliced = false;
  for (const auto& a : args) {
    out.push_back(a);
    if (!spliced && std::find(subcommands.begin(), subcommands.end(), a) != subcommands.end()) {
      out.insert(out.end(), injected.begin(), injected.end());
      spliced = true;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct MergeArgs {
  std::string method = "from";
  double k = 1.0;
  double alpha = 1.0;
  std::string norm_scope = "per_tensor";
  double dare_p = 0.0;
  double rcond = kDefaultRcond;
  std::string base;
  std::vector<std::string> models;
  std::string gram;
  std::string out;
  std::string report;
  bool report_timings = false;
};

int cmd_merge(const MergeArgs& a, const CommonOptions& common) {
  MergeConfig cfg;
  const auto method = parse_method(a.method);
  if (!method) throw ValidationError("unknown merge method '" + a.method + "'");
  const auto scope = parse_scope(a.norm_scope);
  if (!scope) throw ValidationError("unknown norm scope '" + a.norm_scope + "'");
  cfg.method = *method;
  cfg.k = a.k;
  cfg.alpha = a.alpha;
  cfg.norm_scope = *scope;
  cfg.dare_drop_p = a.dare_p;
  cfg.seed = common.seed;
  cfg.rcond = a.rcond;
  cfg.validate();
  if (cfg.method == MergeMethod::regmean && a.gram.empty()) {
    spdlog::info("regmean without --gram: every layer falls back to simple averaging");
  }

  const Checkpoint base = read_container(a.base);
  std::vector<Checkpoint> models;
  for (const auto& p : a.models) models.push_back(read_container(p));
  std::optional<Checkpoint> grams;
  if (!a.gram.empty()) grams = read_container(a.gram);

  auto [merged, report] = merge_checkpoints(base, models, cfg, grams ? &*grams : nullptr);
  for (const auto& [phase, ms] : report.timings_ms) spdlog::info("{}: {:.3f} ms", phase, ms);
  for (const auto& l : report.layers) {
    if (l.fallback) spdlog::info("layer '{}': all task-vector norms are zero, used simple average", l.layer);
  }
  write_container(merged, a.out);
  const std::string report_path = a.report.empty() ? a.out + ".report.json" : a.report;
  write_file_atomic(report_path, report.to_json(a.report_timings).dump(2) + "\n");
  spdlog::info("wrote {} and {}", a.out, report_path);
  return 0;
}

struct LoraArgs {
  std::vector<std::string> adapters;
  std::vector<std::string> configs;
  std::size_t rank = 0;
  double k = 0.9;
  double alpha = 1.0;
  std::size_t max_iters = 100;
  double sigma = 0.02;
  double loss_tol = 0.0;
  double rcond = kDefaultRcond;
  bool oracle = false;
  std::string out;
  std::string out_config;
  std::string trace;
};

std::string default_config_for(const std::string& weights) {
  return fs::path(weights).replace_extension(".json").string();
}

int cmd_lora_merge(const LoraArgs& a, const CommonOptions& common) {
  LoraMergeConfig cfg;
  cfg.k = a.k;
  cfg.rank_out = a.rank;
  cfg.max_iters = a.max_iters;
  cfg.init_sigma = a.sigma;
  cfg.seed = common.seed;
  cfg.rcond = a.rcond;
  cfg.loss_tol = a.loss_tol;
  cfg.compute_oracle = a.oracle;
  cfg.validate();
  if (!std::isfinite(a.alpha)) throw ValidationError("alpha must be finite");
  if (!a.configs.empty() && a.configs.size() != a.adapters.size()) {
    throw ValidationError("--adapter-config must be given once per --adapter (or not at all)");
  }

  std::vector<LoraAdapter> adapters;
  for (std::size_t i = 0; i < a.adapters.size(); ++i) {
    const std::string cfg_path = a.configs.empty() ? default_config_for(a.adapters[i]) : a.configs[i];
    adapters.push_back(read_lora(a.adapters[i], cfg_path));
  }
  auto result = merge_adapters(adapters, cfg);
  result.adapter.scaling_alpha = a.alpha;
  for (const auto& t : result.traces) {
    spdlog::info("layer '{}': {} iterations, stop={}, loss={:.6g}", t.layer, t.losses.size(),
                 stop_reason_name(t.stop_reason), t.final_loss);
  }
  const std::string out_config = a.out_config.empty() ? default_config_for(a.out) : a.out_config;
  const std::string trace_path = a.trace.empty() ? a.out + ".trace.json" : a.trace;
  write_lora(result.adapter, a.out, out_config);
  write_file_atomic(trace_path, traces_to_json(result.traces).dump(2) + "\n");
  spdlog::info("wrote {}, {} and {}", a.out, out_config, trace_path);
  return 0;
}

struct SynthArgs {
  std::vector<std::string> layers;
  std::size_t n_models = 0;
  std::vector<double> norms;
  double overlap = -1.0;
  std::size_t rank = 0;
  std::string dtype = "f64";
  double base_sigma = 0.02;
  std::string out_dir;
};

LayerShape parse_layer(const std::string& s) {
  const auto c2 = s.rfind(':');
  const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : s.rfind(':', c2 - 1);
  if (c1 == std::string::npos) throw ValidationError("--layer expects name:rows:cols, got '" + s + "'");
  try {
    return {s.substr(0, c1), std::stoul(s.substr(c1 + 1, c2 - c1 - 1)), std::stoul(s.substr(c2 + 1))};
  } catch (const std::exception&) {
    throw ValidationError("--layer expects name:rows:cols, got '" + s + "'");
  }
}

SynthSpec synth_spec_from(const SynthArgs& a, std::uint64_t seed) {
  SynthSpec spec = SynthSpec::defaults();
  spec.seed = seed;
  if (!a.layers.empty()) {
    spec.layer_shapes.clear();
    for (const auto& l : a.layers) spec.layer_shapes.push_back(parse_layer(l));
  }
  if (!a.norms.empty()) {
    spec.norm_profile = a.norms;
    spec.n_models = a.norms.size();
  }
  if (a.n_models != 0) {
    if (a.norms.empty()) spec.norm_profile.assign(a.n_models, 1.0);
    spec.n_models = a.n_models;
  }
  if (a.overlap >= 0.0) spec.overlap = a.overlap;
  if (a.rank != 0) spec.intrinsic_rank = a.rank;
  if (a.dtype == "f32") spec.dtype = DType::F32;
  else if (a.dtype == "f64") spec.dtype = DType::F64;
  else throw ValidationError("--dtype must be f32 or f64");
  spec.base_sigma = a.base_sigma;
  spec.validate();
  return spec;
}

int cmd_synth(const SynthArgs& a, const CommonOptions& common) {
  const SynthSpec spec = synth_spec_from(a, common.seed);
  const auto models = generate_synthetic(spec);
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  write_container(models.base, dir / "base.safetensors");
  for (std::size_t i = 0; i < models.finetuned.size(); ++i) {
    write_container(models.finetuned[i], dir / ("model_" + std::to_string(i) + ".safetensors"));
  }
  spdlog::info("wrote base and {} fine-tuned models to {}", models.finetuned.size(), a.out_dir);
  return 0;
}

struct SweepArgs {
  std::string base;
  std::vector<std::string> models;
  std::vector<double> k_grid;
  std::vector<std::string> methods;
  double alpha = 1.0;
  std::size_t lora_rank = 2;
  std::size_t max_iters = 100;
  std::string out;
};

int cmd_sweep(const SweepArgs& a, const CommonOptions& common) {
  SweepConfig cfg;
  if (!a.k_grid.empty()) cfg.k_grid = a.k_grid;
  if (!a.methods.empty()) cfg.methods = a.methods;
  cfg.alpha = a.alpha;
  cfg.lora.rank_out = a.lora_rank;
  cfg.lora.max_iters = a.max_iters;
  cfg.lora.seed = common.seed;
  cfg.validate();
  cfg.lora.validate();

  const Checkpoint base = read_container(a.base);
  std::vector<Checkpoint> models;
  for (const auto& p : a.models) models.push_back(read_container(p));
  const auto result = sweep_k(base, models, cfg);
  std::size_t failed = 0;
  for (const auto& c : result.cells) {
    if (c.failed) {
      ++failed;
      spdlog::info("cell {}/{}/k={} failed: {}", c.layer, c.method, c.k, c.error);
    }
  }
  if (auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  emit_report(result, a.out);
  spdlog::info("wrote {} cells ({} failed) to {}.csv/.json", result.cells.size(), failed, a.out);
  return 0;
}

struct InspectArgs {
  std::string file;
  std::string base;
};

std::string shape_text(const std::vector<std::uint64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

int cmd_inspect(const InspectArgs& a) {
  const Checkpoint ckpt = read_container(a.file);
  std::optional<Checkpoint> base;
  if (!a.base.empty()) base = read_container(a.base);
  std::cout << "file: " << a.file << "\n";
  std::cout << "tensors: " << ckpt.tensors.size() << "\n";
  for (const auto& [k, v] : ckpt.metadata) std::cout << "metadata " << k << " = " << v << "\n";
  for (const auto& [name, t] : ckpt.tensors) {
    double norm = frobenius_norm(t.value);
    const char* label = "norm";
    if (base) {
      auto it = base->tensors.find(name);
      if (it == base->tensors.end() || !it->second.value.same_shape(t.value)) {
        throw ValidationError("inspect: base has no matching tensor '" + name + "'");
      }
      norm = frobenius_norm(subtract(t.value, it->second.value));
      label = "delta_norm";
    }
    std::cout << fmt::format("{}\t{}\t{}\t{}={:.12g}\n", name, dtype_name(t.dtype), shape_text(t.shape), label, norm);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();

  CLI::App app{"Frobenius-norm weighted merging of fine-tuned checkpoints and LoRA adapters"};
  app.require_subcommand(1);

  CommonOptions common;

  MergeArgs merge_args;
  auto* merge = app.add_subcommand("merge", "Merge fully fine-tuned checkpoints");
  add_common(merge, common);
  merge->add_option("--method", merge_args.method,
                    "from | average | max_norm | task_arithmetic | dare_from | dare_task_arithmetic | regmean");
  merge->add_option("--k", merge_args.k, "Norm exponent (>= 0)");
  merge->add_option("--alpha", merge_args.alpha, "Scale of the merged task vector");
  merge->add_option("--norm-scope", merge_args.norm_scope, "per_tensor | whole_model");
  merge->add_option("--dare-p", merge_args.dare_p, "DARE drop probability in [0, 1)");
  merge->add_option("--rcond", merge_args.rcond, "Pseudoinverse cutoff relative to the largest singular value");
  merge->add_option("--base", merge_args.base, "Base checkpoint")->required();
  merge->add_option("--model", merge_args.models, "Fine-tuned checkpoint (repeatable)")->required();
  merge->add_option("--gram", merge_args.gram, "Container of per-layer Gram matrices (regmean)");
  merge->add_option("--out", merge_args.out, "Merged checkpoint path")->required();
  merge->add_option("--report", merge_args.report, "Merge report JSON (default <out>.report.json)");
  merge->add_flag("--report-timings", merge_args.report_timings, "Include wall-clock timings in the report");

  LoraArgs lora_args;
  auto* lora = app.add_subcommand("lora-merge", "Merge LoRA adapters by alternating least squares");
  add_common(lora, common);
  lora->add_option("--adapter", lora_args.adapters, "Adapter weights (repeatable)")->required();
  lora->add_option("--adapter-config", lora_args.configs, "Adapter config JSON, one per --adapter");
  lora->add_option("--rank", lora_args.rank, "Rank of the merged adapter")->required();
  lora->add_option("--k", lora_args.k, "Norm exponent (>= 0)");
  lora->add_option("--alpha", lora_args.alpha, "lora_alpha written to the merged adapter");
  lora->add_option("--max-iters", lora_args.max_iters, "Maximum ALS iterations");
  lora->add_option("--sigma", lora_args.sigma, "Std-dev of the initial A");
  lora->add_option("--loss-tol", lora_args.loss_tol, "Loss increase tolerated before early stop");
  lora->add_option("--rcond", lora_args.rcond, "Pseudoinverse cutoff");
  lora->add_flag("--oracle", lora_args.oracle, "Record the truncated-SVD global optimum in the trace");
  lora->add_option("--out", lora_args.out, "Merged adapter weights")->required();
  lora->add_option("--out-config", lora_args.out_config, "Merged adapter config (default <out>.json)");
  lora->add_option("--trace", lora_args.trace, "Per-layer loss trace JSON (default <out>.trace.json)");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate synthetic base and fine-tuned checkpoints");
  add_common(synth, common);
  synth->add_option("--layer", synth_args.layers, "Layer as name:rows:cols (repeatable)");
  synth->add_option("--n-models", synth_args.n_models, "Number of fine-tuned models");
  synth->add_option("--norms", synth_args.norms, "Task-vector norm per model")->delimiter(',');
  synth->add_option("--overlap", synth_args.overlap, "Pairwise cosine between task vectors in [0, 1]");
  synth->add_option("--rank", synth_args.rank, "Intrinsic rank of each task vector");
  synth->add_option("--dtype", synth_args.dtype, "Storage dtype: f32 | f64");
  synth->add_option("--base-sigma", synth_args.base_sigma, "Std-dev of base weights");
  synth->add_option("--out-dir", synth_args.out_dir, "Output directory")->required();

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep", "Sweep the norm exponent k across merge methods");
  add_common(sweep, common);
  sweep->add_option("--base", sweep_args.base, "Base checkpoint")->required();
  sweep->add_option("--model", sweep_args.models, "Fine-tuned checkpoint (repeatable)")->required();
  sweep->add_option("--k-grid", sweep_args.k_grid, "k values")->delimiter(',');
  sweep->add_option("--methods", sweep_args.methods, "from,average,max_norm,task_arithmetic,lora_from")->delimiter(',');
  sweep->add_option("--alpha", sweep_args.alpha, "Task-arithmetic scale");
  sweep->add_option("--lora-rank", sweep_args.lora_rank, "Rank for lora_from cells");
  sweep->add_option("--max-iters", sweep_args.max_iters, "ALS iterations for lora_from cells");
  sweep->add_option("--out", sweep_args.out, "Output stem; writes <stem>.csv and <stem>.json")->required();

  InspectArgs inspect_args;
  auto* inspect = app.add_subcommand("inspect", "Summarize a checkpoint container");
  add_common(inspect, common);
  inspect->add_option("file", inspect_args.file, "Container to inspect")->required();
  inspect->add_option("--base", inspect_args.base, "Report norms of (file - base) instead");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(args, {"merge", "lora-merge", "synth", "sweep", "inspect"});
    std::reverse(args.begin(), args.end());
    try {
      app.parse(args);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return kExitValidation;
    }
    kernels::set_num_threads(common.threads);

    if (*merge) return cmd_merge(merge_args, common);
    if (*lora) return cmd_lora_merge(lora_args, common);
    if (*synth) return cmd_synth(synth_args, common);
    if (*sweep) return cmd_sweep(sweep_args, common);
    if (*inspect) return cmd_inspect(inspect_args);
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return kExitValidation;
  } catch (const IoError& e) {
    spdlog::error("{}", e.what());
    return kExitIo;
  } catch (const NumericError& e) {
    spdlog::error("{}", e.what());
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitNumeric;
  }
  return kExitValidation;
}
