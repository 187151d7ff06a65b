#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "frommerge/checkpoint.hpp"
#include "frommerge/lora_merge.hpp"

namespace frommerge {

struct LayerShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// Synthetic fine-tuned models with controlled task-vector geometry.
struct SynthSpec {
  std::vector<LayerShape> layer_shapes;
  std::size_t n_models = 0;
  std::vector<double> norm_profile;  // target ‖θᵢ[ℓ]‖_F, identical for every layer of model i
  double overlap = 0.0;              // pairwise cosine between task-vector directions
  std::optional<std::size_t> intrinsic_rank;
  std::uint64_t seed = 0;
  double base_sigma = 0.02;
  DType dtype = DType::F64;

  static SynthSpec defaults();
  void validate() const;
};

struct SynthModels {
  Checkpoint base;
  std::vector<Checkpoint> finetuned;
};

SynthModels generate_synthetic(const SynthSpec& spec);

// k = 0 and 2^-3 .. 2^3.
std::vector<double> default_k_grid();

struct SweepConfig {
  std::vector<double> k_grid = default_k_grid();
  std::vector<std::string> methods = {"from", "average", "max_norm", "task_arithmetic", "lora_from"};
  double alpha = 1.0;
  LoraMergeConfig lora{.k = 0.9, .rank_out = 2};  // k is overridden per cell

  void validate() const;
};

struct SweepCell {
  std::string layer;
  std::string method;
  double k = 0.0;
  std::size_t max_model = 0;               // index of the largest-norm model in this layer
  double max_norm = 0.0;
  double weight_max = 0.0;                 // coefficient the merge puts on the largest-norm model
  std::vector<double> loss_vs_model;       // ‖θ* − θᵢ‖² per model
  double loss_eq1 = 0.0;                   // Σ ‖θᵢ‖^k ‖θ* − θᵢ‖²
  double distance_to_weighted_mean = 0.0;  // ‖θ* − θ̄_k‖_F
  std::optional<double> lora_final_loss;
  std::optional<double> lora_oracle_loss;
  std::optional<StopReason> stop_reason;
  bool failed = false;
  std::string error;
};

struct SweepResult {
  std::vector<double> k_grid;
  std::vector<std::string> methods;
  std::vector<std::string> layers;
  std::vector<std::vector<double>> layer_norms;  // [layer][model]
  std::vector<SweepCell> cells;                  // ordered layer, method, k

  const SweepCell& cell(const std::string& layer, const std::string& method, double k) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

SweepResult sweep_k(const Checkpoint& base, std::span<const Checkpoint> finetuned, const SweepConfig& cfg);

// Writes `<stem>.csv` and `<stem>.json`.
void emit_report(const SweepResult& result, const std::filesystem::path& stem);

inline constexpr const char* kSweepCsvHeader =
    "layer,method,k,model_index,norm,weight,loss_vs_model,loss_eq1,lora_final_loss,lora_oracle_loss,stop_reason";

struct SweepCsvRow {
  std::string layer;
  std::string method;
  double k = 0.0;
  std::size_t model_index = 0;
  double norm = 0.0;
  double weight = 0.0;
  double loss_vs_model = 0.0;
  double loss_eq1 = 0.0;
  std::optional<double> lora_final_loss;
  std::optional<double> lora_oracle_loss;
  std::string stop_reason;
};

std::vector<SweepCsvRow> parse_sweep_csv(const std::string& text);

}  // namespace frommerge
