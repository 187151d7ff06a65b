#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "frommerge/checkpoint.hpp"
#include "frommerge/linalg.hpp"
#include "frommerge/tensor.hpp"

namespace frommerge {

// θᵢ: per-layer difference between a fine-tuned model and its base.
struct TaskVector {
  std::map<std::string, Tensor2D> deltas;
  std::string source_label;
};

enum class MergeMethod { from, average, max_norm, task_arithmetic, dare_from, dare_task_arithmetic, regmean };
enum class NormScope { per_tensor, whole_model };

const char* method_name(MergeMethod m) noexcept;
std::optional<MergeMethod> parse_method(const std::string& s);
const char* scope_name(NormScope s) noexcept;
std::optional<NormScope> parse_scope(const std::string& s);

struct MergeConfig {
  MergeMethod method = MergeMethod::from;
  double k = 1.0;
  double alpha = 1.0;
  NormScope norm_scope = NormScope::per_tensor;
  double dare_drop_p = 0.0;
  std::uint64_t seed = 0;
  double rcond = kDefaultRcond;

  void validate() const;
  nlohmann::json to_json() const;
};

struct LayerReport {
  std::string layer;
  std::string method;
  std::vector<double> norms;    // ‖θᵢ‖_F in the configured scope
  std::vector<double> weights;  // normalized per-model coefficients
  bool fallback = false;        // all-zero norms with k > 0: simple average used
};

struct MergeReport {
  std::vector<LayerReport> layers;
  MergeConfig config;
  std::map<std::string, double> timings_ms;

  nlohmann::json to_json(bool include_timings) const;
};

TaskVector extract_task_vector(const Checkpoint& base, const Checkpoint& finetuned, std::string label = {});

// Normalized FroM weights wᵢ/Σw with wᵢ = normᵢ^k, computed in log space.
// 0⁰ = 1. Returns std::nullopt when every norm is zero and k > 0.
std::optional<std::vector<double>> normalized_from_weights(std::span<const double> norms, double k);

// Closed-form minimizer of Σᵢ ‖θᵢ‖^k ‖θ − θᵢ‖².
std::pair<TaskVector, MergeReport> from_merge(std::span<const TaskVector> vectors, double k,
                                              NormScope scope = NormScope::per_tensor);

TaskVector max_norm_select(std::span<const TaskVector> vectors, NormScope scope = NormScope::per_tensor);
TaskVector task_arithmetic_merge(std::span<const TaskVector> vectors, double alpha);
TaskVector average_merge(std::span<const TaskVector> vectors);

// Drop each element with probability drop_p, rescale survivors by 1/(1 − drop_p).
// The mask for a layer comes from the stream keyed by (seed, "dare/<source_label>/<layer>").
TaskVector dare_transform(const TaskVector& v, double drop_p, std::uint64_t seed);

// (Σ Gᵢ)⁺ (Σ Gᵢ Wᵢ) for one layer; Gᵢ must be square, symmetric, with dimension W.rows().
Tensor2D regmean_merge(std::span<const Tensor2D> weights, std::span<const Tensor2D> grams,
                       double rcond = kDefaultRcond);

Checkpoint apply_delta(const Checkpoint& base, const TaskVector& delta, double alpha);

// Plug-in slot for merge strategies defined elsewhere (TIES-Merging, KnOTS).
class TaskVectorMerger {
 public:
  virtual ~TaskVectorMerger() = default;
  virtual std::string name() const = 0;
  virtual TaskVector merge(std::span<const TaskVector> vectors) const = 0;
};

// Full pipeline: extract task vectors, merge with cfg.method, apply with cfg.alpha.
// `grams` is only consulted for regmean; layers without a Gram matrix are averaged.
std::pair<Checkpoint, MergeReport> merge_checkpoints(const Checkpoint& base, std::span<const Checkpoint> finetuned,
                                                     const MergeConfig& cfg, const Checkpoint* grams = nullptr);

}  // namespace frommerge
