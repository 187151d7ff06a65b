#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "frommerge/checkpoint.hpp"
#include "frommerge/linalg.hpp"
#include "frommerge/tensor.hpp"

namespace frommerge {

struct LoraMergeConfig {
  double k = 0.9;
  std::size_t rank_out = 0;
  std::size_t max_iters = 100;
  double init_sigma = 0.02;
  std::uint64_t seed = 0;
  double rcond = kDefaultRcond;
  // Stop when the loss rises by more than this (absolute) between iterations.
  double loss_tol = 0.0;
  // Stop when the relative loss change falls below this.
  double converge_rtol = 1e-10;
  bool compute_oracle = false;

  void validate() const;
};

enum class StopReason { loss_increase, max_iters, converged };
const char* stop_reason_name(StopReason r) noexcept;

struct LoraMergeTrace {
  std::string layer;
  std::vector<double> losses;  // one per accepted (B, A) iteration
  StopReason stop_reason = StopReason::max_iters;
  double final_loss = 0.0;
  std::optional<double> oracle_loss;

  nlohmann::json to_json() const;
};

// wᵢ = ‖θᵢ‖_F^k with 0⁰ = 1.
std::vector<double> from_norm_weights(std::span<const Tensor2D> thetas, double k);

// Σᵢ wᵢ ‖BA − θᵢ‖²
double lora_objective(const Tensor2D& a, const Tensor2D& b, std::span<const Tensor2D> thetas,
                      std::span<const double> weights);

// ∂L/∂B = 2ΣwᵢBAAᵀ − 2ΣwᵢθᵢAᵀ and ∂L/∂A = 2ΣwᵢBᵀBA − 2ΣwᵢBᵀθᵢ.
Tensor2D lora_gradient_b(const Tensor2D& a, const Tensor2D& b, std::span<const Tensor2D> thetas,
                         std::span<const double> weights);
Tensor2D lora_gradient_a(const Tensor2D& a, const Tensor2D& b, std::span<const Tensor2D> thetas,
                         std::span<const double> weights);

// Exact minimizer over B with A fixed: (ΣwᵢθᵢAᵀ)(ΣwᵢAAᵀ)⁺
Tensor2D update_b(const Tensor2D& a, std::span<const Tensor2D> thetas, std::span<const double> weights,
                  double rcond = kDefaultRcond);
// Exact minimizer over A with B fixed: (ΣwᵢBᵀB)⁺(ΣwᵢBᵀθᵢ)
Tensor2D update_a(const Tensor2D& b, std::span<const Tensor2D> thetas, std::span<const double> weights,
                  double rcond = kDefaultRcond);

struct LoraLayerResult {
  Tensor2D b;  // d1 x r
  Tensor2D a;  // r x d2
  LoraMergeTrace trace;
};

// Alternating minimization from a seeded normal A, B-update first, with early stopping.
LoraLayerResult merge_lora_layer(std::span<const Tensor2D> thetas, const LoraMergeConfig& cfg,
                                 const std::string& layer_name);

struct LoraOracle {
  Tensor2D optimum;  // rank-r truncated SVD of the weighted mean
  double loss = 0.0;
};

// Global minimum of Σwᵢ‖M − θᵢ‖² over rank-r M:
// (Σw)·Σ_{j>r} σⱼ(θ̄)² + Σwᵢ‖θᵢ − θ̄‖² with θ̄ = Σwᵢθᵢ/Σw.
LoraOracle oracle_lora_optimum(std::span<const Tensor2D> thetas, std::span<const double> weights, std::size_t rank);

struct LoraMergeOutput {
  LoraAdapter adapter;
  std::vector<LoraMergeTrace> traces;  // one per layer, in layer order
};

// Densifies each adapter's per-layer delta and merges layer by layer. The result has
// rank cfg.rank_out and scaling_alpha 1.
LoraMergeOutput merge_adapters(std::span<const LoraAdapter> adapters, const LoraMergeConfig& cfg);

nlohmann::json traces_to_json(std::span<const LoraMergeTrace> traces);

}  // namespace frommerge
