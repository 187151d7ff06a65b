#include "frommerge/lora_merge.hpp"

#include <algorithm>
#include <cmath>

#include "frommerge/errors.hpp"
#include "frommerge/kernels.hpp"
#include "frommerge/parallel.hpp"
#include "frommerge/rng.hpp"

namespace frommerge {

using json = nlohmann::json;

namespace {

void require_thetas(std::span<const Tensor2D> thetas, std::span<const double> weights, const char* op) {
  if (thetas.empty()) throw ValidationError(std::string(op) + ": at least one task vector is required");
  if (thetas.size() != weights.size()) {
    throw ValidationError(std::string(op) + ": " + std::to_string(thetas.size()) + " task vectors but " +
                          std::to_string(weights.size()) + " weights");
  }
  for (const auto& t : thetas) require_same_shape(thetas.front(), t, op);
}

double weight_total(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  return total;
}

// Σwᵢθᵢ
Tensor2D weighted_sum(std::span<const Tensor2D> thetas, std::span<const double> weights) {
  return axpy_scale(weights, thetas);
}

// Both half-steps reduce to products with S = Σwᵢθᵢ and W = Σwᵢ.
Tensor2D solve_b(const Tensor2D& a, const Tensor2D& s, double w_total, double rcond) {
  const Tensor2D at = transpose(a);
  const Tensor2D gram = scale(matmul(a, at), w_total);
  return matmul(matmul(s, at), pinv(gram, rcond));
}

Tensor2D solve_a(const Tensor2D& b, const Tensor2D& s, double w_total, double rcond) {
  const Tensor2D bt = transpose(b);
  const Tensor2D gram = scale(matmul(bt, b), w_total);
  return matmul(pinv(gram, rcond), matmul(bt, s));
}

}  // namespace

void LoraMergeConfig::validate() const {
  if (!(k >= 0.0) || !std::isfinite(k)) throw ValidationError("k must be a finite value >= 0");
  if (rank_out == 0) throw ValidationError("output rank must be positive");
  if (max_iters == 0) throw ValidationError("max_iters must be positive");
  if (!(init_sigma > 0.0) || !std::isfinite(init_sigma)) throw ValidationError("init_sigma must be positive");
  if (!(rcond > 0.0 && rcond < 1.0)) throw ValidationError("rcond must lie in (0, 1)");
  if (!(loss_tol >= 0.0)) throw ValidationError("loss_tol must be >= 0");
  if (!(converge_rtol >= 0.0)) throw ValidationError("converge_rtol must be >= 0");
}

const char* stop_reason_name(StopReason r) noexcept {
  switch (r) {
    case StopReason::loss_increase: return "loss_increase";
    case StopReason::max_iters: return "max_iters";
    case StopReason::converged: return "converged";
  }
  return "unknown";
}

json LoraMergeTrace::to_json() const {
  return {{"layer", layer},
          {"losses", losses},
          {"stop_reason", stop_reason_name(stop_reason)},
          {"final_loss", final_loss},
          {"oracle_loss", oracle_loss ? json(*oracle_loss) : json(nullptr)}};
}

json traces_to_json(std::span<const LoraMergeTrace> traces) {
  json out = json::array();
  for (const auto& t : traces) out.push_back(t.to_json());
  return out;
}

std::vector<double> from_norm_weights(std::span<const Tensor2D> thetas, double k) {
  std::vector<double> w;
  w.reserve(thetas.size());
  for (const auto& t : thetas) w.push_back(std::pow(frobenius_norm(t), k));
  return w;
}

double lora_objective(const Tensor2D& a, const Tensor2D& b, std::span<const Tensor2D> thetas,
                      std::span<const double> weights) {
  require_thetas(thetas, weights, "lora_objective");
  const Tensor2D m = matmul(b, a);
  require_same_shape(m, thetas.front(), "lora_objective");
  double loss = 0.0;
  for (std::size_t i = 0; i < thetas.size(); ++i) loss += weights[i] * frobenius_distance_squared(m, thetas[i]);
  return loss;
}

Tensor2D lora_gradient_b(const Tensor2D& a, const Tensor2D& b, std::span<const Tensor2D> thetas,
                         std::span<const double> weights) {
  require_thetas(thetas, weights, "lora_gradient_b");
  const Tensor2D at = transpose(a);
  const double w = weight_total(weights);
  Tensor2D g = scale(matmul(b, matmul(a, at)), 2.0 * w);
  kernels::omp::axpy(-2.0, matmul(weighted_sum(thetas, weights), at).data(), g.data());
  return g;
}

Tensor2D lora_gradient_a(const Tensor2D& a, const Tensor2D& b, std::span<const Tensor2D> thetas,
                         std::span<const double> weights) {
  require_thetas(thetas, weights, "lora_gradient_a");
  const Tensor2D bt = transpose(b);
  const double w = weight_total(weights);
  Tensor2D g = scale(matmul(matmul(bt, b), a), 2.0 * w);
  kernels::omp::axpy(-2.0, matmul(bt, weighted_sum(thetas, weights)).data(), g.data());
  return g;
}

Tensor2D update_b(const Tensor2D& a, std::span<const Tensor2D> thetas, std::span<const double> weights,
                  double rcond) {
  require_thetas(thetas, weights, "update_b");
  if (a.cols() != thetas.front().cols()) {
    throw ShapeError("update_b: A is " + a.shape_string() + " but task vectors are " + thetas.front().shape_string());
  }
  return solve_b(a, weighted_sum(thetas, weights), weight_total(weights), rcond);
}

Tensor2D update_a(const Tensor2D& b, std::span<const Tensor2D> thetas, std::span<const double> weights,
                  double rcond) {
  require_thetas(thetas, weights, "update_a");
  if (b.rows() != thetas.front().rows()) {
    throw ShapeError("update_a: B is " + b.shape_string() + " but task vectors are " + thetas.front().shape_string());
  }
  return solve_a(b, weighted_sum(thetas, weights), weight_total(weights), rcond);
}

LoraLayerResult merge_lora_layer(std::span<const Tensor2D> thetas, const LoraMergeConfig& cfg,
                                 const std::string& layer_name) {
  cfg.validate();
  if (thetas.empty()) throw ValidationError("layer '" + layer_name + "': no task vectors");
  for (const auto& t : thetas) require_same_shape(thetas.front(), t, "merge_lora_layer");
  const std::size_t d1 = thetas.front().rows();
  const std::size_t d2 = thetas.front().cols();
  const std::size_t r = cfg.rank_out;
  if (r > std::min(d1, d2)) {
    throw ValidationError("layer '" + layer_name + "': rank " + std::to_string(r) + " exceeds min(d1, d2) for shape " +
                          shape_string(d1, d2));
  }

  const auto weights = from_norm_weights(thetas, cfg.k);
  const Tensor2D s = weighted_sum(thetas, weights);
  const double w_total = weight_total(weights);

  LoraLayerResult best;
  best.trace.layer = layer_name;
  Tensor2D a = seeded_normal(r, d2, cfg.init_sigma, cfg.seed, "lora_init/" + layer_name);
  double prev = 0.0;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    Tensor2D b = solve_b(a, s, w_total, cfg.rcond);
    a = solve_a(b, s, w_total, cfg.rcond);
    const double loss = lora_objective(a, b, thetas, weights);
    if (!std::isfinite(loss)) throw NumericError("layer '" + layer_name + "': non-finite loss in ALS iteration");
    if (it > 0 && loss > prev + cfg.loss_tol) {
      best.trace.stop_reason = StopReason::loss_increase;
      break;
    }
    best.a = a;
    best.b = std::move(b);
    best.trace.losses.push_back(loss);
    best.trace.final_loss = loss;
    if (it > 0 && std::abs(prev - loss) <= cfg.converge_rtol * prev) {
      best.trace.stop_reason = StopReason::converged;
      break;
    }
    if (loss == 0.0) {
      best.trace.stop_reason = StopReason::converged;
      break;
    }
    prev = loss;
    best.trace.stop_reason = StopReason::max_iters;
  }
  if (cfg.compute_oracle) best.trace.oracle_loss = oracle_lora_optimum(thetas, weights, r).loss;
  return best;
}

LoraOracle oracle_lora_optimum(std::span<const Tensor2D> thetas, std::span<const double> weights, std::size_t rank) {
  require_thetas(thetas, weights, "oracle_lora_optimum");
  const double w_total = weight_total(weights);
  LoraOracle out;
  if (w_total == 0.0) {
    out.optimum = Tensor2D(thetas.front().rows(), thetas.front().cols());
    return out;
  }
  std::vector<double> normalized(weights.begin(), weights.end());
  for (double& w : normalized) w /= w_total;
  const Tensor2D mean = weighted_sum(thetas, normalized);
  auto trunc = truncated_svd(mean, rank);
  double spread = 0.0;
  for (std::size_t i = 0; i < thetas.size(); ++i) spread += weights[i] * frobenius_distance_squared(thetas[i], mean);
  out.optimum = std::move(trunc.approximation);
  out.loss = w_total * trunc.tail_energy + spread;
  return out;
}

LoraMergeOutput merge_adapters(std::span<const LoraAdapter> adapters, const LoraMergeConfig& cfg) {
  cfg.validate();
  if (adapters.empty()) throw ValidationError("lora merge: at least one adapter is required");
  for (const auto& ad : adapters) ad.validate();
  const auto& ref = adapters.front();
  for (std::size_t i = 1; i < adapters.size(); ++i) {
    const auto& ad = adapters[i];
    std::string bad;
    for (const auto& e : ref.entries) {
      const auto* other = ad.find(e.layer);
      if (other == nullptr) {
        bad += " missing:" + e.layer;
      } else if (other->b.rows() != e.b.rows() || other->a.cols() != e.a.cols()) {
        bad += " shape:" + e.layer;
      }
    }
    for (const auto& e : ad.entries) {
      if (ref.find(e.layer) == nullptr) bad += " extra:" + e.layer;
    }
    if (!bad.empty()) throw ValidationError("adapter " + std::to_string(i) + " does not match adapter 0:" + bad);
  }
  for (const auto& e : ref.entries) {
    if (cfg.rank_out > std::min(e.b.rows(), e.a.cols())) {
      throw ValidationError("layer '" + e.layer + "': rank " + std::to_string(cfg.rank_out) +
                            " exceeds min(d1, d2) for shape " + shape_string(e.b.rows(), e.a.cols()));
    }
  }

  const std::size_t n_layers = ref.entries.size();
  std::vector<LoraLayerResult> results(n_layers);
  parallel_for_each_index(n_layers, [&](std::size_t l) {
    const auto& layer = ref.entries[l].layer;
    std::vector<Tensor2D> thetas;
    thetas.reserve(adapters.size());
    for (const auto& ad : adapters) thetas.push_back(ad.delta(*ad.find(layer)));
    results[l] = merge_lora_layer(thetas, cfg, layer);
  });

  LoraMergeOutput out;
  out.adapter.rank = cfg.rank_out;
  out.adapter.scaling_alpha = 1.0;
  out.adapter.dtype = ref.dtype;
  for (std::size_t l = 0; l < n_layers; ++l) {
    out.adapter.entries.push_back({ref.entries[l].layer, std::move(results[l].a), std::move(results[l].b)});
    out.traces.push_back(std::move(results[l].trace));
  }
  return out;
}

}  // namespace frommerge
