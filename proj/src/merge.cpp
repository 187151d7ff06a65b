#include "frommerge/merge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "frommerge/errors.hpp"
#include "frommerge/kernels.hpp"
#include "frommerge/parallel.hpp"
#include "frommerge/rng.hpp"

namespace frommerge {

using json = nlohmann::json;

namespace {

constexpr std::pair<MergeMethod, const char*> kMethodNames[] = {
    {MergeMethod::from, "from"},
    {MergeMethod::average, "average"},
    {MergeMethod::max_norm, "max_norm"},
    {MergeMethod::task_arithmetic, "task_arithmetic"},
    {MergeMethod::dare_from, "dare_from"},
    {MergeMethod::dare_task_arithmetic, "dare_task_arithmetic"},
    {MergeMethod::regmean, "regmean"},
};

std::vector<std::string> layer_names(const TaskVector& v) {
  std::vector<std::string> names;
  names.reserve(v.deltas.size());
  for (const auto& [name, t] : v.deltas) names.push_back(name);
  return names;
}

void require_compatible(std::span<const TaskVector> vectors, const char* op) {
  if (vectors.empty()) throw ValidationError(std::string(op) + ": at least one task vector is required");
  const auto& ref = vectors.front();
  for (std::size_t i = 1; i < vectors.size(); ++i) {
    const auto& v = vectors[i];
    std::string bad;
    for (const auto& [name, t] : ref.deltas) {
      auto it = v.deltas.find(name);
      if (it == v.deltas.end()) {
        bad += " missing:" + name;
      } else if (!it->second.same_shape(t)) {
        bad += " shape:" + name + "(" + t.shape_string() + " vs " + it->second.shape_string() + ")";
      }
    }
    for (const auto& [name, t] : v.deltas) {
      if (!ref.deltas.count(name)) bad += " extra:" + name;
    }
    if (!bad.empty()) {
      throw ValidationError(std::string(op) + ": task vector " + std::to_string(i) + " does not match vector 0:" + bad);
    }
  }
}

// norms[i][l] per model and layer in `names` order.
std::vector<std::vector<double>> layer_norms(std::span<const TaskVector> vectors, const std::vector<std::string>& names) {
  std::vector<std::vector<double>> norms(vectors.size(), std::vector<double>(names.size()));
  parallel_for_each_index(names.size(), [&](std::size_t l) {
    for (std::size_t i = 0; i < vectors.size(); ++i) norms[i][l] = frobenius_norm(vectors[i].deltas.at(names[l]));
  });
  return norms;
}

std::vector<double> whole_model_norms(const std::vector<std::vector<double>>& per_layer) {
  std::vector<double> out;
  for (const auto& model : per_layer) {
    double acc = 0.0;
    for (double n : model) acc += n * n;
    out.push_back(std::sqrt(acc));
  }
  return out;
}

Tensor2D weighted_layer(std::span<const TaskVector> vectors, const std::string& name, std::span<const double> coeffs) {
  std::vector<ScaledTerm> terms;
  terms.reserve(vectors.size());
  for (std::size_t i = 0; i < vectors.size(); ++i) terms.push_back({coeffs[i], &vectors[i].deltas.at(name)});
  return axpy_scale(terms);
}

std::size_t argmax_first(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

const char* method_name(MergeMethod m) noexcept {
  for (const auto& [method, name] : kMethodNames) {
    if (method == m) return name;
  }
  return "unknown";
}

std::optional<MergeMethod> parse_method(const std::string& s) {
  for (const auto& [method, name] : kMethodNames) {
    if (s == name) return method;
  }
  return std::nullopt;
}

const char* scope_name(NormScope s) noexcept { return s == NormScope::per_tensor ? "per_tensor" : "whole_model"; }

std::optional<NormScope> parse_scope(const std::string& s) {
  if (s == "per_tensor") return NormScope::per_tensor;
  if (s == "whole_model") return NormScope::whole_model;
  return std::nullopt;
}

void MergeConfig::validate() const {
  if (!(k >= 0.0) || !std::isfinite(k)) throw ValidationError("k must be a finite value >= 0, got " + std::to_string(k));
  if (!std::isfinite(alpha)) throw ValidationError("alpha must be finite");
  if (!(dare_drop_p >= 0.0 && dare_drop_p < 1.0)) {
    throw ValidationError("dare drop probability must lie in [0, 1), got " + std::to_string(dare_drop_p));
  }
  if (!(rcond > 0.0 && rcond < 1.0)) throw ValidationError("rcond must lie in (0, 1)");
}

json MergeConfig::to_json() const {
  return {{"method", method_name(method)}, {"k", k},       {"alpha", alpha},  {"norm_scope", scope_name(norm_scope)},
          {"dare_drop_p", dare_drop_p},    {"seed", seed}, {"rcond", rcond}};
}

json MergeReport::to_json(bool include_timings) const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"layer", l.layer},
                           {"method", l.method},
                           {"norms", l.norms},
                           {"weights", l.weights},
                           {"fallback", l.fallback}});
  }
  json out = {{"config", config.to_json()}, {"layers", layers_json}};
  if (include_timings) out["timings_ms"] = timings_ms;
  return out;
}

TaskVector extract_task_vector(const Checkpoint& base, const Checkpoint& finetuned, std::string label) {
  std::string bad;
  for (const auto& [name, t] : base.tensors) {
    auto it = finetuned.tensors.find(name);
    if (it == finetuned.tensors.end()) {
      bad += " missing:" + name;
    } else if (it->second.shape != t.shape) {
      bad += " shape:" + name;
    }
  }
  for (const auto& [name, t] : finetuned.tensors) {
    if (!base.tensors.count(name)) bad += " extra:" + name;
  }
  if (!bad.empty()) throw ValidationError("fine-tuned checkpoint '" + label + "' does not match base:" + bad);

  TaskVector v;
  v.source_label = std::move(label);
  for (const auto& [name, t] : base.tensors) {
    v.deltas.emplace(name, subtract(finetuned.tensors.at(name).value, t.value));
  }
  return v;
}

std::optional<std::vector<double>> normalized_from_weights(std::span<const double> norms, double k) {
  std::vector<double> w(norms.size());
  if (k == 0.0) {
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(norms.size()));
    return w;
  }
  // wᵢ/Σw = exp(k·ln nᵢ − max) / Σ exp(...), so large k cannot overflow.
  double top = -std::numeric_limits<double>::infinity();
  for (double n : norms) {
    if (n > 0.0) top = std::max(top, k * std::log(n));
  }
  if (!std::isfinite(top)) return std::nullopt;
  double total = 0.0;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    w[i] = norms[i] > 0.0 ? std::exp(k * std::log(norms[i]) - top) : 0.0;
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

std::pair<TaskVector, MergeReport> from_merge(std::span<const TaskVector> vectors, double k, NormScope scope) {
  require_compatible(vectors, "from_merge");
  if (!(k >= 0.0) || !std::isfinite(k)) throw ValidationError("from_merge: k must be a finite value >= 0");
  const auto names = layer_names(vectors.front());
  const auto norms = layer_norms(vectors, names);
  const std::size_t n = vectors.size();

  std::vector<double> model_norms;
  std::optional<std::vector<double>> model_weights;
  if (scope == NormScope::whole_model) {
    model_norms = whole_model_norms(norms);
    model_weights = normalized_from_weights(model_norms, k);
  }

  std::vector<Tensor2D> merged(names.size());
  std::vector<LayerReport> reports(names.size());
  parallel_for_each_index(names.size(), [&](std::size_t l) {
    LayerReport& rep = reports[l];
    rep.layer = names[l];
    rep.method = "from";
    std::optional<std::vector<double>> w;
    if (scope == NormScope::whole_model) {
      rep.norms = model_norms;
      w = model_weights;
    } else {
      for (std::size_t i = 0; i < n; ++i) rep.norms.push_back(norms[i][l]);
      w = normalized_from_weights(rep.norms, k);
    }
    if (!w) {
      rep.fallback = true;
      w = std::vector<double>(n, 1.0 / static_cast<double>(n));
    }
    rep.weights = *w;
    merged[l] = weighted_layer(vectors, names[l], rep.weights);
  });

  TaskVector out;
  out.source_label = "from";
  MergeReport report;
  report.config.method = MergeMethod::from;
  report.config.k = k;
  report.config.norm_scope = scope;
  for (std::size_t l = 0; l < names.size(); ++l) out.deltas.emplace(names[l], std::move(merged[l]));
  report.layers = std::move(reports);
  return {std::move(out), std::move(report)};
}

TaskVector max_norm_select(std::span<const TaskVector> vectors, NormScope scope) {
  require_compatible(vectors, "max_norm_select");
  const auto names = layer_names(vectors.front());
  const auto norms = layer_norms(vectors, names);
  TaskVector out;
  out.source_label = "max_norm";
  if (scope == NormScope::whole_model) {
    const auto best = argmax_first(whole_model_norms(norms));
    out.deltas = vectors[best].deltas;
    return out;
  }
  for (std::size_t l = 0; l < names.size(); ++l) {
    std::vector<double> col;
    for (const auto& model : norms) col.push_back(model[l]);
    out.deltas.emplace(names[l], vectors[argmax_first(col)].deltas.at(names[l]));
  }
  return out;
}

TaskVector task_arithmetic_merge(std::span<const TaskVector> vectors, double alpha) {
  require_compatible(vectors, "task_arithmetic_merge");
  const auto names = layer_names(vectors.front());
  const std::vector<double> coeffs(vectors.size(), alpha);
  std::vector<Tensor2D> merged(names.size());
  parallel_for_each_index(names.size(), [&](std::size_t l) { merged[l] = weighted_layer(vectors, names[l], coeffs); });
  TaskVector out;
  out.source_label = "task_arithmetic";
  for (std::size_t l = 0; l < names.size(); ++l) out.deltas.emplace(names[l], std::move(merged[l]));
  return out;
}

TaskVector average_merge(std::span<const TaskVector> vectors) {
  auto merged = from_merge(vectors, 0.0, NormScope::per_tensor).first;
  merged.source_label = "average";
  return merged;
}

TaskVector dare_transform(const TaskVector& v, double drop_p, std::uint64_t seed) {
  if (!(drop_p >= 0.0 && drop_p < 1.0)) {
    throw ValidationError("dare_transform: drop probability must lie in [0, 1), got " + std::to_string(drop_p));
  }
  if (drop_p == 0.0) return v;
  const double keep_scale = 1.0 / (1.0 - drop_p);
  const auto names = layer_names(v);
  std::vector<Tensor2D> out_layers(names.size());
  parallel_for_each_index(names.size(), [&](std::size_t l) {
    const CounterStream stream(seed, "dare/" + v.source_label + "/" + names[l]);
    Tensor2D t = v.deltas.at(names[l]);
    auto data = t.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      data[j] = stream.uniform(j) < drop_p ? 0.0 : data[j] * keep_scale;
    }
    out_layers[l] = std::move(t);
  });
  TaskVector out;
  out.source_label = v.source_label;
  for (std::size_t l = 0; l < names.size(); ++l) out.deltas.emplace(names[l], std::move(out_layers[l]));
  return out;
}

Tensor2D regmean_merge(std::span<const Tensor2D> weights, std::span<const Tensor2D> grams, double rcond) {
  if (weights.empty()) throw ValidationError("regmean_merge: at least one model is required");
  if (weights.size() != grams.size()) {
    throw ValidationError("regmean_merge: " + std::to_string(weights.size()) + " weights but " +
                          std::to_string(grams.size()) + " Gram matrices");
  }
  const std::size_t dim = weights.front().rows();
  Tensor2D gram_sum(dim, dim);
  Tensor2D rhs(dim, weights.front().cols());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& g = grams[i];
    require_same_shape(weights.front(), weights[i], "regmean_merge");
    if (g.rows() != dim || g.cols() != dim) {
      throw ValidationError("regmean_merge: Gram matrix " + std::to_string(i) + " is " + g.shape_string() +
                            ", expected " + shape_string(dim, dim));
    }
    const double tol = 1e-8 * std::max(1.0, frobenius_norm(g));
    if (frobenius_norm(subtract(g, transpose(g))) > tol) {
      throw ValidationError("regmean_merge: Gram matrix " + std::to_string(i) + " is not symmetric");
    }
    kernels::omp::axpy(1.0, g.data(), gram_sum.data());
    kernels::omp::axpy(1.0, matmul(g, weights[i]).data(), rhs.data());
  }
  return matmul(pinv(gram_sum, rcond), rhs);
}

Checkpoint apply_delta(const Checkpoint& base, const TaskVector& delta, double alpha) {
  std::string bad;
  for (const auto& [name, t] : base.tensors) {
    auto it = delta.deltas.find(name);
    if (it == delta.deltas.end()) {
      bad += " missing:" + name;
    } else if (!it->second.same_shape(t.value)) {
      bad += " shape:" + name;
    }
  }
  for (const auto& [name, t] : delta.deltas) {
    if (!base.tensors.count(name)) bad += " extra:" + name;
  }
  if (!bad.empty()) throw ValidationError("apply_delta: delta does not match base:" + bad);

  Checkpoint out;
  out.metadata = base.metadata;
  for (const auto& [name, t] : base.tensors) {
    Tensor2D v = t.value;
    if (alpha != 0.0) kernels::omp::axpy(alpha, delta.deltas.at(name).data(), v.data());
    out.tensors.emplace(name, StoredTensor::like(t, std::move(v)));
  }
  return out;
}

std::pair<Checkpoint, MergeReport> merge_checkpoints(const Checkpoint& base, std::span<const Checkpoint> finetuned,
                                                     const MergeConfig& cfg, const Checkpoint* grams) {
  cfg.validate();
  if (finetuned.empty()) throw ValidationError("merge: at least one fine-tuned model is required");
  auto t0 = std::chrono::steady_clock::now();
  std::vector<TaskVector> vectors;
  for (std::size_t i = 0; i < finetuned.size(); ++i) {
    vectors.push_back(extract_task_vector(base, finetuned[i], "model" + std::to_string(i)));
  }
  MergeReport report;
  report.timings_ms["extract"] = elapsed_ms(t0);
  t0 = std::chrono::steady_clock::now();

  const std::size_t n = vectors.size();
  const auto names = layer_names(vectors.front());
  TaskVector merged;
  double apply_alpha = cfg.alpha;

  auto uniform_reports = [&](const char* method, auto&& coeff_for) {
    const auto norms = layer_norms(vectors, names);
    for (std::size_t l = 0; l < names.size(); ++l) {
      LayerReport rep{names[l], method, {}, {}, false};
      for (std::size_t i = 0; i < n; ++i) {
        rep.norms.push_back(norms[i][l]);
        rep.weights.push_back(coeff_for(l, i, norms));
      }
      report.layers.push_back(std::move(rep));
    }
  };

  switch (cfg.method) {
    case MergeMethod::dare_from:
      for (auto& v : vectors) v = dare_transform(v, cfg.dare_drop_p, cfg.seed);
      [[fallthrough]];
    case MergeMethod::from: {
      auto [m, r] = from_merge(vectors, cfg.k, cfg.norm_scope);
      merged = std::move(m);
      report.layers = std::move(r.layers);
      for (auto& l : report.layers) l.method = method_name(cfg.method);
      break;
    }
    case MergeMethod::average:
      merged = average_merge(vectors);
      uniform_reports("average", [&](std::size_t, std::size_t, const auto&) { return 1.0 / static_cast<double>(n); });
      break;
    case MergeMethod::max_norm: {
      merged = max_norm_select(vectors, cfg.norm_scope);
      const auto whole = whole_model_norms(layer_norms(vectors, names));
      const auto best_model = argmax_first(whole);
      uniform_reports("max_norm", [&](std::size_t l, std::size_t i, const auto& norms) {
        if (cfg.norm_scope == NormScope::whole_model) return i == best_model ? 1.0 : 0.0;
        std::vector<double> col;
        for (const auto& model : norms) col.push_back(model[l]);
        return i == argmax_first(col) ? 1.0 : 0.0;
      });
      break;
    }
    case MergeMethod::dare_task_arithmetic:
      for (auto& v : vectors) v = dare_transform(v, cfg.dare_drop_p, cfg.seed);
      [[fallthrough]];
    case MergeMethod::task_arithmetic:
      merged = task_arithmetic_merge(vectors, cfg.alpha);
      apply_alpha = 1.0;
      uniform_reports(method_name(cfg.method), [&](std::size_t, std::size_t, const auto&) { return cfg.alpha; });
      break;
    case MergeMethod::regmean: {
      std::vector<Tensor2D> layers(names.size());
      std::vector<LayerReport> reps(names.size());
      parallel_for_each_index(names.size(), [&](std::size_t l) {
        const auto& name = names[l];
        reps[l].layer = name;
        const StoredTensor* gram_ref = nullptr;
        if (grams != nullptr) {
          auto it = grams->tensors.find(name);
          if (it != grams->tensors.end()) gram_ref = &it->second;
        }
        if (gram_ref == nullptr) {
          reps[l].method = "average";
          reps[l].weights.assign(n, 1.0 / static_cast<double>(n));
          layers[l] = weighted_layer(vectors, name, reps[l].weights);
          return;
        }
        reps[l].method = "regmean";
        std::vector<Tensor2D> weights;
        std::vector<Tensor2D> gram_list;
        for (std::size_t i = 0; i < n; ++i) {
          weights.push_back(finetuned[i].tensors.at(name).value);
          // A single Gram tensor is shared by every model; a 3-D tensor holds one per model.
          const auto& g = gram_ref->value;
          const std::size_t dim = weights.back().rows();
          if (g.rows() == dim && g.cols() == dim) {
            gram_list.push_back(g);
          } else if (g.rows() == n && g.cols() == dim * dim) {
            std::vector<double> slice(g.data().begin() + static_cast<std::ptrdiff_t>(i * dim * dim),
                                      g.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * dim * dim));
            gram_list.emplace_back(dim, dim, std::move(slice));
          } else {
            throw ValidationError("regmean: Gram tensor for layer '" + name + "' has shape " + g.shape_string() +
                                  ", expected " + shape_string(dim, dim) + " or " + std::to_string(n) + "x" +
                                  std::to_string(dim) + "x" + std::to_string(dim));
          }
        }
        layers[l] = subtract(regmean_merge(weights, gram_list, cfg.rcond), base.tensors.at(name).value);
      });
      merged.source_label = "regmean";
      for (std::size_t l = 0; l < names.size(); ++l) merged.deltas.emplace(names[l], std::move(layers[l]));
      report.layers = std::move(reps);
      break;
    }
  }
  report.timings_ms["merge"] = elapsed_ms(t0);
  t0 = std::chrono::steady_clock::now();
  Checkpoint out = apply_delta(base, merged, apply_alpha);
  report.timings_ms["apply"] = elapsed_ms(t0);
  report.config = cfg;
  return {std::move(out), std::move(report)};
}

}  // namespace frommerge
