#include "frommerge/harness.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "frommerge/errors.hpp"
#include "frommerge/kernels.hpp"
#include "frommerge/linalg.hpp"
#include "frommerge/merge.hpp"
#include "frommerge/parallel.hpp"
#include "frommerge/rng.hpp"

namespace frommerge {

using json = nlohmann::json;

namespace {

// Modified Gram-Schmidt with one re-orthogonalization pass. Throws if a vector is
// numerically dependent on its predecessors.
void orthonormalize(std::vector<std::vector<double>>& vs) {
  for (std::size_t j = 0; j < vs.size(); ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        const double proj = kernels::serial::dot(vs[i], vs[j]);
        kernels::serial::axpy(-proj, vs[i], vs[j]);
      }
    }
    const double norm = std::sqrt(kernels::serial::sum_squares(vs[j]));
    if (!(norm > 1e-12)) throw NumericError("synthetic generator: degenerate direction during orthogonalization");
    for (double& x : vs[j]) x /= norm;
  }
}

std::vector<std::vector<double>> random_orthonormal(std::size_t count, std::size_t dim, std::uint64_t seed,
                                                    const std::string& label) {
  std::vector<std::vector<double>> vs;
  for (std::size_t j = 0; j < count; ++j) {
    const auto t = seeded_normal(1, dim, 1.0, seed, label + "/" + std::to_string(j));
    vs.emplace_back(t.data().begin(), t.data().end());
  }
  orthonormalize(vs);
  return vs;
}

// Columns are orthonormal: rows x cols with cols <= rows.
Tensor2D orthonormal_columns(std::size_t rows, std::size_t cols, std::uint64_t seed, const std::string& label) {
  const auto vs = random_orthonormal(cols, rows, seed, label);
  Tensor2D m(rows, cols);
  for (std::size_t j = 0; j < cols; ++j)
    for (std::size_t i = 0; i < rows; ++i) m(i, j) = vs[j][i];
  return m;
}

std::size_t directions_needed(const SynthSpec& spec) {
  if (spec.n_models == 1 || spec.overlap == 1.0) return 1;
  if (spec.overlap == 0.0) return spec.n_models;
  return spec.n_models + 1;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

double parse_double(const std::string& s) {
  if (s.empty()) return std::nan("");
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ValidationError("sweep CSV: bad number '" + s + "'");
  return v;
}

std::optional<double> parse_optional(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return parse_double(s);
}

TaskVector single_layer(const std::string& name, const Tensor2D& t) {
  TaskVector v;
  v.deltas.emplace(name, t);
  return v;
}

}  // namespace

SynthSpec SynthSpec::defaults() {
  SynthSpec s;
  s.layer_shapes = {{"blocks.0.attn.weight", 24, 16},
                    {"blocks.0.mlp.weight", 32, 24},
                    {"blocks.1.attn.weight", 24, 16},
                    {"blocks.1.mlp.weight", 32, 24}};
  s.n_models = 3;
  s.norm_profile = {3.0, 1.5, 1.0};
  s.overlap = 0.3;
  s.seed = 0;
  return s;
}

void SynthSpec::validate() const {
  if (layer_shapes.empty()) throw ValidationError("synth: at least one layer is required");
  if (n_models == 0) throw ValidationError("synth: n_models must be positive");
  if (norm_profile.size() != n_models) {
    throw ValidationError("synth: norm_profile has " + std::to_string(norm_profile.size()) + " entries for " +
                          std::to_string(n_models) + " models");
  }
  for (double n : norm_profile) {
    if (!(n > 0.0) || !std::isfinite(n)) throw ValidationError("synth: norm_profile entries must be positive");
  }
  if (!(overlap >= 0.0 && overlap <= 1.0)) throw ValidationError("synth: overlap must lie in [0, 1]");
  if (!(base_sigma > 0.0)) throw ValidationError("synth: base_sigma must be positive");
  const std::size_t need = directions_needed(*this);
  for (const auto& l : layer_shapes) {
    if (l.rows == 0 || l.cols == 0) throw ValidationError("synth: layer '" + l.name + "' has an empty dimension");
    std::size_t dim = l.rows * l.cols;
    if (intrinsic_rank) {
      const std::size_t r = *intrinsic_rank;
      if (r == 0 || r > std::min(l.rows, l.cols)) {
        throw ValidationError("synth: intrinsic_rank " + std::to_string(r) + " infeasible for layer '" + l.name +
                              "' of shape " + shape_string(l.rows, l.cols));
      }
      dim = r * r;
    }
    if (need > dim) {
      throw ValidationError("synth: layer '" + l.name + "' cannot host " + std::to_string(need) +
                            " orthogonal directions (space dimension " + std::to_string(dim) +
                            "); lower n_models, raise intrinsic_rank, or use overlap 0/1");
    }
  }
}

SynthModels generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  SynthModels out;
  out.finetuned.resize(spec.n_models);
  const std::size_t need = directions_needed(spec);
  const double shared = std::sqrt(spec.overlap);
  const double own = std::sqrt(1.0 - spec.overlap);

  for (const auto& layer : spec.layer_shapes) {
    const Tensor2D base = seeded_normal(layer.rows, layer.cols, spec.base_sigma, spec.seed, "synth/base/" + layer.name);
    const std::size_t core_rows = spec.intrinsic_rank ? *spec.intrinsic_rank : layer.rows;
    const std::size_t core_cols = spec.intrinsic_rank ? *spec.intrinsic_rank : layer.cols;
    const auto dirs = random_orthonormal(need, core_rows * core_cols, spec.seed, "synth/dir/" + layer.name);
    Tensor2D u, v;
    if (spec.intrinsic_rank) {
      u = orthonormal_columns(layer.rows, core_rows, spec.seed, "synth/u/" + layer.name);
      v = orthonormal_columns(layer.cols, core_cols, spec.seed, "synth/v/" + layer.name);
    }
    for (std::size_t i = 0; i < spec.n_models; ++i) {
      std::vector<double> dir;
      if (need == 1) {
        dir = dirs[0];
      } else if (need == spec.n_models) {
        dir = dirs[i];
      } else {
        dir.resize(dirs[0].size());
        for (std::size_t j = 0; j < dir.size(); ++j) dir[j] = shared * dirs[0][j] + own * dirs[i + 1][j];
      }
      Tensor2D theta(core_rows, core_cols, std::move(dir));
      if (spec.intrinsic_rank) theta = matmul(matmul(u, theta), transpose(v));
      theta = scale(theta, spec.norm_profile[i] / frobenius_norm(theta));
      out.finetuned[i].tensors.emplace(layer.name, StoredTensor::from_matrix(add(base, theta), spec.dtype));
    }
    out.base.tensors.emplace(layer.name, StoredTensor::from_matrix(base, spec.dtype));
  }
  out.base.metadata["generator"] = "synthetic";
  out.base.metadata["seed"] = std::to_string(spec.seed);
  for (std::size_t i = 0; i < spec.n_models; ++i) {
    out.finetuned[i].metadata = out.base.metadata;
    out.finetuned[i].metadata["model_index"] = std::to_string(i);
  }
  return out;
}

std::vector<double> default_k_grid() { return {0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0}; }

void SweepConfig::validate() const {
  if (k_grid.empty()) throw ValidationError("sweep: k grid must be nonempty");
  for (double k : k_grid) {
    if (!(k >= 0.0) || !std::isfinite(k)) throw ValidationError("sweep: k values must be finite and >= 0");
  }
  if (methods.empty()) throw ValidationError("sweep: at least one method is required");
  for (const auto& m : methods) {
    if (m != "from" && m != "average" && m != "max_norm" && m != "task_arithmetic" && m != "lora_from") {
      throw ValidationError("sweep: unknown method '" + m + "'");
    }
  }
}

const SweepCell& SweepResult::cell(const std::string& layer, const std::string& method, double k) const {
  for (const auto& c : cells) {
    if (c.layer == layer && c.method == method && c.k == k) return c;
  }
  throw ValidationError("sweep: no cell for " + layer + "/" + method + "/k=" + format_double(k));
}

SweepResult sweep_k(const Checkpoint& base, std::span<const Checkpoint> finetuned, const SweepConfig& cfg) {
  cfg.validate();
  if (finetuned.empty()) throw ValidationError("sweep: at least one fine-tuned model is required");
  std::vector<TaskVector> vectors;
  for (std::size_t i = 0; i < finetuned.size(); ++i) {
    vectors.push_back(extract_task_vector(base, finetuned[i], "model" + std::to_string(i)));
  }
  const std::size_t n = vectors.size();

  SweepResult result;
  result.k_grid = cfg.k_grid;
  result.methods = cfg.methods;
  for (const auto& [name, t] : base.tensors) result.layers.push_back(name);
  for (const auto& name : result.layers) {
    std::vector<double> norms;
    for (const auto& v : vectors) norms.push_back(frobenius_norm(v.deltas.at(name)));
    result.layer_norms.push_back(std::move(norms));
  }

  const std::size_t per_layer = cfg.methods.size() * cfg.k_grid.size();
  result.cells.resize(result.layers.size() * per_layer);
  parallel_for_each_index(result.cells.size(), [&](std::size_t idx) {
    const std::size_t l = idx / per_layer;
    const std::size_t m = (idx % per_layer) / cfg.k_grid.size();
    const std::size_t kk = idx % cfg.k_grid.size();
    SweepCell& cell = result.cells[idx];
    cell.layer = result.layers[l];
    cell.method = cfg.methods[m];
    cell.k = cfg.k_grid[kk];
    const auto& norms = result.layer_norms[l];
    cell.max_model = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (norms[i] > norms[cell.max_model]) cell.max_model = i;
    }
    cell.max_norm = norms[cell.max_model];
    try {
      std::vector<TaskVector> layer_vectors;
      std::vector<Tensor2D> thetas;
      for (const auto& v : vectors) {
        thetas.push_back(v.deltas.at(cell.layer));
        layer_vectors.push_back(single_layer(cell.layer, thetas.back()));
      }
      auto [weighted_mean, rep] = from_merge(layer_vectors, cell.k);
      const Tensor2D& mean = weighted_mean.deltas.at(cell.layer);
      const auto& from_weights = rep.layers.front().weights;

      Tensor2D merged;
      if (cell.method == "from") {
        merged = mean;
        cell.weight_max = from_weights[cell.max_model];
      } else if (cell.method == "average") {
        merged = average_merge(layer_vectors).deltas.at(cell.layer);
        cell.weight_max = 1.0 / static_cast<double>(n);
      } else if (cell.method == "max_norm") {
        merged = max_norm_select(layer_vectors).deltas.at(cell.layer);
        cell.weight_max = 1.0;
      } else if (cell.method == "task_arithmetic") {
        merged = task_arithmetic_merge(layer_vectors, cfg.alpha).deltas.at(cell.layer);
        cell.weight_max = cfg.alpha;
      } else {
        LoraMergeConfig lc = cfg.lora;
        lc.k = cell.k;
        lc.compute_oracle = true;
        auto res = merge_lora_layer(thetas, lc, cell.layer);
        merged = matmul(res.b, res.a);
        cell.weight_max = from_weights[cell.max_model];
        cell.lora_final_loss = res.trace.final_loss;
        cell.lora_oracle_loss = res.trace.oracle_loss;
        cell.stop_reason = res.trace.stop_reason;
      }
      const auto raw = from_norm_weights(thetas, cell.k);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = frobenius_distance_squared(merged, thetas[i]);
        cell.loss_vs_model.push_back(d);
        cell.loss_eq1 += raw[i] * d;
      }
      cell.distance_to_weighted_mean = std::sqrt(frobenius_distance_squared(merged, mean));
    } catch (const Error& e) {
      cell.failed = true;
      cell.error = e.what();
    }
  });
  return result;
}

json SweepResult::to_json() const {
  json cells_json = json::array();
  for (const auto& c : cells) {
    json j = {{"layer", c.layer},
              {"method", c.method},
              {"k", c.k},
              {"max_model", c.max_model},
              {"max_norm", c.max_norm},
              {"weight_max", c.weight_max},
              {"loss_vs_model", c.loss_vs_model},
              {"loss_eq1", c.loss_eq1},
              {"distance_to_weighted_mean", c.distance_to_weighted_mean},
              {"lora_final_loss", c.lora_final_loss ? json(*c.lora_final_loss) : json(nullptr)},
              {"lora_oracle_loss", c.lora_oracle_loss ? json(*c.lora_oracle_loss) : json(nullptr)},
              {"stop_reason", c.stop_reason ? json(stop_reason_name(*c.stop_reason)) : json(nullptr)},
              {"failed", c.failed}};
    if (c.failed) j["error"] = c.error;
    cells_json.push_back(std::move(j));
  }
  json layers_json = json::array();
  for (std::size_t l = 0; l < layers.size(); ++l) layers_json.push_back({{"layer", layers[l]}, {"norms", layer_norms[l]}});
  return {{"k_grid", k_grid}, {"methods", methods}, {"layers", layers_json}, {"cells", cells_json}};
}

std::string SweepResult::to_csv() const {
  std::ostringstream out;
  out << kSweepCsvHeader << '\n';
  for (const auto& c : cells) {
    out << csv_field(c.layer) << ',' << csv_field(c.method) << ',' << format_double(c.k) << ',' << c.max_model << ','
        << format_double(c.max_norm) << ',';
    if (c.failed) {
      out << ",,,,,failed\n";
      continue;
    }
    out << format_double(c.weight_max) << ',' << format_double(c.loss_vs_model[c.max_model]) << ','
        << format_double(c.loss_eq1) << ',' << (c.lora_final_loss ? format_double(*c.lora_final_loss) : "") << ','
        << (c.lora_oracle_loss ? format_double(*c.lora_oracle_loss) : "") << ','
        << (c.stop_reason ? stop_reason_name(*c.stop_reason) : "") << '\n';
  }
  return out.str();
}

void emit_report(const SweepResult& result, const std::filesystem::path& stem) {
  const std::size_t expected = result.layers.size() * result.methods.size() * result.k_grid.size();
  if (result.cells.size() != expected) {
    throw ValidationError("sweep report: grid incomplete (" + std::to_string(result.cells.size()) + " of " +
                          std::to_string(expected) + " cells)");
  }
  auto csv_path = stem;
  csv_path += ".csv";
  auto json_path = stem;
  json_path += ".json";
  write_file_atomic(csv_path, result.to_csv());
  write_file_atomic(json_path, result.to_json().dump(2) + "\n");
}

std::vector<SweepCsvRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kSweepCsvHeader) throw ValidationError("sweep CSV: unexpected header");
  std::vector<SweepCsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 11) throw ValidationError("sweep CSV: expected 11 fields, got " + std::to_string(f.size()));
    SweepCsvRow r;
    r.layer = f[0];
    r.method = f[1];
    r.k = parse_double(f[2]);
    r.model_index = static_cast<std::size_t>(parse_double(f[3]));
    r.norm = parse_double(f[4]);
    r.weight = parse_double(f[5]);
    r.loss_vs_model = parse_double(f[6]);
    r.loss_eq1 = parse_double(f[7]);
    r.lora_final_loss = parse_optional(f[8]);
    r.lora_oracle_loss = parse_optional(f[9]);
    r.stop_reason = f[10];
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace frommerge
