#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "frommerge/checkpoint.hpp"
#include "frommerge/errors.hpp"
#include "frommerge/linalg.hpp"

namespace frommerge {

using json = nlohmann::json;

namespace {

// Canonical names are `<layer>.lora_A` / `<layer>.lora_B`; the PEFT spelling with a
// trailing `.weight` is accepted on read.
bool split_lora_name(const std::string& name, std::string& layer, char& which) {
  for (const char* suffix : {".lora_A", ".lora_B", ".lora_A.weight", ".lora_B.weight"}) {
    const std::string s(suffix);
    if (name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) {
      layer = name.substr(0, name.size() - s.size());
      which = s[6];
      return true;
    }
  }
  return false;
}

}  // namespace

const LoraEntry* LoraAdapter::find(const std::string& layer) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), layer,
                             [](const LoraEntry& e, const std::string& l) { return e.layer < l; });
  return it != entries.end() && it->layer == layer ? &*it : nullptr;
}

Tensor2D LoraAdapter::delta(const LoraEntry& e) const { return scale(matmul(e.b, e.a), scaling_alpha); }

void LoraAdapter::validate() const {
  if (rank == 0) throw ValidationError("LoRA adapter rank must be positive");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (i > 0 && !(entries[i - 1].layer < e.layer)) {
      throw ValidationError("LoRA entries must be sorted and unique (at layer '" + e.layer + "')");
    }
    if (e.a.rows() != rank || e.b.cols() != rank) {
      throw ValidationError("layer '" + e.layer + "': rank mismatch, A is " + e.a.shape_string() + ", B is " +
                            e.b.shape_string() + ", adapter rank " + std::to_string(rank));
    }
  }
}

LoraAdapter lora_from_parts(const Checkpoint& weights, const std::string& config_json) {
  json cfg;
  try {
    cfg = json::parse(config_json);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("LoRA config is not valid JSON: ") + e.what(), e.byte);
  }
  if (!cfg.is_object()) throw ValidationError("LoRA config must be a JSON object");
  for (const char* key : {"r", "lora_alpha", "target_modules"}) {
    if (!cfg.contains(key)) throw ValidationError(std::string("LoRA config missing key '") + key + "'");
  }
  if (!cfg["r"].is_number_unsigned() || cfg["r"].get<std::uint64_t>() == 0) {
    throw ValidationError("LoRA config 'r' must be a positive integer");
  }
  if (!cfg["lora_alpha"].is_number()) throw ValidationError("LoRA config 'lora_alpha' must be a number");
  if (!cfg["target_modules"].is_array()) throw ValidationError("LoRA config 'target_modules' must be a list");

  LoraAdapter adapter;
  adapter.rank = cfg["r"].get<std::size_t>();
  adapter.scaling_alpha = cfg["lora_alpha"].get<double>();

  std::map<std::string, const StoredTensor*> a_parts, b_parts;
  std::set<DType> dtypes;
  for (const auto& [name, t] : weights.tensors) {
    std::string layer;
    char which = 0;
    if (!split_lora_name(name, layer, which)) {
      throw ValidationError("tensor '" + name + "' is not a lora_A/lora_B tensor");
    }
    auto& side = which == 'A' ? a_parts : b_parts;
    if (!side.emplace(layer, &t).second) {
      throw ValidationError("layer '" + layer + "': duplicate lora_" + std::string(1, which) + " tensor");
    }
    dtypes.insert(t.dtype);
  }
  for (const auto& [layer, a] : a_parts) {
    if (!b_parts.count(layer)) throw ValidationError("layer '" + layer + "': lora_A present without lora_B");
  }
  for (const auto& [layer, b] : b_parts) {
    if (!a_parts.count(layer)) throw ValidationError("layer '" + layer + "': lora_B present without lora_A");
  }

  std::set<std::string> targets;
  for (const auto& t : cfg["target_modules"]) {
    if (!t.is_string()) throw ValidationError("LoRA config 'target_modules' entries must be strings");
    targets.insert(t.get<std::string>());
  }
  for (const auto& t : targets) {
    if (!a_parts.count(t)) throw ValidationError("layer '" + t + "': listed in target_modules but has no weights");
  }
  for (const auto& [layer, a] : a_parts) {
    if (!targets.count(layer)) throw ValidationError("layer '" + layer + "': weights present but not in target_modules");
  }

  for (const auto& [layer, a] : a_parts) {
    const auto* b = b_parts.at(layer);
    if (a->value.rows() != adapter.rank || b->value.cols() != adapter.rank) {
      throw ValidationError("layer '" + layer + "': rank mismatch, A is " + a->value.shape_string() + ", B is " +
                            b->value.shape_string() + ", config r=" + std::to_string(adapter.rank));
    }
    adapter.entries.push_back({layer, a->value, b->value});
  }
  adapter.dtype = dtypes.count(DType::F32) ? DType::F32 : DType::F64;
  return adapter;
}

Checkpoint lora_weights(const LoraAdapter& adapter) {
  adapter.validate();
  Checkpoint ckpt;
  for (const auto& e : adapter.entries) {
    ckpt.tensors.emplace(e.layer + ".lora_A", StoredTensor::from_matrix(e.a, adapter.dtype));
    ckpt.tensors.emplace(e.layer + ".lora_B", StoredTensor::from_matrix(e.b, adapter.dtype));
  }
  return ckpt;
}

std::string lora_config_json(const LoraAdapter& adapter) {
  json targets = json::array();
  for (const auto& e : adapter.entries) targets.push_back(e.layer);
  json cfg = {{"r", adapter.rank}, {"lora_alpha", adapter.scaling_alpha}, {"target_modules", targets}};
  return cfg.dump(2) + "\n";
}

LoraAdapter read_lora(const std::filesystem::path& weights_path, const std::filesystem::path& config_path) {
  const auto bytes = read_file(config_path);
  return lora_from_parts(read_container(weights_path), std::string(bytes.begin(), bytes.end()));
}

void write_lora(const LoraAdapter& adapter, const std::filesystem::path& weights_path,
                const std::filesystem::path& config_path) {
  const auto weights = serialize_container(lora_weights(adapter));
  const auto config = lora_config_json(adapter);
  write_file_atomic(weights_path, weights);
  write_file_atomic(config_path, config);
}

}  // namespace frommerge
