#include "frommerge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "frommerge/errors.hpp"

namespace frommerge {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;
constexpr std::size_t kHeaderAlign = 8;

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian");

std::uint64_t load_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void store_u64_le(std::uint64_t v, std::uint8_t* p) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

DType parse_dtype(const std::string& s, std::uint64_t offset, const std::string& name) {
  if (s == "F32") return DType::F32;
  if (s == "F64") return DType::F64;
  throw ParseError("tensor '" + name + "': unsupported dtype '" + s + "'", offset);
}

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return false;
  out = a * b;
  return true;
}

struct Extent {
  std::uint64_t begin;
  std::uint64_t end;
  std::string name;
};

std::uint64_t read_uint(const json& v, std::uint64_t offset, const std::string& what) {
  if (!v.is_number_unsigned()) throw ParseError(what + " must be a non-negative integer", offset);
  return v.get<std::uint64_t>();
}

}  // namespace

const char* dtype_name(DType d) noexcept { return d == DType::F32 ? "F32" : "F64"; }

std::size_t dtype_size(DType d) noexcept { return d == DType::F32 ? 4 : 8; }

std::pair<std::size_t, std::size_t> matrix_shape(std::span<const std::uint64_t> shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, static_cast<std::size_t>(shape[0])};
  std::size_t rest = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) rest *= static_cast<std::size_t>(shape[i]);
  return {static_cast<std::size_t>(shape[0]), rest};
}

StoredTensor StoredTensor::from_matrix(Tensor2D m, DType dtype) {
  StoredTensor t;
  t.shape = {m.rows(), m.cols()};
  t.value = std::move(m);
  t.dtype = dtype;
  return t;
}

StoredTensor StoredTensor::like(const StoredTensor& like, Tensor2D m) {
  require_same_shape(like.value, m, "StoredTensor::like");
  StoredTensor t;
  t.value = std::move(m);
  t.shape = like.shape;
  t.dtype = like.dtype;
  return t;
}

Checkpoint parse_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw ParseError("file too short for header length field", 0);
  const std::uint64_t header_len = load_u64_le(bytes.data());
  const std::uint64_t available = bytes.size() - 8;
  if (header_len > available) {
    throw ParseError("header length " + std::to_string(header_len) + " exceeds file size " +
                         std::to_string(bytes.size()),
                     0);
  }
  if (header_len > kMaxHeaderBytes) throw ParseError("header length exceeds 100 MiB limit", 0);
  if (header_len < 2) throw ParseError("header too short to hold a JSON object", 8);

  const auto* hbegin = reinterpret_cast<const char*>(bytes.data() + 8);
  std::set<std::string> seen_keys;
  std::string duplicate;
  auto reject_duplicates = [&](int depth, json::parse_event_t event, json& parsed) {
    if (depth == 1 && event == json::parse_event_t::key) {
      auto key = parsed.get<std::string>();
      if (!seen_keys.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  json header;
  try {
    header = json::parse(hbegin, hbegin + header_len, reject_duplicates);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed JSON header: ") + e.what(), 8 + e.byte);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed JSON header: ") + e.what(), 8);
  }
  if (!duplicate.empty()) throw ParseError("duplicate header key '" + duplicate + "'", 8);
  if (!header.is_object()) throw ParseError("header is not a JSON object", 8);

  const std::uint64_t payload_start = 8 + header_len;
  const std::uint64_t payload_size = bytes.size() - payload_start;
  const std::uint8_t* payload = bytes.data() + payload_start;

  Checkpoint ckpt;
  std::vector<Extent> extents;
  try {
    for (const auto& [name, entry] : header.items()) {
      if (name == "__metadata__") {
        if (!entry.is_object()) throw ParseError("__metadata__ must be an object", 8);
        for (const auto& [k, v] : entry.items()) {
          if (!v.is_string()) throw ParseError("__metadata__ value for '" + k + "' is not a string", 8);
          ckpt.metadata.emplace(k, v.get<std::string>());
        }
        continue;
      }
      if (!entry.is_object()) throw ParseError("tensor '" + name + "': entry is not an object", 8);
      const auto dt = entry.find("dtype");
      const auto sh = entry.find("shape");
      const auto off = entry.find("data_offsets");
      if (dt == entry.end() || sh == entry.end() || off == entry.end()) {
        throw ParseError("tensor '" + name + "': missing dtype, shape or data_offsets", 8);
      }
      if (!dt->is_string()) throw ParseError("tensor '" + name + "': dtype is not a string", 8);
      const DType dtype = parse_dtype(dt->get<std::string>(), 8, name);
      if (!sh->is_array()) throw ParseError("tensor '" + name + "': shape is not an array", 8);
      std::vector<std::uint64_t> shape;
      std::uint64_t numel = 1;
      for (const auto& d : *sh) {
        const auto dim = read_uint(d, 8, "tensor '" + name + "': shape entry");
        if (!checked_mul(numel, dim, numel)) throw ParseError("tensor '" + name + "': shape overflows", 8);
        shape.push_back(dim);
      }
      if (numel == 0) throw ParseError("tensor '" + name + "': empty tensors are not supported", 8);
      if (!off->is_array() || off->size() != 2) {
        throw ParseError("tensor '" + name + "': data_offsets must be [begin, end]", 8);
      }
      const auto begin = read_uint((*off)[0], 8, "tensor '" + name + "': data_offsets");
      const auto end = read_uint((*off)[1], 8, "tensor '" + name + "': data_offsets");
      std::uint64_t nbytes = 0;
      if (!checked_mul(numel, dtype_size(dtype), nbytes)) {
        throw ParseError("tensor '" + name + "': byte size overflows", 8);
      }
      if (begin > end || end > payload_size) {
        throw ParseError("tensor '" + name + "': data extent [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") out of bounds",
                         payload_start + std::min(begin, payload_size));
      }
      if (end - begin != nbytes) {
        throw ParseError("tensor '" + name + "': extent length " + std::to_string(end - begin) +
                             " does not match shape/dtype size " + std::to_string(nbytes),
                         payload_start + begin);
      }
      extents.push_back({begin, end, name});

      const auto [rows, cols] = matrix_shape(shape);
      std::vector<double> values(numel);
      const std::uint8_t* src = payload + begin;
      for (std::uint64_t j = 0; j < numel; ++j) {
        double v;
        if (dtype == DType::F32) {
          float f;
          std::memcpy(&f, src + 4 * j, 4);
          v = f;
        } else {
          std::memcpy(&v, src + 8 * j, 8);
        }
        if (!std::isfinite(v)) {
          throw ParseError("tensor '" + name + "': non-finite value", payload_start + begin + j * dtype_size(dtype));
        }
        values[j] = v;
      }
      StoredTensor t;
      t.value = Tensor2D(rows, cols, std::move(values));
      t.shape = std::move(shape);
      t.dtype = dtype;
      ckpt.tensors.emplace(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid header structure: ") + e.what(), 8);
  }

  std::sort(extents.begin(), extents.end(), [](const Extent& a, const Extent& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < extents.size(); ++i) {
    if (extents[i].begin < extents[i - 1].end) {
      throw ParseError("tensors '" + extents[i - 1].name + "' and '" + extents[i].name + "' overlap",
                       payload_start + extents[i].begin);
    }
  }
  return ckpt;
}

std::vector<std::uint8_t> serialize_container(const Checkpoint& ckpt) {
  json header = json::object();
  std::uint64_t offset = 0;
  // std::map iteration gives name-sorted payload order.
  for (const auto& [name, t] : ckpt.tensors) {
    if (name == "__metadata__") throw ValidationError("tensor name '__metadata__' is reserved");
    std::uint64_t numel = 1;
    for (auto d : t.shape) numel *= d;
    if (numel != t.value.size()) {
      throw ValidationError("tensor '" + name + "': recorded shape does not match " + std::to_string(t.value.size()) +
                            " stored values");
    }
    const std::uint64_t nbytes = numel * dtype_size(t.dtype);
    header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!ckpt.metadata.empty()) header["__metadata__"] = ckpt.metadata;

  std::string text = header.dump();
  text.append((kHeaderAlign - text.size() % kHeaderAlign) % kHeaderAlign, ' ');

  std::vector<std::uint8_t> out(8 + text.size() + offset);
  store_u64_le(text.size(), out.data());
  std::memcpy(out.data() + 8, text.data(), text.size());
  std::uint8_t* dst = out.data() + 8 + text.size();
  for (const auto& [name, t] : ckpt.tensors) {
    for (double v : t.value.data()) {
      if (t.dtype == DType::F32) {
        const auto f = static_cast<float>(v);
        std::memcpy(dst, &f, 4);
        dst += 4;
      } else {
        std::memcpy(dst, &v, 8);
        dst += 8;
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  if (size < 0) throw IoError("cannot determine size of '" + path.string() + "'");
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (!bytes.empty() && !in.read(reinterpret_cast<char*>(bytes.data()), size)) {
    throw IoError("short read on '" + path.string() + "'");
  }
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed for '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path.string() + "'");
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Checkpoint read_container(const std::filesystem::path& path) { return parse_container(read_file(path)); }

void write_container(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_container(ckpt));
}

}  // namespace frommerge
