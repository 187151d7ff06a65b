#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "frommerge/checkpoint.hpp"
#include "test_util.hpp"

namespace frommerge::testing {

// Raw container bytes assembled by hand from a header string and payload.
inline std::vector<std::uint8_t> raw_container(const std::string& header, const std::vector<std::uint8_t>& payload) {
  std::vector<std::uint8_t> out(8);
  const std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(n >> (8 * i));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline Checkpoint sample_checkpoint(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Checkpoint c;
  c.tensors.emplace("embed.weight", StoredTensor::from_matrix(random_matrix(6, 4, gen), DType::F32));
  StoredTensor bias;
  bias.value = random_matrix(1, 5, gen);
  bias.shape = {5};
  bias.dtype = DType::F64;
  c.tensors.emplace("layer.bias", bias);
  StoredTensor conv;
  conv.value = random_matrix(3, 8, gen);
  conv.shape = {3, 2, 2, 2};
  conv.dtype = DType::F64;
  c.tensors.emplace("conv.weight", conv);
  c.metadata["format"] = "pt";
  c.metadata["note"] = "unit \"test\"";
  return c;
}

inline LoraAdapter sample_adapter(std::size_t layers, std::size_t rank, std::size_t d1, std::size_t d2,
                                  std::uint64_t seed, DType dtype = DType::F64, double alpha = 1.0) {
  std::mt19937_64 gen(seed);
  LoraAdapter ad;
  ad.rank = rank;
  ad.scaling_alpha = alpha;
  ad.dtype = dtype;
  for (std::size_t l = 0; l < layers; ++l) {
    ad.entries.push_back({"model.layers." + std::to_string(l) + ".q_proj", random_matrix(rank, d2, gen, 0.3),
                          random_matrix(d1, rank, gen, 0.3)});
  }
  return ad;
}

inline std::string read_text(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return {bytes.begin(), bytes.end()};
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("frommerge-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace frommerge::testing
