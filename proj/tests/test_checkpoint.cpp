#include <doctest.h>

#include <cstring>
#include <random>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "frommerge/checkpoint.hpp"
#include "frommerge/errors.hpp"

using namespace frommerge;
using namespace frommerge::testing;

namespace {

std::vector<std::uint8_t> floats_le(std::initializer_list<float> xs) {
  std::vector<std::uint8_t> out;
  for (float f : xs) {
    std::uint8_t b[4];
    std::memcpy(b, &f, 4);
    out.insert(out.end(), b, b + 4);
  }
  return out;
}

void check_equal(const Checkpoint& a, const Checkpoint& b) {
  REQUIRE(a.tensors.size() == b.tensors.size());
  CHECK(a.metadata == b.metadata);
  for (const auto& [name, t] : a.tensors) {
    const auto& u = b.tensors.at(name);
    CHECK(t.shape == u.shape);
    CHECK(t.dtype == u.dtype);
    CHECK(t.value.same_shape(u.value));
  }
}

}  // namespace

TEST_SUITE("checkpoint-io") {

TEST_CASE("hand-built f32 container parses to ones") {
  const auto bytes = raw_container(R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})",
                                   floats_le({1.0f, 1.0f, 1.0f, 1.0f}));
  const auto c = parse_container(bytes);
  const auto& w = c.tensors.at("w");
  CHECK(w.dtype == DType::F32);
  CHECK(w.shape == std::vector<std::uint64_t>{2, 2});
  CHECK(w.value == Tensor2D{{1, 1}, {1, 1}});
}

TEST_CASE("round trip preserves names, shapes, dtypes and metadata") {
  TempDir dir;
  const auto c = sample_checkpoint(1);
  write_container(c, dir / "c.safetensors");
  const auto back = read_container(dir / "c.safetensors");
  check_equal(c, back);
  // f64 bit exact, f32 value exact after the first rounding
  CHECK(back.tensors.at("layer.bias").value == c.tensors.at("layer.bias").value);
  CHECK(back.tensors.at("conv.weight").value == c.tensors.at("conv.weight").value);
  const auto again = parse_container(serialize_container(back));
  CHECK(again.tensors.at("embed.weight").value == back.tensors.at("embed.weight").value);
  for (std::size_t j = 0; j < c.tensors.at("embed.weight").value.size(); ++j) {
    CHECK(back.tensors.at("embed.weight").value.data()[j] ==
          static_cast<double>(static_cast<float>(c.tensors.at("embed.weight").value.data()[j])));
  }
}

TEST_CASE("higher-rank shapes map to matrices") {
  const std::uint64_t scalar[] = {0};
  CHECK(matrix_shape(std::span<const std::uint64_t>{}) == std::pair<std::size_t, std::size_t>{1, 1});
  const std::uint64_t vec[] = {7};
  CHECK(matrix_shape(vec) == std::pair<std::size_t, std::size_t>{1, 7});
  const std::uint64_t conv[] = {3, 2, 4, 5};
  CHECK(matrix_shape(conv) == std::pair<std::size_t, std::size_t>{3, 40});
  (void)scalar;
}

TEST_CASE("empty checkpoint is a valid container") {
  const auto bytes = serialize_container(Checkpoint{});
  CHECK(bytes.size() % 8 == 0);
  const auto c = parse_container(bytes);
  CHECK(c.tensors.empty());
  CHECK(c.metadata.empty());
}

TEST_CASE("writing the same checkpoint twice gives identical bytes") {
  TempDir dir;
  const auto c = sample_checkpoint(3);
  write_container(c, dir / "a.st");
  write_container(c, dir / "b.st");
  CHECK(read_file(dir / "a.st") == read_file(dir / "b.st"));
}

TEST_CASE("payloads are laid out in name order with an 8-byte aligned header") {
  const auto bytes = serialize_container(sample_checkpoint(4));
  std::uint64_t n = 0;
  for (int i = 7; i >= 0; --i) n = (n << 8) | bytes[i];
  CHECK(n % 8 == 0);
  const std::string header(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  CHECK(header.find(R"("conv.weight":{"data_offsets":[0,192])") != std::string::npos);
  CHECK(header.find(R"("embed.weight":{"data_offsets":[192,288])") != std::string::npos);
  CHECK(header.find(R"("layer.bias":{"data_offsets":[288,328])") != std::string::npos);
}

TEST_CASE("malformed containers are parse errors") {
  SUBCASE("too short") { CHECK_THROWS_AS(parse_container(std::vector<std::uint8_t>{1, 2, 3}), ParseError); }
  SUBCASE("header length larger than file") {
    auto bytes = raw_container("{}", {});
    bytes[0] = 200;
    try {
      parse_container(bytes);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("bad json") { CHECK_THROWS_AS(parse_container(raw_container("{\"a\":", {})), ParseError); }
  SUBCASE("unsupported dtype") {
    CHECK_THROWS_AS(
        parse_container(raw_container(R"({"w":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}})", {0, 0, 0, 0})),
        ParseError);
  }
  SUBCASE("out of bounds extent") {
    CHECK_THROWS_AS(parse_container(raw_container(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
                                                  floats_le({1.0f}))),
                    ParseError);
  }
  SUBCASE("extent length disagrees with shape") {
    CHECK_THROWS_AS(parse_container(raw_container(R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,8]}})",
                                                  floats_le({1.0f, 2.0f}))),
                    ParseError);
  }
  SUBCASE("overlapping extents") {
    const auto bytes = raw_container(
        R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
        floats_le({1, 2, 3}));
    CHECK_THROWS_AS(parse_container(bytes), ParseError);
  }
  SUBCASE("duplicate tensor names") {
    const auto bytes = raw_container(
        R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
        floats_le({1, 2}));
    CHECK_THROWS_AS(parse_container(bytes), ParseError);
  }
  SUBCASE("shape overflow") {
    CHECK_THROWS_AS(parse_container(raw_container(
                        R"({"w":{"dtype":"F64","shape":[4294967296,4294967296,16],"data_offsets":[0,8]}})", {})),
                    ParseError);
  }
  SUBCASE("non-finite payload") {
    CHECK_THROWS_AS(parse_container(raw_container(R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})",
                                                  floats_le({std::numeric_limits<float>::infinity()}))),
                    ParseError);
  }
}

TEST_CASE("missing file is an I/O error") {
  CHECK_THROWS_AS(read_container("/nonexistent/dir/x.safetensors"), IoError);
}

TEST_CASE("byte mutations never crash the parser") {
  const auto good = serialize_container(sample_checkpoint(9));
  std::mt19937_64 gen(99);
  int rejected = 0;
  for (int it = 0; it < 500; ++it) {
    auto bytes = good;
    const int flips = 1 + static_cast<int>(gen() % 4);
    for (int f = 0; f < flips; ++f) bytes[gen() % bytes.size()] = static_cast<std::uint8_t>(gen());
    if (gen() % 10 == 0) bytes.resize(gen() % bytes.size());
    try {
      (void)parse_container(bytes);
    } catch (const ParseError&) {
      ++rejected;
    }
  }
  CHECK(rejected > 0);
}

TEST_CASE("LoRA adapter round trip") {
  TempDir dir;
  const auto ad = sample_adapter(3, 4, 10, 7, 5, DType::F64, 0.5);
  write_lora(ad, dir / "a.safetensors", dir / "a.json");
  const auto back = read_lora(dir / "a.safetensors", dir / "a.json");
  CHECK(back.rank == 4);
  CHECK(back.scaling_alpha == 0.5);
  REQUIRE(back.entries.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.entries[i].layer == ad.entries[i].layer);
    CHECK(back.entries[i].a == ad.entries[i].a);
    CHECK(back.entries[i].b == ad.entries[i].b);
  }
  const auto cfg = read_file(dir / "a.json");
  const auto cfg_json = nlohmann::json::parse(cfg.begin(), cfg.end());
  CHECK(cfg_json["r"] == 4);

  write_lora(back, dir / "b.safetensors", dir / "b.json");
  CHECK(read_file(dir / "a.safetensors") == read_file(dir / "b.safetensors"));
  CHECK(read_file(dir / "a.json") == read_file(dir / "b.json"));
}

TEST_CASE("LoRA adapter happy path: two layers, r=16") {
  const auto ad = sample_adapter(2, 16, 32, 24, 6);
  const auto back = lora_from_parts(lora_weights(ad), lora_config_json(ad));
  CHECK(back.entries.size() == 2);
  CHECK(back.rank == 16);
}

TEST_CASE("LoRA validation errors") {
  const auto ad = sample_adapter(2, 4, 8, 6, 7);
  const auto cfg = lora_config_json(ad);

  SUBCASE("A without B") {
    auto w = lora_weights(ad);
    w.tensors.erase(ad.entries[1].layer + ".lora_B");
    try {
      lora_from_parts(w, cfg);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find(ad.entries[1].layer) != std::string::npos);
    }
  }
  SUBCASE("rank mismatch across layers") {
    auto w = lora_weights(ad);
    w.tensors.at(ad.entries[0].layer + ".lora_A") = StoredTensor::from_matrix(Tensor2D(3, 6), DType::F64);
    w.tensors.at(ad.entries[0].layer + ".lora_B") = StoredTensor::from_matrix(Tensor2D(8, 3), DType::F64);
    CHECK_THROWS_AS(lora_from_parts(w, cfg), ValidationError);
  }
  SUBCASE("missing config key") {
    CHECK_THROWS_AS(lora_from_parts(lora_weights(ad), R"({"r": 4, "target_modules": []})"), ValidationError);
  }
  SUBCASE("target_modules disagrees with weights") {
    CHECK_THROWS_AS(lora_from_parts(lora_weights(ad), R"({"r": 4, "lora_alpha": 1, "target_modules": ["x"]})"),
                    ValidationError);
  }
}

TEST_CASE("LoRA reader accepts PEFT-style .weight suffixes") {
  const auto ad = sample_adapter(1, 2, 5, 4, 8);
  Checkpoint w;
  w.tensors.emplace(ad.entries[0].layer + ".lora_A.weight", StoredTensor::from_matrix(ad.entries[0].a, DType::F64));
  w.tensors.emplace(ad.entries[0].layer + ".lora_B.weight", StoredTensor::from_matrix(ad.entries[0].b, DType::F64));
  const auto back = lora_from_parts(w, lora_config_json(ad));
  CHECK(back.entries[0].a == ad.entries[0].a);
}

TEST_CASE("effective delta is scaling_alpha * B * A") {
  LoraAdapter ad;
  ad.rank = 1;
  ad.scaling_alpha = 2.0;
  ad.entries.push_back({"l", Tensor2D{{1, 2}}, Tensor2D{{3}, {4}}});
  CHECK(ad.delta(ad.entries[0]) == Tensor2D{{6, 12}, {8, 16}});
}

}  // TEST_SUITE
