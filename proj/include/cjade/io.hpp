#pragma once

// Weight-file serialization. Layout, all integers little-endian:
//
//   "CJW1" | format version u16 | meta length u32 + UTF-8 JSON | layer count
//   u32 | per layer { kind u8 | arg count u8 | args i32[] | param count u8 |
//   tensors | buffer count u8 | tensors } | CRC32 (IEEE) of everything above,
//   u32
//
// where a tensor is rank u8 | dims i32[] | raw f32[] payload. Every
// corruption mode maps to its own exception type.

#include <string>
#include <vector>

#include "cjade/network.hpp"

namespace cjade::io {

struct WeightsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagic : WeightsError {
    using WeightsError::WeightsError;
};
struct BadVersion : WeightsError {
    using WeightsError::WeightsError;
};
struct Truncated : WeightsError {
    using WeightsError::WeightsError;
};
struct ChecksumMismatch : WeightsError {
    using WeightsError::WeightsError;
};
struct Malformed : WeightsError {
    using WeightsError::WeightsError;
};

constexpr std::uint16_t kWeightsVersion = 1;

// meta_json must be the canonical serialized form; it is stored verbatim so
// the round trip is bitwise.
std::vector<std::uint8_t> serialize_weights(nn::Network& net, const std::string& meta_json);

struct LoadedWeights {
    std::vector<nn::LayerSpec> specs;
    std::string meta_json;
    // tensors per layer, params then buffers, in collect order
    std::vector<std::vector<Tensor>> params;
    std::vector<std::vector<Tensor>> buffers;
};

LoadedWeights parse_weights(const std::vector<std::uint8_t>& bytes);

// Copies parsed tensors into a freshly built network; shapes must agree.
void apply_weights(nn::Network& net, const LoadedWeights& w);

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file(const std::string& path);

} // namespace cjade::io
