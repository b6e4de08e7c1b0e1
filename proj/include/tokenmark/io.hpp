// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>

#include <json.hpp>

#include "tokenmark/model.hpp"
#include "tokenmark/watermark.hpp"

namespace tokenmark {

inline constexpr std::uint32_t kFormatVersion = 1;

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Weight container: "TKMK", version, ModelConfig as little-endian u32s, tensor
// count, then per tensor: name length, UTF-8 name, rank, dims, fp32 payload.
void write_weights(std::ostream& out, const TransformerWeights& w);
TransformerWeights read_weights(std::istream& in);
void save_weights(const std::filesystem::path& path, const TransformerWeights& w);
TransformerWeights load_weights(const std::filesystem::path& path);

// Task head section: "TKHD", version, kind, reduction, layer count, then each
// layer's weight and bias in the tensor encoding above.
void write_head(std::ostream& out, const TaskHead& head);
TaskHead read_head(std::istream& in);
void save_head(const std::filesystem::path& path, const TaskHead& head);
TaskHead load_head(const std::filesystem::path& path);

using AnyBundle = std::variant<BundleB, BundleS, TriggerBundle>;

Scheme bundle_scheme(const AnyBundle& b);
nlohmann::json bundle_envelope(const AnyBundle& b);

// Bundle file: "TKBN", version, u32 envelope length, JSON envelope, then the
// decoder in the head encoding.
void write_bundle(std::ostream& out, const AnyBundle& b);
AnyBundle read_bundle(std::istream& in);
void save_bundle(const std::filesystem::path& path, const AnyBundle& b);
AnyBundle load_bundle(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);
std::string encode_floats(std::span<const float> values);
std::vector<float> decode_floats(const std::string& text);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

// Throws NumericFault naming the JSON pointer of the first NaN or infinity.
void require_finite_json(const nlohmann::json& j);

// Writes `text` atomically enough for a single process: temp file, then rename.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace tokenmark
