// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d", c.d},
                     {"n_heads", c.n_heads},
                     {"d_mlp", c.d_mlp},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"activation", c.activation == Activation::kGelu ? "gelu" : "relu"},
                     {"attn_bias", c.attn_bias}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("n_layers")) j.at("n_layers").get_to(c.n_layers);
  if (j.contains("d")) j.at("d").get_to(c.d);
  if (j.contains("n_heads")) j.at("n_heads").get_to(c.n_heads);
  if (j.contains("d_mlp")) j.at("d_mlp").get_to(c.d_mlp);
  if (j.contains("vocab_size")) j.at("vocab_size").get_to(c.vocab_size);
  if (j.contains("max_seq_len")) j.at("max_seq_len").get_to(c.max_seq_len);
  if (j.contains("activation")) {
    const auto a = j.at("activation").get<std::string>();
    if (a == "gelu") {
      c.activation = Activation::kGelu;
    } else if (a == "relu") {
      c.activation = Activation::kRelu;
    } else {
      throw ConfigError(fmt::format("unknown activation '{}' (expected gelu or relu)", a));
    }
  }
  if (j.contains("attn_bias")) j.at("attn_bias").get_to(c.attn_bias);
}

namespace {

constexpr char kWeightsMagic[4] = {'T', 'K', 'M', 'K'};
constexpr char kHeadMagic[4] = {'T', 'K', 'H', 'D'};
constexpr char kBundleMagic[4] = {'T', 'K', 'B', 'N'};
constexpr std::uint32_t kMaxNameLength = 4096;
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw InputError(fmt::format("truncated file reading {}", what));
  return v;
}

void put_magic(std::ostream& out, const char (&magic)[4]) {
  out.write(magic, 4);
  put_u32(out, kFormatVersion);
}

void expect_magic(std::istream& in, const char (&magic)[4]) {
  char got[4] = {};
  if (!in.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw InputError(fmt::format("bad magic: expected {}", std::string(magic, 4)));
  }
  const std::uint32_t version = get_u32(in, "version");
  if (version != kFormatVersion) throw InputError(fmt::format("unsupported format version {}", version));
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t dim : t.shape()) put_u32(out, static_cast<std::uint32_t>(dim));
  out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

std::pair<std::string, Tensor> get_tensor(std::istream& in) {
  const std::uint32_t len = get_u32(in, "tensor name length");
  if (len > kMaxNameLength) throw InputError(fmt::format("tensor name length {} is implausible", len));
  std::string name(len, '\0');
  if (!in.read(name.data(), len)) throw InputError("truncated file reading tensor name");
  const std::uint32_t rank = get_u32(in, "tensor rank");
  if (rank > kMaxRank) throw InputError(fmt::format("tensor '{}' has implausible rank {}", name, rank));
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& dim : shape) {
    dim = get_u32(in, "tensor dims");
    count *= dim;
    if (count > (std::uint64_t{1} << 28)) throw InputError(fmt::format("tensor '{}' is implausibly large", name));
  }
  std::vector<float> data(shape_size(shape));
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
    throw InputError(fmt::format("truncated payload for tensor '{}'", name));
  }
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError(fmt::format("cannot write {}", path.string()));
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(fmt::format("cannot read {}", path.string()));
  return in;
}

void finish(std::ostream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw InputError(fmt::format("write to {} failed", path.string()));
}

void check_finite(const nlohmann::json& j, const std::string& where) {
  if (j.is_number_float()) {
    if (!std::isfinite(j.get<double>())) throw NumericFault(fmt::format("non-finite value at {}", where.empty() ? "/" : where));
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) check_finite(j[i], where + "/" + std::to_string(i));
  } else if (j.is_object()) {
    for (const auto& [k, v] : j.items()) check_finite(v, where + "/" + k);
  }
}

template <class T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw InputError(fmt::format("bundle envelope is missing '{}'", key));
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("bundle envelope field '{}': {}", key, e.what()));
  }
}

}  // namespace

void write_weights(std::ostream& out, const TransformerWeights& w) {
  put_magic(out, kWeightsMagic);
  const ModelConfig& c = w.config;
  for (std::uint32_t v : {c.n_layers, c.d, c.n_heads, c.d_mlp, c.vocab_size, c.max_seq_len,
                          static_cast<std::uint32_t>(c.activation), static_cast<std::uint32_t>(c.attn_bias)}) {
    put_u32(out, v);
  }
  const auto entries = w.entries();
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) put_tensor(out, e.name, *e.tensor);
}

TransformerWeights read_weights(std::istream& in) {
  expect_magic(in, kWeightsMagic);
  ModelConfig c;
  c.n_layers = get_u32(in, "config");
  c.d = get_u32(in, "config");
  c.n_heads = get_u32(in, "config");
  c.d_mlp = get_u32(in, "config");
  c.vocab_size = get_u32(in, "config");
  c.max_seq_len = get_u32(in, "config");
  const std::uint32_t act = get_u32(in, "config");
  if (act > 1) throw InputError(fmt::format("unknown activation code {}", act));
  c.activation = static_cast<Activation>(act);
  c.attn_bias = get_u32(in, "config") != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw InputError(fmt::format("weight file holds an invalid config: {}", e.what()));
  }
  Rng unused(0);
  TransformerWeights w = TransformerWeights::init(c, unused);
  auto entries = w.entries();
  const std::uint32_t count = get_u32(in, "tensor count");
  if (count != entries.size()) {
    throw InputError(fmt::format("weight file has {} tensors, config needs {}", count, entries.size()));
  }
  for (auto& e : entries) {
    auto [name, t] = get_tensor(in);
    if (name != e.name) throw InputError(fmt::format("expected tensor '{}', found '{}'", e.name, name));
    if (t.shape() != e.tensor->shape()) {
      throw InputError(fmt::format("tensor '{}' has shape {}, expected {}", name, shape_string(t.shape()),
                                   shape_string(e.tensor->shape())));
    }
    *e.tensor = std::move(t);
  }
  return w;
}

void save_weights(const std::filesystem::path& path, const TransformerWeights& w) {
  auto out = open_out(path);
  write_weights(out, w);
  finish(out, path);
}

TransformerWeights load_weights(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_weights(in);
}

void write_head(std::ostream& out, const TaskHead& head) {
  put_magic(out, kHeadMagic);
  put_u32(out, static_cast<std::uint32_t>(head.kind));
  put_u32(out, static_cast<std::uint32_t>(head.reduction));
  put_u32(out, static_cast<std::uint32_t>(head.layers.size()));
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    put_tensor(out, fmt::format("layer{}.weight", i), head.layers[i].weight);
    put_tensor(out, fmt::format("layer{}.bias", i), head.layers[i].bias);
  }
}

TaskHead read_head(std::istream& in) {
  expect_magic(in, kHeadMagic);
  TaskHead h;
  const std::uint32_t kind = get_u32(in, "head kind");
  const std::uint32_t red = get_u32(in, "head reduction");
  if (kind > 2 || red > 1) throw InputError("unknown head kind or reduction");
  h.kind = static_cast<HeadKind>(kind);
  h.reduction = static_cast<Reduction>(red);
  const std::uint32_t n = get_u32(in, "head layer count");
  if (n > 64) throw InputError(fmt::format("head layer count {} is implausible", n));
  for (std::uint32_t i = 0; i < n; ++i) {
    LinearLayer layer;
    layer.weight = get_tensor(in).second;
    layer.bias = get_tensor(in).second;
    if (layer.weight.rank() != 2 || layer.bias.rank() != 1 || layer.bias.size() != layer.weight.rows()) {
      throw InputError(fmt::format("head layer {} has inconsistent shapes", i));
    }
    if (i > 0 && layer.weight.cols() != h.layers.back().weight.rows()) {
      throw InputError(fmt::format("head layer {} does not chain with layer {}", i, i - 1));
    }
    h.layers.push_back(std::move(layer));
  }
  return h;
}

void save_head(const std::filesystem::path& path, const TaskHead& head) {
  auto out = open_out(path);
  write_head(out, head);
  finish(out, path);
}

TaskHead load_head(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_head(in);
}

Scheme bundle_scheme(const AnyBundle& b) {
  switch (b.index()) {
    case 0:
      return Scheme::kB;
    case 1:
      return Scheme::kS;
    default:
      return Scheme::kTriggerBaseline;
  }
}

nlohmann::json bundle_envelope(const AnyBundle& any) {
  nlohmann::json j;
  j["scheme"] = scheme_name(bundle_scheme(any));
  if (const auto* b = std::get_if<BundleB>(&any)) {
    j["spec"] = b->spec;
    j["family"] = family_name(b->family);
    j["y_t"] = b->target;
    j["seed_of_G"] = b->decoder_seed;
    j["seed_of_spec"] = b->spec_seed;
    j["epsilon_wm"] = b->epsilon_wm;
    j["embed_config"] = b->embed;
  } else if (const auto* s = std::get_if<BundleS>(&any)) {
    j["spec"] = s->spec;
    j["family"] = family_name(s->family);
    j["sk"] = encode_floats(s->sk.data());
    j["epsilon_wm"] = s->epsilon_wm;
    j["seeds"] = {{"spec", s->spec_seed}, {"sk", s->sk_seed}, {"decoder", s->decoder_seed}, {"shadow", s->shadow_seed}};
    j["embed_config"] = s->embed;
  } else {
    const auto& t = std::get<TriggerBundle>(any);
    j["trigger"] = t.config;
    j["seed_of_G"] = t.decoder_seed;
  }
  return j;
}

void write_bundle(std::ostream& out, const AnyBundle& any) {
  const std::string envelope = bundle_envelope(any).dump();
  put_magic(out, kBundleMagic);
  put_u32(out, static_cast<std::uint32_t>(envelope.size()));
  out.write(envelope.data(), static_cast<std::streamsize>(envelope.size()));
  std::visit([&](const auto& b) { write_head(out, b.decoder); }, any);
}

AnyBundle read_bundle(std::istream& in) {
  expect_magic(in, kBundleMagic);
  const std::uint32_t len = get_u32(in, "envelope length");
  if (len > (1u << 24)) throw InputError(fmt::format("bundle envelope length {} is implausible", len));
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw InputError("truncated bundle envelope");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(fmt::format("bundle envelope is not valid JSON: {}", e.what()));
  }
  TaskHead decoder = read_head(in);
  Scheme scheme;
  try {
    scheme = parse_scheme(field<std::string>(j, "scheme"));
  } catch (const ConfigError& e) {
    throw InputError(e.what());
  }
  auto spec_of = [&]() {
    try {
      return field<nlohmann::json>(j, "spec").get<PermutationSpec>();
    } catch (const ConfigError& e) {
      throw InputError(fmt::format("bundle spec: {}", e.what()));
    }
  };
  auto family_of = [&]() {
    try {
      return parse_family(field<std::string>(j, "family"));
    } catch (const ConfigError& e) {
      throw InputError(e.what());
    }
  };
  if (scheme == Scheme::kB) {
    BundleB b;
    b.spec = spec_of();
    b.family = family_of();
    b.target = field<std::size_t>(j, "y_t");
    b.decoder_seed = field<std::uint64_t>(j, "seed_of_G");
    b.spec_seed = field<std::uint64_t>(j, "seed_of_spec");
    b.epsilon_wm = field<float>(j, "epsilon_wm");
    b.embed = field<EmbedConfigB>(j, "embed_config");
    if (decoder.in_dim() != b.spec.d || b.target >= decoder.out_dim()) {
      throw InputError("bundle decoder does not match its spec or target");
    }
    b.decoder = std::move(decoder);
    return b;
  }
  if (scheme == Scheme::kS) {
    BundleS s;
    s.spec = spec_of();
    s.family = family_of();
    const auto sk = decode_floats(field<std::string>(j, "sk"));
    s.sk = Tensor({sk.size()}, sk);
    s.epsilon_wm = field<float>(j, "epsilon_wm");
    const auto seeds = field<nlohmann::json>(j, "seeds");
    s.spec_seed = field<std::uint64_t>(seeds, "spec");
    s.sk_seed = field<std::uint64_t>(seeds, "sk");
    s.decoder_seed = field<std::uint64_t>(seeds, "decoder");
    s.shadow_seed = field<std::uint64_t>(seeds, "shadow");
    s.embed = field<EmbedConfigS>(j, "embed_config");
    if (decoder.in_dim() != s.spec.d || decoder.out_dim() != s.sk.size()) {
      throw InputError("bundle decoder does not match its spec or sk");
    }
    s.decoder = std::move(decoder);
    return s;
  }
  TriggerBundle t;
  t.config = field<TriggerConfig>(j, "trigger");
  t.decoder_seed = field<std::uint64_t>(j, "seed_of_G");
  t.decoder = std::move(decoder);
  return t;
}

void save_bundle(const std::filesystem::path& path, const AnyBundle& b) {
  auto out = open_out(path);
  write_bundle(out, b);
  finish(out, path);
}

AnyBundle load_bundle(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_bundle(in);
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw InputError("base64 text length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw InputError("invalid base64 text");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string encode_floats(std::span<const float> values) {
  return base64_encode({reinterpret_cast<const std::uint8_t*>(values.data()), values.size() * sizeof(float)});
}

std::vector<float> decode_floats(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % sizeof(float) != 0) throw InputError("base64 payload is not a whole number of fp32 values");
  std::vector<float> out(bytes.size() / sizeof(float));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericFault("SHA-256 computation failed");
  }
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void require_finite_json(const nlohmann::json& j) { check_finite(j, ""); }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    auto out = open_out(tmp);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    finish(out, tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace tokenmark
