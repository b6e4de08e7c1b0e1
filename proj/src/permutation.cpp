// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/permutation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

std::string family_name(PermutationFamily family) {
  switch (family) {
    case PermutationFamily::kWithinHeadsOnly:
      return "within_heads_only";
    case PermutationFamily::kHeadsAndWithin:
      return "heads_and_within";
    case PermutationFamily::kPaperCounted:
      return "paper_counted";
  }
  return "unknown";
}

PermutationFamily parse_family(const std::string& name) {
  if (name == "within_heads_only") return PermutationFamily::kWithinHeadsOnly;
  if (name == "heads_and_within") return PermutationFamily::kHeadsAndWithin;
  if (name == "paper_counted") return PermutationFamily::kPaperCounted;
  throw ConfigError(fmt::format("unknown permutation family '{}'", name));
}

namespace {

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void check_heads(std::size_t d, std::size_t n_heads) {
  if (n_heads == 0 || d == 0 || d % n_heads != 0) {
    throw DimensionError(fmt::format("d = {} is not divisible into {} heads", d, n_heads));
  }
}

}  // namespace

bool is_bijection(std::span<const std::size_t> index) {
  std::vector<bool> seen(index.size(), false);
  for (std::size_t v : index) {
    if (v >= index.size() || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

bool is_head_valid(std::span<const std::size_t> index, std::size_t n_heads) {
  if (!is_bijection(index) || n_heads == 0 || index.size() % n_heads != 0) return false;
  const std::size_t m = index.size() / n_heads;
  for (std::size_t b = 0; b < n_heads; ++b) {
    const std::size_t src = index[b * m] / m;
    for (std::size_t w = 1; w < m; ++w)
      if (index[b * m + w] / m != src) return false;
  }
  return true;
}

std::vector<std::size_t> invert_index(std::span<const std::size_t> index) {
  if (!is_bijection(index)) throw InputError("permutation index is not a bijection");
  std::vector<std::size_t> inv(index.size());
  for (std::size_t j = 0; j < index.size(); ++j) inv[index[j]] = j;
  return inv;
}

PermutationSpec PermutationSpec::identity(std::size_t d, std::size_t n_heads) {
  check_heads(d, n_heads);
  PermutationSpec s;
  s.d = d;
  s.n_heads = n_heads;
  s.head_order = iota(n_heads);
  s.within_head.assign(n_heads, iota(d / n_heads));
  return s;
}

PermutationSpec PermutationSpec::from_index(std::span<const std::size_t> index, std::size_t n_heads) {
  check_heads(index.size(), n_heads);
  if (!is_head_valid(index, n_heads)) {
    throw InputError(fmt::format("column order [{}] moves columns across head boundaries", fmt::join(index, ",")));
  }
  PermutationSpec s;
  s.d = index.size();
  s.n_heads = n_heads;
  const std::size_t m = s.head_dim();
  s.head_order.resize(n_heads);
  s.within_head.assign(n_heads, std::vector<std::size_t>(m));
  for (std::size_t b = 0; b < n_heads; ++b) {
    s.head_order[b] = index[b * m] / m;
    for (std::size_t w = 0; w < m; ++w) s.within_head[b][w] = index[b * m + w] % m;
  }
  return s;
}

void PermutationSpec::validate() const {
  check_heads(d, n_heads);
  if (head_order.size() != n_heads || !is_bijection(head_order)) {
    throw InputError(fmt::format("head_order [{}] is not a permutation of {} heads", fmt::join(head_order, ","), n_heads));
  }
  if (within_head.size() != n_heads) {
    throw InputError(fmt::format("within_head has {} entries, expected {}", within_head.size(), n_heads));
  }
  for (std::size_t b = 0; b < n_heads; ++b) {
    if (within_head[b].size() != head_dim() || !is_bijection(within_head[b])) {
      throw InputError(fmt::format("within_head[{}] is not a permutation of {} columns", b, head_dim()));
    }
  }
}

std::vector<std::size_t> PermutationSpec::index() const {
  const std::size_t m = head_dim();
  std::vector<std::size_t> out(d);
  for (std::size_t b = 0; b < n_heads; ++b)
    for (std::size_t w = 0; w < m; ++w) out[b * m + w] = head_order[b] * m + within_head[b][w];
  return out;
}

PermutationSpec PermutationSpec::inverse() const {
  const auto idx = index();
  return from_index(invert_index(idx), n_heads);
}

bool PermutationSpec::is_identity() const {
  const auto idx = index();
  for (std::size_t j = 0; j < idx.size(); ++j)
    if (idx[j] != j) return false;
  return true;
}

bool PermutationSpec::in_family(PermutationFamily family) const {
  switch (family) {
    case PermutationFamily::kHeadsAndWithin:
      return true;
    case PermutationFamily::kWithinHeadsOnly:
      return head_order == iota(n_heads);
    case PermutationFamily::kPaperCounted:
      return std::all_of(within_head.begin(), within_head.end(),
                         [&](const auto& w) { return w == within_head.front(); });
  }
  return false;
}

Tensor PermutationSpec::materialize() const {
  Tensor p({d, d});
  const auto idx = index();
  for (std::size_t j = 0; j < d; ++j) p.at(idx[j], j) = 1.0f;
  return p;
}

PermutationSpec compose(const PermutationSpec& a, const PermutationSpec& b) {
  if (a.d != b.d || a.n_heads != b.n_heads) {
    throw DimensionError(fmt::format("cannot compose specs of d={}/h={} and d={}/h={}", a.d, a.n_heads, b.d, b.n_heads));
  }
  const auto ia = a.index();
  const auto ib = b.index();
  std::vector<std::size_t> out(a.d);
  for (std::size_t j = 0; j < a.d; ++j) out[j] = ia[ib[j]];
  return PermutationSpec::from_index(out, a.n_heads);
}

PermutationSpec sample(Rng& rng, std::size_t d, std::size_t n_heads, PermutationFamily family) {
  PermutationSpec s = PermutationSpec::identity(d, n_heads);
  if (family != PermutationFamily::kWithinHeadsOnly) rng.shuffle(s.head_order);
  if (family == PermutationFamily::kPaperCounted) {
    rng.shuffle(s.within_head[0]);
    for (std::size_t b = 1; b < n_heads; ++b) s.within_head[b] = s.within_head[0];
  } else {
    for (auto& w : s.within_head) rng.shuffle(w);
  }
  return s;
}

PermutationSpec sample_secret(Rng& rng, std::size_t d, std::size_t n_heads, PermutationFamily family) {
  return sample_excluding(rng, PermutationSpec::identity(d, n_heads), family);
}

PermutationSpec sample_excluding(Rng& rng, const PermutationSpec& exclude, PermutationFamily family) {
  const BigInt total = count_permutations(exclude.d, exclude.n_heads, family);
  const BigInt excluded = exclude.is_identity() || !exclude.in_family(family) ? 1 : 2;
  if (total <= excluded) {
    throw InputError(fmt::format("family {} at d={}, h={} has no member left to draw", family_name(family), exclude.d,
                                 exclude.n_heads));
  }
  for (;;) {
    PermutationSpec s = sample(rng, exclude.d, exclude.n_heads, family);
    if (!s.is_identity() && !(s == exclude)) return s;
  }
}

Tensor apply_features(const Tensor& z, const PermutationSpec& spec, Direction direction) {
  if (z.rank() != 2 || z.cols() != spec.d) {
    throw DimensionError(fmt::format("features {} do not have {} columns", shape_string(z.shape()), spec.d));
  }
  const auto idx = spec.index();
  Tensor out(z.shape());
  const std::size_t d = spec.d;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const float* src = z.data().data() + r * d;
    float* dst = out.data().data() + r * d;
    if (direction == Direction::kForward) {
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[idx[j]];
    } else {
      for (std::size_t j = 0; j < d; ++j) dst[idx[j]] = src[j];
    }
  }
  return out;
}

Var apply_features(Var z, const PermutationSpec& spec, Direction direction) {
  if (z.value().rank() != 2 || z.value().cols() != spec.d) {
    throw DimensionError(fmt::format("features {} do not have {} columns", shape_string(z.shape()), spec.d));
  }
  const auto idx = spec.index();
  if (direction == Direction::kForward) return permute_cols(z, idx);
  return permute_cols(z, invert_index(idx));
}

Tensor transport_tensor(const Tensor& t, TransportRule rule, std::span<const std::size_t> index) {
  if (rule == TransportRule::kFixed) return t.detached();
  const auto inv = invert_index(index);
  const std::size_t d = index.size();
  Tensor out(t.shape());
  switch (rule) {
    case TransportRule::kConjugate:
      require_shape(t, {d, d}, "conjugate-transported weight");
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = t.at(inv[i], inv[j]);
      break;
    case TransportRule::kColumns:
      if (t.cols() != d) throw DimensionError(fmt::format("tensor {} does not have {} columns", shape_string(t.shape()), d));
      for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t j = 0; j < d; ++j) out.at(r, j) = t.at(r, inv[j]);
      break;
    case TransportRule::kRows:
      if (t.rank() != 2 || t.rows() != d) {
        throw DimensionError(fmt::format("tensor {} does not have {} rows", shape_string(t.shape()), d));
      }
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t c = 0; c < t.cols(); ++c) out.at(i, c) = t.at(inv[i], c);
      break;
    case TransportRule::kFixed:
      break;
  }
  return out;
}

TransformerWeights transport_weights(const TransformerWeights& w, std::span<const std::size_t> index) {
  if (index.size() != w.config.d) {
    throw DimensionError(fmt::format("permutation of {} columns applied to a model with d = {}", index.size(), w.config.d));
  }
  w.validate();
  TransformerWeights out = w;
  auto src = w.entries();
  auto dst = out.entries();
  for (std::size_t i = 0; i < src.size(); ++i) {
    Tensor moved = transport_tensor(*src[i].tensor, src[i].rule, index);
    const bool grad = dst[i].tensor->requires_grad();
    *dst[i].tensor = std::move(moved);
    dst[i].tensor->set_requires_grad(grad);
  }
  return out;
}

TransformerWeights transport_weights(const TransformerWeights& w, const PermutationSpec& spec) {
  spec.validate();
  if (spec.d != w.config.d || spec.n_heads != w.config.n_heads) {
    throw DimensionError(fmt::format("spec d={}/h={} does not match model d={}/h={}", spec.d, spec.n_heads, w.config.d,
                                     w.config.n_heads));
  }
  return transport_weights(w, spec.index());
}

namespace {

BigInt factorial(std::size_t n) {
  BigInt f = 1;
  for (std::size_t i = 2; i <= n; ++i) f *= i;
  return f;
}

bool index_in_family(std::span<const std::size_t> index, std::size_t n_heads, PermutationFamily family) {
  if (!is_head_valid(index, n_heads)) return false;
  return PermutationSpec::from_index(index, n_heads).in_family(family);
}

}  // namespace

BigInt count_permutations(std::size_t d, std::size_t n_heads, PermutationFamily family) {
  check_heads(d, n_heads);
  const std::size_t m = d / n_heads;
  const BigInt fm = factorial(m);
  switch (family) {
    case PermutationFamily::kWithinHeadsOnly:
      return boost::multiprecision::pow(fm, static_cast<unsigned>(n_heads));
    case PermutationFamily::kHeadsAndWithin:
      return factorial(n_heads) * boost::multiprecision::pow(fm, static_cast<unsigned>(n_heads));
    case PermutationFamily::kPaperCounted:
      return factorial(n_heads) * fm;
  }
  return 0;
}

std::vector<std::vector<std::size_t>> enumerate_family(std::size_t d, std::size_t n_heads, PermutationFamily family) {
  check_heads(d, n_heads);
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> idx = iota(d);
  do {
    if (index_in_family(idx, n_heads, family)) out.push_back(idx);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return out;
}

std::pair<double, long> scientific(const BigInt& n) {
  if (n <= 0) return {0.0, 0};
  const std::string digits = n.str();
  const long exponent = static_cast<long>(digits.size()) - 1;
  const double mantissa = std::stod(digits.substr(0, 1) + "." + digits.substr(1, std::min<std::size_t>(15, exponent)));
  return {mantissa, exponent};
}

double overlap(const PermutationSpec& a, const PermutationSpec& b) {
  if (a.d != b.d) throw DimensionError(fmt::format("overlap of specs with d={} and d={}", a.d, b.d));
  const auto ia = a.index();
  const auto ib = b.index();
  std::size_t same = 0;
  for (std::size_t j = 0; j < a.d; ++j) same += ia[j] == ib[j];
  return a.d == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(a.d);
}

void to_json(nlohmann::json& j, const PermutationSpec& spec) {
  j = nlohmann::json{{"d", spec.d}, {"n_heads", spec.n_heads}, {"head_order", spec.head_order},
                     {"within_head", spec.within_head}};
}

void from_json(const nlohmann::json& j, PermutationSpec& spec) {
  try {
    j.at("d").get_to(spec.d);
    j.at("n_heads").get_to(spec.n_heads);
    j.at("head_order").get_to(spec.head_order);
    j.at("within_head").get_to(spec.within_head);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("malformed permutation spec: {}", e.what()));
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("invalid permutation spec: {}", e.what()));
  }
}

}  // namespace tokenmark
