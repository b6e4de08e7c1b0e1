// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "tokenmark/autodiff.hpp"
#include "tokenmark/model.hpp"
#include "tokenmark/rng.hpp"
#include "tokenmark/tensor.hpp"

namespace tokenmark {

enum class PermutationFamily {
  kWithinHeadsOnly,  // head blocks stay in place
  kHeadsAndWithin,   // whole-block moves plus independent reordering inside each block
  kPaperCounted,     // whole-block moves plus one within-block reordering shared by all heads
};

enum class Direction { kForward, kInverse };

std::string family_name(PermutationFamily family);
PermutationFamily parse_family(const std::string& name);

// Head-constrained permutation of the d feature columns. Destination head
// block b takes its columns from source block head_order[b], reordered by
// within_head[b]. Column j of Z·P is column index()[j] of Z.
struct PermutationSpec {
  std::size_t d = 0;
  std::size_t n_heads = 1;
  std::vector<std::size_t> head_order;
  std::vector<std::vector<std::size_t>> within_head;

  static PermutationSpec identity(std::size_t d, std::size_t n_heads);
  // Rebuilds a spec from a flat column index; throws InputError if the index
  // mixes columns of different head blocks.
  static PermutationSpec from_index(std::span<const std::size_t> index, std::size_t n_heads);

  std::size_t head_dim() const { return d / n_heads; }
  void validate() const;
  std::vector<std::size_t> index() const;
  PermutationSpec inverse() const;
  bool is_identity() const;
  bool in_family(PermutationFamily family) const;
  // Dense 0/1 matrix with P[index[j], j] = 1.
  Tensor materialize() const;

  bool operator==(const PermutationSpec&) const = default;
};

// Matrix product a·b: applying the result equals applying a, then b.
PermutationSpec compose(const PermutationSpec& a, const PermutationSpec& b);

// Uniform over the family, identity included.
PermutationSpec sample(Rng& rng, std::size_t d, std::size_t n_heads, PermutationFamily family);
// Uniform over the family minus the identity (and minus `exclude` when given).
// Throws InputError if nothing is left to draw from.
PermutationSpec sample_secret(Rng& rng, std::size_t d, std::size_t n_heads, PermutationFamily family);
PermutationSpec sample_excluding(Rng& rng, const PermutationSpec& exclude, PermutationFamily family);

// Forward: Z·P. Inverse: Z·Pᵀ.
Tensor apply_features(const Tensor& z, const PermutationSpec& spec, Direction direction);
Var apply_features(Var z, const PermutationSpec& spec, Direction direction);

// Index-level helpers; these accept any bijection, head-valid or not.
bool is_bijection(std::span<const std::size_t> index);
bool is_head_valid(std::span<const std::size_t> index, std::size_t n_heads);
std::vector<std::size_t> invert_index(std::span<const std::size_t> index);

// Maps one tensor the way its rule dictates under the column permutation
// `index`. Gradients transform by the same rules as the weights they belong to.
Tensor transport_tensor(const Tensor& t, TransportRule rule, std::span<const std::size_t> index);

// P(θ): backbone weights permuted, embedding tables copied unchanged.
TransformerWeights transport_weights(const TransformerWeights& w, const PermutationSpec& spec);
// Same map for an arbitrary column bijection; used for negative controls.
TransformerWeights transport_weights(const TransformerWeights& w, std::span<const std::size_t> index);

using BigInt = boost::multiprecision::cpp_int;

BigInt count_permutations(std::size_t d, std::size_t n_heads, PermutationFamily family);
// Exhaustive walk over all d! column orders, keeping family members.
std::vector<std::vector<std::size_t>> enumerate_family(std::size_t d, std::size_t n_heads, PermutationFamily family);
// Decimal magnitude m × 10^e with m in [1, 10).
std::pair<double, long> scientific(const BigInt& n);

// Fraction of columns both specs send to the same target.
double overlap(const PermutationSpec& a, const PermutationSpec& b);

void to_json(nlohmann::json& j, const PermutationSpec& spec);
void from_json(const nlohmann::json& j, PermutationSpec& spec);

}  // namespace tokenmark
