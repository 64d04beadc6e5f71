#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"

namespace sesom {

// Label-to-token table plus the token remapping dictionary that aligns a
// source model's vocabulary conventions with the target task. Multi-token
// verbalizers are keyed by their first token throughout.
class VerbalizerMap {
 public:
  VerbalizerMap() = default;

  VerbalizerMap(std::vector<int> label_tokens, std::vector<std::pair<int, int>> remap)
      : label_tokens_(std::move(label_tokens)), remap_(std::move(remap)) {
    std::set<int> keys, values;
    for (const auto& [k, v] : remap_) {
      if (!keys.insert(k).second)
        throw InvalidMapError("duplicate remap key " + std::to_string(k));
      if (!values.insert(v).second)
        throw InvalidMapError("remap not injective at value " + std::to_string(v));
    }
    for (int k : keys)
      if (values.count(k))
        throw InvalidMapError("remap key " + std::to_string(k) +
                              " also appears as a value");
  }

  const std::vector<int>& label_tokens() const { return label_tokens_; }
  const std::vector<std::pair<int, int>>& remap() const { return remap_; }

 private:
  std::vector<int> label_tokens_;
  std::vector<std::pair<int, int>> remap_;
};

// Pre-softmax remapping: each pair {k -> t} receives the smaller of the two
// logits at k and the larger at t; everything else is copied verbatim.
// Disjointness of keys and values (checked at construction) makes the loop
// order irrelevant.
inline Vec map_logits(std::span<const double> logits, const VerbalizerMap& map) {
  Vec out(logits.begin(), logits.end());
  const int v = static_cast<int>(logits.size());
  for (const auto& [k, t] : map.remap()) {
    if (k < 0 || k >= v || t < 0 || t >= v)
      throw IndexError("map_logits: remap entry " + std::to_string(k) + "->" +
                       std::to_string(t) + " outside " + std::to_string(v) +
                       " logits");
    const double lo = std::min(logits[k], logits[t]);
    const double hi = std::max(logits[k], logits[t]);
    out[k] = lo;
    out[t] = hi;
  }
  return out;
}

// Argmax over the label tokens only; ties go to the lowest label index.
inline int predict_label(std::span<const double> mapped_logits, const VerbalizerMap& map) {
  const auto& toks = map.label_tokens();
  if (toks.empty()) throw ConfigError("predict_label: no label tokens");
  int best = 0;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const int t = toks[i];
    if (t < 0 || t >= static_cast<int>(mapped_logits.size()))
      throw IndexError("predict_label: label token " + std::to_string(t) +
                       " outside logits");
    if (mapped_logits[t] > mapped_logits[toks[best]]) best = static_cast<int>(i);
  }
  return best;
}

// Pairs source first-tokens with target first-tokens positionally; identity
// pairs are dropped. The result predicts with the target task's tokens.
inline VerbalizerMap build_map(const std::vector<int>& source_task_verbalizers,
                               const std::vector<int>& target_task_verbalizers) {
  auto check_distinct = [](const std::vector<int>& toks, const char* who) {
    std::set<int> seen(toks.begin(), toks.end());
    if (seen.size() != toks.size())
      throw ConfigError(std::string(who) + " task verbalizer tokens collide");
  };
  check_distinct(source_task_verbalizers, "source");
  check_distinct(target_task_verbalizers, "target");
  if (source_task_verbalizers.size() != target_task_verbalizers.size())
    throw ConfigError("build_map: label counts differ");
  std::vector<std::pair<int, int>> remap;
  for (std::size_t i = 0; i < source_task_verbalizers.size(); ++i)
    if (source_task_verbalizers[i] != target_task_verbalizers[i])
      remap.emplace_back(source_task_verbalizers[i], target_task_verbalizers[i]);
  return VerbalizerMap(target_task_verbalizers, std::move(remap));
}

}  // namespace sesom
