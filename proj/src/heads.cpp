#include "movl/heads.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "movl/random.hpp"

namespace movl {

bool LabelMap::injective() const {
  std::set<Index> seen;
  for (Index s : mapping) {
    if (s < 0 || s >= source_classes || !seen.insert(s).second) return false;
  }
  return true;
}

LabelMap fit_rlm(Index target_classes, Index source_classes, std::uint64_t seed) {
  if (target_classes < 1) throw ConfigError("rlm: need at least one target class");
  if (source_classes < target_classes) {
    throw InfeasibleError("label matching infeasible: " + std::to_string(target_classes) +
                          " target classes but only " + std::to_string(source_classes) + " source classes");
  }
  std::vector<Index> pool(static_cast<std::size_t>(source_classes));
  std::iota(pool.begin(), pool.end(), Index{0});
  Rng rng(seed);
  rng.shuffle(pool.begin(), pool.end());
  LabelMap map;
  map.mapping.assign(pool.begin(), pool.begin() + target_classes);
  map.source_classes = source_classes;
  map.method = LabelMapMethod::kRandom;
  map.seed = seed;
  return map;
}

LabelMap flm_from_counts(const Eigen::MatrixXi& counts) {
  const Index k = counts.rows();
  const Index s = counts.cols();
  if (s < k) {
    throw InfeasibleError("label matching infeasible: " + std::to_string(k) + " target classes but only " +
                          std::to_string(s) + " source classes");
  }
  std::vector<Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return counts.row(a).maxCoeff() > counts.row(b).maxCoeff(); });
  LabelMap map;
  map.mapping.assign(static_cast<std::size_t>(k), -1);
  map.source_classes = s;
  map.method = LabelMapMethod::kFrequency;
  std::vector<bool> taken(static_cast<std::size_t>(s), false);
  for (Index cls : order) {
    Index best = -1;
    for (Index j = 0; j < s; ++j) {
      if (taken[static_cast<std::size_t>(j)]) continue;
      if (best < 0 || counts(cls, j) > counts(cls, best)) best = j;
    }
    taken[static_cast<std::size_t>(best)] = true;
    map.mapping[static_cast<std::size_t>(cls)] = best;
  }
  return map;
}

long matched_count(const Eigen::MatrixXi& counts, const LabelMap& map) {
  long total = 0;
  for (Index k = 0; k < map.target_classes(); ++k) total += counts(k, map.mapping[static_cast<std::size_t>(k)]);
  return total;
}

EmbeddingHead<float> load_embedding_head(const Checkpoint& ckpt) {
  const auto& e = require_tensor(ckpt.tensors, "class_embeddings");
  if (e.shape.size() != 2) throw CheckpointError("class_embeddings must be rank 2");
  Matrix<float> emb = from_named<float>(e, e.shape[0], e.shape[1]);
  Matrix<float> proj;
  if (const auto it = ckpt.tensors.find("projection"); it != ckpt.tensors.end()) {
    if (it->second.shape.size() != 2) throw CheckpointError("projection must be rank 2");
    proj = from_named<float>(it->second, it->second.shape[0], it->second.shape[1]);
  }
  auto head = EmbeddingHead<float>::make(std::move(emb), std::move(proj),
                                         ckpt.attributes.value("temperature", 100.0));
  if (ckpt.attributes.contains("class_names")) {
    head.class_names = ckpt.attributes.at("class_names").get<std::vector<std::string>>();
  }
  return head;
}

}  // namespace movl
