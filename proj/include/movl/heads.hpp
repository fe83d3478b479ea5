#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "movl/checkpoint.hpp"
#include "movl/error.hpp"
#include "movl/layers.hpp"

namespace movl {

template <typename Scalar>
using LinearProbe = Linear<Scalar>;

/// Zero-initialized probe: uniform predictions at step 0.
template <typename Scalar>
LinearProbe<Scalar> make_probe(Index num_classes, Index feature_dim) {
  return Linear<Scalar>::zeros(num_classes, feature_dim);
}

template <typename Scalar>
Matrix<Scalar> probe_logits(const LinearProbe<Scalar>& head, const Matrix<Scalar>& features) {
  return head.forward(features);
}

enum class LabelMapMethod { kRandom, kFrequency };

/// Injective target-class -> source-class assignment.
struct LabelMap {
  std::vector<Index> mapping;  // mapping[k] = source index
  Index source_classes = 0;
  LabelMapMethod method = LabelMapMethod::kRandom;
  std::uint64_t seed = 0;

  Index target_classes() const { return static_cast<Index>(mapping.size()); }
  bool injective() const;
};

/// Uniformly random injective map, seeded.
LabelMap fit_rlm(Index target_classes, Index source_classes, std::uint64_t seed);

/// Greedy frequency assignment from a K x S count matrix: target classes
/// in descending order of their maximum count each take their
/// highest-count unassigned source class; ties go to the lower index.
LabelMap flm_from_counts(const Eigen::MatrixXi& counts);

/// Sum over k of counts(k, map[k]).
long matched_count(const Eigen::MatrixXi& counts, const LabelMap& map);

template <typename Scalar>
Matrix<Scalar> mapped_logits(const Matrix<Scalar>& source_logits, const LabelMap& map) {
  Matrix<Scalar> out(source_logits.rows(), map.target_classes());
  for (Index k = 0; k < map.target_classes(); ++k) {
    const Index s = map.mapping[static_cast<std::size_t>(k)];
    if (s < 0 || s >= source_logits.cols()) throw ContractError("mapped_logits: map points past source logits");
    out.col(k) = source_logits.col(s);
  }
  return out;
}

/// Frozen source head followed by a label map.
template <typename Scalar>
struct MappedHead {
  Linear<Scalar> source;
  LabelMap map;
};

/// Fixed class-embedding similarity head: logits = tau * cos(P f, e_k).
template <typename Scalar>
struct EmbeddingHead {
  Matrix<Scalar> embeddings;  // [K, D'], unit rows
  Matrix<Scalar> projection;  // [D', D]; empty when D == D'
  double temperature = 100.0;
  std::vector<std::string> class_names;

  /// Normalizes embedding rows; projection may be empty for D == D'.
  static EmbeddingHead make(Matrix<Scalar> embeddings, Matrix<Scalar> projection, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("embedding head: temperature must be > 0");
    for (Index k = 0; k < embeddings.rows(); ++k) {
      const Scalar n = embeddings.row(k).norm();
      if (!(n > Scalar(0))) throw ConfigError("embedding head: zero-norm class embedding");
      embeddings.row(k) /= n;
    }
    if (projection.size() != 0 && projection.rows() != embeddings.cols()) {
      throw ConfigError("embedding head: projection rows must equal embedding dim");
    }
    return {std::move(embeddings), std::move(projection), temperature, {}};
  }

  Matrix<Scalar> project(const Matrix<Scalar>& features) const {
    if (projection.size() == 0) {
      if (features.cols() != embeddings.cols()) throw ContractError("embedding head: feature dim mismatch");
      return features;
    }
    if (features.cols() != projection.cols()) throw ContractError("embedding head: feature dim mismatch");
    return features * projection.transpose();
  }
};

template <typename Scalar>
using Head = std::variant<LinearProbe<Scalar>, MappedHead<Scalar>, EmbeddingHead<Scalar>>;

template <typename Scalar>
Matrix<Scalar> head_logits(const LinearProbe<Scalar>& h, const Matrix<Scalar>& f) {
  return h.forward(f);
}

template <typename Scalar>
Matrix<Scalar> head_logits(const MappedHead<Scalar>& h, const Matrix<Scalar>& f) {
  return mapped_logits(h.source.forward(f), h.map);
}

template <typename Scalar>
Matrix<Scalar> head_logits(const EmbeddingHead<Scalar>& h, const Matrix<Scalar>& f) {
  Matrix<Scalar> z = h.project(f);
  for (Index b = 0; b < z.rows(); ++b) {
    const Scalar n = z.row(b).norm();
    if (n > Scalar(0)) z.row(b) /= n;
  }
  return static_cast<Scalar>(h.temperature) * z * h.embeddings.transpose();
}

template <typename Scalar>
Matrix<Scalar> head_logits(const Head<Scalar>& h, const Matrix<Scalar>& f) {
  return std::visit([&](const auto& head) { return head_logits(head, f); }, h);
}

/// d(loss)/d(features) given d(loss)/d(logits).
template <typename Scalar>
Matrix<Scalar> head_input_grad(const LinearProbe<Scalar>& h, const Matrix<Scalar>&, const Matrix<Scalar>& g) {
  return g * h.weight;
}

template <typename Scalar>
Matrix<Scalar> head_input_grad(const MappedHead<Scalar>& h, const Matrix<Scalar>&, const Matrix<Scalar>& g) {
  Matrix<Scalar> gs = Matrix<Scalar>::Zero(g.rows(), h.source.out_features());
  for (Index k = 0; k < h.map.target_classes(); ++k) gs.col(h.map.mapping[static_cast<std::size_t>(k)]) += g.col(k);
  return gs * h.source.weight;
}

template <typename Scalar>
Matrix<Scalar> head_input_grad(const EmbeddingHead<Scalar>& h, const Matrix<Scalar>& f, const Matrix<Scalar>& g) {
  const Matrix<Scalar> z = h.project(f);
  Matrix<Scalar> gz(z.rows(), z.cols());
  const Matrix<Scalar> gu = static_cast<Scalar>(h.temperature) * g * h.embeddings;
  for (Index b = 0; b < z.rows(); ++b) {
    const Scalar n = z.row(b).norm();
    if (!(n > Scalar(0))) {
      gz.row(b).setZero();
      continue;
    }
    const auto u = (z.row(b) / n).eval();
    gz.row(b) = (gu.row(b) - gu.row(b).dot(u) * u) / n;
  }
  return h.projection.size() == 0 ? gz : Matrix<Scalar>(gz * h.projection);
}

template <typename Scalar>
Matrix<Scalar> head_input_grad(const Head<Scalar>& h, const Matrix<Scalar>& f, const Matrix<Scalar>& g) {
  return std::visit([&](const auto& head) { return head_input_grad(head, f, g); }, h);
}

/// Reads an embedding head from a checkpoint with tensor "class_embeddings"
/// [K, D'] and optional "projection" [D', D]; class_names and temperature
/// come from the header attributes.
EmbeddingHead<float> load_embedding_head(const Checkpoint& ckpt);

}  // namespace movl
