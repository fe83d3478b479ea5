#include "movl/backbone.hpp"

#include <cmath>
#include <iostream>

#include "movl/data.hpp"
#include "movl/error.hpp"
#include "movl/loss.hpp"
#include "movl/optim.hpp"
#include "movl/random.hpp"

namespace movl {

using json = nlohmann::json;

json backbone_config_to_json(const BackboneConfig& cfg) {
  return {{"arch", "toy_cnn"},
          {"in_channels", cfg.in_channels},
          {"widths", cfg.widths},
          {"groups", cfg.groups},
          {"input_size", cfg.input_size}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig cfg;
  cfg.in_channels = j.value("in_channels", cfg.in_channels);
  cfg.widths = j.value("widths", cfg.widths);
  cfg.groups = j.value("groups", cfg.groups);
  cfg.input_size = j.value("input_size", cfg.input_size);
  if (cfg.widths.empty()) throw ConfigError("backbone: widths must be non-empty");
  return cfg;
}

std::string backbone_hash(const Backbone& backbone) { return parameters_hash(backbone.parameters()); }

void save_backbone(const std::filesystem::path& path, const Backbone& backbone, const SourceHead* head,
                   const json& extra) {
  Checkpoint ckpt;
  ckpt.tensors = backbone.parameters();
  if (head) {
    ckpt.tensors["source_head.weight"] = to_named(head->weight, {head->out_features(), head->in_features()});
    ckpt.tensors["source_head.bias"] = to_named(head->bias, {head->out_features()});
  }
  ckpt.attributes = extra;
  ckpt.attributes["backbone"] = backbone_config_to_json(backbone.config());
  write_checkpoint(path, ckpt);
}

LoadedBackbone load_backbone(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (!ckpt.attributes.contains("backbone")) throw CheckpointError("checkpoint: no backbone config in header");
  LoadedBackbone out;
  const BackboneConfig cfg = backbone_config_from_json(ckpt.attributes.at("backbone"));
  out.backbone = Backbone::from_parameters(cfg, ckpt.tensors);
  out.attributes = ckpt.attributes;
  if (ckpt.tensors.count("source_head.weight")) {
    const auto& w = ckpt.tensors.at("source_head.weight");
    SourceHead h;
    h.weight = from_named<float>(w, w.shape.at(0), w.shape.at(1));
    h.bias = from_named<float>(require_tensor(ckpt.tensors, "source_head.bias"), w.shape.at(0), 1);
    h.trainable = false;
    out.head = std::move(h);
  }
  return out;
}

double source_accuracy(const Backbone& backbone, const SourceHead& head, const Dataset& data,
                       const std::string& split, const Normalization& norm) {
  const auto idx = data.split(split);
  if (idx.empty()) throw ContractError("source accuracy: split '" + split + "' is empty");
  long correct = 0;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    const std::span<const std::size_t> part(idx.data() + start, std::min(kChunk, idx.size() - start));
    const Matrix<float> logits =
        head.forward(backbone.forward(preprocess(data.images<float>(part), norm, backbone.input_size())));
    for (Index i = 0; i < logits.rows(); ++i) {
      Index pred = 0;
      logits.row(i).maxCoeff(&pred);
      if (pred == data.label(part[static_cast<std::size_t>(i)])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

PretrainResult pretrain_backbone(const Dataset& source, const BackboneConfig& arch, const PretrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("pretrain: batch_size must be >= 1");
  const auto s = static_cast<Index>(source.num_classes());
  PretrainResult res;
  res.backbone = Backbone::random(arch, derive_seed(cfg.seed, "pretrain/backbone"));
  Rng head_rng(derive_seed(cfg.seed, "pretrain/head"));
  res.head = SourceHead::random(s, res.backbone.feature_dim(), head_rng);

  const auto train_idx = source.split("train");
  if (cfg.epochs > 0) {
    res.backbone.set_frozen(false);
    OptimConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup_steps;
    oc.batch_size = cfg.batch_size;
    AdamW<float> opt(oc);
    Rng shuffle(derive_seed(cfg.seed, "pretrain/shuffle"));
    const std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = steps_per_epoch * cfg.epochs;
    std::size_t step = 0;
    const LossSpec ce{0.0, true, false};
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      auto order = train_idx;
      shuffle.shuffle(order.begin(), order.end());
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::span<const std::size_t> batch(order.data() + start,
                                                 std::min(cfg.batch_size, order.size() - start));
        const auto labels = source.labels(batch);
        const auto x = preprocess(source.images<float>(batch), cfg.norm, arch.input_size);
        Backbone::Cache cache;
        const Matrix<float> feats = res.backbone.forward(x, &cache, true);
        const Matrix<float> logits = res.head.forward(feats);
        const auto loss = joint_loss<float>(logits, nullptr, labels, ce);
        if (!std::isfinite(loss.loss)) {
          throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step), step);
        }
        const Matrix<float> gw = loss.grad_prompted.transpose() * feats;
        const Vector<float> gb = loss.grad_prompted.colwise().sum().transpose();
        const Matrix<float> gf = loss.grad_prompted * res.head.weight;
        Backbone::Grads bg;
        res.backbone.backward(cache, gf, &bg);
        std::vector<ParamRef<float>> params{param_ref<float>(res.head.weight, gw), param_ref<float>(res.head.bias, gb)};
        auto& blocks = res.backbone.blocks();
        for (std::size_t i = 0; i < blocks.size(); ++i) {
          params.push_back(param_ref<float>(blocks[i].weight, bg[i].weight));
          params.push_back(param_ref<float>(blocks[i].gamma, bg[i].gamma));
          params.push_back(param_ref<float>(blocks[i].beta, bg[i].beta));
        }
        opt.step(params, lr_at(step, total, oc));
        loss_sum += static_cast<double>(loss.per_sample.sum());
        ++step;
      }
      res.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    }
    res.backbone.set_frozen(true);
  }
  res.head.trainable = false;
  res.val_accuracy = source_accuracy(res.backbone, res.head, source, source.has_split("val") ? "val" : "train", cfg.norm);
  if (cfg.epochs > 0 && res.val_accuracy < cfg.min_accuracy) {
    throw TrainingFailureError("pretrain: source validation accuracy " + std::to_string(res.val_accuracy) +
                                   " is below the gate " + std::to_string(cfg.min_accuracy),
                               res.val_accuracy);
  }
  return res;
}

}  // namespace movl
