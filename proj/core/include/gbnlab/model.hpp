#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gbnlab/gbn.hpp"
#include "gbnlab/layers.hpp"
#include "gbnlab/tensor.hpp"

namespace gbnlab {

enum class NormKind { None, Batch, MultiBranch, Gated };

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& text);

struct ModelConfig {
  NormKind norm = NormKind::Batch;
  std::size_t num_branches = 4;  // used by MultiBranch and Gated
  std::size_t input_size = 28;
  std::size_t kernel = 5;
  std::size_t conv1_channels = 6;
  std::size_t conv2_channels = 16;
  std::size_t hidden = 120;
  std::size_t classes = 10;
  std::size_t gate_hidden_channels = 16;
  std::size_t fc_gate_hidden = 512;
  BnOptions bn;
  std::uint64_t init_seed = 0;

  // Ordered key/value description of everything that shapes the parameter
  // set; checkpoints compare it on load.
  std::vector<std::pair<std::string, std::string>> topology() const;
};

enum class ParamGroup { All, Main, Gate };

/// LeNet-like classifier: (conv -> norm -> relu -> maxpool) x 2 -> dense ->
/// relu -> dense. Each norm slot is a GbnBlock whose shape depends on
/// ModelConfig::norm; the first gated slot uses a conv gate, later ones FC
/// gates.
class LeNet {
 public:
  explicit LeNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::size_t num_branches() const;
  bool has_gates() const { return config_.norm == NormKind::Gated; }

  std::vector<GbnBlock>& norms() { return norms_; }
  const std::vector<GbnBlock>& norms() const { return norms_; }

  /// Train mode routes every norm slot through branch `domain` and updates
  /// its running statistics. When gate_inputs is given it receives the
  /// detached pre-normalization activation of each slot.
  Tensor forward_train(const Tensor& x, DomainLabel domain,
                       std::vector<Tensor>* gate_inputs = nullptr);
  /// Eval mode under each block's current gating mode. gate_logits, when
  /// given, receives the raw logits of every gate (empty for ungated slots).
  Tensor forward_eval(const Tensor& x, std::vector<Tensor>* gate_logits = nullptr) const;
  Tensor forward(const Tensor& x, LayerMode mode, DomainLabel domain = DomainLabel{});

  GatingMode gating_mode() const;
  void set_gating_mode(GatingMode mode);

  std::vector<NamedTensor> parameters(ParamGroup group = ParamGroup::All) const;
  std::vector<const GatedSubNetwork*> gates() const;

  // Domain-prediction loss over activations captured by forward_train,
  // indexed [domain][slot].
  Tensor gate_loss(const std::vector<std::vector<Tensor>>& captured) const;

 private:
  void check_input(const Tensor& x) const;

  ModelConfig config_;
  Conv2d conv1_, conv2_;
  Dense fc1_, fc2_;
  std::vector<GbnBlock> norms_;
};

/// Sets requires_grad = false on every model parameter for its lifetime;
/// attacks use it so only the input is differentiated.
class FrozenParameters {
 public:
  explicit FrozenParameters(const LeNet& model);
  ~FrozenParameters();
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<Tensor> params_;
};

/// Restores the model's gating mode on scope exit.
class GatingModeScope {
 public:
  GatingModeScope(LeNet& model, GatingMode mode);
  ~GatingModeScope();
  GatingModeScope(const GatingModeScope&) = delete;
  GatingModeScope& operator=(const GatingModeScope&) = delete;

 private:
  LeNet& model_;
  std::vector<GatingMode> saved_;
};

struct LabeledBatch {
  Tensor x;
  std::vector<int> labels;
  DomainLabel domain;
};

/// Sum over domain batches of the mean classification cross-entropy, each
/// batch routed through its own BN branch in train mode.
Tensor classification_loss(std::span<const LabeledBatch> batches, LeNet& model);

}  // namespace gbnlab
