#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gbnlab/layers.hpp"
#include "gbnlab/rng.hpp"
#include "gbnlab/tensor.hpp"

namespace gbnlab {

/// Index of a data domain: 0 is clean, k >= 1 the k-th perturbation type.
/// Doubles as the index of the BN branch that owns that domain.
struct DomainLabel {
  int k = 0;

  constexpr DomainLabel() = default;
  constexpr explicit DomainLabel(int value) : k(value) {}
  constexpr auto operator<=>(const DomainLabel&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

enum class GateKind { Conv, Fc };

/// Small classifier predicting which domain a layer input came from.
///
/// Conv gate: Conv(7x7, stride 1, pad 3) -> ReLU -> Conv(3x3, stride 2,
/// pad 1) -> ReLU -> FC(outputs). FC gate: FC(hidden) -> ReLU -> FC(outputs).
/// The output FC starts at zero, so a fresh gate weights all branches equally.
class GatedSubNetwork {
 public:
  static GatedSubNetwork conv(std::size_t in_channels, std::size_t height, std::size_t width,
                              std::size_t hidden_channels, std::size_t outputs, Rng& rng);
  static GatedSubNetwork fc(std::size_t in_features, std::size_t hidden, std::size_t outputs,
                            Rng& rng);

  GateKind kind() const { return kind_; }
  std::size_t output_dim() const { return output_dim_; }
  std::size_t hidden() const { return hidden_; }

  Tensor logits(const Tensor& x) const;
  std::vector<NamedTensor> parameters() const;
  void zero_parameters();

 private:
  GateKind kind_ = GateKind::Fc;
  std::size_t output_dim_ = 0;
  std::size_t hidden_ = 0;
  Shape input_shape_;  // per-sample shape the gate accepts
  Conv2d conv1_, conv2_;
  Dense head_;    // final FC producing the domain logits
  Dense hidden_fc_;  // FC gate only
};

/// Softmax confidences of the gate, one row per sample.
Tensor gate_predict(const Tensor& x, const GatedSubNetwork& gate);

struct GatingMode {
  enum class Kind { Soft, Hard, Forced };
  Kind kind = Kind::Soft;
  DomainLabel branch{};

  static constexpr GatingMode soft() { return {}; }
  static constexpr GatingMode hard() { return {Kind::Hard, DomainLabel{}}; }
  static constexpr GatingMode forced(DomainLabel k) { return {Kind::Forced, k}; }

  // "soft", "hard" or "forced:K".
  static GatingMode parse(const std::string& text);
  std::string to_string() const;
  bool operator==(const GatingMode&) const = default;
};

/// A normalization slot with N+1 independent BN branches and an optional
/// gated sub-network. A single-branch block without a gate is plain BN; a
/// multi-branch block without a gate only supports forced routing.
class GbnBlock {
 public:
  GbnBlock(std::size_t channels, std::size_t num_branches, std::optional<GatedSubNetwork> gate,
           BnOptions options = {});

  std::size_t channels() const { return branches_.front().channels(); }
  std::size_t num_branches() const { return branches_.size(); }
  std::vector<BnBranchState>& branches() { return branches_; }
  const std::vector<BnBranchState>& branches() const { return branches_; }
  BnBranchState& branch(DomainLabel k);
  const BnBranchState& branch(DomainLabel k) const;

  bool has_gate() const { return gate_.has_value(); }
  GatedSubNetwork& gate();
  const GatedSubNetwork& gate() const;

  GatingMode gating_mode() const { return mode_; }
  void set_gating_mode(GatingMode mode);

  // Train-mode forward through branch k; only that branch's statistics move.
  Tensor forward_train(const Tensor& x, DomainLabel k);
  // Eval-mode forward under the block's gating mode. When gate_logits is
  // given and the block has a gate, receives the gate's raw logits.
  Tensor forward_infer(const Tensor& x, Tensor* gate_logits = nullptr) const;

  // Tracks two extra running averages fed by the two halves of every clean
  // (k = 0) training batch; a noise floor for branch-divergence statistics.
  void enable_split_control();
  const std::optional<std::array<BnBranchState, 2>>& split_control() const { return control_; }
  std::optional<std::array<BnBranchState, 2>>& split_control() { return control_; }

 private:
  void check_label(DomainLabel k) const;

  std::vector<BnBranchState> branches_;
  std::optional<GatedSubNetwork> gate_;
  GatingMode mode_ = GatingMode::soft();
  std::optional<std::array<BnBranchState, 2>> control_;
};

Tensor gbn_forward_train(const Tensor& x, DomainLabel label, GbnBlock& block);
Tensor gbn_forward_infer(const Tensor& x, const GbnBlock& block);

struct DomainBatch {
  Tensor x;
  DomainLabel domain;
};

/// Sum over batches and gates of the mean cross-entropy between each gate's
/// prediction and the batch's domain. Inputs are detached, so only gate
/// parameters receive gradient.
Tensor domain_prediction_loss(std::span<const DomainBatch> batches,
                              std::span<const GatedSubNetwork* const> gates);

}  // namespace gbnlab
