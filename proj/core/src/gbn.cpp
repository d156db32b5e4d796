#include "gbnlab/gbn.hpp"

#include <algorithm>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"

namespace gbnlab {

GatedSubNetwork GatedSubNetwork::conv(std::size_t in_channels, std::size_t height,
                                      std::size_t width, std::size_t hidden_channels,
                                      std::size_t outputs, Rng& rng) {
  GatedSubNetwork gate;
  gate.kind_ = GateKind::Conv;
  gate.output_dim_ = outputs;
  gate.hidden_ = hidden_channels;
  gate.input_shape_ = {in_channels, height, width};
  gate.conv1_ = Conv2d::init(in_channels, hidden_channels, 7, 1, 3, true, rng);
  gate.conv2_ = Conv2d::init(hidden_channels, hidden_channels, 3, 2, 1, true, rng);
  const std::size_t oh = (height + 2 - 3) / 2 + 1;
  const std::size_t ow = (width + 2 - 3) / 2 + 1;
  gate.head_ = Dense::zeros(hidden_channels * oh * ow, outputs);
  return gate;
}

GatedSubNetwork GatedSubNetwork::fc(std::size_t in_features, std::size_t hidden,
                                    std::size_t outputs, Rng& rng) {
  GatedSubNetwork gate;
  gate.kind_ = GateKind::Fc;
  gate.output_dim_ = outputs;
  gate.hidden_ = hidden;
  gate.input_shape_ = {in_features};
  gate.hidden_fc_ = Dense::init(in_features, hidden, rng);
  gate.head_ = Dense::zeros(hidden, outputs);
  return gate;
}

Tensor GatedSubNetwork::logits(const Tensor& x) const {
  if (x.rank() < 2) {
    throw DimensionError("gate: input " + shape_to_string(x.shape()) + " has no batch axis");
  }
  const Shape sample(x.shape().begin() + 1, x.shape().end());
  if (kind_ == GateKind::Conv) {
    if (sample != input_shape_) {
      throw DimensionError("conv gate expects n x " + shape_to_string(input_shape_) + ", got " +
                           shape_to_string(x.shape()));
    }
    Tensor h = ops::relu(conv1_.forward(x));
    h = ops::relu(conv2_.forward(h));
    return head_.forward(ops::flatten(h));
  }
  if (shape_numel(sample) != input_shape_[0]) {
    throw DimensionError("fc gate expects " + std::to_string(input_shape_[0]) +
                         " features per sample, got " + shape_to_string(x.shape()));
  }
  Tensor h = ops::relu(hidden_fc_.forward(ops::flatten(x)));
  return head_.forward(h);
}

std::vector<NamedTensor> GatedSubNetwork::parameters() const {
  if (kind_ == GateKind::Conv) {
    return {{"conv1.weight", conv1_.weight}, {"conv1.bias", *conv1_.bias},
            {"conv2.weight", conv2_.weight}, {"conv2.bias", *conv2_.bias},
            {"fc.weight", head_.weight},     {"fc.bias", head_.bias}};
  }
  return {{"fc1.weight", hidden_fc_.weight},
          {"fc1.bias", hidden_fc_.bias},
          {"fc2.weight", head_.weight},
          {"fc2.bias", head_.bias}};
}

void GatedSubNetwork::zero_parameters() {
  for (auto& p : parameters()) {
    Tensor t = p.tensor;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
}

Tensor gate_predict(const Tensor& x, const GatedSubNetwork& gate) {
  return ops::softmax(gate.logits(x));
}

GatingMode GatingMode::parse(const std::string& text) {
  if (text == "soft") return soft();
  if (text == "hard") return hard();
  const std::string prefix = "forced:";
  if (text.rfind(prefix, 0) == 0 && text.size() > prefix.size()) {
    const std::string digits = text.substr(prefix.size());
    if (std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }) &&
        digits.size() < 6) {
      return forced(DomainLabel{std::stoi(digits)});
    }
  }
  throw UsageError("gating mode must be soft, hard or forced:K, got '" + text + "'");
}

std::string GatingMode::to_string() const {
  switch (kind) {
    case Kind::Soft:
      return "soft";
    case Kind::Hard:
      return "hard";
    case Kind::Forced:
      return "forced:" + std::to_string(branch.k);
  }
  return "soft";
}

GbnBlock::GbnBlock(std::size_t channels, std::size_t num_branches,
                   std::optional<GatedSubNetwork> gate, BnOptions options)
    : gate_(std::move(gate)) {
  if (num_branches == 0) throw UsageError("GbnBlock needs at least one branch");
  if (gate_ && gate_->output_dim() != num_branches) {
    throw DimensionError("gate predicts " + std::to_string(gate_->output_dim()) +
                         " domains but block has " + std::to_string(num_branches) + " branches");
  }
  for (std::size_t k = 0; k < num_branches; ++k) {
    branches_.push_back(BnBranchState::init(channels, options));
  }
  if (!gate_) mode_ = GatingMode::forced(DomainLabel{0});
}

void GbnBlock::check_label(DomainLabel k) const {
  if (k.k < 0 || static_cast<std::size_t>(k.k) >= branches_.size()) {
    throw IndexError("domain label " + std::to_string(k.k) + " outside 0.." +
                     std::to_string(branches_.size() - 1));
  }
}

BnBranchState& GbnBlock::branch(DomainLabel k) {
  check_label(k);
  return branches_[static_cast<std::size_t>(k.k)];
}

const BnBranchState& GbnBlock::branch(DomainLabel k) const {
  check_label(k);
  return branches_[static_cast<std::size_t>(k.k)];
}

GatedSubNetwork& GbnBlock::gate() {
  if (!gate_) throw UsageError("normalization block has no gate");
  return *gate_;
}

const GatedSubNetwork& GbnBlock::gate() const {
  if (!gate_) throw UsageError("normalization block has no gate");
  return *gate_;
}

void GbnBlock::set_gating_mode(GatingMode mode) {
  if (mode.kind == GatingMode::Kind::Forced) {
    check_label(mode.branch);
  } else if (!gate_ && branches_.size() > 1) {
    throw UsageError("gating mode " + mode.to_string() + " needs a gated block");
  }
  mode_ = mode;
}

Tensor GbnBlock::forward_train(const Tensor& x, DomainLabel k) {
  check_label(k);
  if (control_ && k.k == 0 && x.rank() >= 1 && x.dim(0) >= 4) {
    const std::size_t half = x.dim(0) / 2;
    NoGradScope no_grad;
    const auto a = channel_moments(ops::slice_rows(x, 0, half));
    const auto b = channel_moments(ops::slice_rows(x, half, 2 * half));
    (*control_)[0].update_running(a.mean, a.var);
    (*control_)[1].update_running(b.mean, b.var);
  }
  return bn_forward(x, branches_[static_cast<std::size_t>(k.k)], LayerMode::Train);
}

Tensor GbnBlock::forward_infer(const Tensor& x, Tensor* gate_logits) const {
  const bool single = branches_.size() == 1;
  if (mode_.kind == GatingMode::Kind::Forced || (single && !gate_)) {
    if (gate_logits && gate_) *gate_logits = gate_->logits(x);
    const DomainLabel k = mode_.kind == GatingMode::Kind::Forced ? mode_.branch : DomainLabel{0};
    return bn_forward_eval(x, branch(k));
  }
  if (!gate_) throw UsageError("gating mode " + mode_.to_string() + " needs a gated block");

  Tensor logits = gate_->logits(x);
  if (gate_logits) *gate_logits = logits;
  std::vector<Tensor> outputs;
  outputs.reserve(branches_.size());
  for (const auto& state : branches_) outputs.push_back(bn_forward_eval(x, state));

  if (mode_.kind == GatingMode::Kind::Soft) return ops::mix(outputs, ops::softmax(logits));

  const std::size_t n = x.dim(0), k = branches_.size();
  Tensor one_hot = Tensor::zeros({n, k});
  const auto top = ops::argmax_rows(logits);
  for (std::size_t s = 0; s < n; ++s) one_hot.mutable_data()[s * k + top[s]] = 1.0;
  return ops::mix(outputs, one_hot);
}

void GbnBlock::enable_split_control() {
  const std::size_t c = channels();
  const auto& ref = branches_.front();
  BnOptions options{ref.xi, ref.alpha};
  control_ = std::array<BnBranchState, 2>{BnBranchState::init(c, options),
                                          BnBranchState::init(c, options)};
}

Tensor gbn_forward_train(const Tensor& x, DomainLabel label, GbnBlock& block) {
  return block.forward_train(x, label);
}

Tensor gbn_forward_infer(const Tensor& x, const GbnBlock& block) { return block.forward_infer(x); }

Tensor domain_prediction_loss(std::span<const DomainBatch> batches,
                              std::span<const GatedSubNetwork* const> gates) {
  if (batches.empty()) throw UsageError("domain_prediction_loss: no domain batches");
  if (gates.empty()) throw UsageError("domain_prediction_loss: no gates");
  Tensor total;
  for (const GatedSubNetwork* gate : gates) {
    for (const DomainBatch& batch : batches) {
      if (batch.domain.k < 0 || static_cast<std::size_t>(batch.domain.k) >= gate->output_dim()) {
        throw IndexError("domain label " + std::to_string(batch.domain.k) +
                         " outside the gate's " + std::to_string(gate->output_dim()) +
                         " domains");
      }
      const std::vector<int> targets(batch.x.dim(0), batch.domain.k);
      Tensor term = ops::softmax_cross_entropy(gate->logits(batch.x.detach()), targets);
      total = total.defined() ? ops::add(total, term) : term;
    }
  }
  return total;
}

}  // namespace gbnlab
