#include "gbnlab/model.hpp"

#include <set>

#include "gbnlab/error.hpp"
#include "gbnlab/ops.hpp"

namespace gbnlab {

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::None:
      return "none";
    case NormKind::Batch:
      return "batch";
    case NormKind::MultiBranch:
      return "multi_branch";
    case NormKind::Gated:
      return "gated";
  }
  return "none";
}

NormKind parse_norm_kind(const std::string& text) {
  if (text == "none") return NormKind::None;
  if (text == "batch") return NormKind::Batch;
  if (text == "multi_branch") return NormKind::MultiBranch;
  if (text == "gated") return NormKind::Gated;
  throw UsageError("unknown norm kind '" + text + "' (none|batch|multi_branch|gated)");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::topology() const {
  const bool multi = norm == NormKind::MultiBranch || norm == NormKind::Gated;
  std::vector<std::pair<std::string, std::string>> out = {
      {"arch", "lenet"},
      {"norm", to_string(norm)},
      {"branches", std::to_string(multi ? num_branches : (norm == NormKind::Batch ? 1 : 0))},
      {"input_size", std::to_string(input_size)},
      {"kernel", std::to_string(kernel)},
      {"conv1_channels", std::to_string(conv1_channels)},
      {"conv2_channels", std::to_string(conv2_channels)},
      {"hidden", std::to_string(hidden)},
      {"classes", std::to_string(classes)},
  };
  if (norm == NormKind::Gated) {
    out.emplace_back("gate_hidden_channels", std::to_string(gate_hidden_channels));
    out.emplace_back("fc_gate_hidden", std::to_string(fc_gate_hidden));
  }
  return out;
}

LeNet::LeNet(ModelConfig config) : config_(std::move(config)) {
  const auto& c = config_;
  if (c.input_size < c.kernel || (c.input_size - c.kernel + 1) / 2 < c.kernel) {
    throw UsageError("input size " + std::to_string(c.input_size) + " too small for kernel " +
                     std::to_string(c.kernel));
  }
  const bool multi = c.norm == NormKind::MultiBranch || c.norm == NormKind::Gated;
  if (multi && c.num_branches < 2) throw UsageError("multi-branch norms need >= 2 branches");

  Rng rng(c.init_seed);
  const bool conv_bias = c.norm == NormKind::None;
  conv1_ = Conv2d::init(1, c.conv1_channels, c.kernel, 1, 0, conv_bias, rng);
  conv2_ = Conv2d::init(c.conv1_channels, c.conv2_channels, c.kernel, 1, 0, conv_bias, rng);
  const std::size_t s1 = c.input_size - c.kernel + 1;  // conv1 output side
  const std::size_t p1 = s1 / 2;
  const std::size_t s2 = p1 - c.kernel + 1;
  const std::size_t p2 = s2 / 2;
  fc1_ = Dense::init(c.conv2_channels * p2 * p2, c.hidden, rng);
  fc2_ = Dense::init(c.hidden, c.classes, rng);

  switch (c.norm) {
    case NormKind::None:
      break;
    case NormKind::Batch:
      norms_.emplace_back(c.conv1_channels, 1, std::nullopt, c.bn);
      norms_.emplace_back(c.conv2_channels, 1, std::nullopt, c.bn);
      break;
    case NormKind::MultiBranch:
      norms_.emplace_back(c.conv1_channels, c.num_branches, std::nullopt, c.bn);
      norms_.emplace_back(c.conv2_channels, c.num_branches, std::nullopt, c.bn);
      break;
    case NormKind::Gated:
      norms_.emplace_back(c.conv1_channels, c.num_branches,
                          GatedSubNetwork::conv(c.conv1_channels, s1, s1, c.gate_hidden_channels,
                                                c.num_branches, rng),
                          c.bn);
      norms_.emplace_back(c.conv2_channels, c.num_branches,
                          GatedSubNetwork::fc(c.conv2_channels * s2 * s2, c.fc_gate_hidden,
                                              c.num_branches, rng),
                          c.bn);
      break;
  }
}

std::size_t LeNet::num_branches() const {
  return norms_.empty() ? 1 : norms_.front().num_branches();
}

void LeNet::check_input(const Tensor& x) const {
  const std::size_t side = config_.input_size;
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != side || x.dim(3) != side) {
    throw DimensionError("lenet expects n x 1 x " + std::to_string(side) + " x " +
                         std::to_string(side) + " input, got " + shape_to_string(x.shape()));
  }
}

Tensor LeNet::forward_train(const Tensor& x, DomainLabel domain, std::vector<Tensor>* gate_inputs) {
  check_input(x);
  if (gate_inputs) gate_inputs->clear();
  Tensor h = conv1_.forward(x);
  if (!norms_.empty()) {
    if (gate_inputs) gate_inputs->push_back(h.detach());
    h = norms_[0].forward_train(h, domain);
  }
  h = ops::max_pool2d(ops::relu(h), 2);
  h = conv2_.forward(h);
  if (!norms_.empty()) {
    if (gate_inputs) gate_inputs->push_back(h.detach());
    h = norms_[1].forward_train(h, domain);
  }
  h = ops::max_pool2d(ops::relu(h), 2);
  h = ops::relu(fc1_.forward(ops::flatten(h)));
  return fc2_.forward(h);
}

Tensor LeNet::forward_eval(const Tensor& x, std::vector<Tensor>* gate_logits) const {
  check_input(x);
  if (gate_logits) gate_logits->clear();
  auto norm = [&](std::size_t slot, const Tensor& h) {
    Tensor logits;
    Tensor out = norms_[slot].forward_infer(h, gate_logits ? &logits : nullptr);
    if (gate_logits) gate_logits->push_back(logits);
    return out;
  };
  Tensor h = conv1_.forward(x);
  if (!norms_.empty()) h = norm(0, h);
  h = ops::max_pool2d(ops::relu(h), 2);
  h = conv2_.forward(h);
  if (!norms_.empty()) h = norm(1, h);
  h = ops::max_pool2d(ops::relu(h), 2);
  h = ops::relu(fc1_.forward(ops::flatten(h)));
  return fc2_.forward(h);
}

Tensor LeNet::forward(const Tensor& x, LayerMode mode, DomainLabel domain) {
  return mode == LayerMode::Train ? forward_train(x, domain) : forward_eval(x);
}

GatingMode LeNet::gating_mode() const {
  return norms_.empty() ? GatingMode::soft() : norms_.front().gating_mode();
}

void LeNet::set_gating_mode(GatingMode mode) {
  for (auto& block : norms_) block.set_gating_mode(mode);
}

std::vector<NamedTensor> LeNet::parameters(ParamGroup group) const {
  std::vector<NamedTensor> out;
  const bool main = group != ParamGroup::Gate;
  const bool gate = group != ParamGroup::Main;
  if (main) {
    out.push_back({"conv1.weight", conv1_.weight});
    if (conv1_.bias) out.push_back({"conv1.bias", *conv1_.bias});
  }
  for (std::size_t slot = 0; slot < norms_.size(); ++slot) {
    const std::string prefix = "norm" + std::to_string(slot + 1) + ".";
    if (main) {
      const auto& branches = norms_[slot].branches();
      for (std::size_t k = 0; k < branches.size(); ++k) {
        const std::string b = prefix + "branch" + std::to_string(k) + ".";
        out.push_back({b + "gamma", branches[k].gamma});
        out.push_back({b + "beta", branches[k].beta});
      }
    }
    if (gate && norms_[slot].has_gate()) {
      for (auto& p : norms_[slot].gate().parameters()) {
        out.push_back({prefix + "gate." + p.name, p.tensor});
      }
    }
    if (main && slot == 0) {
      out.push_back({"conv2.weight", conv2_.weight});
      if (conv2_.bias) out.push_back({"conv2.bias", *conv2_.bias});
    }
  }
  if (main) {
    if (norms_.empty()) {
      out.push_back({"conv2.weight", conv2_.weight});
      if (conv2_.bias) out.push_back({"conv2.bias", *conv2_.bias});
    }
    out.push_back({"fc1.weight", fc1_.weight});
    out.push_back({"fc1.bias", fc1_.bias});
    out.push_back({"fc2.weight", fc2_.weight});
    out.push_back({"fc2.bias", fc2_.bias});
  }
  return out;
}

std::vector<const GatedSubNetwork*> LeNet::gates() const {
  std::vector<const GatedSubNetwork*> out;
  for (const auto& block : norms_) {
    if (block.has_gate()) out.push_back(&block.gate());
  }
  return out;
}

Tensor LeNet::gate_loss(const std::vector<std::vector<Tensor>>& captured) const {
  if (!has_gates()) throw UsageError("gate_loss: model has no gated sub-networks");
  if (captured.empty()) throw UsageError("gate_loss: no captured domain activations");
  Tensor total;
  for (std::size_t slot = 0; slot < norms_.size(); ++slot) {
    std::vector<DomainBatch> batches;
    for (std::size_t k = 0; k < captured.size(); ++k) {
      if (captured[k].size() != norms_.size()) {
        throw UsageError("gate_loss: captured activations do not match the model's slots");
      }
      batches.push_back({captured[k][slot], DomainLabel{static_cast<int>(k)}});
    }
    const GatedSubNetwork* gate = &norms_[slot].gate();
    Tensor term = domain_prediction_loss(batches, std::span<const GatedSubNetwork* const>(&gate, 1));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

FrozenParameters::FrozenParameters(const LeNet& model) {
  for (auto& p : model.parameters()) {
    if (p.tensor.requires_grad()) {
      params_.push_back(p.tensor);
      params_.back().set_requires_grad(false);
    }
  }
}

FrozenParameters::~FrozenParameters() {
  for (auto& t : params_) t.set_requires_grad(true);
}

GatingModeScope::GatingModeScope(LeNet& model, GatingMode mode) : model_(model) {
  for (const auto& block : model_.norms()) saved_.push_back(block.gating_mode());
  model_.set_gating_mode(mode);
}

GatingModeScope::~GatingModeScope() {
  for (std::size_t i = 0; i < saved_.size(); ++i) model_.norms()[i].set_gating_mode(saved_[i]);
}

Tensor classification_loss(std::span<const LabeledBatch> batches, LeNet& model) {
  if (batches.empty()) throw UsageError("classification_loss: no batches");
  std::set<int> present;
  for (const auto& batch : batches) present.insert(batch.domain.k);
  for (std::size_t k = 0; k < model.num_branches(); ++k) {
    if (!present.count(static_cast<int>(k))) {
      throw UsageError("classification_loss: missing batch for domain " + std::to_string(k));
    }
  }
  Tensor total;
  for (const auto& batch : batches) {
    Tensor term = ops::softmax_cross_entropy(model.forward_train(batch.x, batch.domain),
                                             batch.labels);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

}  // namespace gbnlab
