#include "gbnlab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gbnlab/error.hpp"

namespace gbnlab {

namespace {

std::string format_value(double v) {
  if (!std::isfinite(v)) throw UsageError("metric value is not finite");
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_json_line(const MetricRecord& r) {
  // Keys are emitted in a fixed order, so the object is assembled by hand.
  using nlohmann::json;
  std::string out = "{\"run_id\":" + json(r.run_id).dump() + ",\"epoch\":";
  if (const int* e = std::get_if<int>(&r.epoch)) {
    out += std::to_string(*e);
  } else {
    out += json(std::get<std::string>(r.epoch)).dump();
  }
  out += ",\"metric\":" + json(r.metric).dump() + ",\"value\":" + format_value(r.value);
  if (r.attack) out += ",\"attack\":" + json(*r.attack).dump();
  if (r.domain) out += ",\"domain\":" + std::to_string(*r.domain);
  if (r.layer) out += ",\"layer\":" + std::to_string(*r.layer);
  return out + "}";
}

MetricRecord parse_metric_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad metrics line: ") + e.what());
  }
  MetricRecord r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    const auto& epoch = j.at("epoch");
    if (epoch.is_string()) {
      r.epoch = epoch.get<std::string>();
    } else {
      r.epoch = epoch.get<int>();
    }
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    if (j.contains("attack")) r.attack = j["attack"].get<std::string>();
    if (j.contains("domain")) r.domain = j["domain"].get<int>();
    if (j.contains("layer")) r.layer = j["layer"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad metrics record: ") + e.what());
  }
  return r;
}

std::vector<MetricRecord> epoch_records(const std::string& run_id, const EpochMetrics& m) {
  auto rec = [&](const std::string& name, double v) {
    MetricRecord r;
    r.run_id = run_id;
    r.epoch = m.epoch;
    r.metric = name;
    r.value = v;
    return r;
  };
  return {rec("classification_loss", m.classification_loss),
          rec("domain_prediction_loss", m.domain_prediction_loss),
          rec("clean_train_accuracy", m.clean_train_accuracy)};
}

std::vector<MetricRecord> report_records(const std::string& run_id, const EvalReport& report) {
  std::vector<MetricRecord> out;
  auto rec = [&](const std::string& name, double v) -> MetricRecord& {
    MetricRecord r;
    r.run_id = run_id;
    r.metric = name;
    r.value = v;
    out.push_back(std::move(r));
    return out.back();
  };
  rec("clean_accuracy", report.clean_accuracy);
  for (const auto& [name, acc] : report.per_attack_accuracy) rec("attack_accuracy", acc).attack = name;
  for (const auto& [type, acc] : report.per_type_worst) rec("type_worst_accuracy", acc).attack = type;
  rec("all_attacks_accuracy", report.all_attacks_accuracy);
  if (report.gate_accuracy_per_layer) {
    for (const auto& [layer, per_domain] : *report.gate_accuracy_per_layer) {
      for (const auto& [domain, acc] : per_domain) {
        auto& r = rec("gate_accuracy", acc);
        r.layer = layer;
        r.domain = domain;
      }
    }
  }
  return out;
}

void write_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path,
                   bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write metrics file " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw IoError("failed writing metrics file " + path.string());
}

void write_metrics(const EvalReport& report, const std::string& run_id,
                   const std::filesystem::path& path, bool append) {
  write_metrics(report_records(run_id, report), path, append);
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read metrics file " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_metric_line(line));
  }
  return out;
}

}  // namespace gbnlab
