#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gbnlab/eval.hpp"
#include "gbnlab/train.hpp"

namespace gbnlab {

// One JSON-lines row:
//   {"run_id":..,"epoch":<int>|"final","metric":..,"value":..,
//    "attack":..?,"domain":..?,"layer":..?}
// Values are printed with 17 significant digits.
struct MetricRecord {
  std::string run_id;
  std::variant<int, std::string> epoch = std::string("final");
  std::string metric;
  double value = 0.0;
  std::optional<std::string> attack;
  std::optional<int> domain;
  std::optional<int> layer;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

std::string to_json_line(const MetricRecord& record);
MetricRecord parse_metric_line(const std::string& line);

std::vector<MetricRecord> epoch_records(const std::string& run_id, const EpochMetrics& m);
std::vector<MetricRecord> report_records(const std::string& run_id, const EvalReport& report);

void write_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path,
                   bool append = false);
void write_metrics(const EvalReport& report, const std::string& run_id,
                   const std::filesystem::path& path, bool append = false);
std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

}  // namespace gbnlab
