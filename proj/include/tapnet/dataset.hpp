#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tapnet/network.hpp"
#include "tapnet/solver.hpp"

namespace tapnet {

inline constexpr int kDatasetFormatVersion = 1;

/// One solved scenario. Flows and ratios cover every base link (zero on removed links).
struct DatasetRecord {
  int index = 0;
  std::uint64_t seed = 0;
  Objective objective = Objective::UE;
  std::vector<double> demand_factor_mean;  // per class, over pairs with base demand
  Eigen::VectorXd capacity_factors;        // per base link
  std::vector<int> removed_links;          // sorted base link ids
  OdMatrix od;                             // scaled per-class demand
  ClassFlows flows;
  std::vector<Eigen::VectorXd> ratios;     // pce_c f_c / capacity (scaled)
  int iterations = 0;
  double relative_gap = 0.0;
  bool converged = false;
};

/// Exact equality of every field, shapes included.
bool operator==(const DatasetRecord& a, const DatasetRecord& b);

/// Feature scaling fitted on a training split.
struct Normalization {
  double demand_scale = 1.0;                                  // node demand features divided by this
  Eigen::Vector2d edge_mean = Eigen::Vector2d::Zero();        // [fft, capacity]
  Eigen::Vector2d edge_std = Eigen::Vector2d::Ones();
};

struct DatasetManifest {
  int format_version = kDatasetFormatVersion;
  std::string network_name;
  std::uint64_t network_fingerprint = 0;
  std::vector<VehicleClass> classes;
  nlohmann::json scenario = nlohmann::json::object();
  std::vector<int> train;  // record positions
  std::vector<int> test;
  Normalization normalization;
  std::vector<std::pair<int, std::string>> skipped;  // (scenario index, reason)
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<DatasetRecord> records;
};

/// Line-delimited records after a header line carrying the record count.
std::string write_records(const std::vector<DatasetRecord>& records);
/// Throws DataError on version mismatch, count mismatch, truncation or malformed lines;
/// never returns a partial list.
std::vector<DatasetRecord> read_records(std::string_view text);

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);

/// `<dir>/<name>.jsonl` and `<dir>/<name>.manifest.json`.
void write_dataset(const std::string& dir, const std::string& name, const Dataset& ds);
Dataset read_dataset(const std::string& dir, const std::string& name);
/// Accepts either the .jsonl path or the dataset stem path.
Dataset read_dataset(const std::string& path);

/// Network of a record: base capacities scaled by the record's factors.
RoadNetwork record_network(const RoadNetwork& base, const DatasetRecord& rec);
/// Classes of a record: base masks minus removed links.
std::vector<VehicleClass> record_classes(const std::vector<VehicleClass>& base,
                                         const DatasetRecord& rec);

/// demand_scale = max demand entry; edge stats over every real edge of every record.
Normalization fit_normalization(const RoadNetwork& base, const std::vector<VehicleClass>& classes,
                                const std::vector<DatasetRecord>& records,
                                const std::vector<int>& positions);

}  // namespace tapnet
