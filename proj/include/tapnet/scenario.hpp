#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tapnet/dataset.hpp"
#include "tapnet/network.hpp"
#include "tapnet/solver.hpp"

namespace tapnet {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct ScenarioConfig {
  Range demand_scale{0.5, 1.5};
  Range capacity_scale{0.8, 1.0};
  int min_removed = 0;
  int max_removed = 0;
  std::vector<int> removable;  // empty -> default_removable_links(base)
  Objective objective = Objective::UE;
  std::uint64_t master_seed = 0;
  double threshold = 1e-5;
  int max_iterations = 20000;
  int max_retries = 200;

  void validate() const;
};

/// base (0 removals), indist (1-3), ood-train (1-2), ood-test (3).
ScenarioConfig preset(const std::string& name);

nlohmann::json config_to_json(const ScenarioConfig& cfg);
ScenarioConfig config_from_json(const nlohmann::json& j);

/// Counter-based seed for record `index`.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(std::mt19937_64& rng);
/// Uniform integer in [0, n) by rejection.
std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n);

struct Scenario {
  int index = 0;
  std::uint64_t seed = 0;
  std::vector<Eigen::MatrixXd> demand_factors;  // per class, zero where base demand is zero
  Eigen::VectorXd capacity_factors;
  std::vector<int> removed;                     // sorted
  OdMatrix od;                                  // scaled demand
  RoadNetwork network;                          // scaled capacities, base topology
  std::vector<VehicleClass> classes;            // masks minus removed links
};

/// Draws demand factors (per class, per pair, row-major over positive pairs), capacity
/// factors, then removal sets until every class stays OD-connected.
Scenario sample_scenario(const RoadNetwork& base, const OdMatrix& od,
                         const std::vector<VehicleClass>& classes, const ScenarioConfig& cfg,
                         int index);

/// Solves a scenario into a record; throws on solve failure or non-convergence.
DatasetRecord solve_scenario(const Scenario& sc, const ScenarioConfig& cfg);

struct GenerationResult {
  std::vector<DatasetRecord> records;               // ordered by index
  std::vector<std::pair<int, std::string>> skipped;
};

/// Records for indices first .. first+n-1, solved on up to `threads` workers.
GenerationResult generate_dataset(const RoadNetwork& base, const OdMatrix& od,
                                  const std::vector<VehicleClass>& classes,
                                  const ScenarioConfig& cfg, int n, int threads = 1,
                                  int first_index = 0);

/// k disjoint folds covering 0..n-1, sizes differing by at most one.
std::vector<std::vector<int>> kfold_split(int n, int k, std::uint64_t seed);

/// Shuffled split with round(n * train_fraction) training positions.
std::pair<std::vector<int>, std::vector<int>> train_test_split(int n, double train_fraction,
                                                               std::uint64_t seed);

/// Single-class trips split into classes by share (class-native vehicles).
OdMatrix split_demand(const Eigen::MatrixXd& trips, const std::vector<double>& shares);

/// Car (pce 1) and truck (pce 1.9) with full access.
std::vector<VehicleClass> default_classes(const RoadNetwork& net);

}  // namespace tapnet
