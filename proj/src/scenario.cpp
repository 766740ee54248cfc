#include "tapnet/scenario.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

namespace tapnet {

using nlohmann::json;

void ScenarioConfig::validate() const {
  if (!(demand_scale.lo <= demand_scale.hi) || demand_scale.lo < 0.0)
    throw DataError("demand scale range must satisfy 0 <= lo <= hi");
  if (!(capacity_scale.lo <= capacity_scale.hi) || !(capacity_scale.lo > 0.0))
    throw DataError("capacity scale range must satisfy 0 < lo <= hi");
  if (min_removed < 0 || max_removed < min_removed)
    throw DataError("removal count range must satisfy 0 <= min <= max");
  if (!(threshold > 0.0) || max_iterations < 1) throw DataError("invalid solver settings");
  if (max_retries < 1) throw DataError("max retries must be at least 1");
}

ScenarioConfig preset(const std::string& name) {
  ScenarioConfig cfg;
  if (name == "base") return cfg;
  if (name == "indist") {
    cfg.min_removed = 1;
    cfg.max_removed = 3;
  } else if (name == "ood-train") {
    cfg.min_removed = 1;
    cfg.max_removed = 2;
  } else if (name == "ood-test") {
    cfg.min_removed = 3;
    cfg.max_removed = 3;
  } else {
    throw DataError("unknown preset '" + name + "' (expected base, indist, ood-train, ood-test)");
  }
  return cfg;
}

json config_to_json(const ScenarioConfig& cfg) {
  return json{{"demand_scale", {cfg.demand_scale.lo, cfg.demand_scale.hi}},
              {"capacity_scale", {cfg.capacity_scale.lo, cfg.capacity_scale.hi}},
              {"removed", {cfg.min_removed, cfg.max_removed}},
              {"removable", cfg.removable},
              {"objective", to_string(cfg.objective)},
              {"master_seed", cfg.master_seed},
              {"threshold", cfg.threshold},
              {"max_iterations", cfg.max_iterations},
              {"max_retries", cfg.max_retries}};
}

ScenarioConfig config_from_json(const json& j) {
  ScenarioConfig cfg;
  try {
    const auto d = j.at("demand_scale").get<std::vector<double>>();
    const auto c = j.at("capacity_scale").get<std::vector<double>>();
    const auto r = j.at("removed").get<std::vector<int>>();
    if (d.size() != 2 || c.size() != 2 || r.size() != 2) throw DataError("scenario ranges need 2 entries");
    cfg.demand_scale = {d[0], d[1]};
    cfg.capacity_scale = {c[0], c[1]};
    cfg.min_removed = r[0];
    cfg.max_removed = r[1];
    cfg.removable = j.at("removable").get<std::vector<int>>();
    cfg.objective = objective_from_string(j.at("objective").get<std::string>());
    cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
    cfg.threshold = j.at("threshold").get<double>();
    cfg.max_iterations = j.at("max_iterations").get<int>();
    cfg.max_retries = j.at("max_retries").get<int>();
  } catch (const json::exception& e) {
    throw DataError(std::string("scenario config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 finalizer over a combined counter
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do x = rng();
  while (x >= limit);
  return x % n;
}

namespace {

double draw(std::mt19937_64& rng, const Range& r) { return r.lo + (r.hi - r.lo) * uniform01(rng); }

}  // namespace

Scenario sample_scenario(const RoadNetwork& base, const OdMatrix& od,
                         const std::vector<VehicleClass>& classes, const ScenarioConfig& cfg,
                         int index) {
  cfg.validate();
  if (od.num_classes() != static_cast<int>(classes.size()))
    throw DataError("OD class count does not match vehicle classes");
  Scenario sc;
  sc.index = index;
  sc.seed = derive_seed(cfg.master_seed, static_cast<std::uint64_t>(index));
  std::mt19937_64 rng(sc.seed);

  const int n = base.num_nodes();
  for (const auto& d : od.demand) {
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(n, n);
    for (int r = 0; r < n; ++r)
      for (int s = 0; s < n; ++s)
        if (d(r, s) > 0.0) f(r, s) = draw(rng, cfg.demand_scale);
    sc.od.demand.push_back(d.cwiseProduct(f));
    sc.demand_factors.push_back(std::move(f));
  }
  sc.capacity_factors.resize(base.num_links());
  for (int e = 0; e < base.num_links(); ++e) sc.capacity_factors[e] = draw(rng, cfg.capacity_scale);
  sc.network = base.with_capacity_factors(sc.capacity_factors);

  std::vector<int> pool = cfg.removable.empty() ? default_removable_links(base) : cfg.removable;
  for (int e : pool)
    if (e < 0 || e >= base.num_links()) throw DataError("removable link id out of range");
  const int count = cfg.min_removed +
                    static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(cfg.max_removed - cfg.min_removed + 1)));
  if (count > static_cast<int>(pool.size()))
    throw DataError("removal count exceeds the removable link subset");

  std::vector<std::pair<int, int>> last_bad;
  std::string last_class;
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    std::vector<int> cand = pool;
    for (int i = 0; i < count; ++i) {
      const auto j = i + static_cast<int>(uniform_index(rng, cand.size() - i));
      std::swap(cand[i], cand[j]);
    }
    std::vector<int> removed(cand.begin(), cand.begin() + count);
    std::sort(removed.begin(), removed.end());
    bool ok = true;
    std::vector<VehicleClass> masked;
    for (std::size_t c = 0; c < classes.size() && ok; ++c) {
      masked.push_back(without_links(classes[c], removed));
      auto bad = check_od_connectivity(base, masked.back(), sc.od.demand[c]);
      if (!bad.empty()) {
        ok = false;
        last_bad = std::move(bad);
        last_class = classes[c].name;
      }
    }
    if (ok) {
      sc.removed = std::move(removed);
      sc.classes = std::move(masked);
      return sc;
    }
  }
  std::ostringstream os;
  os << "scenario " << index << ": no connected removal set after " << cfg.max_retries
     << " draws; class '" << last_class << "' last failed on";
  for (std::size_t i = 0; i < std::min<std::size_t>(last_bad.size(), 5); ++i)
    os << " (" << base.nodes()[last_bad[i].first].id << "," << base.nodes()[last_bad[i].second].id << ")";
  throw DataError(os.str());
}

DatasetRecord solve_scenario(const Scenario& sc, const ScenarioConfig& cfg) {
  SolveConfig sol;
  sol.objective = cfg.objective;
  sol.threshold = cfg.threshold;
  sol.max_iterations = cfg.max_iterations;
  const SolveReport rep = solve(sc.network, sc.classes, sc.od, sol);
  if (!rep.converged) {
    std::ostringstream os;
    os << "not converged after " << rep.iterations << " iterations";
    throw NumericError(os.str());
  }
  DatasetRecord r;
  r.index = sc.index;
  r.seed = sc.seed;
  r.objective = cfg.objective;
  for (std::size_t c = 0; c < sc.demand_factors.size(); ++c) {
    const auto& f = sc.demand_factors[c];
    const double k = static_cast<double>((f.array() > 0.0).count());
    r.demand_factor_mean.push_back(k > 0 ? f.sum() / k : 0.0);
  }
  r.capacity_factors = sc.capacity_factors;
  r.removed_links = sc.removed;
  r.od = sc.od;
  r.flows = rep.flows;
  const Eigen::VectorXd cap = sc.network.capacities();
  for (std::size_t c = 0; c < sc.classes.size(); ++c) {
    for (int e : sc.removed) r.flows.flow[c][e] = 0.0;
    r.ratios.push_back(r.flows.ratio(static_cast<int>(c), sc.classes[c].pce, cap));
  }
  r.iterations = rep.iterations;
  r.relative_gap = rep.relative_gap;
  r.converged = rep.converged;
  return r;
}

GenerationResult generate_dataset(const RoadNetwork& base, const OdMatrix& od,
                                  const std::vector<VehicleClass>& classes,
                                  const ScenarioConfig& cfg, int n, int threads, int first_index) {
  if (n < 1) throw DataError("dataset size must be at least 1");
  cfg.validate();
  std::vector<std::optional<DatasetRecord>> slots(n);
  std::vector<std::string> errors(n);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        const Scenario sc = sample_scenario(base, od, classes, cfg, first_index + i);
        slots[i] = solve_scenario(sc, cfg);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int workers = std::max(1, std::min(threads, n));
  std::vector<std::thread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  GenerationResult out;
  for (int i = 0; i < n; ++i) {
    if (slots[i])
      out.records.push_back(std::move(*slots[i]));
    else
      out.skipped.emplace_back(first_index + i, errors[i]);
  }
  return out;
}

std::vector<std::vector<int>> kfold_split(int n, int k, std::uint64_t seed) {
  if (k < 2) throw DataError("k-fold split needs k >= 2");
  if (n < k) throw DataError("k-fold split needs n >= k");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0xf01d));
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
  std::vector<std::vector<int>> folds(k);
  for (int i = 0; i < n; ++i) folds[i % k].push_back(idx[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::pair<std::vector<int>, std::vector<int>> train_test_split(int n, double train_fraction,
                                                               std::uint64_t seed) {
  if (n < 0 || !(train_fraction >= 0.0 && train_fraction <= 1.0))
    throw DataError("train fraction must lie in [0, 1]");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5b17));
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
  const int n_train = static_cast<int>(std::lround(n * train_fraction));
  std::vector<int> train(idx.begin(), idx.begin() + n_train), test(idx.begin() + n_train, idx.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

OdMatrix split_demand(const Eigen::MatrixXd& trips, const std::vector<double>& shares) {
  OdMatrix od;
  for (double s : shares) {
    if (!(s >= 0.0)) throw DataError("class demand shares must be non-negative");
    od.demand.push_back(s * trips);
  }
  return od;
}

std::vector<VehicleClass> default_classes(const RoadNetwork& net) {
  return {VehicleClass::full_access("car", 1.0, net.num_links()),
          VehicleClass::full_access("truck", 1.9, net.num_links())};
}

}  // namespace tapnet
