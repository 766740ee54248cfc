#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "tapnet/dataset.hpp"
#include "tapnet/scenario.hpp"

using namespace tapnet;

namespace {

DatasetRecord random_record(std::mt19937_64& rng, int nodes, int links, int classes) {
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  std::exponential_distribution<double> tiny(1.0);
  DatasetRecord r;
  r.index = static_cast<int>(rng() % 100000);
  r.seed = rng();
  r.objective = rng() % 2 ? Objective::UE : Objective::SO;
  r.capacity_factors.resize(links);
  for (auto& x : r.capacity_factors) x = u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
  for (int e = 0; e < links; ++e)
    if (rng() % 5 == 0) r.removed_links.push_back(e);
  for (int c = 0; c < classes; ++c) {
    r.demand_factor_mean.push_back(tiny(rng));
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(nodes, nodes);
    for (int a = 0; a < nodes; ++a)
      for (int b = 0; b < nodes; ++b)
        if (a != b && rng() % 3 == 0) d(a, b) = tiny(rng) * 1e3 / 3.0;
    r.od.demand.push_back(d);
    Eigen::VectorXd f(links), q(links);
    for (int e = 0; e < links; ++e) {
      f[e] = tiny(rng) / 7.0;
      q[e] = 1.0 / (1.0 + tiny(rng));
    }
    r.flows.flow.push_back(f);
    r.ratios.push_back(q);
  }
  r.iterations = static_cast<int>(rng() % 20000);
  r.relative_gap = tiny(rng) * 1e-7;
  r.converged = rng() % 2;
  return r;
}

}  // namespace

TEST_CASE("dataset round trip") {
  std::mt19937_64 rng(99);
  CHECK(read_records(write_records({})).empty());
  const DatasetRecord one = random_record(rng, 5, 9, 2);
  const auto back = read_records(write_records({one}));
  REQUIRE(back.size() == 1);
  CHECK(back[0] == one);

  for (int trial = 0; trial < 25; ++trial) {
    std::vector<DatasetRecord> rs;
    const int k = static_cast<int>(rng() % 6);
    for (int i = 0; i < k; ++i) rs.push_back(random_record(rng, 2 + static_cast<int>(rng() % 6), 1 + static_cast<int>(rng() % 12), 1 + static_cast<int>(rng() % 3)));
    CHECK(read_records(write_records(rs)) == rs);
  }
}

TEST_CASE("dataset read errors") {
  std::mt19937_64 rng(5);
  const std::vector<DatasetRecord> rs{random_record(rng, 4, 5, 2), random_record(rng, 4, 5, 2)};
  const std::string text = write_records(rs);

  std::string longer = text;
  longer.replace(longer.find("\"records\":2"), 11, "\"records\":3");
  CHECK_THROWS_WITH_AS(read_records(longer), doctest::Contains("truncated"), DataError);
  std::string shorter = text;
  shorter.replace(shorter.find("\"records\":2"), 11, "\"records\":1");
  CHECK_THROWS_AS(read_records(shorter), DataError);
  std::string garbled = text;
  garbled.replace(garbled.find("\"records\":2"), 11, "\"records\":x");
  CHECK_THROWS_AS(read_records(garbled), DataError);

  CHECK_THROWS_AS(read_records(text.substr(0, text.size() - 40)), DataError);
  std::string version = text;
  version.replace(version.find("\"format_version\":1"), 18, "\"format_version\":7");
  CHECK_THROWS_WITH_AS(read_records(version), doctest::Contains("format_version 7"), DataError);
  CHECK_THROWS_AS(read_records(""), DataError);
}

TEST_CASE("dataset files") {
  const auto dir = std::filesystem::temp_directory_path() / "tapnet_ds_test";
  std::filesystem::remove_all(dir);
  std::mt19937_64 rng(1);
  Dataset ds;
  ds.records = {random_record(rng, 3, 4, 1)};
  ds.manifest.network_name = "toy";
  ds.manifest.network_fingerprint = 0xfedcba9876543210ULL;
  ds.manifest.classes = {VehicleClass{"car", 1.0, {true, false, true, true}}};
  ds.manifest.train = {0};
  ds.manifest.normalization.demand_scale = 3.25;
  ds.manifest.normalization.edge_mean = Eigen::Vector2d(0.1, 1e5 / 3.0);
  ds.manifest.skipped = {{7, "not converged"}};
  write_dataset(dir.string(), "toy", ds);
  const Dataset back = read_dataset((dir / "toy.jsonl").string());
  CHECK(back.records == ds.records);
  CHECK(back.manifest.network_fingerprint == ds.manifest.network_fingerprint);
  CHECK(back.manifest.classes[0].edge_mask == ds.manifest.classes[0].edge_mask);
  CHECK(back.manifest.normalization.edge_mean == ds.manifest.normalization.edge_mean);
  CHECK(back.manifest.skipped == ds.manifest.skipped);
  CHECK(back.manifest.train == ds.manifest.train);
  std::filesystem::remove_all(dir);
}

TEST_CASE("scenario sampling") {
  const RoadNetwork net = fixtures::sioux_falls();
  const Eigen::MatrixXd trips = fixtures::sioux_falls_trips(net);
  const auto classes = default_classes(net);
  const OdMatrix od = split_demand(trips, {0.8, 0.2});

  ScenarioConfig half;
  half.demand_scale = {0.5, 0.5};
  const Scenario s = sample_scenario(net, od, classes, half, 3);
  CHECK(s.od.demand[0](0, 1) == doctest::Approx(0.5 * od.demand[0](0, 1)));
  CHECK(s.removed.empty());
  CHECK(s.classes[0].edge_mask == classes[0].edge_mask);

  // Moments of 10,000 factors: mean 1, variance 1/12.
  std::vector<double> xs;
  for (int i = 0; xs.size() < 10000; ++i) {
    const Scenario sc = sample_scenario(net, od, classes, ScenarioConfig{}, i);
    for (int a = 0; a < 24 && xs.size() < 10000; ++a)
      for (int b = 0; b < 24 && xs.size() < 10000; ++b)
        if (sc.demand_factors[0](a, b) > 0.0) xs.push_back(sc.demand_factors[0](a, b));
  }
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= xs.size() - 1;
  CHECK(std::abs(mean - 1.0) < 0.02 * 1.0 / std::sqrt(12.0) * 3);
  CHECK(var == doctest::Approx(1.0 / 12.0).epsilon(0.05));
  for (double x : xs) CHECK((x >= 0.5 && x < 1.5));

  // Removals stay connected and come from the removable subset.
  const auto pool = default_removable_links(net);
  for (int i = 0; i < 30; ++i) {
    const Scenario sc = sample_scenario(net, od, classes, preset("indist"), i);
    CHECK(sc.removed.size() >= 1);
    CHECK(sc.removed.size() <= 3);
    for (int e : sc.removed) CHECK(std::find(pool.begin(), pool.end(), e) != pool.end());
    for (std::size_t c = 0; c < classes.size(); ++c)
      CHECK(check_od_connectivity(net, sc.classes[c], sc.od.demand[c]).empty());
  }
  for (int i = 0; i < 10; ++i) CHECK(sample_scenario(net, od, classes, preset("ood-test"), i).removed.size() == 3);

  // Capacity variation across 5000 scenarios.
  double sum = 0.0, sq = 0.0, cnt = 0.0;
  for (int i = 0; i < 5000; ++i) {
    ScenarioConfig cfg;
    cfg.master_seed = 77;
    Scenario sc = sample_scenario(net, od, classes, cfg, i);
    for (int e = 0; e < net.num_links(); ++e) {
      const double c = sc.network.links()[e].capacity;
      sum += c;
      sq += c * c;
      cnt += 1;
    }
  }
  const double cm = sum / cnt;
  CHECK(std::sqrt(sq / cnt - cm * cm) / cm >= 0.05);
}

TEST_CASE("presets differ only in removal ranges") {
  const auto base = config_to_json(preset("base"));
  for (const char* name : {"indist", "ood-train", "ood-test"}) {
    auto j = config_to_json(preset(name));
    j["removed"] = base["removed"];
    CHECK(j == base);
  }
  CHECK(preset("ood-train").max_removed == 2);
  CHECK(preset("ood-test").min_removed == 3);
  CHECK_THROWS_AS(preset("nope"), DataError);
  CHECK(config_from_json(config_to_json(preset("indist"))).max_removed == 3);
}

TEST_CASE("sampling errors") {
  const RoadNetwork line(fixtures::nodes(3), {fixtures::bpr(0, 1, 1.0, 1.0), fixtures::bpr(1, 2, 1.0, 1.0)});
  std::vector<VehicleClass> cls{VehicleClass::full_access("car", 1.0, 2)};
  const OdMatrix od = fixtures::single_od(3, 0, 2, 1.0);
  ScenarioConfig cfg;
  cfg.min_removed = cfg.max_removed = 1;
  cfg.removable = {0, 1};
  cfg.max_retries = 5;
  CHECK_THROWS_WITH_AS(sample_scenario(line, od, cls, cfg, 0), doctest::Contains("(1,3)"), DataError);
  ScenarioConfig bad;
  bad.demand_scale = {2.0, 1.0};
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("generated records are exact, reproducible and order independent") {
  const RoadNetwork net = fixtures::sioux_falls();
  const OdMatrix od = split_demand(fixtures::sioux_falls_trips(net), {0.8, 0.2});
  const auto classes = default_classes(net);
  ScenarioConfig cfg = preset("indist");
  cfg.master_seed = 5;
  const GenerationResult a = generate_dataset(net, od, classes, cfg, 3, 2);
  REQUIRE(a.records.size() == 3);
  CHECK(a.skipped.empty());
  for (const auto& r : a.records) {
    CHECK(r.converged);
    const RoadNetwork rn = record_network(net, r);
    for (int c = 0; c < 2; ++c) {
      const double tol = 1e-6 * r.od.total(c);
      CHECK(conservation_residual(rn, r.flows.flow[c], r.od.demand[c]).cwiseAbs().maxCoeff() <= tol);
      for (int e : r.removed_links) CHECK(r.flows.flow[c][e] == 0.0);
      CHECK((r.ratios[c] - r.flows.ratio(c, classes[c].pce, rn.capacities())).isZero(0.0));
    }
  }
  const GenerationResult b = generate_dataset(net, od, classes, cfg, 1, 1, 2);
  CHECK(b.records[0] == a.records[2]);
  CHECK(generate_dataset(net, od, classes, cfg, 1, 1, 2).records[0] == b.records[0]);
}

TEST_CASE("splits") {
  const auto folds = kfold_split(10, 5, 1);
  std::vector<int> all;
  for (const auto& f : folds) {
    CHECK(f.size() == 2);
    all.insert(all.end(), f.begin(), f.end());
  }
  std::sort(all.begin(), all.end());
  std::vector<int> expect(10);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all == expect);
  CHECK(kfold_split(10, 5, 1) == folds);
  const auto odd = kfold_split(13, 5, 3);
  for (const auto& f : odd) CHECK((f.size() == 2 || f.size() == 3));
  CHECK_THROWS_AS(kfold_split(3, 5, 0), DataError);
  CHECK_THROWS_AS(kfold_split(10, 1, 0), DataError);

  const auto [tr, te] = train_test_split(5000, 0.8, 9);
  CHECK(tr.size() == 4000);
  CHECK(te.size() == 1000);
  CHECK(train_test_split(360, 300.0 / 360.0, 9).first.size() == 300);
}
