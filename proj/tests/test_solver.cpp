#include <chrono>
#include <limits>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "tapnet/solver.hpp"

using namespace tapnet;
using fixtures::bpr;

namespace {

Eigen::VectorXd bellman_ford(const RoadNetwork& net, const Eigen::VectorXd& cost, int origin) {
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::VectorXd d = Eigen::VectorXd::Constant(net.num_nodes(), inf);
  d[origin] = 0.0;
  for (int it = 0; it < net.num_nodes(); ++it)
    for (int e = 0; e < net.num_links(); ++e) {
      const Link& l = net.links()[e];
      if (d[l.tail] + cost[e] < d[l.head]) d[l.head] = d[l.tail] + cost[e];
    }
  return d;
}

std::vector<VehicleClass> one_class(const RoadNetwork& net) {
  return {VehicleClass::full_access("car", 1.0, net.num_links())};
}

SolveConfig tight(Objective obj) {
  SolveConfig cfg;
  cfg.objective = obj;
  cfg.threshold = 1e-9;
  cfg.max_iterations = 200000;
  return cfg;
}

}  // namespace

TEST_CASE("BPR cost family") {
  const Link l = bpr(0, 1, 10.0, 100.0);
  CHECK(bpr_time(l, 0.0) == 10.0);
  CHECK(bpr_time(l, 100.0) == doctest::Approx(11.5));
  CHECK(bpr_time(l, 200.0) == doctest::Approx(34.0));
  CHECK(beckmann_term(l, 0.0) == 0.0);
  CHECK(beckmann_term(l, 100.0) == doctest::Approx(1030.0));
  CHECK(marginal_cost(l, 0.0) == 10.0);
  CHECK(marginal_cost(l, 100.0) == doctest::Approx(17.5));

  std::mt19937 rng(5);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Link r = bpr(0, 1, 5.0 * u(rng), 500.0 * u(rng), 0.15 * u(rng), 1.0 + 2.0 * u(rng));
    const double v = r.capacity * u(rng);
    const double h = 1e-5 * v;
    const double fd = (beckmann_term(r, v + h) - beckmann_term(r, v - h)) / (2 * h);
    CHECK(fd == doctest::Approx(bpr_time(r, v)).epsilon(1e-6));
    auto total = [&](double x) { return x * bpr_time(r, x); };
    CHECK((total(v + h) - total(v - h)) / (2 * h) == doctest::Approx(marginal_cost(r, v)).epsilon(1e-6));
    CHECK((bpr_time(r, v + h) - bpr_time(r, v - h)) / (2 * h) ==
          doctest::Approx(bpr_derivative(r, v)).epsilon(1e-6));
  }
}

TEST_CASE("shortest paths") {
  const RoadNetwork line(fixtures::nodes(3), {bpr(0, 1, 1.0, 1.0), bpr(1, 2, 1.0, 1.0)});
  Eigen::VectorXd c = Eigen::VectorXd::Ones(2);
  const auto t = shortest_path_tree(line, std::vector<bool>(2, true), c, 0);
  CHECK(t.distance[2] == 2.0);
  CHECK(!shortest_path_tree(line, std::vector<bool>(2, true), c, 2).reachable(0));

  const RoadNetwork par(fixtures::nodes(3), {bpr(0, 1, 1.0, 1.0), bpr(0, 2, 1.0, 1.0), bpr(2, 1, 1.0, 1.0)});
  Eigen::VectorXd pc(3);
  pc << 3.0, 1.0, 1.0;
  CHECK(shortest_path_tree(par, std::vector<bool>(3, true), pc, 0).pred_link[1] == 2);

  std::mt19937 rng(17);
  std::uniform_real_distribution<double> u(0.5, 10.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Link> links;
    for (int a = 0; a < 30; ++a)
      for (int b = 0; b < 30; ++b)
        if (a != b && rng() % 10 == 0) links.push_back(bpr(a, b, 1.0, 1.0));
    const RoadNetwork g(fixtures::nodes(30), links);
    Eigen::VectorXd cost(g.num_links());
    for (auto& x : cost) x = u(rng);
    const int origin = static_cast<int>(rng() % 30);
    const auto tree = shortest_path_tree(g, std::vector<bool>(g.num_links(), true), cost, origin);
    const Eigen::VectorXd oracle = bellman_ford(g, cost, origin);
    for (int v = 0; v < 30; ++v) {
      if (std::isinf(oracle[v])) {
        CHECK(!tree.reachable(v));
      } else {
        CHECK(tree.distance[v] == doctest::Approx(oracle[v]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("all or nothing") {
  const RoadNetwork net = fixtures::two_route();
  const auto classes = one_class(net);
  Eigen::VectorXd c(3);
  c << 5.0, 6.0, 1.0;
  const ClassFlows f = all_or_nothing(net, classes, {c}, fixtures::single_od(3, 0, 1, 10.0));
  CHECK(f.flow[0][0] == 10.0);
  CHECK(f.flow[0][1] == 0.0);
  const ClassFlows z = all_or_nothing(net, classes, {c}, fixtures::single_od(3, 0, 1, 0.0));
  CHECK(z.flow[0].isZero(0.0));

  auto blocked = classes;
  blocked[0].edge_mask = {false, true, false};
  CHECK_THROWS_WITH_AS(all_or_nothing(net, blocked, {c}, fixtures::single_od(3, 0, 1, 1.0)),
                       doctest::Contains("car"), DataError);

  const RoadNetwork sf = fixtures::sioux_falls();
  const Eigen::MatrixXd trips = fixtures::sioux_falls_trips(sf);
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(1.0, 10.0);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::VectorXd cost(sf.num_links());
    for (auto& x : cost) x = u(rng);
    const ClassFlows a = all_or_nothing(sf, one_class(sf), {cost}, OdMatrix{{trips}});
    CHECK(conservation_residual(sf, a.flow[0], trips).cwiseAbs().maxCoeff() < 1e-9 * trips.sum());
  }
}

TEST_CASE("line search on the two-route instance") {
  const RoadNetwork net = fixtures::two_route(1e-12);
  const auto classes = one_class(net);
  ClassFlows cur = ClassFlows::zeros(1, 3), tgt = ClassFlows::zeros(1, 3);
  cur.flow[0] << 150.0, 0.0, 0.0;
  tgt.flow[0] << 0.0, 150.0, 150.0;
  // phi'(l) = -150 * 10 (1 + 1.5 (1 - l)) + 150 * 20 (1 + 1.5 l) = 0  =>  l = 1/9
  const double lambda = line_search(net, classes, cur, tgt, Objective::UE);
  CHECK(lambda == doctest::Approx(1.0 / 9.0).epsilon(1e-6));
  // SO: -10 (1 + 3 (1 - l)) + 20 (1 + 3 l) = 0  =>  l = 20 / 90
  CHECK(line_search(net, classes, cur, tgt, Objective::SO) == doctest::Approx(2.0 / 9.0).epsilon(1e-6));
  CHECK(line_search(net, classes, cur, cur, Objective::UE) == 0.0);

  // Directional derivative vanishes at an interior step.
  const Eigen::VectorXd v = cur.flow[0] + lambda * (tgt.flow[0] - cur.flow[0]);
  const Eigen::VectorXd d = tgt.flow[0] - cur.flow[0];
  double g = 0.0;
  for (int e = 0; e < 3; ++e) g += bpr_time(net.links()[e], v[e]) * d[e];
  CHECK(std::abs(g) < 1e-4);

  // Target better at both ends -> full step.
  ClassFlows light = cur;
  light.flow[0] << 1.0, 0.0, 0.0;
  ClassFlows lt = tgt;
  lt.flow[0] << 0.0, 1.0, 1.0;
  CHECK(line_search(net, classes, lt, light, Objective::UE) == 1.0);
}

TEST_CASE("two-route closed forms") {
  const RoadNetwork net = fixtures::two_route(1e-12);
  const auto classes = one_class(net);
  // Wardrop: 10 (1 + x/100) = 20 (1 + (q - x)/100); marginal: 10 (1 + 2x/100) = 20 (1 + 2(q - x)/100).
  const double q = 150.0;
  const double ue = (20.0 + 0.2 * q - 10.0) / 0.3;
  const double so = (20.0 + 0.4 * q - 10.0) / 0.6;

  const auto t0 = std::chrono::steady_clock::now();
  const SolveReport rue = solve(net, classes, fixtures::single_od(3, 0, 1, q), tight(Objective::UE));
  const SolveReport rso = solve(net, classes, fixtures::single_od(3, 0, 1, q), tight(Objective::SO));
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
  CHECK(rue.flows.flow[0][0] == doctest::Approx(ue).epsilon(1e-6));
  CHECK(rue.flows.flow[0][1] == doctest::Approx(q - ue).epsilon(1e-6));
  CHECK(bpr_time(net.links()[0], rue.flows.flow[0][0]) == doctest::Approx(70.0 / 3.0).epsilon(1e-6));
  CHECK(rso.flows.flow[0][0] == doctest::Approx(so).epsilon(1e-6));

  const ClassFlows bue = brute_force_ue(net, classes, fixtures::single_od(3, 0, 1, q), Objective::UE);
  const ClassFlows bso = brute_force_ue(net, classes, fixtures::single_od(3, 0, 1, q), Objective::SO);
  CHECK(bue.flow[0][0] == doctest::Approx(ue).epsilon(1e-8));
  CHECK(bso.flow[0][0] == doctest::Approx(so).epsilon(1e-8));

  // Corner solution: demand 30 stays on link 1 since t1(30) = 13 < t2(0) = 20.
  const SolveReport corner = solve(net, classes, fixtures::single_od(3, 0, 1, 30.0), tight(Objective::UE));
  CHECK(corner.flows.flow[0][0] == doctest::Approx(30.0));
  CHECK(corner.flows.flow[0][1] == doctest::Approx(0.0));
  CHECK(brute_force_ue(net, classes, fixtures::single_od(3, 0, 1, 30.0)).flow[0][1] == doctest::Approx(0.0));
}

TEST_CASE("Braess diamond uses all three paths") {
  const RoadNetwork net = fixtures::braess();
  const auto classes = one_class(net);
  const OdMatrix od = fixtures::single_od(4, 0, 3, 6.0);
  // Symmetric equilibrium a = f(0-1-3) = f(0-2-3), c = f(0-1-2-3):
  //   51 + 11a + 10c = 12 + 20a + 21c,  2a + c = 6
  Eigen::Matrix2d m;
  m << 9.0, 11.0, 2.0, 1.0;
  const Eigen::Vector2d sol = m.fullPivLu().solve(Eigen::Vector2d(39.0, 6.0));
  const double a = sol[0], c = sol[1];
  const ClassFlows oracle = brute_force_ue(net, classes, od);
  CHECK(oracle.flow[0][1] == doctest::Approx(a).epsilon(1e-9));
  CHECK(oracle.flow[0][4] == doctest::Approx(c).epsilon(1e-9));
  CHECK(c > 0.0);
  const double time = 51.0 + 11.0 * a + 10.0 * c;
  const Eigen::VectorXd t = link_costs(net, oracle.flow[0], Objective::UE);
  CHECK(t[0] + t[1] == doctest::Approx(time));
  CHECK(t[2] + t[3] == doctest::Approx(time));
  CHECK(t[0] + t[4] + t[3] == doctest::Approx(time));

  const SolveReport fw = solve(net, classes, od, tight(Objective::UE));
  for (int e = 0; e < net.num_links(); ++e) CHECK(std::abs(fw.flows.flow[0][e] - oracle.flow[0][e]) < 1e-4);
  CHECK(brute_force_ue(net, classes, fixtures::single_od(4, 0, 3, 0.0)).flow[0].isZero(0.0));
}

TEST_CASE("multi-class solve matches path oracle") {
  // 5 nodes, trucks barred from the fast link 1 -> 4.
  std::vector<Link> links{bpr(0, 1, 4.0, 20.0), bpr(0, 2, 6.0, 30.0), bpr(1, 2, 2.0, 10.0),
                          bpr(1, 3, 5.0, 25.0), bpr(2, 3, 4.0, 20.0), bpr(3, 4, 3.0, 40.0),
                          bpr(2, 4, 9.0, 30.0), bpr(1, 4, 7.0, 15.0)};
  const RoadNetwork net(fixtures::nodes(5), links);
  std::vector<VehicleClass> classes{VehicleClass::full_access("car", 1.0, 8),
                                    VehicleClass::full_access("truck", 1.9, 8)};
  classes[1].edge_mask[7] = false;
  OdMatrix od{{Eigen::MatrixXd::Zero(5, 5), Eigen::MatrixXd::Zero(5, 5)}};
  od.demand[0](0, 4) = 40.0;
  od.demand[0](1, 3) = 10.0;
  od.demand[1](0, 4) = 12.0;
  od.demand[1](2, 4) = 5.0;
  for (Objective obj : {Objective::UE, Objective::SO}) {
    const ClassFlows oracle = brute_force_ue(net, classes, od, obj);
    SolveConfig cfg = tight(obj);
    cfg.conjugate = true;
    const SolveReport fw = solve(net, classes, od, cfg);
    // Plain Frank-Wolfe tails off on the link left unused at equilibrium.
    SolveConfig plain = tight(obj);
    plain.max_iterations = 20000;
    const SolveReport pf = solve(net, classes, od, plain);
    CHECK((oracle.effective(classes) - pf.flows.effective(classes)).cwiseAbs().maxCoeff() < 0.1);
    CHECK(pf.relative_gap < 1e-3);
    // Per-class split is not unique when classes share paths; the aggregate flow is.
    const Eigen::VectorXd vo = oracle.effective(classes), vf = fw.flows.effective(classes);
    CHECK((vo - vf).cwiseAbs().maxCoeff() < 1e-4);
    CHECK(fw.flows.flow[1][7] == 0.0);
    for (int c = 0; c < 2; ++c)
      CHECK(conservation_residual(net, fw.flows.flow[c], od.demand[c]).cwiseAbs().maxCoeff() <
            1e-9 * od.total(c));
  }
  auto over = [&] {
    std::vector<Link> dense;
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b)
        if (a != b) dense.push_back(bpr(a, b, 1.0, 1.0));
    const RoadNetwork k6(fixtures::nodes(6), dense);
    return brute_force_ue(k6, one_class(k6), fixtures::single_od(6, 0, 5, 1.0));
  };
  CHECK_THROWS_AS(over(), DataError);
}

TEST_CASE("PCE coupling vanishes without truck demand") {
  const RoadNetwork sf = fixtures::sioux_falls();
  const Eigen::MatrixXd trips = fixtures::sioux_falls_trips(sf);
  std::vector<VehicleClass> classes{VehicleClass::full_access("car", 1.0, sf.num_links()),
                                    VehicleClass::full_access("truck", 1.9, sf.num_links())};
  OdMatrix od{{0.5 * trips, Eigen::MatrixXd::Zero(24, 24)}};
  SolveConfig cfg;
  cfg.max_iterations = 300;
  const SolveReport a = solve(sf, classes, od, cfg);
  classes[1].pce = 3.8;
  const SolveReport b = solve(sf, classes, od, cfg);
  CHECK(a.flows.flow[0] == b.flows.flow[0]);
}

TEST_CASE("Sioux Falls UE and SO") {
  const RoadNetwork sf = fixtures::sioux_falls();
  const Eigen::MatrixXd trips = fixtures::sioux_falls_trips(sf);
  const auto classes = one_class(sf);
  const OdMatrix od{{trips}};
  const SolveReport ue = solve(sf, classes, od, {});
  CHECK(ue.converged);
  CHECK(ue.relative_gap <= 1e-3);
  CHECK(ue.relative_gap >= -1e-12);
  for (std::size_t k = 1; k < ue.objective_trace.size(); ++k)
    CHECK(ue.objective_trace[k] <= ue.objective_trace[k - 1] * (1 + 1e-12));
  for (double x : ue.convergence_trace) CHECK(x >= 0.0);
  CHECK(conservation_residual(sf, ue.flows.flow[0], trips).cwiseAbs().maxCoeff() <= 1e-6 * trips.sum());

  SolveConfig so_cfg;
  so_cfg.objective = Objective::SO;
  const SolveReport so = solve(sf, classes, od, so_cfg);
  CHECK(total_travel_time(sf, so.flows.flow[0]) <= total_travel_time(sf, ue.flows.flow[0]));

  // Mixing in an AON loading at random costs moves away from equilibrium.
  std::mt19937 rng(8);
  std::uniform_real_distribution<double> u(1.0, 20.0);
  Eigen::VectorXd rc(sf.num_links());
  for (auto& x : rc) x = u(rng);
  ClassFlows mixed = ue.flows;
  mixed.flow[0] = 0.9 * ue.flows.flow[0] + 0.1 * all_or_nothing(sf, classes, {rc}, od).flow[0];
  CHECK(relative_gap(sf, classes, mixed, od) > relative_gap(sf, classes, ue.flows, od));

  SolveConfig one;
  one.max_iterations = 1;
  CHECK(!solve(sf, classes, od, one).converged);
}

TEST_CASE("AON loading on a single-path instance has zero gap") {
  const RoadNetwork line(fixtures::nodes(3), {bpr(0, 1, 1.0, 10.0), bpr(1, 2, 2.0, 10.0)});
  const auto classes = one_class(line);
  const OdMatrix od = fixtures::single_od(3, 0, 2, 7.0);
  const SolveReport r = solve(line, classes, od, {});
  CHECK(std::abs(r.relative_gap) < 1e-12);
}

TEST_CASE("solve input errors") {
  const RoadNetwork net = fixtures::two_route();
  auto classes = one_class(net);
  classes[0].edge_mask = {false, false, true};
  CHECK_THROWS_AS(solve(net, classes, fixtures::single_od(3, 0, 1, 1.0), {}), DataError);
  SolveConfig bad;
  bad.threshold = 0.0;
  CHECK_THROWS_AS(solve(net, one_class(net), fixtures::single_od(3, 0, 1, 1.0), bad), DataError);
}
