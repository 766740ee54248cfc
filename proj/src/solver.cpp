#include "tapnet/solver.hpp"

#include <algorithm>
#include <limits>
#include <queue>
#include <sstream>

namespace tapnet {

std::string to_string(Objective obj) { return obj == Objective::UE ? "UE" : "SO"; }

Objective objective_from_string(const std::string& s) {
  if (s == "UE" || s == "ue") return Objective::UE;
  if (s == "SO" || s == "so") return Objective::SO;
  throw DataError("unknown objective '" + s + "' (expected ue or so)");
}

double bpr_derivative(const Link& l, double v) {
  if (l.beta == 0.0) return 0.0;
  return l.free_flow_time * l.alpha * l.beta * std::pow(v / l.capacity, l.beta - 1) / l.capacity;
}

Eigen::VectorXd link_costs(const RoadNetwork& net, const Eigen::VectorXd& effective_flow,
                           Objective obj) {
  Eigen::VectorXd c(net.num_links());
  for (int e = 0; e < net.num_links(); ++e) {
    const Link& l = net.links()[e];
    c[e] = obj == Objective::UE ? bpr_time(l, effective_flow[e]) : marginal_cost(l, effective_flow[e]);
  }
  return c;
}

double objective_value(const RoadNetwork& net, const Eigen::VectorXd& effective_flow,
                       Objective obj) {
  if (obj == Objective::SO) return total_travel_time(net, effective_flow);
  double z = 0.0;
  for (int e = 0; e < net.num_links(); ++e) z += beckmann_term(net.links()[e], effective_flow[e]);
  return z;
}

double total_travel_time(const RoadNetwork& net, const Eigen::VectorXd& effective_flow) {
  double z = 0.0;
  for (int e = 0; e < net.num_links(); ++e)
    z += effective_flow[e] * bpr_time(net.links()[e], effective_flow[e]);
  return z;
}

ForwardStar::ForwardStar(const RoadNetwork& net, const std::vector<bool>& mask)
    : offset(net.num_nodes() + 1, 0) {
  for (int e = 0; e < net.num_links(); ++e)
    if (mask.at(e)) ++offset[net.links()[e].tail + 1];
  for (int u = 0; u < net.num_nodes(); ++u) offset[u + 1] += offset[u];
  link.resize(offset.back());
  std::vector<int> fill(offset.begin(), offset.end() - 1);
  for (int e = 0; e < net.num_links(); ++e)
    if (mask[e]) link[fill[net.links()[e].tail]++] = e;
}

ShortestPathTree shortest_path_tree(const RoadNetwork& net, const ForwardStar& star,
                                    const Eigen::VectorXd& cost, int origin) {
  const int n = net.num_nodes();
  ShortestPathTree tree;
  tree.distance = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  tree.pred_link.assign(n, -1);
  tree.settle_order.reserve(n);
  std::vector<char> settled(n, 0);

  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  tree.distance[origin] = 0.0;
  pq.emplace(0.0, origin);
  while (!pq.empty()) {
    auto [d, u] = pq.top();
    pq.pop();
    if (settled[u]) continue;
    settled[u] = 1;
    tree.settle_order.push_back(u);
    for (int i = star.offset[u]; i < star.offset[u + 1]; ++i) {
      const int e = star.link[i];
      const int v = net.links()[e].head;
      const double nd = d + cost[e];
      if (nd < tree.distance[v]) {
        tree.distance[v] = nd;
        tree.pred_link[v] = e;
        pq.emplace(nd, v);
      }
    }
  }
  return tree;
}

ShortestPathTree shortest_path_tree(const RoadNetwork& net, const std::vector<bool>& mask,
                                    const Eigen::VectorXd& cost, int origin) {
  return shortest_path_tree(net, ForwardStar(net, mask), cost, origin);
}

namespace {

void check_costs(const Eigen::VectorXd& cost) {
  if (!cost.allFinite()) throw NumericError("non-finite link cost");
}

/// Loads one class; returns sum_rs q_rs SP(r,s).
double load_class(const RoadNetwork& net, const ForwardStar& star, const VehicleClass& cls,
                  const Eigen::VectorXd& cost, const Eigen::MatrixXd& demand,
                  Eigen::VectorXd& flow) {
  const int n = net.num_nodes();
  flow.setZero(net.num_links());
  double shortest_total = 0.0;
  Eigen::VectorXd pending(n);
  for (int r = 0; r < n; ++r) {
    if (!(demand.row(r).array() > 0.0).any()) continue;
    const ShortestPathTree tree = shortest_path_tree(net, star, cost, r);
    pending = demand.row(r).transpose();
    for (int s = 0; s < n; ++s) {
      if (pending[s] > 0.0 && !tree.reachable(s)) {
        std::ostringstream os;
        os << "class '" << cls.name << "' cannot route demand (" << net.nodes()[r].id << ", "
           << net.nodes()[s].id << ")";
        throw DataError(os.str());
      }
      if (pending[s] > 0.0) shortest_total += pending[s] * tree.distance[s];
    }
    // Push demand toward the origin in reverse settle order.
    for (auto it = tree.settle_order.rbegin(); it != tree.settle_order.rend(); ++it) {
      const int v = *it;
      const int e = tree.pred_link[v];
      if (e < 0 || pending[v] == 0.0) continue;
      flow[e] += pending[v];
      pending[net.links()[e].tail] += pending[v];
    }
  }
  return shortest_total;
}

struct AonResult {
  ClassFlows flows;
  double shortest_cost = 0.0;  // sum_c pce_c sum_rs q SP
};

AonResult load_all(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                   const std::vector<ForwardStar>& stars, const Eigen::VectorXd& cost,
                   const OdMatrix& od) {
  AonResult res;
  res.flows = ClassFlows::zeros(static_cast<int>(classes.size()), net.num_links());
  for (std::size_t c = 0; c < classes.size(); ++c)
    res.shortest_cost += classes[c].pce * load_class(net, stars[c], classes[c], cost,
                                                     od.demand[c], res.flows.flow[c]);
  return res;
}

std::vector<ForwardStar> stars_for(const RoadNetwork& net, const std::vector<VehicleClass>& classes) {
  std::vector<ForwardStar> stars;
  stars.reserve(classes.size());
  for (const auto& cls : classes) stars.emplace_back(net, cls.edge_mask);
  return stars;
}

double directional_derivative(const RoadNetwork& net, const Eigen::VectorXd& v,
                              const Eigen::VectorXd& d, double lambda, Objective obj) {
  double g = 0.0;
  for (int e = 0; e < net.num_links(); ++e) {
    if (d[e] == 0.0) continue;
    const Link& l = net.links()[e];
    const double x = v[e] + lambda * d[e];
    g += (obj == Objective::UE ? bpr_time(l, x) : marginal_cost(l, x)) * d[e];
  }
  return g;
}

double bisect(const RoadNetwork& net, const Eigen::VectorXd& v, const Eigen::VectorXd& d,
              Objective obj, double tolerance, int max_iterations) {
  if (d.isZero(0.0)) return 0.0;
  if (directional_derivative(net, v, d, 0.0, obj) >= 0.0) return 0.0;
  if (directional_derivative(net, v, d, 1.0, obj) <= 0.0) return 1.0;
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < max_iterations && hi - lo > tolerance; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (directional_derivative(net, v, d, mid, obj) < 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

double hessian_diag(const Link& l, double v, Objective obj) {
  const double dt = bpr_derivative(l, v);
  if (obj == Objective::UE || l.beta <= 1.0) return obj == Objective::UE ? dt : 2.0 * dt;
  const double d2 = l.free_flow_time * l.alpha * l.beta * (l.beta - 1) *
                    std::pow(v / l.capacity, l.beta - 2) / (l.capacity * l.capacity);
  return 2.0 * dt + v * d2;
}

/// Weight on the previous target in the conjugate combination, in [0, 1 - 1e-2].
double conjugate_weight(const RoadNetwork& net, const Eigen::VectorXd& v,
                        const Eigen::VectorXd& prev_target, const Eigen::VectorXd& aon,
                        Objective obj) {
  double num = 0.0, den = 0.0;
  for (int e = 0; e < net.num_links(); ++e) {
    const double h = hessian_diag(net.links()[e], v[e], obj);
    const double dbar = prev_target[e] - v[e];
    const double d = aon[e] - v[e];
    num += dbar * h * d;
    den += dbar * h * (d - dbar);
  }
  if (den == 0.0 || !std::isfinite(num / den)) return 0.0;
  return std::clamp(num / den, 0.0, 1.0 - 1e-2);
}

}  // namespace

ClassFlows all_or_nothing(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                          const std::vector<Eigen::VectorXd>& costs, const OdMatrix& od) {
  if (costs.size() != classes.size() || od.num_classes() != static_cast<int>(classes.size()))
    throw DataError("class count mismatch in all_or_nothing");
  ClassFlows flows = ClassFlows::zeros(static_cast<int>(classes.size()), net.num_links());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    check_costs(costs[c]);
    load_class(net, ForwardStar(net, classes[c].edge_mask), classes[c], costs[c], od.demand[c],
               flows.flow[c]);
  }
  return flows;
}

double line_search(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                   const ClassFlows& current, const ClassFlows& target, Objective obj,
                   double tolerance, int max_iterations) {
  const Eigen::VectorXd v = current.effective(classes);
  const Eigen::VectorXd d = target.effective(classes) - v;
  return bisect(net, v, d, obj, tolerance, max_iterations);
}

double relative_gap(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                    const ClassFlows& flows, const OdMatrix& od, Objective obj) {
  const Eigen::VectorXd v = flows.effective(classes);
  const Eigen::VectorXd cost = link_costs(net, v, obj);
  check_costs(cost);
  const double current = v.dot(cost);
  if (current <= 0.0) return 0.0;
  const AonResult aon = load_all(net, classes, stars_for(net, classes), cost, od);
  return (current - aon.shortest_cost) / current;
}

SolveReport solve(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                  const OdMatrix& od, const SolveConfig& config) {
  if (!(config.threshold > 0.0)) throw DataError("convergence threshold must be positive");
  if (config.max_iterations < 1) throw DataError("max iterations must be at least 1");
  if (od.num_classes() != static_cast<int>(classes.size()))
    throw DataError("OD class count does not match vehicle classes");
  validate_od(net, od);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    validate_class(net, classes[c]);
    auto bad = check_od_connectivity(net, classes[c], od.demand[c]);
    if (!bad.empty()) {
      std::ostringstream os;
      os << "class '" << classes[c].name << "' has " << bad.size()
         << " unreachable OD pairs, first (" << net.nodes()[bad[0].first].id << ", "
         << net.nodes()[bad[0].second].id << ")";
      throw DataError(os.str());
    }
  }

  const auto stars = stars_for(net, classes);
  SolveReport report;
  Eigen::VectorXd cost = link_costs(net, Eigen::VectorXd::Zero(net.num_links()), config.objective);
  report.flows = load_all(net, classes, stars, cost, od).flows;
  Eigen::VectorXd v = report.flows.effective(classes);
  ClassFlows prev_target = report.flows;

  for (int k = 1; k <= config.max_iterations; ++k) {
    cost = link_costs(net, v, config.objective);
    check_costs(cost);
    const AonResult aon = load_all(net, classes, stars, cost, od);
    const double current = v.dot(cost);
    report.gap_trace.push_back(current > 0.0 ? (current - aon.shortest_cost) / current : 0.0);

    ClassFlows target = aon.flows;
    if (config.conjugate && k > 1) {
      const double a = conjugate_weight(net, v, prev_target.effective(classes),
                                        aon.flows.effective(classes), config.objective);
      for (std::size_t c = 0; c < classes.size(); ++c)
        target.flow[c] = a * prev_target.flow[c] + (1.0 - a) * aon.flows.flow[c];
    }
    const Eigen::VectorXd d = target.effective(classes) - v;
    const double lambda =
        bisect(net, v, d, config.objective, config.line_search_tolerance,
               config.line_search_iterations);
    for (std::size_t c = 0; c < classes.size(); ++c)
      report.flows.flow[c] += lambda * (target.flow[c] - report.flows.flow[c]);
    prev_target = std::move(target);
    const Eigen::VectorXd v_next = report.flows.effective(classes);
    if (!v_next.allFinite()) throw NumericError("non-finite flow in Frank-Wolfe iterate");

    const double total = v_next.sum();
    const double change = total > 0.0 ? (v_next - v).norm() / total : 0.0;
    v = v_next;
    report.convergence_trace.push_back(change);
    report.objective_trace.push_back(objective_value(net, v, config.objective));
    report.iterations = k;
    if (change < config.threshold) {
      report.converged = true;
      break;
    }
  }
  report.relative_gap = relative_gap(net, classes, report.flows, od, config.objective);
  return report;
}

}  // namespace tapnet
