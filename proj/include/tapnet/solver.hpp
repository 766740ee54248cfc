#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tapnet/network.hpp"

namespace tapnet {

enum class Objective { UE, SO };

std::string to_string(Objective obj);
Objective objective_from_string(const std::string& s);

/// Non-finite costs or flows during assignment.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// BPR link performance: t(v) = t0 * (1 + alpha * (v / cap)^beta).

template <typename Scalar>
Scalar bpr_time(const Link& l, Scalar v) {
  using std::pow;
  return l.free_flow_time * (Scalar(1) + l.alpha * pow(v / l.capacity, l.beta));
}

/// Integral of bpr_time from 0 to v.
template <typename Scalar>
Scalar beckmann_term(const Link& l, Scalar v) {
  using std::pow;
  return l.free_flow_time *
         (v + l.alpha * pow(v, l.beta + 1) / ((l.beta + 1) * pow(l.capacity, l.beta)));
}

/// d/dv [v t(v)] = t0 * (1 + alpha (beta + 1) (v / cap)^beta).
template <typename Scalar>
Scalar marginal_cost(const Link& l, Scalar v) {
  using std::pow;
  return l.free_flow_time * (Scalar(1) + l.alpha * (l.beta + 1) * pow(v / l.capacity, l.beta));
}

/// dt/dv, used by the path-based oracle.
double bpr_derivative(const Link& l, double v);

/// Per-link generalized cost: travel time for UE, marginal cost for SO.
Eigen::VectorXd link_costs(const RoadNetwork& net, const Eigen::VectorXd& effective_flow,
                           Objective obj);

/// Beckmann sum (UE) or total system travel time (SO).
double objective_value(const RoadNetwork& net, const Eigen::VectorXd& effective_flow,
                       Objective obj);

double total_travel_time(const RoadNetwork& net, const Eigen::VectorXd& effective_flow);

/// Outgoing links per node restricted to one class mask.
struct ForwardStar {
  std::vector<int> offset;  // size |V|+1
  std::vector<int> link;    // link ids grouped by tail

  ForwardStar(const RoadNetwork& net, const std::vector<bool>& mask);
};

struct ShortestPathTree {
  Eigen::VectorXd distance;    // +inf when unreachable
  std::vector<int> pred_link;  // -1 at the origin and for unreachable nodes
  std::vector<int> settle_order;

  bool reachable(int node) const { return std::isfinite(distance[node]); }
};

ShortestPathTree shortest_path_tree(const RoadNetwork& net, const ForwardStar& star,
                                    const Eigen::VectorXd& cost, int origin);
ShortestPathTree shortest_path_tree(const RoadNetwork& net, const std::vector<bool>& mask,
                                    const Eigen::VectorXd& cost, int origin);

/// Loads every class's demand onto its shortest paths under `costs[c]`.
/// Throws DataError naming class and pair when some demand cannot be routed.
ClassFlows all_or_nothing(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                          const std::vector<Eigen::VectorXd>& costs, const OdMatrix& od);

/// Exact step along current -> target by bisection on the directional derivative.
double line_search(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                   const ClassFlows& current, const ClassFlows& target, Objective obj,
                   double tolerance = 1e-8, int max_iterations = 60);

/// (sum_e v_e c_e - sum_c pce_c sum_rs q_rs,c SP_c(r,s)) / sum_e v_e c_e, with c the
/// objective's generalized cost at the given flows.
double relative_gap(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                    const ClassFlows& flows, const OdMatrix& od, Objective obj = Objective::UE);

struct SolveConfig {
  Objective objective = Objective::UE;
  double threshold = 1e-5;
  int max_iterations = 20000;
  double line_search_tolerance = 1e-8;
  int line_search_iterations = 60;
  /// Conjugate direction (mix of the previous target and the new AON loading,
  /// conjugate w.r.t. the diagonal Hessian). Off by default.
  bool conjugate = false;
};

struct SolveReport {
  ClassFlows flows;
  int iterations = 0;
  bool converged = false;
  double relative_gap = 0.0;
  std::vector<double> convergence_trace;  // ||v^k - v^{k-1}||_2 / sum_e v^k_e
  std::vector<double> gap_trace;          // relative gap at the iterate before each step
  std::vector<double> objective_trace;    // objective after each step
};

/// Multi-class Frank-Wolfe. Classes interact only through PCE-weighted link flow.
SolveReport solve(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                  const OdMatrix& od, const SolveConfig& config = {});

/// Path-enumeration equilibrium for tiny instances (<= 6 nodes, <= 10 paths per OD pair),
/// solved by scaled gradient projection on path flows. Test oracle for `solve`.
ClassFlows brute_force_ue(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                          const OdMatrix& od, Objective obj = Objective::UE);

}  // namespace tapnet
