#include <algorithm>
#include <limits>
#include <sstream>

#include "tapnet/solver.hpp"

namespace tapnet {
namespace {

constexpr int kMaxNodes = 6;
constexpr int kMaxPaths = 10;

using Path = std::vector<int>;  // link ids

double bpr_second_derivative(const Link& l, double v) {
  if (l.beta <= 1.0) return 0.0;
  return l.free_flow_time * l.alpha * l.beta * (l.beta - 1) * std::pow(v / l.capacity, l.beta - 2) /
         (l.capacity * l.capacity);
}

void enumerate(const RoadNetwork& net, const ForwardStar& star, int u, int dest,
               std::vector<char>& on_path, Path& current, std::vector<Path>& out) {
  if (u == dest) {
    out.push_back(current);
    if (static_cast<int>(out.size()) > kMaxPaths)
      throw DataError("path oracle: more than 10 paths for one OD pair");
    return;
  }
  for (int i = star.offset[u]; i < star.offset[u + 1]; ++i) {
    const int e = star.link[i];
    const int v = net.links()[e].head;
    if (on_path[v]) continue;
    on_path[v] = 1;
    current.push_back(e);
    enumerate(net, star, v, dest, on_path, current, out);
    current.pop_back();
    on_path[v] = 0;
  }
}

struct OdPaths {
  int cls;
  double demand;
  std::vector<Path> paths;
  std::vector<double> flow;
};

}  // namespace

ClassFlows brute_force_ue(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                          const OdMatrix& od, Objective obj) {
  if (net.num_nodes() > kMaxNodes) throw DataError("path oracle: instance exceeds 6 nodes");
  if (od.num_classes() != static_cast<int>(classes.size()))
    throw DataError("OD class count does not match vehicle classes");
  validate_od(net, od);

  std::vector<OdPaths> pairs;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const ForwardStar star(net, classes[c].edge_mask);
    for (int r = 0; r < net.num_nodes(); ++r)
      for (int s = 0; s < net.num_nodes(); ++s) {
        const double q = od.demand[c](r, s);
        if (!(q > 0.0)) continue;
        OdPaths p{static_cast<int>(c), q, {}, {}};
        std::vector<char> on_path(net.num_nodes(), 0);
        on_path[r] = 1;
        Path cur;
        enumerate(net, star, r, s, on_path, cur, p.paths);
        if (p.paths.empty()) {
          std::ostringstream os;
          os << "path oracle: no path for (" << r << ", " << s << ") in class " << c;
          throw DataError(os.str());
        }
        p.flow.assign(p.paths.size(), q / static_cast<double>(p.paths.size()));
        pairs.push_back(std::move(p));
      }
  }

  auto link_flows = [&] {
    ClassFlows f = ClassFlows::zeros(static_cast<int>(classes.size()), net.num_links());
    for (const auto& p : pairs)
      for (std::size_t k = 0; k < p.paths.size(); ++k)
        for (int e : p.paths[k]) f.flow[p.cls][e] += p.flow[k];
    return f;
  };

  // Scaled gradient projection: move flow from each path toward the current
  // cheapest path of its pair by a Newton-scaled amount, Gauss-Seidel over pairs.
  for (int iter = 0; iter < 200000; ++iter) {
    double worst = 0.0;
    for (auto& p : pairs) {
      const Eigen::VectorXd v = link_flows().effective(classes);
      const double pce = classes[p.cls].pce;
      std::vector<double> cost(p.paths.size(), 0.0);
      for (std::size_t k = 0; k < p.paths.size(); ++k)
        for (int e : p.paths[k]) {
          const Link& l = net.links()[e];
          cost[k] += obj == Objective::UE ? bpr_time(l, v[e]) : marginal_cost(l, v[e]);
        }
      const auto best = static_cast<std::size_t>(
          std::min_element(cost.begin(), cost.end()) - cost.begin());
      for (std::size_t k = 0; k < p.paths.size(); ++k) {
        if (k == best || p.flow[k] <= 0.0) continue;
        worst = std::max(worst, (cost[k] - cost[best]) / cost[best]);
        // Curvature over links on exactly one of the two paths.
        double h = 0.0;
        auto add = [&](const Path& a, const Path& b) {
          for (int e : a)
            if (std::find(b.begin(), b.end(), e) == b.end()) {
              const Link& l = net.links()[e];
              const double dt = bpr_derivative(l, v[e]);
              h += obj == Objective::UE ? dt : 2.0 * dt + v[e] * bpr_second_derivative(l, v[e]);
            }
        };
        add(p.paths[k], p.paths[best]);
        add(p.paths[best], p.paths[k]);
        h = std::max(h * pce, 1e-12);
        const double shift = std::min(p.flow[k], (cost[k] - cost[best]) / h);
        p.flow[k] -= shift;
        p.flow[best] += shift;
      }
    }
    if (worst < 1e-12) break;
  }
  return link_flows();
}

}  // namespace tapnet
