#include "tapnet/network.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <queue>
#include <sstream>

namespace tapnet {

RoadNetwork::RoadNetwork(std::vector<Node> nodes, std::vector<Link> links)
    : nodes_(std::move(nodes)), links_(std::move(links)) {
  if (nodes_.empty()) throw DataError("network has no nodes");
  if (links_.empty()) throw DataError("network has no links");
  int max_id = 0;
  for (const auto& n : nodes_) {
    if (n.id < 0) throw DataError("negative node id " + std::to_string(n.id));
    max_id = std::max(max_id, n.id);
  }
  id_lookup_.assign(max_id + 1, -1);
  for (int i = 0; i < num_nodes(); ++i) {
    if (id_lookup_[nodes_[i].id] != -1)
      throw DataError("duplicate node id " + std::to_string(nodes_[i].id));
    id_lookup_[nodes_[i].id] = i;
  }
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(links_.size());
  for (std::size_t e = 0; e < links_.size(); ++e) {
    const Link& l = links_[e];
    auto where = [&] { return "link " + std::to_string(e); };
    if (l.tail < 0 || l.tail >= num_nodes() || l.head < 0 || l.head >= num_nodes())
      throw DataError(where() + " references an unknown node");
    if (l.tail == l.head) throw DataError(where() + " is a self-loop");
    if (!(l.capacity > 0.0)) throw DataError(where() + " has non-positive capacity");
    if (!(l.free_flow_time > 0.0)) throw DataError(where() + " has non-positive free-flow time");
    if (l.alpha < 0.0 || l.beta < 0.0) throw DataError(where() + " has negative BPR coefficients");
    pairs.emplace_back(l.tail, l.head);
  }
  std::sort(pairs.begin(), pairs.end());
  if (std::adjacent_find(pairs.begin(), pairs.end()) != pairs.end())
    throw DataError("duplicate (tail, head) link");
}

int RoadNetwork::node_index(int id) const {
  if (id < 0 || id >= static_cast<int>(id_lookup_.size())) return -1;
  return id_lookup_[id];
}

int RoadNetwork::find_link(int tail, int head) const {
  for (int e = 0; e < num_links(); ++e)
    if (links_[e].tail == tail && links_[e].head == head) return e;
  return -1;
}

Eigen::VectorXd RoadNetwork::capacities() const {
  Eigen::VectorXd c(num_links());
  for (int e = 0; e < num_links(); ++e) c[e] = links_[e].capacity;
  return c;
}

RoadNetwork RoadNetwork::with_capacity_factors(const Eigen::VectorXd& factors) const {
  if (factors.size() != num_links()) throw DataError("capacity factor count mismatch");
  RoadNetwork out = *this;
  for (int e = 0; e < num_links(); ++e) {
    if (!(factors[e] > 0.0)) throw DataError("capacity factor must be positive");
    out.links_[e].capacity *= factors[e];
  }
  return out;
}

namespace {
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_mix(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}
}  // namespace

std::uint64_t RoadNetwork::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& n : nodes_) fnv_mix(h, &n.id, sizeof(n.id));
  for (const auto& l : links_) {
    const double vals[] = {l.free_flow_time, l.capacity, l.alpha, l.beta};
    fnv_mix(h, &l.tail, sizeof(l.tail));
    fnv_mix(h, &l.head, sizeof(l.head));
    fnv_mix(h, vals, sizeof(vals));
  }
  return h;
}

VehicleClass VehicleClass::full_access(std::string name, double pce, int num_links) {
  return VehicleClass{std::move(name), pce, std::vector<bool>(num_links, true)};
}

void validate_class(const RoadNetwork& net, const VehicleClass& cls) {
  if (!(cls.pce > 0.0)) throw DataError("class '" + cls.name + "' has non-positive PCE");
  if (static_cast<int>(cls.edge_mask.size()) != net.num_links())
    throw DataError("class '" + cls.name + "' mask size does not match link count");
  if (std::none_of(cls.edge_mask.begin(), cls.edge_mask.end(), [](bool b) { return b; }))
    throw DataError("class '" + cls.name + "' has an empty edge mask");
}

double OdMatrix::total(int cls) const { return demand.at(cls).sum(); }

double OdMatrix::total() const {
  double t = 0.0;
  for (const auto& d : demand) t += d.sum();
  return t;
}

void validate_od(const RoadNetwork& net, const OdMatrix& od) {
  const int n = net.num_nodes();
  for (int c = 0; c < od.num_classes(); ++c) {
    const auto& d = od.demand[c];
    if (d.rows() != n || d.cols() != n)
      throw DataError("OD matrix for class " + std::to_string(c) + " is not |V| x |V|");
    for (int r = 0; r < n; ++r) {
      if (d(r, r) != 0.0)
        throw DataError("OD entry with origin == destination at node " +
                        std::to_string(net.nodes()[r].id));
      for (int s = 0; s < n; ++s)
        if (!(d(r, s) >= 0.0))
          throw DataError("negative or non-finite demand (" + std::to_string(net.nodes()[r].id) +
                          ", " + std::to_string(net.nodes()[s].id) + ")");
    }
  }
}

Eigen::VectorXd ClassFlows::ratio(int cls, double pce, const Eigen::VectorXd& capacity) const {
  return (pce * flow.at(cls).array() / capacity.array()).matrix();
}

Eigen::VectorXd ClassFlows::effective(const std::vector<VehicleClass>& classes) const {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(flow.empty() ? 0 : flow[0].size());
  for (int c = 0; c < num_classes(); ++c) v += classes.at(c).pce * flow[c];
  return v;
}

ClassFlows ClassFlows::zeros(int num_classes, int num_links) {
  return ClassFlows{std::vector<Eigen::VectorXd>(num_classes, Eigen::VectorXd::Zero(num_links))};
}

MultiViewGraph build_views(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                           const OdMatrix& od) {
  if (od.num_classes() != static_cast<int>(classes.size()))
    throw DataError("OD class count does not match vehicle classes");
  const int n = net.num_nodes();
  for (int c = 0; c < od.num_classes(); ++c) {
    const auto& d = od.demand[c];
    if (d.rows() != n || d.cols() != n) {
      std::ostringstream os;
      os << "OD for class '" << classes[c].name << "' references node outside network: shape "
         << d.rows() << "x" << d.cols() << " vs " << n << " nodes";
      throw DataError(os.str());
    }
  }
  validate_od(net, od);
  for (const auto& cls : classes) validate_class(net, cls);

  // Coordinates min-max scaled to [0, 1] per axis.
  double xmin = net.nodes()[0].x, xmax = xmin, ymin = net.nodes()[0].y, ymax = ymin;
  for (const auto& nd : net.nodes()) {
    xmin = std::min(xmin, nd.x);
    xmax = std::max(xmax, nd.x);
    ymin = std::min(ymin, nd.y);
    ymax = std::max(ymax, nd.y);
  }
  auto scale = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; };

  std::vector<int> order(net.num_links());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& la = net.links()[a];
    const auto& lb = net.links()[b];
    return std::pair(la.tail, la.head) < std::pair(lb.tail, lb.head);
  });

  MultiViewGraph g;
  g.views.reserve(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    GraphView view;
    for (int e : order)
      if (classes[c].edge_mask[e]) view.real_edges.push_back(e);
    const auto& d = od.demand[c];
    for (int r = 0; r < n; ++r)
      for (int s = 0; s < n; ++s)
        if (d(r, s) > 0.0) view.virtual_edges.emplace_back(r, s);

    view.node_features.resize(n, n + 2);
    view.node_features.leftCols(n) = d;
    for (int u = 0; u < n; ++u) {
      view.node_features(u, n) = scale(net.nodes()[u].x, xmin, xmax);
      view.node_features(u, n + 1) = scale(net.nodes()[u].y, ymin, ymax);
    }
    view.edge_features.resize(static_cast<Eigen::Index>(view.real_edges.size()), 2);
    for (std::size_t i = 0; i < view.real_edges.size(); ++i) {
      const Link& l = net.links()[view.real_edges[i]];
      view.edge_features(static_cast<Eigen::Index>(i), 0) = l.free_flow_time;
      view.edge_features(static_cast<Eigen::Index>(i), 1) = l.capacity;
    }
    g.views.push_back(std::move(view));
  }
  return g;
}

Eigen::VectorXd net_demand(const Eigen::MatrixXd& class_od) {
  // attracted - produced
  return class_od.colwise().sum().transpose() - class_od.rowwise().sum();
}

Eigen::VectorXd conservation_residual(const RoadNetwork& net, const Eigen::VectorXd& class_flow,
                                      const Eigen::MatrixXd& class_od) {
  Eigen::VectorXd r = -net_demand(class_od);
  for (int e = 0; e < net.num_links(); ++e) {
    const Link& l = net.links()[e];
    r[l.head] += class_flow[e];
    r[l.tail] -= class_flow[e];
  }
  return r;
}

std::vector<std::pair<int, int>> check_od_connectivity(const RoadNetwork& net,
                                                       const VehicleClass& cls,
                                                       const Eigen::MatrixXd& class_od) {
  const int n = net.num_nodes();
  std::vector<std::vector<int>> out(n);
  for (int e = 0; e < net.num_links(); ++e)
    if (cls.edge_mask.at(e)) out[net.links()[e].tail].push_back(net.links()[e].head);

  std::vector<std::pair<int, int>> unreachable;
  std::vector<char> seen(n);
  std::queue<int> frontier;
  for (int r = 0; r < n; ++r) {
    if (!(class_od.row(r).array() > 0.0).any()) continue;
    std::fill(seen.begin(), seen.end(), 0);
    seen[r] = 1;
    frontier.push(r);
    while (!frontier.empty()) {
      const int u = frontier.front();
      frontier.pop();
      for (int v : out[u])
        if (!seen[v]) {
          seen[v] = 1;
          frontier.push(v);
        }
    }
    for (int s = 0; s < n; ++s)
      if (class_od(r, s) > 0.0 && !seen[s]) unreachable.emplace_back(r, s);
  }
  return unreachable;
}

std::vector<int> default_removable_links(const RoadNetwork& net) {
  std::vector<int> in_deg(net.num_nodes(), 0), out_deg(net.num_nodes(), 0);
  for (const auto& l : net.links()) {
    ++out_deg[l.tail];
    ++in_deg[l.head];
  }
  std::vector<int> removable;
  for (int e = 0; e < net.num_links(); ++e) {
    const Link& l = net.links()[e];
    if (out_deg[l.tail] > 1 && in_deg[l.head] > 1) removable.push_back(e);
  }
  return removable;
}

VehicleClass without_links(const VehicleClass& cls, const std::vector<int>& removed) {
  VehicleClass out = cls;
  for (int e : removed) out.edge_mask.at(e) = false;
  return out;
}

}  // namespace tapnet
