#pragma once

#include <string>
#include <vector>

#include "tapnet/network.hpp"
#include "tapnet/tntp.hpp"

namespace fixtures {

using namespace tapnet;

inline std::string data_path(const std::string& rel) { return std::string(TAPNET_DATA_DIR) + "/" + rel; }

inline Link bpr(int tail, int head, double t0, double cap, double alpha = 0.15, double beta = 4.0) {
  Link l;
  l.tail = tail;
  l.head = head;
  l.free_flow_time = t0;
  l.capacity = cap;
  l.alpha = alpha;
  l.beta = beta;
  return l;
}

inline std::vector<Node> nodes(int n) {
  std::vector<Node> out;
  for (int i = 0; i < n; ++i) out.push_back(Node{i + 1, static_cast<double>(i), static_cast<double>(i % 2)});
  return out;
}

/// Two routes 0 -> 1: direct link t1 = 10 (1 + v/100), and 0 -> 2 -> 1 with
/// t2 = 20 (1 + v/100) followed by a near-free constant link (parallel arcs on one
/// node pair are not representable).
inline RoadNetwork two_route(double tiny = 1e-9) {
  std::vector<Link> links{bpr(0, 1, 10.0, 100.0, 1.0, 1.0), bpr(0, 2, 20.0, 100.0, 1.0, 1.0),
                          bpr(2, 1, tiny, 1e12, 0.0, 1.0)};
  return RoadNetwork(nodes(3), links);
}

inline OdMatrix single_od(int n, int r, int s, double q, int classes = 1) {
  OdMatrix od;
  for (int c = 0; c < classes; ++c) od.demand.push_back(Eigen::MatrixXd::Zero(n, n));
  od.demand[0](r, s) = q;
  return od;
}

/// Braess diamond 0 -> {1, 2} -> 3 with the 1 -> 2 shortcut.
inline RoadNetwork braess() {
  std::vector<Link> links{bpr(0, 1, 1.0, 0.1, 1.0, 1.0),   bpr(1, 3, 50.0, 50.0, 1.0, 1.0),
                          bpr(0, 2, 50.0, 50.0, 1.0, 1.0), bpr(2, 3, 1.0, 0.1, 1.0, 1.0),
                          bpr(1, 2, 10.0, 10.0, 1.0, 1.0)};
  return RoadNetwork(nodes(4), links);
}

inline RoadNetwork sioux_falls() {
  return parse_network(read_text_file(data_path("SiouxFalls/SiouxFalls_net.tntp")),
                       read_text_file(data_path("SiouxFalls/SiouxFalls_node.tntp")));
}

inline Eigen::MatrixXd sioux_falls_trips(const RoadNetwork& net) {
  return parse_trips(read_text_file(data_path("SiouxFalls/SiouxFalls_trips.tntp")), net);
}

}  // namespace fixtures
