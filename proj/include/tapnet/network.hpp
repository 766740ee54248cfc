#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace tapnet {

/// Raised for malformed inputs (files, masks, OD references). Maps to CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node {
  int id = 0;  // external id as it appears in data files
  double x = 0.0;
  double y = 0.0;
};

struct Link {
  int tail = 0;  // internal node index
  int head = 0;
  double free_flow_time = 1.0;  // minutes
  double capacity = 1.0;        // PCE vehicles / hour
  double alpha = 0.15;
  double beta = 4.0;
};

/// Directed road graph. Links are addressed by their index in `links()`; that
/// index is the stable link id used by masks, datasets and model parameters.
class RoadNetwork {
 public:
  RoadNetwork() = default;
  RoadNetwork(std::vector<Node> nodes, std::vector<Link> links);

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Link>& links() const { return links_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  int num_links() const { return static_cast<int>(links_.size()); }

  /// Internal index of an external node id, or -1.
  int node_index(int id) const;
  /// Link index for (tail, head) internal indices, or -1.
  int find_link(int tail, int head) const;

  Eigen::VectorXd capacities() const;

  /// Copy with every link capacity multiplied by the matching factor.
  RoadNetwork with_capacity_factors(const Eigen::VectorXd& factors) const;

  /// Stable 64-bit fingerprint of topology and link attributes.
  std::uint64_t fingerprint() const;

 private:
  std::vector<Node> nodes_;
  std::vector<Link> links_;
  std::vector<int> id_lookup_;  // external id -> index (dense, -1 when absent)
};

struct VehicleClass {
  std::string name;
  double pce = 1.0;
  std::vector<bool> edge_mask;  // one flag per network link

  static VehicleClass full_access(std::string name, double pce, int num_links);
};

void validate_class(const RoadNetwork& net, const VehicleClass& cls);

/// Per-class origin-destination demand, dense |V| x |V|, class-native vehicles/hour.
struct OdMatrix {
  std::vector<Eigen::MatrixXd> demand;

  int num_classes() const { return static_cast<int>(demand.size()); }
  double total(int cls) const;
  double total() const;
};

void validate_od(const RoadNetwork& net, const OdMatrix& od);

/// Per-class link flows over all network links, class-native units.
struct ClassFlows {
  std::vector<Eigen::VectorXd> flow;

  int num_classes() const { return static_cast<int>(flow.size()); }

  /// pce_c * f^c_e / capacity_e
  Eigen::VectorXd ratio(int cls, double pce, const Eigen::VectorXd& capacity) const;
  /// Sum_c pce_c f^c_e
  Eigen::VectorXd effective(const std::vector<VehicleClass>& classes) const;

  static ClassFlows zeros(int num_classes, int num_links);
};

/// Edge ordering of one view: real links by (tail, head), then OD pairs by (origin, destination).
struct GraphView {
  std::vector<int> real_edges;                    // link ids
  std::vector<std::pair<int, int>> virtual_edges;  // (origin, destination) node indices
  Eigen::MatrixXd node_features;                  // |V| x (|V|+2): OD row, x, y
  Eigen::MatrixXd edge_features;                  // |real| x 2: free-flow time, capacity
};

struct MultiViewGraph {
  std::vector<GraphView> views;
};

MultiViewGraph build_views(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                           const OdMatrix& od);

/// Inflow - outflow - (attracted - produced demand) at every node for one class.
Eigen::VectorXd conservation_residual(const RoadNetwork& net, const Eigen::VectorXd& class_flow,
                                      const Eigen::MatrixXd& class_od);

Eigen::VectorXd net_demand(const Eigen::MatrixXd& class_od);

/// OD pairs with positive demand that have no directed path inside the class mask.
std::vector<std::pair<int, int>> check_od_connectivity(const RoadNetwork& net,
                                                       const VehicleClass& cls,
                                                       const Eigen::MatrixXd& class_od);

/// Links whose removal leaves every node with at least one incoming and one outgoing link.
std::vector<int> default_removable_links(const RoadNetwork& net);

/// Class with the given links disabled in its mask.
VehicleClass without_links(const VehicleClass& cls, const std::vector<int>& removed);

}  // namespace tapnet
