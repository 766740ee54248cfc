#pragma once

#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "tapnet/network.hpp"

namespace tapnet {

/// Parses a TNTP `_net.tntp` body plus an optional `_node.tntp` coordinate table.
/// Missing BPR columns fall back to alpha = 0.15, beta = 4.
RoadNetwork parse_network(std::string_view net_text, std::string_view coord_text = {});

/// Parses a TNTP `_trips.tntp` table into a dense single-class |V| x |V| matrix.
/// Intra-zonal entries are dropped after the aggregate check.
Eigen::MatrixXd parse_trips(std::string_view trips_text, const RoadNetwork& net);

std::string read_text_file(const std::string& path);

}  // namespace tapnet
