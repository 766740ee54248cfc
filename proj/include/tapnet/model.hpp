#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <json.hpp>

#include "tapnet/autodiff.hpp"
#include "tapnet/dataset.hpp"
#include "tapnet/network.hpp"

namespace tapnet {

enum class Variant { Full, NoLinkFeat, NoOdLink, NoIntraView, SingleHead, NoConservation };
enum class Baseline { None, GAT, GCN, GraphSAGE };

std::string to_string(Variant v);
std::string to_string(Baseline b);
Variant variant_from_string(const std::string& s);
Baseline baseline_from_string(const std::string& s);
const std::vector<std::string>& variant_names();

struct ModelConfig {
  int num_nodes = 0;
  int num_links = 0;  // base network links (adaptive real-edge scalars are indexed by link id)
  int num_classes = 0;
  int embed_dim = 32;
  int hidden_dim = 64;
  int layers = 4;
  int heads = 8;
  int decoder_hidden = 64;
  Variant variant = Variant::Full;
  Baseline baseline = Baseline::None;

  int effective_heads() const { return variant == Variant::SingleHead ? 1 : heads; }
  int head_dim() const { return hidden_dim / effective_heads(); }
  void validate() const;
};

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename Scalar>
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<ad::Matrix<Scalar>> values;

  int index(const std::string& name) const;
  const ad::Matrix<Scalar>& at(const std::string& name) const { return values[index(name)]; }
  ad::Matrix<Scalar>& at(const std::string& name) { return values[index(name)]; }
  void add(std::string name, ad::Matrix<Scalar> value);
  std::size_t size() const;  // total scalar count

 private:
  std::unordered_map<std::string, int> lookup_;
};

/// Xavier-uniform dense maps, zero biases, unit adaptive scalars and LayerNorm gains.
ModelParams<double> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// One class view prepared for the model (normalized features, index lists, constants).
struct ViewInput {
  Eigen::MatrixXd node_features;  // N x (N+2)
  Eigen::MatrixXd edge_features;  // E x 2
  std::vector<int> links;         // base link id of each real edge
  std::vector<int> real_tail, real_head;
  std::vector<int> virt_origin, virt_dest, virt_pair;  // pair = origin * N + dest
  ad::SegmentMap real_by_tail, virt_by_origin;
  Eigen::VectorXd flow_scale;  // capacity / pce per real edge
  Eigen::SparseMatrix<double> incidence;  // N x E: +1 at head, -1 at tail
  Eigen::VectorXd net_demand;  // attracted - produced per node
  double total_demand = 0.0;
};

struct ModelInput {
  int num_nodes = 0;
  std::vector<ViewInput> views;
};

/// Builds model inputs for one scenario. `classes` carry the scenario masks.
ModelInput prepare_input(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                         const OdMatrix& od, const Normalization& norm);

/// Per-edge targets aligned with each view's real-edge order.
struct Targets {
  std::vector<Eigen::VectorXd> ratio;
  std::vector<Eigen::VectorXd> flow;
};

Targets prepare_targets(const ModelInput& in, const DatasetRecord& rec);

template <typename Scalar>
struct ModelOutput {
  std::vector<ad::Var<Scalar>> ratio;  // per class, E_c x 1
  std::vector<ad::Var<Scalar>> flow;   // per class, E_c x 1
};

/// Named parameter leaves on one tape.
template <typename Scalar>
struct Bound {
  const ModelParams<Scalar>* params = nullptr;
  std::vector<ad::Var<Scalar>> vars;
  ad::Var<Scalar> operator[](const std::string& name) const { return vars[params->index(name)]; }
};

template <typename Scalar>
Bound<Scalar> bind(ad::Tape<Scalar>& tape, const ModelParams<Scalar>& params);

// Building blocks (exposed for tests).

template <typename Scalar>
ad::Var<Scalar> encode(const Bound<Scalar>& p, const ad::Var<Scalar>& features);

/// Virtual-then-real adaptive attention over outgoing neighbors for one view.
/// q, k, v: N x H*d. alpha: E_v x 1, beta: E_r x 1. Returns z: N x H*d.
template <typename Scalar>
ad::Var<Scalar> adaptive_attention(const ad::Var<Scalar>& q, const ad::Var<Scalar>& k,
                                   const ad::Var<Scalar>& v, const ViewInput& view,
                                   const ad::Var<Scalar>& alpha, const ad::Var<Scalar>& beta,
                                   int heads, bool use_virtual = true);

/// Intra-view z for class c at layer l.
template <typename Scalar>
ad::Var<Scalar> intra_view_layer(const Bound<Scalar>& p, int layer, int cls,
                                 const ad::Var<Scalar>& x, const ModelInput& in);

/// Inter-view z~ for every class at layer l from the C-way concatenation.
template <typename Scalar>
std::vector<ad::Var<Scalar>> inter_view_layer(const Bound<Scalar>& p, int layer,
                                              const std::vector<ad::Var<Scalar>>& xs,
                                              const ModelInput& in);

/// x^{l+1} = residual(x^l) + per-head LayerNorm(FFN(z) + FFN(z~)) with affine. z may be invalid
/// (no_intra_view).
template <typename Scalar>
ad::Var<Scalar> fuse(const Bound<Scalar>& p, int layer, const ad::Var<Scalar>& x,
                     const ad::Var<Scalar>& z, const ad::Var<Scalar>& zt);

/// Ratio predictions for one view from final embeddings.
template <typename Scalar>
ad::Var<Scalar> decode_edges(const Bound<Scalar>& p, const ad::Var<Scalar>& h, const ViewInput& view);

template <typename Scalar>
ModelOutput<Scalar> forward(ad::Tape<Scalar>& tape, const Bound<Scalar>& p, const ModelInput& in);

/// Plain-value prediction (no clamping).
Targets predict(const ModelParams<double>& params, const ModelInput& in);

// Checkpoints: JSON archive with config, normalization, metadata and an FNV-1a content hash.

struct Checkpoint {
  ModelParams<double> params;
  Normalization normalization;
  nlohmann::json meta = nlohmann::json::object();
};

std::string content_hash(const ModelParams<double>& params);
std::string checkpoint_to_string(const Checkpoint& ck);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tapnet
