#include "tapnet/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "tapnet/scenario.hpp"
#include "tapnet/tntp.hpp"

namespace tapnet {

using nlohmann::json;
using ad::Var;

namespace {

const std::vector<std::pair<Variant, std::string>> kVariants{
    {Variant::Full, "full"},
    {Variant::NoLinkFeat, "no_link_feat"},
    {Variant::NoOdLink, "no_od_link"},
    {Variant::NoIntraView, "no_intra_view"},
    {Variant::SingleHead, "single_head"},
    {Variant::NoConservation, "no_conservation"}};

const std::vector<std::pair<Baseline, std::string>> kBaselines{
    {Baseline::None, "none"}, {Baseline::GAT, "gat"}, {Baseline::GCN, "gcn"}, {Baseline::GraphSAGE, "graphsage"}};

std::string layer_key(int layer, const char* name) { return "L" + std::to_string(layer) + "." + name; }
std::string class_key(const char* name, int c) { return std::string(name) + ".c" + std::to_string(c); }

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [k, s] : kVariants)
    if (k == v) return s;
  return "?";
}

std::string to_string(Baseline b) {
  for (const auto& [k, s] : kBaselines)
    if (k == b) return s;
  return "?";
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [k, s] : kVariants) out.push_back(s);
    return out;
  }();
  return names;
}

Variant variant_from_string(const std::string& s) {
  for (const auto& [k, name] : kVariants)
    if (name == s) return k;
  std::string all;
  for (const auto& n : variant_names()) all += (all.empty() ? "" : ", ") + n;
  throw DataError("unknown variant '" + s + "' (valid: " + all + ")");
}

Baseline baseline_from_string(const std::string& s) {
  for (const auto& [k, name] : kBaselines)
    if (name == s) return k;
  throw DataError("unknown baseline '" + s + "' (valid: none, gat, gcn, graphsage)");
}

void ModelConfig::validate() const {
  if (num_nodes < 1 || num_links < 1 || num_classes < 1)
    throw DataError("model config needs positive node, link and class counts");
  if (embed_dim < 1 || hidden_dim < 1 || decoder_hidden < 1 || layers < 1 || heads < 1)
    throw DataError("model dimensions and layer count must be positive");
  if (hidden_dim % effective_heads() != 0) throw DataError("hidden dim must be divisible by heads");
  if (baseline != Baseline::None && variant != Variant::Full && variant != Variant::NoConservation)
    throw DataError("variant '" + to_string(variant) + "' cannot be combined with baseline '" +
                    to_string(baseline) + "'");
}

json config_to_json(const ModelConfig& c) {
  return json{{"num_nodes", c.num_nodes},   {"num_links", c.num_links},   {"num_classes", c.num_classes},
              {"embed_dim", c.embed_dim},   {"hidden_dim", c.hidden_dim}, {"layers", c.layers},
              {"heads", c.heads},           {"decoder_hidden", c.decoder_hidden},
              {"variant", to_string(c.variant)}, {"baseline", to_string(c.baseline)}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.num_nodes = j.at("num_nodes").get<int>();
    c.num_links = j.at("num_links").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.decoder_hidden = j.at("decoder_hidden").get<int>();
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.baseline = baseline_from_string(j.at("baseline").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename Scalar>
int ModelParams<Scalar>::index(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw DataError("model has no parameter '" + name + "'");
  return it->second;
}

template <typename Scalar>
void ModelParams<Scalar>::add(std::string name, ad::Matrix<Scalar> value) {
  if (lookup_.count(name)) throw DataError("duplicate parameter '" + name + "'");
  lookup_[name] = static_cast<int>(names.size());
  names.push_back(std::move(name));
  values.push_back(std::move(value));
}

template <typename Scalar>
std::size_t ModelParams<Scalar>::size() const {
  std::size_t n = 0;
  for (const auto& v : values) n += static_cast<std::size_t>(v.size());
  return n;
}

template struct ModelParams<double>;

ModelParams<double> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0x1417));
  auto xavier = [&](int rows, int cols, int fan_in, int fan_out) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
    return m;
  };
  auto dense = [&](int rows, int cols) { return xavier(rows, cols, rows, cols); };
  auto zeros = [](int rows, int cols) { return Eigen::MatrixXd::Zero(rows, cols).eval(); };

  ModelParams<double> p;
  p.config = cfg;
  const int F = cfg.num_nodes + 2, E = cfg.embed_dim, D = cfg.hidden_dim;
  const int H = cfg.effective_heads(), d = cfg.head_dim(), C = cfg.num_classes;

  p.add("enc.w0", dense(F, E));
  p.add("enc.b0", zeros(1, E));
  p.add("enc.w1", dense(E, E));
  p.add("enc.b1", zeros(1, E));
  p.add("enc.w2", dense(E, E));
  p.add("enc.b2", zeros(1, E));

  for (int l = 0; l < cfg.layers; ++l) {
    const int din = l == 0 ? E : D;
    if (cfg.baseline == Baseline::None) {
      if (cfg.variant != Variant::NoIntraView) {
        p.add(layer_key(l, "wq"), dense(din, D));
        p.add(layer_key(l, "wk"), dense(din, D));
        p.add(layer_key(l, "wv"), dense(din, D));
        p.add(layer_key(l, "wz"), xavier(d, D, d, d));
        p.add(layer_key(l, "bz"), zeros(1, D));
      }
      p.add(layer_key(l, "tq"), dense(C * din, D));
      p.add(layer_key(l, "tk"), dense(C * din, D));
      p.add(layer_key(l, "tv"), dense(C * din, D));
      p.add(layer_key(l, "wzt"), xavier(d, D, d, d));
      p.add(layer_key(l, "bzt"), zeros(1, D));
      p.add(layer_key(l, "ln_g"), Eigen::MatrixXd::Ones(1, D));
      p.add(layer_key(l, "ln_b"), zeros(1, D));
      if (din != D) p.add(layer_key(l, "res"), dense(din, D));
    } else if (cfg.baseline == Baseline::GAT) {
      p.add(layer_key(l, "w"), dense(din, D));
      p.add(layer_key(l, "al"), xavier(d, H, 2 * d, 1));
      p.add(layer_key(l, "ar"), xavier(d, H, 2 * d, 1));
      p.add(layer_key(l, "b"), zeros(1, D));
    } else if (cfg.baseline == Baseline::GCN) {
      p.add(layer_key(l, "w"), dense(din, D));
      p.add(layer_key(l, "b"), zeros(1, D));
    } else {
      p.add(layer_key(l, "w"), dense(2 * din, D));
      p.add(layer_key(l, "b"), zeros(1, D));
    }
  }
  if (cfg.baseline == Baseline::None)
    for (int c = 0; c < C; ++c) {
      p.add(class_key("alpha", c), Eigen::MatrixXd::Ones(cfg.num_nodes * cfg.num_nodes, 1));
      p.add(class_key("beta", c), Eigen::MatrixXd::Ones(cfg.num_links, 1));
    }

  const int Dh = cfg.decoder_hidden;
  p.add("dec.w0", dense(2 * D + 2, Dh));
  p.add("dec.b0", zeros(1, Dh));
  p.add("dec.w1", dense(Dh, Dh));
  p.add("dec.b1", zeros(1, Dh));
  p.add("dec.w2", dense(Dh, 1));
  p.add("dec.b2", zeros(1, 1));
  return p;
}

ModelInput prepare_input(const RoadNetwork& net, const std::vector<VehicleClass>& classes,
                         const OdMatrix& od, const Normalization& norm) {
  const MultiViewGraph g = build_views(net, classes, od);
  const int n = net.num_nodes();
  ModelInput in;
  in.num_nodes = n;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const GraphView& gv = g.views[c];
    ViewInput v;
    v.node_features = gv.node_features;
    v.node_features.leftCols(n) /= norm.demand_scale;
    v.edge_features = gv.edge_features;
    for (Eigen::Index r = 0; r < v.edge_features.rows(); ++r)
      for (int k = 0; k < 2; ++k)
        v.edge_features(r, k) = (v.edge_features(r, k) - norm.edge_mean[k]) / norm.edge_std[k];
    v.links = gv.real_edges;
    const int E = static_cast<int>(v.links.size());
    v.flow_scale.resize(E);
    std::vector<Eigen::Triplet<double>> trip;
    for (int i = 0; i < E; ++i) {
      const Link& l = net.links()[v.links[i]];
      v.real_tail.push_back(l.tail);
      v.real_head.push_back(l.head);
      v.flow_scale[i] = l.capacity / classes[c].pce;
      trip.emplace_back(l.head, i, 1.0);
      trip.emplace_back(l.tail, i, -1.0);
    }
    v.incidence.resize(n, E);
    v.incidence.setFromTriplets(trip.begin(), trip.end());
    for (const auto& [r, s] : gv.virtual_edges) {
      v.virt_origin.push_back(r);
      v.virt_dest.push_back(s);
      v.virt_pair.push_back(r * n + s);
    }
    v.real_by_tail = ad::SegmentMap::from_keys(v.real_tail, n);
    v.virt_by_origin = ad::SegmentMap::from_keys(v.virt_origin, n);
    v.net_demand = net_demand(od.demand[c]);
    v.total_demand = od.total(static_cast<int>(c));
    in.views.push_back(std::move(v));
  }
  return in;
}

Targets prepare_targets(const ModelInput& in, const DatasetRecord& rec) {
  Targets t;
  for (std::size_t c = 0; c < in.views.size(); ++c) {
    const auto& links = in.views[c].links;
    Eigen::VectorXd r(links.size()), f(links.size());
    for (std::size_t i = 0; i < links.size(); ++i) {
      r[static_cast<Eigen::Index>(i)] = rec.ratios.at(c)[links[i]];
      f[static_cast<Eigen::Index>(i)] = rec.flows.flow.at(c)[links[i]];
    }
    t.ratio.push_back(std::move(r));
    t.flow.push_back(std::move(f));
  }
  return t;
}

template <typename Scalar>
Bound<Scalar> bind(ad::Tape<Scalar>& tape, const ModelParams<Scalar>& params) {
  Bound<Scalar> b;
  b.params = &params;
  for (const auto& v : params.values) b.vars.push_back(tape.parameter(v));
  return b;
}

namespace {

template <typename Scalar>
Var<Scalar> constant(ad::Tape<Scalar>& t, const Eigen::MatrixXd& m) {
  return t.constant(m.template cast<Scalar>());
}

template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

/// Edge list with self loops added, aggregated by source node.
struct LoopEdges {
  std::vector<int> src, dst;
  ad::SegmentMap seg;
};

LoopEdges with_self_loops(const ViewInput& v, int n) {
  LoopEdges e{v.real_tail, v.real_head, {}};
  for (int u = 0; u < n; ++u) {
    e.src.push_back(u);
    e.dst.push_back(u);
  }
  e.seg = ad::SegmentMap::from_keys(e.src, n);
  return e;
}

template <typename Scalar>
Var<Scalar> baseline_layer(const Bound<Scalar>& p, int l, const Var<Scalar>& h, const ViewInput& view,
                           int n) {
  const ModelConfig& cfg = p.params->config;
  auto* t = h.tape();
  const Var<Scalar> w = p[layer_key(l, "w")], b = p[layer_key(l, "b")];
  if (cfg.baseline == Baseline::GAT) {
    const int H = cfg.effective_heads();
    const LoopEdges e = with_self_loops(view, n);
    const Var<Scalar> wx = ad::matmul(h, w);
    const Var<Scalar> sl = ad::head_linear(wx, p[layer_key(l, "al")], H);
    const Var<Scalar> sr = ad::head_linear(wx, p[layer_key(l, "ar")], H);
    const Var<Scalar> logit =
        ad::leaky_relu(ad::add(ad::row_gather(sl, e.src), ad::row_gather(sr, e.dst)), Scalar(0.2));
    const Var<Scalar> weight = ad::exp(ad::clamp(logit, Scalar(-30), Scalar(30)));
    const Var<Scalar> agg = ad::segment_weighted_mean(ad::row_gather(wx, e.dst), weight, e.seg, wx, H);
    return ad::relu(ad::add_row(agg, b));
  }
  if (cfg.baseline == Baseline::GCN) {
    const LoopEdges e = with_self_loops(view, n);
    const Var<Scalar> ones = t->constant(ad::Matrix<Scalar>::Ones(static_cast<Eigen::Index>(e.src.size()), 1));
    const Var<Scalar> agg = ad::segment_weighted_mean(ad::row_gather(h, e.dst), ones, e.seg, h);
    return ad::relu(affine(agg, w, b));
  }
  const Var<Scalar> ones =
      t->constant(ad::Matrix<Scalar>::Ones(static_cast<Eigen::Index>(view.real_tail.size()), 1));
  const Var<Scalar> zero = t->constant(ad::Matrix<Scalar>::Zero(h.rows(), h.cols()));
  const Var<Scalar> nb =
      ad::segment_weighted_mean(ad::row_gather(h, view.real_head), ones, view.real_by_tail, zero);
  return ad::relu(affine(ad::concat_cols<Scalar>({h, nb}), w, b));
}

}  // namespace

template <typename Scalar>
Var<Scalar> encode(const Bound<Scalar>& p, const Var<Scalar>& features) {
  const ModelConfig& cfg = p.params->config;
  if (features.cols() != cfg.num_nodes + 2)
    throw ad::ShapeError("encode: feature width " + std::to_string(features.cols()) + " but model expects " +
                         std::to_string(cfg.num_nodes + 2));
  Var<Scalar> x = ad::relu(affine(features, p["enc.w0"], p["enc.b0"]));
  x = ad::relu(affine(x, p["enc.w1"], p["enc.b1"]));
  return affine(x, p["enc.w2"], p["enc.b2"]);
}

template <typename Scalar>
Var<Scalar> adaptive_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                               const ViewInput& view, const Var<Scalar>& alpha,
                               const Var<Scalar>& beta, int heads, bool use_virtual) {
  const Scalar inv = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols() / heads));
  const Scalar lim(30);
  Var<Scalar> r = q;
  if (use_virtual && !view.virt_origin.empty()) {
    const Var<Scalar> score =
        ad::head_dot(ad::row_gather(q, view.virt_origin), ad::row_gather(k, view.virt_dest), heads);
    const Var<Scalar> p = ad::exp(ad::clamp(ad::scale_rows(ad::scale(score, inv), alpha), -lim, lim));
    r = ad::segment_weighted_mean(ad::row_gather(v, view.virt_dest), p, view.virt_by_origin, q, heads);
  }
  const Var<Scalar> score =
      ad::head_dot(ad::row_gather(r, view.real_tail), ad::row_gather(k, view.real_head), heads);
  const Var<Scalar> s = ad::exp(ad::clamp(ad::scale_rows(ad::scale(score, inv), beta), -lim, lim));
  return ad::segment_weighted_mean(ad::row_gather(v, view.real_head), s, view.real_by_tail, v, heads);
}

namespace {

template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> adaptive_weights(const Bound<Scalar>& p, int c, const ViewInput& view) {
  return {ad::row_gather(p[class_key("alpha", c)], view.virt_pair),
          ad::row_gather(p[class_key("beta", c)], view.links)};
}

}  // namespace

template <typename Scalar>
Var<Scalar> intra_view_layer(const Bound<Scalar>& p, int layer, int cls, const Var<Scalar>& x,
                             const ModelInput& in) {
  const ModelConfig& cfg = p.params->config;
  const ViewInput& view = in.views.at(cls);
  const auto [alpha, beta] = adaptive_weights(p, cls, view);
  return adaptive_attention(ad::matmul(x, p[layer_key(layer, "wq")]), ad::matmul(x, p[layer_key(layer, "wk")]),
                            ad::matmul(x, p[layer_key(layer, "wv")]), view, alpha, beta,
                            cfg.effective_heads(), cfg.variant != Variant::NoOdLink);
}

template <typename Scalar>
std::vector<Var<Scalar>> inter_view_layer(const Bound<Scalar>& p, int layer, const std::vector<Var<Scalar>>& xs,
                                          const ModelInput& in) {
  const ModelConfig& cfg = p.params->config;
  for (const auto& x : xs)
    if (x.cols() != xs[0].cols()) throw ad::ShapeError("inter_view_layer: class embedding widths differ");
  const Var<Scalar> xt = ad::concat_cols(xs);
  const Var<Scalar> q = ad::matmul(xt, p[layer_key(layer, "tq")]);
  const Var<Scalar> k = ad::matmul(xt, p[layer_key(layer, "tk")]);
  const Var<Scalar> v = ad::matmul(xt, p[layer_key(layer, "tv")]);
  std::vector<Var<Scalar>> out;
  for (std::size_t c = 0; c < xs.size(); ++c) {
    const auto [alpha, beta] = adaptive_weights(p, static_cast<int>(c), in.views[c]);
    out.push_back(adaptive_attention(q, k, v, in.views[c], alpha, beta, cfg.effective_heads(),
                                     cfg.variant != Variant::NoOdLink));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> fuse(const Bound<Scalar>& p, int layer, const Var<Scalar>& x, const Var<Scalar>& z,
                 const Var<Scalar>& zt) {
  const ModelConfig& cfg = p.params->config;
  const int H = cfg.effective_heads();
  Var<Scalar> sum = ad::add_row(ad::head_linear(zt, p[layer_key(layer, "wzt")], H), p[layer_key(layer, "bzt")]);
  if (z.valid())
    sum = ad::add(sum, ad::add_row(ad::head_linear(z, p[layer_key(layer, "wz")], H), p[layer_key(layer, "bz")]));
  const Var<Scalar> ln = ad::add_row(
      ad::mul_row(ad::layer_norm(sum, cfg.head_dim(), Scalar(1e-5)), p[layer_key(layer, "ln_g")]),
      p[layer_key(layer, "ln_b")]);
  const Var<Scalar> res = x.cols() == cfg.hidden_dim ? x : ad::matmul(x, p[layer_key(layer, "res")]);
  return ad::add(res, ln);
}

template <typename Scalar>
Var<Scalar> decode_edges(const Bound<Scalar>& p, const Var<Scalar>& h, const ViewInput& view) {
  const ModelConfig& cfg = p.params->config;
  auto* t = h.tape();
  const Eigen::MatrixXd y = cfg.variant == Variant::NoLinkFeat
                                ? Eigen::MatrixXd::Zero(view.edge_features.rows(), 2).eval()
                                : view.edge_features;
  const Var<Scalar> in = ad::concat_cols<Scalar>(
      {ad::row_gather(h, view.real_tail), ad::row_gather(h, view.real_head), constant(*t, y)});
  Var<Scalar> a = ad::relu(affine(in, p["dec.w0"], p["dec.b0"]));
  a = ad::relu(affine(a, p["dec.w1"], p["dec.b1"]));
  return affine(a, p["dec.w2"], p["dec.b2"]);
}

template <typename Scalar>
ModelOutput<Scalar> forward(ad::Tape<Scalar>& tape, const Bound<Scalar>& p, const ModelInput& in) {
  const ModelConfig& cfg = p.params->config;
  if (static_cast<int>(in.views.size()) != cfg.num_classes)
    throw DataError("input has " + std::to_string(in.views.size()) + " class views, model expects " +
                    std::to_string(cfg.num_classes));
  if (in.num_nodes != cfg.num_nodes) throw DataError("input node count does not match the model");

  std::vector<Var<Scalar>> xs;
  for (const auto& v : in.views) xs.push_back(encode(p, constant(tape, v.node_features)));

  if (cfg.baseline == Baseline::None) {
    for (int l = 0; l < cfg.layers; ++l) {
      const auto zt = inter_view_layer(p, l, xs, in);
      std::vector<Var<Scalar>> next;
      for (int c = 0; c < cfg.num_classes; ++c) {
        const Var<Scalar> z =
            cfg.variant == Variant::NoIntraView ? Var<Scalar>() : intra_view_layer(p, l, c, xs[c], in);
        next.push_back(fuse(p, l, xs[c], z, zt[c]));
      }
      xs = std::move(next);
    }
  } else {
    for (int c = 0; c < cfg.num_classes; ++c)
      for (int l = 0; l < cfg.layers; ++l) xs[c] = baseline_layer(p, l, xs[c], in.views[c], in.num_nodes);
  }

  ModelOutput<Scalar> out;
  for (int c = 0; c < cfg.num_classes; ++c) {
    const Var<Scalar> ratio = decode_edges(p, xs[c], in.views[c]);
    out.ratio.push_back(ratio);
    out.flow.push_back(ad::scale_rows(ratio, constant(tape, Eigen::MatrixXd(in.views[c].flow_scale))));
  }
  return out;
}

template Bound<double> bind(ad::Tape<double>&, const ModelParams<double>&);
template Var<double> encode(const Bound<double>&, const Var<double>&);
template Var<double> adaptive_attention(const Var<double>&, const Var<double>&, const Var<double>&,
                                        const ViewInput&, const Var<double>&, const Var<double>&, int, bool);
template Var<double> intra_view_layer(const Bound<double>&, int, int, const Var<double>&, const ModelInput&);
template std::vector<Var<double>> inter_view_layer(const Bound<double>&, int, const std::vector<Var<double>>&,
                                                   const ModelInput&);
template Var<double> fuse(const Bound<double>&, int, const Var<double>&, const Var<double>&, const Var<double>&);
template Var<double> decode_edges(const Bound<double>&, const Var<double>&, const ViewInput&);
template ModelOutput<double> forward(ad::Tape<double>&, const Bound<double>&, const ModelInput&);

Targets predict(const ModelParams<double>& params, const ModelInput& in) {
  ad::Tape<double> tape;
  Bound<double> b;
  b.params = &params;
  for (const auto& v : params.values) b.vars.push_back(tape.constant(v));
  const ModelOutput<double> out = forward(tape, b, in);
  Targets t;
  for (std::size_t c = 0; c < out.ratio.size(); ++c) {
    t.ratio.push_back(out.ratio[c].value().col(0));
    t.flow.push_back(out.flow[c].value().col(0));
  }
  return t;
}

// --- checkpoints -------------------------------------------------------------

std::string content_hash(const ModelParams<double>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < params.values.size(); ++i) {
    mix(params.names[i].data(), params.names[i].size());
    const std::int64_t shape[2] = {params.values[i].rows(), params.values[i].cols()};
    mix(shape, sizeof(shape));
    mix(params.values[i].data(), sizeof(double) * static_cast<std::size_t>(params.values[i].size()));
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

std::string checkpoint_to_string(const Checkpoint& ck) {
  json j;
  j["format"] = "tapnet-checkpoint";
  j["format_version"] = 1;
  j["config"] = config_to_json(ck.params.config);
  const Normalization& n = ck.normalization;
  j["normalization"] = {{"demand_scale", n.demand_scale},
                        {"edge_mean", {n.edge_mean[0], n.edge_mean[1]}},
                        {"edge_std", {n.edge_std[0], n.edge_std[1]}}};
  j["meta"] = ck.meta;
  json params = json::array();
  for (std::size_t i = 0; i < ck.params.values.size(); ++i) {
    const auto& m = ck.params.values[i];
    params.push_back({{"name", ck.params.names[i]},
                      {"rows", m.rows()},
                      {"cols", m.cols()},
                      {"data", std::vector<double>(m.data(), m.data() + m.size())}});
  }
  j["params"] = std::move(params);
  j["content_hash"] = content_hash(ck.params);
  return j.dump() + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  Checkpoint ck;
  try {
    const json j = json::parse(text);
    if (j.at("format").get<std::string>() != "tapnet-checkpoint" || j.at("format_version").get<int>() != 1)
      throw DataError("checkpoint: unsupported format");
    ck.params.config = model_config_from_json(j.at("config"));
    const auto& n = j.at("normalization");
    ck.normalization.demand_scale = n.at("demand_scale").get<double>();
    const auto mean = n.at("edge_mean").get<std::vector<double>>();
    const auto sd = n.at("edge_std").get<std::vector<double>>();
    if (mean.size() != 2 || sd.size() != 2) throw DataError("checkpoint: edge statistics need 2 entries");
    ck.normalization.edge_mean = Eigen::Vector2d(mean[0], mean[1]);
    ck.normalization.edge_std = Eigen::Vector2d(sd[0], sd[1]);
    ck.meta = j.at("meta");
    for (const auto& p : j.at("params")) {
      const auto rows = p.at("rows").get<Eigen::Index>(), cols = p.at("cols").get<Eigen::Index>();
      const auto data = p.at("data").get<std::vector<double>>();
      if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size())
        throw DataError("checkpoint: parameter '" + p.at("name").get<std::string>() + "' has inconsistent shape");
      ck.params.add(p.at("name").get<std::string>(),
                    Eigen::Map<const Eigen::MatrixXd>(data.data(), rows, cols));
    }
    const std::string stored = j.at("content_hash").get<std::string>();
    if (stored != content_hash(ck.params))
      throw DataError("checkpoint: content hash mismatch (stored " + stored + ")");
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  // Layout must match what the config would build.
  const ModelParams<double> expect = init_params(ck.params.config, 0);
  if (expect.names != ck.params.names) throw DataError("checkpoint: parameter layout does not match its config");
  for (std::size_t i = 0; i < expect.values.size(); ++i)
    if (expect.values[i].rows() != ck.params.values[i].rows() || expect.values[i].cols() != ck.params.values[i].cols())
      throw DataError("checkpoint: parameter '" + expect.names[i] + "' has the wrong shape");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << checkpoint_to_string(ck);
  if (!out) throw DataError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_string(read_text_file(path)); }

}  // namespace tapnet
