#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "tapnet/model.hpp"

using namespace tapnet;
using fixtures::bpr;
using Mat = Eigen::MatrixXd;
using V = ad::Var<double>;

namespace {

Mat random_mat(int r, int c, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// 4 nodes, 6 links; class 1 is barred from 1 -> 2.
RoadNetwork toy_net() {
  std::vector<Link> links{bpr(0, 1, 2.0, 100.0), bpr(0, 2, 3.0, 80.0), bpr(1, 2, 1.0, 50.0),
                          bpr(1, 3, 4.0, 120.0), bpr(2, 3, 2.5, 90.0), bpr(3, 0, 5.0, 60.0)};
  return RoadNetwork(fixtures::nodes(4), links);
}

std::vector<VehicleClass> toy_classes(int n_classes = 2) {
  std::vector<VehicleClass> out{VehicleClass::full_access("car", 1.0, 6)};
  if (n_classes > 1) {
    auto truck = VehicleClass::full_access("truck", 2.0, 6);
    truck.edge_mask[2] = false;
    out.push_back(truck);
  }
  return out;
}

OdMatrix toy_od(int n_classes = 2) {
  OdMatrix od;
  od.demand.assign(n_classes, Mat::Zero(4, 4));
  od.demand[0](0, 3) = 10;
  od.demand[0](1, 3) = 5;
  od.demand[0](2, 0) = 3;
  if (n_classes > 1) od.demand[1](0, 3) = 4;
  return od;
}

ModelConfig small_config(int classes, Variant v = Variant::Full, Baseline b = Baseline::None) {
  ModelConfig c;
  c.num_nodes = 4;
  c.num_links = 6;
  c.num_classes = classes;
  c.embed_dim = 6;
  c.hidden_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.decoder_hidden = 5;
  c.variant = v;
  c.baseline = b;
  return c;
}

Bound<double> bind_constants(ad::Tape<double>& t, const ModelParams<double>& p) {
  Bound<double> b;
  b.params = &p;
  for (const auto& v : p.values) b.vars.push_back(t.constant(v));
  return b;
}

// Direct loop form of the two-stage attention: virtual stage over OD destinations of u,
// then real stage over out-neighbors of u with the virtual result as query.
Mat attention_oracle(const Mat& q, const Mat& k, const Mat& v, const ViewInput& view, const Mat& alpha_nn,
                     const Eigen::VectorXd& beta_link, int heads, bool use_virtual = true) {
  const int n = static_cast<int>(q.rows());
  const int d = static_cast<int>(q.cols()) / heads;
  Mat r = q, z(n, q.cols());
  for (int u = 0; u < n; ++u)
    for (int h = 0; h < heads; ++h) {
      if (use_virtual) {
        double den = 0;
        Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
        for (std::size_t e = 0; e < view.virt_origin.size(); ++e) {
          if (view.virt_origin[e] != u) continue;
          const int s = view.virt_dest[e];
          const double logit = alpha_nn(u, s) * q.row(u).segment(h * d, d).dot(k.row(s).segment(h * d, d)) /
                               std::sqrt(double(d));
          const double w = std::exp(logit);
          den += w;
          acc += w * v.row(s).segment(h * d, d);
        }
        if (den > 0) r.row(u).segment(h * d, d) = acc / den;
      }
      double den = 0;
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
      for (std::size_t e = 0; e < view.real_tail.size(); ++e) {
        if (view.real_tail[e] != u) continue;
        const int w = view.real_head[e];
        const double logit = beta_link[view.links[e]] *
                             r.row(u).segment(h * d, d).dot(k.row(w).segment(h * d, d)) / std::sqrt(double(d));
        const double s = std::exp(logit);
        den += s;
        acc += s * v.row(w).segment(h * d, d);
      }
      z.row(u).segment(h * d, d) = den > 0 ? Eigen::RowVectorXd(acc / den) : Eigen::RowVectorXd(v.row(u).segment(h * d, d));
    }
  return z;
}

Mat alpha_square(const Mat& alpha_col, int n) {
  Mat a(n, n);
  for (int r = 0; r < n; ++r)
    for (int s = 0; s < n; ++s) a(r, s) = alpha_col(r * n + s, 0);
  return a;
}

}  // namespace

TEST_CASE("config validation and names") {
  ModelConfig c = small_config(2);
  CHECK_NOTHROW(c.validate());
  c.hidden_dim = 5;
  CHECK_THROWS_AS(c.validate(), DataError);
  c = small_config(2, Variant::NoOdLink, Baseline::GAT);
  CHECK_THROWS_AS(c.validate(), DataError);
  CHECK_THROWS_AS(init_params(c, 1), DataError);
  CHECK_NOTHROW(small_config(2, Variant::NoConservation, Baseline::GCN).validate());
  for (const auto& name : variant_names()) CHECK(to_string(variant_from_string(name)) == name);
  CHECK_THROWS_AS(variant_from_string("bogus"), DataError);
  CHECK(baseline_from_string("graphsage") == Baseline::GraphSAGE);
  const ModelConfig round = model_config_from_json(config_to_json(small_config(2, Variant::SingleHead)));
  CHECK(round.variant == Variant::SingleHead);
  CHECK(round.effective_heads() == 1);
  CHECK(round.head_dim() == 8);
}

TEST_CASE("parameter layout") {
  const auto p = init_params(small_config(2), 3);
  CHECK(p.at("enc.w0").rows() == 6);
  CHECK(p.at("L0.tq").rows() == 12);
  CHECK(p.at("L0.res").rows() == 6);
  CHECK_THROWS_AS(p.at("L1.res"), DataError);
  CHECK(p.at("alpha.c1").rows() == 16);
  CHECK(p.at("beta.c0").rows() == 6);
  CHECK(p.at("dec.w0").rows() == 18);
  CHECK((p.at("alpha.c0").array() == 1.0).all());
  CHECK((p.at("enc.b0").array() == 0.0).all());
  const auto q = init_params(small_config(2), 3);
  for (std::size_t i = 0; i < p.values.size(); ++i) CHECK(p.values[i] == q.values[i]);
  CHECK(init_params(small_config(2), 4).at("enc.w0") != p.at("enc.w0"));
  CHECK_THROWS_AS(init_params(small_config(2, Variant::NoIntraView), 1).at("L0.wq"), DataError);
}

TEST_CASE("prepared input") {
  const auto net = toy_net();
  Normalization norm;
  norm.demand_scale = 10.0;
  norm.edge_mean = Eigen::Vector2d(1.0, 50.0);
  norm.edge_std = Eigen::Vector2d(2.0, 10.0);
  const ModelInput in = prepare_input(net, toy_classes(), toy_od(), norm);
  REQUIRE(in.views.size() == 2);
  CHECK(in.views[0].links.size() == 6);
  CHECK(in.views[1].links.size() == 5);
  CHECK(std::find(in.views[1].links.begin(), in.views[1].links.end(), 2) == in.views[1].links.end());
  CHECK(in.views[0].node_features(0, 3) == doctest::Approx(1.0));
  CHECK(in.views[0].node_features(2, 0) == doctest::Approx(0.3));
  CHECK(in.views[0].edge_features(0, 0) == doctest::Approx(0.5));
  CHECK(in.views[0].edge_features(0, 1) == doctest::Approx(5.0));
  CHECK(in.views[1].flow_scale[0] == doctest::Approx(50.0));
  CHECK(in.views[0].virt_origin.size() == 3);
  CHECK(in.views[1].virt_pair == std::vector<int>{3});
  CHECK(in.views[0].total_demand == 18);
}

TEST_CASE("encoder") {
  auto p = init_params(small_config(1), 5);
  ad::Tape<double> t;
  auto b = bind_constants(t, p);
  Mat f = Mat::Zero(3, 6);
  f.row(1) << 1, 2, 3, 4, 5, 6;
  f.row(2) = f.row(1);
  const Mat x = encode(b, t.constant(f)).value();
  CHECK(x.rows() == 3);
  CHECK(x.cols() == 6);
  CHECK(x.row(0).norm() == 0.0);  // zero biases, zero input
  CHECK(x.row(1) == x.row(2));
  CHECK_THROWS_AS(encode(b, t.constant(Mat::Zero(3, 5))), ad::ShapeError);
}

TEST_CASE("adaptive attention against loop oracle") {
  std::mt19937 rng(11);
  const auto net = toy_net();
  const ModelInput in = prepare_input(net, toy_classes(), toy_od(), Normalization{});
  for (int heads : {1, 2}) {
    for (int c = 0; c < 2; ++c) {
      const ViewInput& view = in.views[c];
      const Mat q = random_mat(4, 6, rng), k = random_mat(4, 6, rng), v = random_mat(4, 6, rng);
      const Mat alpha = random_mat(16, 1, rng, 0.5, 1.5);
      const Eigen::VectorXd beta = random_mat(6, 1, rng, 0.5, 1.5);
      ad::Tape<double> t;
      const V a = ad::row_gather(t.constant(alpha), view.virt_pair);
      const V bt = ad::row_gather(t.constant(Mat(beta)), view.links);
      for (bool use_virtual : {true, false}) {
        const Mat z = adaptive_attention(t.constant(q), t.constant(k), t.constant(v), view, a, bt, heads, use_virtual).value();
        const Mat expect = attention_oracle(q, k, v, view, alpha_square(alpha, 4), beta, heads, use_virtual);
        CHECK((z - expect).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }
}

TEST_CASE("intra and inter view layers match the oracle") {
  std::mt19937 rng(17);
  for (int classes : {1, 2}) {
    auto p = init_params(small_config(classes), 9);
    for (int c = 0; c < classes; ++c) {
      p.at("alpha.c" + std::to_string(c)) = random_mat(16, 1, rng, 0.5, 1.5);
      p.at("beta.c" + std::to_string(c)) = random_mat(6, 1, rng, 0.5, 1.5);
    }
    const ModelInput in = prepare_input(toy_net(), toy_classes(classes), toy_od(classes), Normalization{});
    ad::Tape<double> t;
    auto b = bind_constants(t, p);
    std::vector<Mat> xs;
    std::vector<V> xv;
    for (int c = 0; c < classes; ++c) {
      xs.push_back(random_mat(4, 6, rng));
      xv.push_back(t.constant(xs.back()));
    }
    Mat cat(4, 6 * classes);
    for (int c = 0; c < classes; ++c) cat.middleCols(6 * c, 6) = xs[c];
    const auto zt = inter_view_layer(b, 0, xv, in);
    for (int c = 0; c < classes; ++c) {
      const Mat alpha = alpha_square(p.at("alpha.c" + std::to_string(c)), 4);
      const Eigen::VectorXd beta = p.at("beta.c" + std::to_string(c));
      const Mat z = intra_view_layer(b, 0, c, xv[c], in).value();
      const Mat ez = attention_oracle(xs[c] * p.at("L0.wq"), xs[c] * p.at("L0.wk"), xs[c] * p.at("L0.wv"),
                                      in.views[c], alpha, beta, 2);
      CHECK((z - ez).cwiseAbs().maxCoeff() < 1e-12);
      const Mat ezt = attention_oracle(cat * p.at("L0.tq"), cat * p.at("L0.tk"), cat * p.at("L0.tv"), in.views[c],
                                       alpha, beta, 2);
      CHECK((zt[c].value() - ezt).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("attention pass-through and fallbacks") {
  // 0 -> 1 only; node 1 has no out-links and no OD.
  const RoadNetwork net(fixtures::nodes(2), {bpr(0, 1, 1.0, 10.0)});
  const auto classes = std::vector<VehicleClass>{VehicleClass::full_access("car", 1.0, 1)};
  OdMatrix od = fixtures::single_od(2, 0, 1, 5.0);
  const ModelInput in = prepare_input(net, classes, od, Normalization{});
  std::mt19937 rng(2);
  const Mat q = random_mat(2, 4, rng), k = random_mat(2, 4, rng), v = random_mat(2, 4, rng);
  ad::Tape<double> t;
  const V one_v = t.constant(Mat::Constant(1, 1, 0.7));
  const V one_r = t.constant(Mat::Constant(1, 1, 1.3));
  const Mat z = adaptive_attention(t.constant(q), t.constant(k), t.constant(v), in.views[0], one_v, one_r, 2).value();
  CHECK(z.row(0) == v.row(1));  // single out-neighbor
  CHECK(z.row(1) == v.row(1));  // no out-neighbor: own value
}

TEST_CASE("unit adaptive weights reduce to masked scaled dot-product attention") {
  // Complete digraph on 3 nodes, every pair with demand.
  std::vector<Link> links;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      if (a != b) links.push_back(bpr(a, b, 1.0, 10.0));
  const RoadNetwork net(fixtures::nodes(3), links);
  OdMatrix od;
  od.demand.push_back(Mat::Constant(3, 3, 1.0) - Mat::Identity(3, 3));
  const ModelInput in =
      prepare_input(net, {VehicleClass::full_access("car", 1.0, 6)}, od, Normalization{});
  std::mt19937 rng(4);
  const int H = 2, d = 3;
  const Mat q = random_mat(3, H * d, rng), k = random_mat(3, H * d, rng), v = random_mat(3, H * d, rng);
  ad::Tape<double> t;
  const Mat z = adaptive_attention(t.constant(q), t.constant(k), t.constant(v), in.views[0],
                                   t.constant(Mat::Ones(6, 1)), t.constant(Mat::Ones(6, 1)), H)
                    .value();
  Mat expect(3, H * d);
  for (int h = 0; h < H; ++h) {
    const auto softmax_off_diag = [&](const Mat& query) {
      Mat s = query.middleCols(h * d, d) * k.middleCols(h * d, d).transpose() / std::sqrt(double(d));
      Mat w = s.array().exp();
      w.diagonal().setZero();
      return Mat(w.array().colwise() / w.rowwise().sum().array());
    };
    const Mat r = softmax_off_diag(q) * v.middleCols(h * d, d);
    Mat qr = q;
    qr.middleCols(h * d, d) = r;
    expect.middleCols(h * d, d) = softmax_off_diag(qr) * v.middleCols(h * d, d);
  }
  CHECK((z - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fusion") {
  auto p = init_params(small_config(1), 2);
  ad::Tape<double> t;
  auto b = bind_constants(t, p);
  std::mt19937 rng(8);
  const Mat x = random_mat(3, 8, rng);
  const V zero = t.constant(Mat::Zero(3, 8));
  p.at("L1.ln_b") << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8;
  auto b2 = bind_constants(t, p);
  const Mat y = fuse(b2, 1, t.constant(x), zero, zero).value();
  CHECK((y - (x.rowwise() + p.at("L1.ln_b").row(0))).cwiseAbs().maxCoeff() < 1e-15);

  // Layer 0 projects the 6-wide embedding to width 8.
  const Mat x0 = random_mat(3, 6, rng);
  const Mat z = random_mat(3, 8, rng), zt = random_mat(3, 8, rng);
  const Mat y0 = fuse(b, 0, t.constant(x0), t.constant(z), t.constant(zt)).value();
  CHECK(y0.cols() == 8);
  // With unit gain and zero shift, each head block of the normalized part has zero mean.
  const Mat ln = y0 - x0 * p.at("L0.res");
  for (int h = 0; h < 2; ++h)
    for (int r = 0; r < 3; ++r) {
      CHECK(std::abs(ln.row(r).segment(4 * h, 4).mean()) < 1e-12);
      CHECK(ln.row(r).segment(4 * h, 4).squaredNorm() / 4 == doctest::Approx(1.0).epsilon(1e-3));
    }
  // Without the intra-view term the result differs.
  const Mat y_no = fuse(b, 0, t.constant(x0), V(), t.constant(zt)).value();
  CHECK((y_no - y0).norm() > 1e-6);
}

TEST_CASE("decoder") {
  auto p = init_params(small_config(2), 6);
  const ModelInput in = prepare_input(toy_net(), toy_classes(), toy_od(), Normalization{});
  for (const char* n : {"dec.w0", "dec.w1", "dec.w2"}) p.at(n).setZero();
  p.at("dec.b2")(0, 0) = 0.37;
  const Targets out = predict(p, in);
  for (int c = 0; c < 2; ++c) {
    CHECK((out.ratio[c].array() == 0.37).all());
    CHECK((out.flow[c] - 0.37 * in.views[c].flow_scale).norm() < 1e-12);
  }
}

TEST_CASE("full model gradients") {
  const ModelInput in = prepare_input(toy_net(), toy_classes(), toy_od(), Normalization{});
  struct Case {
    Variant v;
    Baseline b;
  };
  const std::vector<Case> cases{{Variant::Full, Baseline::None},        {Variant::NoLinkFeat, Baseline::None},
                                {Variant::NoOdLink, Baseline::None},    {Variant::NoIntraView, Baseline::None},
                                {Variant::SingleHead, Baseline::None},  {Variant::Full, Baseline::GAT},
                                {Variant::Full, Baseline::GCN},         {Variant::Full, Baseline::GraphSAGE}};
  for (const auto& cs : cases) {
    CAPTURE(to_string(cs.v));
    CAPTURE(to_string(cs.b));
    auto p = init_params(small_config(2, cs.v, cs.b), 21);
    std::mt19937 rng(5);
    for (auto& m : p.values) m += random_mat(int(m.rows()), int(m.cols()), rng, -0.1, 0.1);
    const ad::LossFn<double> loss = [&](ad::Tape<double>& t, const std::vector<V>& leaves) {
      Bound<double> b;
      b.params = &p;
      b.vars = leaves;
      const auto out = forward(t, b, in);
      V total = ad::sum(out.ratio[0]);
      for (int c = 0; c < 2; ++c) {
        Mat w(out.ratio[c].rows(), 1);
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, 0) = std::sin(1.0 + i + 3 * c);
        total = ad::add(total, ad::sum(ad::hadamard(out.ratio[c], t.constant(w))));
      }
      return total;
    };
    const auto r = ad::grad_check<double>(loss, p.values, 1e-4, 400);
    CHECK(r.coordinates_checked > 50);
    CHECK(r.max_relative_error <= 1e-4);
  }
}

TEST_CASE("node relabelling leaves per-link outputs unchanged") {
  const auto net = toy_net();
  const std::vector<int> perm{2, 0, 3, 1};  // old -> new index
  std::vector<Node> nodes(4);
  for (int i = 0; i < 4; ++i) nodes[perm[i]] = net.nodes()[i];
  std::vector<Link> links = net.links();
  for (auto& l : links) {
    l.tail = perm[l.tail];
    l.head = perm[l.head];
  }
  const RoadNetwork pnet(nodes, links);
  OdMatrix od = toy_od(), pod = toy_od();
  for (int c = 0; c < 2; ++c)
    for (int r = 0; r < 4; ++r)
      for (int s = 0; s < 4; ++s) pod.demand[c](perm[r], perm[s]) = od.demand[c](r, s);

  auto p = init_params(small_config(2), 13);
  std::mt19937 rng(3);
  for (int c = 0; c < 2; ++c) p.at("alpha.c" + std::to_string(c)) = random_mat(16, 1, rng, 0.5, 1.5);
  auto pp = p;
  for (int i = 0; i < 4; ++i) pp.at("enc.w0").row(perm[i]) = p.at("enc.w0").row(i);
  for (int c = 0; c < 2; ++c) {
    const std::string key = "alpha.c" + std::to_string(c);
    for (int r = 0; r < 4; ++r)
      for (int s = 0; s < 4; ++s) pp.at(key)(perm[r] * 4 + perm[s], 0) = p.at(key)(r * 4 + s, 0);
  }
  const ModelInput ia = prepare_input(net, toy_classes(), od, Normalization{});
  const ModelInput ib = prepare_input(pnet, toy_classes(), pod, Normalization{});
  const Targets a = predict(p, ia), b = predict(pp, ib);
  // Real-edge order follows (tail, head), so compare by link id.
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd ra = Eigen::VectorXd::Zero(6), rb = Eigen::VectorXd::Zero(6);
    for (std::size_t i = 0; i < ia.views[c].links.size(); ++i) ra[ia.views[c].links[i]] = a.ratio[c][i];
    for (std::size_t i = 0; i < ib.views[c].links.size(); ++i) rb[ib.views[c].links[i]] = b.ratio[c][i];
    CHECK(ra.norm() > 0);
    CHECK((ra - rb).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("variants and baselines run") {
  const ModelInput in = prepare_input(toy_net(), toy_classes(), toy_od(), Normalization{});
  for (const auto& name : variant_names()) {
    const Targets out = predict(init_params(small_config(2, variant_from_string(name)), 1), in);
    for (int c = 0; c < 2; ++c) {
      CHECK(out.ratio[c].size() == static_cast<Eigen::Index>(in.views[c].links.size()));
      CHECK(out.ratio[c].allFinite());
    }
  }
  for (Baseline b : {Baseline::GAT, Baseline::GCN, Baseline::GraphSAGE}) {
    const Targets out = predict(init_params(small_config(2, Variant::Full, b), 1), in);
    CHECK(out.ratio[1].size() == 5);
    CHECK(out.flow[0].allFinite());
  }
  // Without OD links the adaptive OD scalars have no effect.
  auto p = init_params(small_config(2, Variant::NoOdLink), 2);
  const Targets before = predict(p, in);
  p.at("alpha.c0").setConstant(3.0);
  CHECK(predict(p, in).ratio[0] == before.ratio[0]);
  // Input class count must match.
  const ModelInput one = prepare_input(toy_net(), toy_classes(1), toy_od(1), Normalization{});
  CHECK_THROWS_AS(predict(p, one), DataError);
}

TEST_CASE("checkpoint round trip") {
  Checkpoint ck;
  ck.params = init_params(small_config(2, Variant::NoIntraView), 77);
  ck.params.at("dec.b2")(0, 0) = 0.1 + 0.2;
  ck.normalization.demand_scale = 1.0 / 3.0;
  ck.normalization.edge_mean = Eigen::Vector2d(0.1, 1e-300);
  ck.meta = {{"step", 5}};
  const std::string text = checkpoint_to_string(ck);
  const Checkpoint back = checkpoint_from_string(text);
  CHECK(back.params.names == ck.params.names);
  for (std::size_t i = 0; i < ck.params.values.size(); ++i) CHECK(back.params.values[i] == ck.params.values[i]);
  CHECK(back.normalization.demand_scale == ck.normalization.demand_scale);
  CHECK(back.normalization.edge_mean == ck.normalization.edge_mean);
  CHECK(back.meta == ck.meta);
  CHECK(back.params.config.variant == Variant::NoIntraView);
  CHECK(content_hash(back.params) == content_hash(ck.params));

  auto j = nlohmann::json::parse(text);
  j["params"][0]["data"][0] = j["params"][0]["data"][0].get<double>() + 1e-9;
  CHECK_THROWS_AS(checkpoint_from_string(j.dump()), DataError);
  CHECK_THROWS_AS(checkpoint_from_string("{not json"), DataError);
}
