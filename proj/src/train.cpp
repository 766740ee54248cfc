#include "tapnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "tapnet/parallel.hpp"
#include "tapnet/scenario.hpp"

namespace tapnet {

using ad::Var;
using nlohmann::json;

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(flow >= 0.0) || !(conservation >= 0.0))
    throw DataError("loss weights must be non-negative");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw DataError("learning rate must be positive");
  if (batch_size < 1) throw DataError("batch size must be at least 1");
  if (steps < 0) throw DataError("step count must be non-negative");
  if (eval_every < 1) throw DataError("eval cadence must be at least 1");
  weights.validate();
}

double loss_total(const LossParts& parts, const LossWeights& w) {
  return w.alpha * parts.alpha + w.flow * parts.flow + w.conservation * parts.conservation;
}

template <typename Scalar>
LossVars<Scalar> loss_supervised(ad::Tape<Scalar>& tape, const ModelOutput<Scalar>& out, const Targets& truth) {
  if (out.ratio.size() != truth.ratio.size()) throw ad::ShapeError("loss_supervised: class count mismatch");
  LossVars<Scalar> l;
  for (std::size_t c = 0; c < out.ratio.size(); ++c) {
    const Var<Scalar> ea = ad::mean(ad::abs(ad::sub(out.ratio[c], tape.constant(truth.ratio[c].template cast<Scalar>()))));
    const Var<Scalar> ef = ad::mean(ad::abs(ad::sub(out.flow[c], tape.constant(truth.flow[c].template cast<Scalar>()))));
    l.alpha = c == 0 ? ea : ad::add(l.alpha, ea);
    l.flow = c == 0 ? ef : ad::add(l.flow, ef);
  }
  l.flow = ad::scale(l.flow, static_cast<Scalar>(kFlowUnit));
  return l;
}

template <typename Scalar>
Var<Scalar> loss_conservation(ad::Tape<Scalar>& tape, const ModelOutput<Scalar>& out, const ModelInput& in) {
  Var<Scalar> total;
  for (std::size_t c = 0; c < out.flow.size(); ++c) {
    const ViewInput& v = in.views[c];
    const Eigen::SparseMatrix<Scalar> b = v.incidence.template cast<Scalar>();
    const Var<Scalar> res =
        ad::sub(ad::sparse_matmul(b, out.flow[c]), tape.constant(v.net_demand.template cast<Scalar>()));
    const Var<Scalar> s = ad::sum(ad::abs(res));
    total = c == 0 ? s : ad::add(total, s);
  }
  return total;
}

template <typename Scalar>
Var<Scalar> sample_loss(ad::Tape<Scalar>& tape, const Bound<Scalar>& p, const ModelInput& in, const Targets& truth,
                        const LossWeights& w, LossParts* parts) {
  const ModelOutput<Scalar> out = forward(tape, p, in);
  const LossVars<Scalar> sup = loss_supervised(tape, out, truth);
  const Var<Scalar> cons = ad::scale(loss_conservation(tape, out, in), static_cast<Scalar>(kConservationUnit));
  const double wc = p.params->config.variant == Variant::NoConservation ? 0.0 : w.conservation;
  if (parts) {
    parts->alpha = static_cast<double>(sup.alpha.value()(0, 0));
    parts->flow = static_cast<double>(sup.flow.value()(0, 0));
    parts->conservation = static_cast<double>(cons.value()(0, 0));
  }
  Var<Scalar> total = ad::scale(sup.alpha, static_cast<Scalar>(w.alpha));
  total = ad::add(total, ad::scale(sup.flow, static_cast<Scalar>(w.flow)));
  return ad::add(total, ad::scale(cons, static_cast<Scalar>(wc)));
}

template LossVars<double> loss_supervised(ad::Tape<double>&, const ModelOutput<double>&, const Targets&);
template Var<double> loss_conservation(ad::Tape<double>&, const ModelOutput<double>&, const ModelInput&);
template Var<double> sample_loss(ad::Tape<double>&, const Bound<double>&, const ModelInput&, const Targets&,
                                 const LossWeights&, LossParts*);

std::vector<Sample> make_samples(const RoadNetwork& base, const std::vector<VehicleClass>& classes,
                                 const std::vector<DatasetRecord>& records, const std::vector<int>& positions,
                                 const Normalization& norm, int threads) {
  std::vector<Sample> out(positions.size());
  parallel_for(static_cast<int>(positions.size()), threads, [&](int i) {
    const DatasetRecord& rec = records.at(positions[i]);
    Sample s;
    s.id = rec.index;
    s.input = prepare_input(record_network(base, rec), record_classes(classes, rec), rec.od, norm);
    s.targets = prepare_targets(s.input, rec);
    out[i] = std::move(s);
  });
  return out;
}

double validation_alpha(const ModelParams<double>& params, const std::vector<Sample>& samples, int threads) {
  if (samples.empty()) return 0.0;
  std::vector<double> per(samples.size(), 0.0);
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    const Targets pred = predict(params, samples[i].input);
    double s = 0.0;
    for (std::size_t c = 0; c < pred.ratio.size(); ++c)
      s += mae(samples[i].targets.ratio[c], pred.ratio[c]);
    per[i] = s;
  });
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(samples.size());
}

TrainResult train(const ModelConfig& cfg, const TrainConfig& tc, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val) {
  cfg.validate();
  tc.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  const std::vector<Sample>& vset = val.empty() ? train_set : val;

  ModelParams<double> params = init_params(cfg, tc.seed);
  ad::AdamState<double> adam;
  ad::AdamConfig ac;
  ac.lr = tc.lr;

  TrainResult result;
  result.best = params;
  result.best_val_alpha = validation_alpha(params, vset, tc.threads);

  const int n = static_cast<int>(train_set.size());
  std::vector<int> order(n);
  int pos = n, epoch = 0;
  for (int step = 1; step <= tc.steps; ++step) {
    if (pos >= n) {
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(derive_seed(tc.seed, 0xba7c0000ULL + static_cast<std::uint64_t>(epoch++)));
      for (int i = n - 1; i > 0; --i)
        std::swap(order[i], order[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
      pos = 0;
    }
    const int b = std::min(tc.batch_size, n - pos);
    std::vector<std::vector<ad::Matrix<double>>> grads(b);
    std::vector<LossParts> parts(b);
    std::vector<double> losses(b);
    parallel_for(b, tc.threads, [&](int j) {
      const Sample& s = train_set[order[pos + j]];
      ad::Tape<double> tape;
      const Bound<double> bound = bind(tape, params);
      const Var<double> loss = sample_loss(tape, bound, s.input, s.targets, tc.weights, &parts[j]);
      losses[j] = loss.value()(0, 0);
      if (!std::isfinite(losses[j])) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " on sample id " << s.id << " (L_alpha " << parts[j].alpha
           << ", L_f " << parts[j].flow << ", L_c " << parts[j].conservation << ")";
        throw NumericError(os.str());
      }
      tape.backward(loss);
      for (const auto& v : bound.vars) grads[j].push_back(tape.grad(v));
    });

    std::vector<ad::Matrix<double>> g = std::move(grads[0]);
    for (int j = 1; j < b; ++j)
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += grads[j][k];
    for (auto& m : g) m /= static_cast<double>(b);
    ad::adam_step(params.values, g, adam, ac);

    HistoryRow row;
    row.step = step;
    for (int j = 0; j < b; ++j) {
      row.loss += losses[j] / b;
      row.parts.alpha += parts[j].alpha / b;
      row.parts.flow += parts[j].flow / b;
      row.parts.conservation += parts[j].conservation / b;
    }
    pos += b;

    const bool stop = tc.stop_below > 0.0 && row.parts.alpha < tc.stop_below;
    if (step % tc.eval_every == 0 || step == tc.steps || stop) {
      row.val_alpha = validation_alpha(params, vset, tc.threads);
      if (row.val_alpha < result.best_val_alpha) {
        result.best_val_alpha = row.val_alpha;
        result.best = params;
        result.best_step = step;
      }
    }
    result.history.push_back(row);
    if (stop) break;
  }
  result.last = std::move(params);
  return result;
}

// --- evaluation ---------------------------------------------------------------

namespace {

void check_pair(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ad::ShapeError("metric inputs differ in length");
}

}  // namespace

double mae(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred) {
  check_pair(truth, pred);
  if (truth.size() == 0) return 0.0;
  return (truth - pred).cwiseAbs().mean();
}

double rmse(const Eigen::VectorXd& truth, const Eigen::VectorXd& pred) {
  check_pair(truth, pred);
  if (truth.size() == 0) return 0.0;
  return std::sqrt((truth - pred).squaredNorm() / static_cast<double>(truth.size()));
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  check_pair(a, b);
  if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::ArrayXd da = a.array() - a.mean(), db = b.array() - b.mean();
  const double den = std::sqrt((da * da).sum() * (db * db).sum());
  if (!(den > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return (da * db).sum() / den;
}

double MetricsReport::mean_ratio_mae() const {
  if (classes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : classes) s += c.ratio_mae;
  return s / static_cast<double>(classes.size());
}

Evaluation evaluate(const ModelParams<double>& params, const std::vector<Sample>& samples,
                    const std::vector<VehicleClass>& classes, int threads) {
  const int C = static_cast<int>(classes.size());
  if (params.config.num_classes != C) throw DataError("checkpoint class count does not match the dataset");
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return samples[a].id < samples[b].id; });

  const int S = static_cast<int>(samples.size());
  std::vector<Targets> preds(S);
  std::vector<Eigen::MatrixXd> residuals(S);  // nodes x classes
  std::vector<double> residue(S, 0.0);
  parallel_for(S, threads, [&](int i) {
    const Sample& s = samples[order[i]];
    Targets p = predict(params, s.input);
    Eigen::MatrixXd res(s.input.num_nodes, C);
    double total_demand = 0.0;
    for (int c = 0; c < C; ++c) {
      p.ratio[c] = p.ratio[c].cwiseMax(0.0);
      p.flow[c] = p.flow[c].cwiseMax(0.0);
      const ViewInput& v = s.input.views[c];
      res.col(c) = v.incidence * p.flow[c] - v.net_demand;
      total_demand += v.total_demand;
    }
    residue[i] = total_demand > 0.0 ? res.cwiseAbs().sum() / total_demand : 0.0;
    residuals[i] = res.cwiseAbs();
    preds[i] = std::move(p);
  });

  Evaluation ev;
  ev.report.samples = S;
  ev.scatter.resize(C);
  ev.node_residue = Eigen::MatrixXd::Zero(samples.empty() ? 0 : samples[0].input.num_nodes, C);
  for (int i = 0; i < S; ++i) {
    ev.report.residue += residue[i] / S;
    ev.node_residue += residuals[i] / S;
  }
  for (int c = 0; c < C; ++c) {
    std::vector<double> tr, pr, tf, pf;
    for (int i = 0; i < S; ++i) {
      const Sample& s = samples[order[i]];
      const auto& links = s.input.views[c].links;
      for (std::size_t e = 0; e < links.size(); ++e) {
        const auto k = static_cast<Eigen::Index>(e);
        ScatterPoint pt{s.id, links[e], s.targets.flow[c][k], preds[i].flow[c][k], s.targets.ratio[c][k],
                        preds[i].ratio[c][k]};
        tr.push_back(pt.truth_ratio);
        pr.push_back(pt.pred_ratio);
        tf.push_back(pt.truth_flow);
        pf.push_back(pt.pred_flow);
        ev.scatter[c].push_back(pt);
      }
    }
    auto vec = [](const std::vector<double>& x) { return Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size())).eval(); };
    ClassMetrics m;
    m.name = classes[c].name;
    m.ratio_mae = mae(vec(tr), vec(pr));
    m.ratio_rmse = rmse(vec(tr), vec(pr));
    m.flow_mae = mae(vec(tf), vec(pf));
    m.flow_rmse = rmse(vec(tf), vec(pf));
    m.flow_pearson = pearson(vec(tf), vec(pf));
    m.edges = static_cast<long>(tr.size());
    ev.report.classes.push_back(m);
  }
  return ev;
}

json report_to_json(const MetricsReport& r) {
  json classes = json::array();
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  for (const auto& c : r.classes)
    classes.push_back({{"name", c.name},
                       {"edges", c.edges},
                       {"ratio", {{"mae", num(c.ratio_mae)}, {"rmse", num(c.ratio_rmse)}}},
                       {"flow", {{"mae", num(c.flow_mae)}, {"rmse", num(c.flow_rmse)}, {"pearson", num(c.flow_pearson)}}}});
  return json{{"samples", r.samples}, {"residue", num(r.residue)}, {"classes", classes},
              {"mean_ratio_mae", num(r.mean_ratio_mae())}};
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.precision(17);
  return out;
}

}  // namespace

void write_evaluation(const std::string& dir, const Evaluation& ev, const RoadNetwork& base,
                      const std::vector<VehicleClass>& classes) {
  std::filesystem::create_directories(dir);
  open_out(dir + "/metrics.json") << report_to_json(ev.report).dump(2) << "\n";
  for (std::size_t c = 0; c < ev.scatter.size(); ++c) {
    auto out = open_out(dir + "/scatter_" + classes[c].name + ".csv");
    out << "sample,link,tail,head,truth_flow,pred_flow,truth_ratio,pred_ratio\n";
    for (const auto& p : ev.scatter[c]) {
      const Link& l = base.links()[p.link];
      out << p.sample << ',' << p.link + 1 << ',' << base.nodes()[l.tail].id << ',' << base.nodes()[l.head].id << ','
          << p.truth_flow << ',' << p.pred_flow << ',' << p.truth_ratio << ',' << p.pred_ratio << '\n';
    }
  }
  auto out = open_out(dir + "/residue_nodes.csv");
  out << "node";
  for (const auto& c : classes) out << ',' << c.name;
  out << '\n';
  for (Eigen::Index i = 0; i < ev.node_residue.rows(); ++i) {
    out << base.nodes()[i].id;
    for (Eigen::Index c = 0; c < ev.node_residue.cols(); ++c) out << ',' << ev.node_residue(i, c);
    out << '\n';
  }
}

void write_history(const std::string& path, const std::vector<HistoryRow>& history) {
  auto out = open_out(path);
  out << "step,loss,l_alpha,l_flow,l_conservation,val_alpha\n";
  for (const auto& h : history) {
    out << h.step << ',' << h.loss << ',' << h.parts.alpha << ',' << h.parts.flow << ',' << h.parts.conservation << ',';
    if (std::isfinite(h.val_alpha)) out << h.val_alpha;
    out << '\n';
  }
}

std::vector<FoldResult> cross_validate(const ModelConfig& cfg, const TrainConfig& tc,
                                       const std::vector<Sample>& samples,
                                       const std::vector<VehicleClass>& classes, int k) {
  const auto folds = kfold_split(static_cast<int>(samples.size()), k, tc.seed);
  std::vector<FoldResult> out;
  for (int f = 0; f < k; ++f) {
    std::vector<Sample> tr, te;
    for (int g = 0; g < k; ++g)
      for (int i : folds[g]) (g == f ? te : tr).push_back(samples[i]);
    FoldResult r;
    r.fold = f;
    r.train = train(cfg, tc, tr);
    r.test = evaluate(r.train.best, te, classes, tc.threads).report;
    out.push_back(std::move(r));
  }
  return out;
}

ModelGradCheck check_model_gradients(double eps, int max_coordinates, std::uint64_t seed, Variant variant,
                                     double min_margin) {
  auto bpr = [](int t, int h, double t0, double cap) {
    Link l;
    l.tail = t;
    l.head = h;
    l.free_flow_time = t0;
    l.capacity = cap;
    return l;
  };
  std::vector<Node> nodes;
  for (int i = 0; i < 4; ++i) nodes.push_back(Node{i + 1, double(i % 2), double(i / 2)});
  const RoadNetwork net(nodes, {bpr(0, 1, 2.0, 100.0), bpr(0, 2, 3.0, 80.0), bpr(1, 2, 1.0, 50.0),
                                bpr(1, 3, 4.0, 120.0), bpr(2, 3, 2.5, 90.0), bpr(3, 0, 5.0, 60.0)});
  std::vector<VehicleClass> classes{VehicleClass::full_access("car", 1.0, 6),
                                    VehicleClass::full_access("truck", 1.9, 6)};
  classes[1].edge_mask[2] = false;
  DatasetRecord rec;
  rec.capacity_factors = Eigen::VectorXd::Ones(6);
  rec.od.demand.assign(2, Eigen::MatrixXd::Zero(4, 4));
  rec.od.demand[0](0, 3) = 60;
  rec.od.demand[0](1, 3) = 40;
  rec.od.demand[0](2, 0) = 30;
  rec.od.demand[1](0, 3) = 20;
  const SolveReport rep = solve(net, classes, rec.od);
  rec.flows = rep.flows;
  for (int c = 0; c < 2; ++c) rec.ratios.push_back(rep.flows.ratio(c, classes[c].pce, net.capacities()));
  Normalization norm;
  norm.demand_scale = 60.0;
  norm.edge_mean = Eigen::Vector2d(3.0, 80.0);
  norm.edge_std = Eigen::Vector2d(1.0, 25.0);
  const Sample s = make_samples(net, classes, {rec}, {0}, norm)[0];

  ModelConfig cfg;
  cfg.num_nodes = 4;
  cfg.num_links = 6;
  cfg.num_classes = 2;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.decoder_hidden = 16;
  cfg.variant = variant;
  // Zero-initialized biases leave ReLU inputs exactly at the kink. Central differences
  // only make sense where the loss is smooth within +-eps, so redraw the jitter until it is.
  const ModelParams<double> base = init_params(cfg, seed);
  ModelParams<double> p;
  auto forward = [&](ad::Tape<double>& t, const std::vector<Var<double>>& leaves) {
    Bound<double> b;
    b.params = &p;
    b.vars = leaves;
    return sample_loss(t, b, s.input, s.targets, LossWeights{});
  };
  ModelGradCheck out;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw NumericError("check_model_gradients: no smooth evaluation point found");
    p = base;
    std::mt19937_64 rng(derive_seed(derive_seed(seed, 0x9c), static_cast<std::uint64_t>(attempt)));
    for (auto& m : p.values)
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += 0.05 * (2.0 * uniform01(rng) - 1.0);
    ad::Tape<double> t;
    std::vector<Var<double>> leaves;
    for (const auto& m : p.values) leaves.push_back(t.constant(m));
    forward(t, leaves);
    out.attempts = attempt + 1;
    out.kink_margin = t.kink_margin();
    if (out.kink_margin >= min_margin) break;
  }
  const ad::LossFn<double> loss = forward;
  out.check = ad::grad_check<double>(loss, p.values, eps, max_coordinates, static_cast<unsigned>(seed) + 7u);
  return out;
}

}  // namespace tapnet
