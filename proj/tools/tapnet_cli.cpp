// tapnet: multi-class traffic assignment and graph surrogate toolkit.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "tapnet/dataset.hpp"
#include "tapnet/model.hpp"
#include "tapnet/network.hpp"
#include "tapnet/scenario.hpp"
#include "tapnet/solver.hpp"
#include "tapnet/tntp.hpp"
#include "tapnet/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tapnet;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kFail = 1, kUsage = 2, kData = 3, kNumeric = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Global {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  int threads = 1;
};

// Provenance collected while a command runs.
struct RunLog {
  std::string command;
  std::string subcommand;
  json inputs = json::array();
  json outputs = json::array();
  json extra = json::object();

  void input(const std::string& path) {
    if (path.empty()) return;
    std::string text;
    try {
      text = read_text_file(path);
    } catch (const DataError&) {
      return;
    }
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    inputs.push_back({{"path", path}, {"fnv1a", os.str()}, {"bytes", text.size()}});
  }
};

RunLog g_run;

std::string out_path(const Global& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  const std::string p = (fs::path(g.out_dir) / name).string();
  g_run.outputs.push_back(p);
  return p;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.precision(17);
  return out;
}

struct NetFiles {
  std::string net, nodes, trips;
};

RoadNetwork load_network(const NetFiles& f) {
  g_run.input(f.net);
  g_run.input(f.nodes);
  return parse_network(read_text_file(f.net), f.nodes.empty() ? std::string() : read_text_file(f.nodes));
}

Eigen::MatrixXd load_trips(const NetFiles& f, const RoadNetwork& net) {
  if (f.trips.empty()) return Eigen::MatrixXd::Zero(net.num_nodes(), net.num_nodes());
  g_run.input(f.trips);
  return parse_trips(read_text_file(f.trips), net);
}

// Classes file: {"classes": [{"name", "pce", "share", "barred": [[tail_id, head_id], ...]}]}
struct ClassSetup {
  std::vector<VehicleClass> classes;
  std::vector<double> shares;
};

ClassSetup load_classes(const std::string& path, const RoadNetwork& net, bool multi_default) {
  ClassSetup s;
  if (path.empty()) {
    if (multi_default) {
      s.classes = default_classes(net);
      s.shares = {0.8, 0.2};
    } else {
      s.classes = {VehicleClass::full_access("car", 1.0, net.num_links())};
      s.shares = {1.0};
    }
    return s;
  }
  g_run.input(path);
  json j;
  try {
    j = json::parse(read_text_file(path));
    for (const auto& c : j.at("classes")) {
      VehicleClass vc = VehicleClass::full_access(c.at("name").get<std::string>(), c.value("pce", 1.0), net.num_links());
      for (const auto& b : c.value("barred", json::array())) {
        const int e = net.find_link(net.node_index(b.at(0).get<int>()), net.node_index(b.at(1).get<int>()));
        if (e < 0) throw DataError("classes file: barred link " + b.dump() + " is not in the network");
        vc.edge_mask[e] = false;
      }
      validate_class(net, vc);
      s.classes.push_back(std::move(vc));
      s.shares.push_back(c.value("share", 1.0));
    }
  } catch (const json::exception& e) {
    throw DataError("classes file " + path + ": " + e.what());
  }
  if (s.classes.empty()) throw DataError("classes file lists no classes");
  return s;
}

Objective parse_objective(const std::string& s) {
  if (s == "ue") return Objective::UE;
  if (s == "so") return Objective::SO;
  throw UsageError("objective must be ue or so");
}

// ---------------------------------------------------------------------------

int cmd_inspect(const Global& g, const NetFiles& f) {
  const RoadNetwork net = load_network(f);
  const Eigen::MatrixXd trips = load_trips(f, net);
  const double degree = static_cast<double>(net.num_links()) / net.num_nodes();
  std::cout << std::left << std::setw(16) << "nodes" << net.num_nodes() << "\n"
            << std::setw(16) << "links" << net.num_links() << "\n"
            << std::setw(16) << "avg degree" << std::fixed << std::setprecision(2) << degree << "\n"
            << std::setw(16) << "total demand" << std::setprecision(0) << trips.sum() << "\n"
            << std::setw(16) << "od pairs" << (trips.array() > 0).count() << "\n";
  json summary{{"nodes", net.num_nodes()},
               {"links", net.num_links()},
               {"average_degree", degree},
               {"total_demand", trips.sum()},
               {"od_pairs", (trips.array() > 0).count()},
               {"fingerprint", net.fingerprint()}};
  open_out(out_path(g, "inspect.json")) << summary.dump(2) << "\n";
  return kOk;
}

int cmd_solve(const Global& g, const NetFiles& f, const std::string& objective, const std::string& classes_file,
              double tol, int max_iter, bool conjugate) {
  const RoadNetwork net = load_network(f);
  if (f.trips.empty()) throw UsageError("solve needs --trips");
  const Eigen::MatrixXd trips = load_trips(f, net);
  const ClassSetup cs = load_classes(classes_file, net, false);
  const OdMatrix od = split_demand(trips, cs.shares);
  SolveConfig cfg;
  cfg.objective = parse_objective(objective);
  cfg.threshold = tol;
  cfg.max_iterations = max_iter;
  cfg.conjugate = conjugate;
  const auto t0 = std::chrono::steady_clock::now();
  const SolveReport rep = solve(net, cs.classes, od, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const Eigen::VectorXd v = rep.flows.effective(cs.classes);
  const Eigen::VectorXd t = link_costs(net, v, Objective::UE);
  {
    auto out = open_out(out_path(g, "flows.csv"));
    out << "link,tail,head";
    for (const auto& c : cs.classes) out << ',' << c.name;
    out << ",effective,time\n";
    for (int e = 0; e < net.num_links(); ++e) {
      const Link& l = net.links()[e];
      out << e + 1 << ',' << net.nodes()[l.tail].id << ',' << net.nodes()[l.head].id;
      for (std::size_t c = 0; c < cs.classes.size(); ++c) out << ',' << rep.flows.flow[c][e];
      out << ',' << v[e] << ',' << t[e] << '\n';
    }
  }
  {
    auto out = open_out(out_path(g, "trace.csv"));
    out << "iteration,convergence,relative_gap,objective\n";
    for (std::size_t k = 0; k < rep.convergence_trace.size(); ++k)
      out << k + 1 << ',' << rep.convergence_trace[k] << ',' << rep.gap_trace[k] << ',' << rep.objective_trace[k]
          << '\n';
  }
  const json summary{{"objective", objective},
                     {"converged", rep.converged},
                     {"iterations", rep.iterations},
                     {"relative_gap", rep.relative_gap},
                     {"total_travel_time", total_travel_time(net, v)},
                     {"objective_value", objective_value(net, v, cfg.objective)},
                     {"seconds", secs}};
  open_out(out_path(g, "summary.json")) << summary.dump(2) << "\n";
  std::cout << (rep.converged ? "converged" : "NOT converged") << " after " << rep.iterations
            << " iterations, relative gap " << std::scientific << std::setprecision(3) << rep.relative_gap
            << ", TSTT " << total_travel_time(net, v) << "\n";
  g_run.extra["converged"] = rep.converged;
  return rep.converged ? kOk : kNumeric;
}

int cmd_generate(const Global& g, const NetFiles& f, const std::string& preset_name, int n, std::string name,
                 double train_fraction, const std::string& objective, const std::string& classes_file,
                 int first_index, int max_iter) {
  if (n < 1) throw UsageError("-n must be at least 1");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw UsageError("--train-fraction must lie in [0, 1]");
  const RoadNetwork net = load_network(f);
  if (f.trips.empty()) throw UsageError("generate needs --trips");
  const Eigen::MatrixXd trips = load_trips(f, net);
  const ClassSetup cs = load_classes(classes_file, net, true);
  ScenarioConfig cfg = preset(preset_name);
  cfg.master_seed = g.seed;
  cfg.objective = parse_objective(objective);
  if (max_iter > 0) cfg.max_iterations = max_iter;
  const OdMatrix od = split_demand(trips, cs.shares);

  const auto t0 = std::chrono::steady_clock::now();
  GenerationResult gen = generate_dataset(net, od, cs.classes, cfg, n, g.threads, first_index);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (gen.records.empty()) throw NumericError("every scenario failed; first: " + gen.skipped.front().second);

  Dataset ds;
  ds.records = std::move(gen.records);
  ds.manifest.network_name = fs::path(f.net).stem().string();
  ds.manifest.network_fingerprint = net.fingerprint();
  ds.manifest.classes = cs.classes;
  ds.manifest.scenario = config_to_json(cfg);
  ds.manifest.skipped = gen.skipped;
  auto [tr, te] = train_test_split(static_cast<int>(ds.records.size()), train_fraction, g.seed);
  ds.manifest.train = tr;
  ds.manifest.test = te;
  ds.manifest.normalization =
      fit_normalization(net, cs.classes, ds.records, tr.empty() ? te : tr);
  if (name.empty()) name = preset_name;
  fs::create_directories(g.out_dir);
  write_dataset(g.out_dir, name, ds);
  g_run.outputs.push_back((fs::path(g.out_dir) / (name + ".jsonl")).string());
  g_run.outputs.push_back((fs::path(g.out_dir) / (name + ".manifest.json")).string());

  int max_it = 0;
  double max_gap = 0.0;
  for (const auto& r : ds.records) {
    max_it = std::max(max_it, r.iterations);
    max_gap = std::max(max_gap, r.relative_gap);
  }
  std::cout << ds.records.size() << " records (" << tr.size() << " train / " << te.size() << " test), "
            << gen.skipped.size() << " skipped, " << std::fixed << std::setprecision(1) << secs << " s; max "
            << max_it << " iterations, max gap " << std::scientific << std::setprecision(2) << max_gap << "\n";
  for (const auto& [idx, why] : gen.skipped) std::cerr << "skipped scenario " << idx << ": " << why << "\n";
  return kOk;
}

struct DataArgs {
  std::string data;
  std::string test_data;
};

struct Loaded {
  RoadNetwork net;
  Dataset ds;
};

Loaded load_dataset(const NetFiles& f, const std::string& path) {
  Loaded l;
  l.net = load_network(f);
  g_run.input(path);
  l.ds = read_dataset(path);
  if (l.ds.manifest.network_fingerprint != l.net.fingerprint())
    throw DataError("dataset " + path + " was generated on a different network than " + f.net);
  return l;
}

std::vector<int> all_positions(const Dataset& ds) {
  std::vector<int> p(ds.records.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(i);
  return p;
}

struct ModelArgs {
  std::string variant = "full";
  std::string baseline = "none";
  int layers = 4, heads = 8, hidden = 64, embed = 32, decoder = 64;
};

ModelConfig model_config(const ModelArgs& a, const RoadNetwork& net, int classes) {
  ModelConfig c;
  c.num_nodes = net.num_nodes();
  c.num_links = net.num_links();
  c.num_classes = classes;
  c.layers = a.layers;
  c.heads = a.heads;
  c.hidden_dim = a.hidden;
  c.embed_dim = a.embed;
  c.decoder_hidden = a.decoder;
  c.variant = variant_from_string(a.variant);
  c.baseline = baseline_from_string(a.baseline);
  c.validate();
  return c;
}

struct TrainArgs {
  double lr = 1e-3;
  int batch = 128;
  int steps = 1000;
  int eval_every = 50;
  double val_fraction = 0.0;
  double w_alpha = 1.0, w_flow = 0.005, w_cons = 0.05;
  int folds = 0;
};

TrainConfig train_config(const TrainArgs& a, const Global& g, std::uint64_t seed) {
  TrainConfig tc;
  tc.lr = a.lr;
  tc.batch_size = a.batch;
  tc.steps = a.steps;
  tc.eval_every = a.eval_every;
  tc.seed = seed;
  tc.threads = g.threads;
  tc.weights = LossWeights{a.w_alpha, a.w_flow, a.w_cons};
  tc.validate();
  return tc;
}

void print_report(const MetricsReport& r) {
  std::cout << std::left << std::setw(8) << "class" << std::right << std::setw(12) << "ratio MAE" << std::setw(12)
            << "ratio RMSE" << std::setw(12) << "flow MAE" << std::setw(12) << "flow RMSE" << std::setw(10)
            << "pearson" << "\n";
  for (const auto& c : r.classes)
    std::cout << std::left << std::setw(8) << c.name << std::right << std::fixed << std::setprecision(4)
              << std::setw(12) << c.ratio_mae << std::setw(12) << c.ratio_rmse << std::setprecision(2)
              << std::setw(12) << c.flow_mae << std::setw(12) << c.flow_rmse << std::setprecision(4)
              << std::setw(10) << c.flow_pearson << "\n";
  std::cout << "normalized conservation residue " << std::setprecision(4) << 100.0 * r.residue << " % over "
            << r.samples << " samples\n";
}

int cmd_train(const Global& g, const NetFiles& f, const DataArgs& d, const ModelArgs& ma, const TrainArgs& ta) {
  const Loaded l = load_dataset(f, d.data);
  const auto& man = l.ds.manifest;
  const ModelConfig cfg = model_config(ma, l.net, static_cast<int>(man.classes.size()));
  const TrainConfig tc = train_config(ta, g, g.seed);

  if (ta.folds > 0) {
    const auto samples = make_samples(l.net, man.classes, l.ds.records, all_positions(l.ds), man.normalization, g.threads);
    const auto folds = cross_validate(cfg, tc, samples, man.classes, ta.folds);
    auto out = open_out(out_path(g, "cv.csv"));
    out << "fold,best_step,mean_ratio_mae,residue";
    for (const auto& c : man.classes) out << ",flow_pearson_" << c.name;
    out << '\n';
    double mean = 0.0;
    for (const auto& fr : folds) {
      out << fr.fold << ',' << fr.train.best_step << ',' << fr.test.mean_ratio_mae() << ',' << fr.test.residue;
      for (const auto& c : fr.test.classes) out << ',' << c.flow_pearson;
      out << '\n';
      mean += fr.test.mean_ratio_mae() / folds.size();
    }
    std::cout << ta.folds << "-fold mean ratio MAE " << std::setprecision(5) << mean << "\n";
    return kOk;
  }

  std::vector<int> train_pos = man.train, val_pos;
  if (ta.val_fraction > 0.0) {
    auto [keep, held] = train_test_split(static_cast<int>(train_pos.size()), 1.0 - ta.val_fraction, g.seed + 1);
    std::vector<int> a, b;
    for (int i : keep) a.push_back(train_pos[i]);
    for (int i : held) b.push_back(train_pos[i]);
    train_pos = a;
    val_pos = b;
  }
  const auto train_set = make_samples(l.net, man.classes, l.ds.records, train_pos, man.normalization, g.threads);
  const auto val_set = make_samples(l.net, man.classes, l.ds.records, val_pos, man.normalization, g.threads);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(cfg, tc, train_set, val_set);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Checkpoint ck;
  ck.params = r.best;
  ck.normalization = man.normalization;
  ck.meta = {{"best_step", r.best_step},
             {"best_val_alpha", r.best_val_alpha},
             {"steps", tc.steps},
             {"seed", tc.seed},
             {"network", man.network_name},
             {"network_fingerprint", man.network_fingerprint},
             {"classes", json::array()}};
  for (const auto& c : man.classes) ck.meta["classes"].push_back({{"name", c.name}, {"pce", c.pce}});
  save_checkpoint(out_path(g, "checkpoint.json"), ck);
  write_history(out_path(g, "history.csv"), r.history);
  std::cout << "trained " << r.history.size() << " steps in " << std::fixed << std::setprecision(1) << secs
            << " s; best step " << r.best_step << ", validation L_alpha " << std::setprecision(5) << r.best_val_alpha
            << "\n";

  // Score on the held-out split of the same dataset, or on a separate one.
  std::vector<Sample> test;
  if (!d.test_data.empty()) {
    const Loaded t = load_dataset(f, d.test_data);
    test = make_samples(t.net, man.classes, t.ds.records, all_positions(t.ds), man.normalization, g.threads);
  } else if (!man.test.empty()) {
    test = make_samples(l.net, man.classes, l.ds.records, man.test, man.normalization, g.threads);
  }
  if (!test.empty()) {
    const Evaluation ev = evaluate(r.best, test, man.classes, g.threads);
    write_evaluation((fs::path(g.out_dir) / "eval").string(), ev, l.net, man.classes);
    print_report(ev.report);
  }
  return kOk;
}

int cmd_eval(const Global& g, const NetFiles& f, const std::string& checkpoint, const std::string& data,
             const std::string& split) {
  g_run.input(checkpoint);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Loaded l = load_dataset(f, data);
  const auto& man = l.ds.manifest;
  if (ck.params.config.num_nodes != l.net.num_nodes() || ck.params.config.num_links != l.net.num_links() ||
      ck.params.config.num_classes != static_cast<int>(man.classes.size()))
    throw DataError("checkpoint does not match the dataset network or classes");
  std::vector<int> pos;
  if (split == "test")
    pos = man.test;
  else if (split == "train")
    pos = man.train;
  else if (split == "all")
    pos = all_positions(l.ds);
  else
    throw UsageError("--split must be test, train or all");
  if (pos.empty()) throw DataError("split '" + split + "' of " + data + " is empty");
  const auto samples = make_samples(l.net, man.classes, l.ds.records, pos, ck.normalization, g.threads);
  const Evaluation ev = evaluate(ck.params, samples, man.classes, g.threads);
  write_evaluation(g.out_dir, ev, l.net, man.classes);
  for (const char* n : {"metrics.json", "residue_nodes.csv"}) g_run.outputs.push_back((fs::path(g.out_dir) / n).string());
  print_report(ev.report);
  return kOk;
}

int cmd_ablate(const Global& g, const NetFiles& f, const DataArgs& d, ModelArgs ma, const TrainArgs& ta,
               std::vector<std::string> variants, std::vector<std::string> baselines, int seeds) {
  if (seeds < 1) throw UsageError("--seeds must be at least 1");
  for (const auto& v : variants) variant_from_string(v);
  for (const auto& b : baselines) baseline_from_string(b);
  if (std::find(variants.begin(), variants.end(), "full") == variants.end()) variants.insert(variants.begin(), "full");

  const Loaded l = load_dataset(f, d.data);
  const auto& man = l.ds.manifest;
  if (man.test.empty()) throw DataError("ablation needs a dataset with a test split");
  const auto train_set = make_samples(l.net, man.classes, l.ds.records, man.train, man.normalization, g.threads);
  const auto test_set = make_samples(l.net, man.classes, l.ds.records, man.test, man.normalization, g.threads);

  struct Row {
    std::string name;
    int seed;
    MetricsReport report;
  };
  std::vector<Row> rows;
  auto run = [&](const std::string& label, const ModelConfig& cfg) {
    for (int s = 0; s < seeds; ++s) {
      const TrainConfig tc = train_config(ta, g, g.seed + static_cast<std::uint64_t>(s));
      const TrainResult r = train(cfg, tc, train_set);
      rows.push_back({label, s, evaluate(r.best, test_set, man.classes, g.threads).report});
      std::cout << std::left << std::setw(18) << label << " seed " << s << "  ratio MAE " << std::fixed
                << std::setprecision(5) << rows.back().report.mean_ratio_mae() << "  residue "
                << rows.back().report.residue << std::endl;
    }
  };
  for (const auto& v : variants) {
    ma.variant = v;
    ma.baseline = "none";
    run(v, model_config(ma, l.net, static_cast<int>(man.classes.size())));
  }
  for (const auto& b : baselines) {
    ma.variant = "full";
    ma.baseline = b;
    run(b, model_config(ma, l.net, static_cast<int>(man.classes.size())));
  }

  auto out = open_out(out_path(g, "ablation.csv"));
  out << "model,seed,mean_ratio_mae,residue";
  for (const auto& c : man.classes) out << ",ratio_mae_" << c.name << ",flow_mae_" << c.name;
  out << '\n';
  for (const auto& r : rows) {
    out << r.name << ',' << r.seed << ',' << r.report.mean_ratio_mae() << ',' << r.report.residue;
    for (const auto& c : r.report.classes) out << ',' << c.ratio_mae << ',' << c.flow_mae;
    out << '\n';
  }
  auto sum = open_out(out_path(g, "ablation_summary.csv"));
  sum << "model,seeds,ratio_mae_mean,ratio_mae_sd,residue_mean,residue_sd\n";
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.name) == order.end()) order.push_back(r.name);
  for (const auto& name : order) {
    std::vector<double> m, res;
    for (const auto& r : rows)
      if (r.name == name) {
        m.push_back(r.report.mean_ratio_mae());
        res.push_back(r.report.residue);
      }
    auto stats = [](const std::vector<double>& x) {
      double mu = 0.0, var = 0.0;
      for (double v : x) mu += v / x.size();
      for (double v : x) var += (v - mu) * (v - mu);
      return std::pair(mu, x.size() > 1 ? std::sqrt(var / (x.size() - 1)) : 0.0);
    };
    const auto [mm, ms] = stats(m);
    const auto [rm, rs] = stats(res);
    sum << name << ',' << m.size() << ',' << mm << ',' << ms << ',' << rm << ',' << rs << '\n';
  }
  return kOk;
}

int cmd_gradcheck(const Global& g, double eps, int coords, const std::string& variant, double tolerance,
                  double margin) {
  const auto m = check_model_gradients(eps, coords, g.seed, variant_from_string(variant), margin);
  const auto& r = m.check;
  std::cout << "checked " << r.coordinates_checked << " coordinates, max relative error " << std::scientific
            << std::setprecision(3) << r.max_relative_error << " (eps " << eps << ", kink margin " << m.kink_margin
            << ", point " << m.attempts << ")\n";
  g_run.extra["max_relative_error"] = r.max_relative_error;
  open_out(out_path(g, "gradcheck.json"))
      << json{{"eps", eps},
              {"coordinates", r.coordinates_checked},
              {"max_relative_error", r.max_relative_error},
              {"kink_margin", m.kink_margin},
              {"attempts", m.attempts}}
             .dump(2)
      << "\n";
  return r.max_relative_error <= tolerance ? kOk : kNumeric;
}

void write_run_json(const Global& g, int code, double secs) {
  try {
    fs::create_directories(g.out_dir);
    json j{{"command", g_run.command},
           {"subcommand", g_run.subcommand},
           {"seed", g.seed},
           {"threads", g.threads},
           {"out_dir", g.out_dir},
           {"exit_code", code},
           {"seconds", secs},
           {"versions",
            {{"tapnet", kVersion},
             {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                           std::to_string(EIGEN_MINOR_VERSION)},
             {"cli11", CLI11_VERSION},
             {"compiler", __VERSION__}}},
           {"inputs", g_run.inputs},
           {"outputs", g_run.outputs}};
    if (!g_run.extra.empty()) j["result"] = g_run.extra;
    std::ofstream((fs::path(g.out_dir) / "run.json").string()) << j.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "warning: could not write run.json: " << e.what() << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tapnet: multi-class traffic assignment solver and graph surrogate models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Global g;
  app.add_option("--seed", g.seed, "master seed")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "output directory (TAPNET_OUT overrides)")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  NetFiles nf;
  auto net_opts = [&](CLI::App* c, bool trips) {
    c->add_option("--net", nf.net, "TNTP network file")->required()->check(CLI::ExistingFile);
    c->add_option("--nodes", nf.nodes, "TNTP node coordinate file")->check(CLI::ExistingFile);
    if (trips) c->add_option("--trips", nf.trips, "TNTP trips file")->check(CLI::ExistingFile);
  };

  auto* inspect = app.add_subcommand("inspect", "summarize a network and its demand");
  net_opts(inspect, true);

  std::string objective = "ue", classes_file;
  double tol = 1e-5;
  int max_iter = 20000;
  bool conjugate = false;
  auto* solve_cmd = app.add_subcommand("solve", "Frank-Wolfe assignment");
  net_opts(solve_cmd, true);
  solve_cmd->add_option("--objective", objective, "ue or so")->check(CLI::IsMember({"ue", "so"}))->capture_default_str();
  solve_cmd->add_option("--classes", classes_file, "vehicle classes JSON");
  solve_cmd->add_option("--tol", tol, "relative flow change threshold")->capture_default_str();
  solve_cmd->add_option("--max-iter", max_iter, "iteration limit")->capture_default_str();
  solve_cmd->add_flag("--conjugate", conjugate, "conjugate Frank-Wolfe directions");

  std::string preset_name = "indist", ds_name;
  int n_records = 100, first_index = 0, gen_max_iter = 0;
  double train_fraction = 0.8;
  auto* generate = app.add_subcommand("generate", "sample and solve scenarios into a dataset");
  net_opts(generate, true);
  generate->add_option("--preset", preset_name, "base, indist, ood-train or ood-test")
      ->check(CLI::IsMember({"base", "indist", "ood-train", "ood-test"}))
      ->capture_default_str();
  generate->add_option("-n,--records", n_records, "number of scenarios")->capture_default_str();
  generate->add_option("--name", ds_name, "dataset name (default: preset)");
  generate->add_option("--train-fraction", train_fraction, "train share of the split")->capture_default_str();
  generate->add_option("--objective", objective, "ue or so")->check(CLI::IsMember({"ue", "so"}));
  generate->add_option("--classes", classes_file, "vehicle classes JSON (default car 0.8 / truck 0.2)");
  generate->add_option("--first-index", first_index, "index of the first scenario")->capture_default_str();
  generate->add_option("--max-iter", gen_max_iter, "solver iteration limit per scenario");

  DataArgs da;
  ModelArgs ma;
  TrainArgs ta;
  auto model_opts = [&](CLI::App* c) {
    c->add_option("--layers", ma.layers)->capture_default_str();
    c->add_option("--heads", ma.heads)->capture_default_str();
    c->add_option("--hidden", ma.hidden)->capture_default_str();
    c->add_option("--embed", ma.embed)->capture_default_str();
    c->add_option("--decoder-hidden", ma.decoder)->capture_default_str();
  };
  auto train_opts = [&](CLI::App* c) {
    c->add_option("--lr", ta.lr)->capture_default_str();
    c->add_option("--batch", ta.batch)->capture_default_str();
    c->add_option("--steps", ta.steps)->capture_default_str();
    c->add_option("--eval-every", ta.eval_every)->capture_default_str();
    c->add_option("--w-alpha", ta.w_alpha)->capture_default_str();
    c->add_option("--w-flow", ta.w_flow)->capture_default_str();
    c->add_option("--w-cons", ta.w_cons)->capture_default_str();
  };

  auto* train_cmd = app.add_subcommand("train", "train a surrogate on a dataset");
  net_opts(train_cmd, false);
  train_cmd->add_option("--data", da.data, "dataset .jsonl")->required();
  train_cmd->add_option("--test-data", da.test_data, "separate dataset to score on");
  train_cmd->add_option("--variant", ma.variant)->capture_default_str();
  train_cmd->add_option("--baseline", ma.baseline, "none, gat, gcn or graphsage")->capture_default_str();
  train_cmd->add_option("--val-fraction", ta.val_fraction, "share of train held out for checkpoint choice")
      ->capture_default_str();
  train_cmd->add_option("--folds", ta.folds, "k-fold cross-validation over the whole dataset (0 = off)");
  model_opts(train_cmd);
  train_opts(train_cmd);

  std::string checkpoint, split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  net_opts(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", da.data, "dataset .jsonl")->required();
  eval_cmd->add_option("--split", split, "test, train or all")->capture_default_str();

  std::vector<std::string> variants = {"no_link_feat", "no_od_link", "no_intra_view", "single_head",
                                       "no_conservation"};
  std::vector<std::string> baselines;
  int seeds = 1;
  auto* ablate = app.add_subcommand("ablate", "train variants and compare test ratio MAE");
  net_opts(ablate, false);
  ablate->add_option("--data", da.data, "dataset .jsonl")->required();
  ablate->add_option("--variants", variants, "variants besides full")->delimiter(',');
  ablate->add_option("--baselines", baselines, "gat, gcn, graphsage")->delimiter(',');
  ablate->add_option("--seeds", seeds)->capture_default_str();
  model_opts(ablate);
  train_opts(ablate);

  double eps = 1e-4, gc_tol = 1e-4, gc_margin = 1e-3;
  int coords = 400;
  std::string gc_variant = "full";
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the model loss");
  gradcheck->add_option("--eps", eps)->capture_default_str();
  gradcheck->add_option("--coords", coords, "coordinates sampled")->capture_default_str();
  gradcheck->add_option("--variant", gc_variant)->capture_default_str();
  gradcheck->add_option("--tolerance", gc_tol)->capture_default_str();
  gradcheck->add_option("--margin", gc_margin, "minimum distance of relu/abs inputs to their kink")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (const char* env = std::getenv("TAPNET_OUT"); env && *env) g.out_dir = env;
  for (int i = 0; i < argc; ++i) g_run.command += (i ? " " : "") + std::string(argv[i]);
  g_run.subcommand = app.get_subcommands().front()->get_name();

  const auto t0 = std::chrono::steady_clock::now();
  int code = kOk;
  try {
    if (*inspect)
      code = cmd_inspect(g, nf);
    else if (*solve_cmd)
      code = cmd_solve(g, nf, objective, classes_file, tol, max_iter, conjugate);
    else if (*generate)
      code = cmd_generate(g, nf, preset_name, n_records, ds_name, train_fraction, objective, classes_file,
                          first_index, gen_max_iter);
    else if (*train_cmd)
      code = cmd_train(g, nf, da, ma, ta);
    else if (*eval_cmd)
      code = cmd_eval(g, nf, checkpoint, da.data, split);
    else if (*ablate)
      code = cmd_ablate(g, nf, da, ma, ta, variants, baselines, seeds);
    else if (*gradcheck)
      code = cmd_gradcheck(g, eps, coords, gc_variant, gc_tol, gc_margin);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    code = kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    code = kData;
  } catch (const ad::ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    code = kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    code = kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    code = kFail;
  }
  write_run_json(g, code, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return code;
}
