#include "tapnet/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tapnet/tntp.hpp"

namespace tapnet {

using nlohmann::json;

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vec_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

bool same(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

template <typename T>
bool same_list(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same(a[i], b[i])) return false;
  return true;
}

json record_to_json(const DatasetRecord& r) {
  json j;
  j["index"] = r.index;
  j["seed"] = r.seed;
  j["objective"] = to_string(r.objective);
  j["demand_factor_mean"] = r.demand_factor_mean;
  j["capacity_factors"] = vec_json(r.capacity_factors);
  j["removed_links"] = r.removed_links;
  const int n = r.od.num_classes() > 0 ? static_cast<int>(r.od.demand[0].rows()) : 0;
  j["num_nodes"] = n;
  json od = json::array();
  for (const auto& d : r.od.demand) {
    json entries = json::array();
    for (int a = 0; a < d.rows(); ++a)
      for (int b = 0; b < d.cols(); ++b)
        if (d(a, b) != 0.0) entries.push_back(json::array({a, b, d(a, b)}));
    od.push_back(std::move(entries));
  }
  j["od"] = std::move(od);
  json flows = json::array(), ratios = json::array();
  for (const auto& f : r.flows.flow) flows.push_back(vec_json(f));
  for (const auto& x : r.ratios) ratios.push_back(vec_json(x));
  j["flows"] = std::move(flows);
  j["ratios"] = std::move(ratios);
  j["iterations"] = r.iterations;
  j["relative_gap"] = r.relative_gap;
  j["converged"] = r.converged;
  return j;
}

DatasetRecord record_from_json(const json& j) {
  DatasetRecord r;
  r.index = j.at("index").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.objective = objective_from_string(j.at("objective").get<std::string>());
  r.demand_factor_mean = j.at("demand_factor_mean").get<std::vector<double>>();
  r.capacity_factors = vec_from(j.at("capacity_factors"));
  r.removed_links = j.at("removed_links").get<std::vector<int>>();
  const int n = j.at("num_nodes").get<int>();
  for (const auto& entries : j.at("od")) {
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
    for (const auto& e : entries) {
      const int a = e.at(0).get<int>(), b = e.at(1).get<int>();
      if (a < 0 || b < 0 || a >= n || b >= n) throw DataError("OD entry outside node range");
      d(a, b) = e.at(2).get<double>();
    }
    r.od.demand.push_back(std::move(d));
  }
  for (const auto& f : j.at("flows")) r.flows.flow.push_back(vec_from(f));
  for (const auto& x : j.at("ratios")) r.ratios.push_back(vec_from(x));
  r.iterations = j.at("iterations").get<int>();
  r.relative_gap = j.at("relative_gap").get<double>();
  r.converged = j.at("converged").get<bool>();
  return r;
}

std::string slurp(const std::string& path) { return read_text_file(path); }

void spill(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace

bool operator==(const DatasetRecord& a, const DatasetRecord& b) {
  return a.index == b.index && a.seed == b.seed && a.objective == b.objective &&
         a.demand_factor_mean == b.demand_factor_mean && same(a.capacity_factors, b.capacity_factors) &&
         a.removed_links == b.removed_links && same_list(a.od.demand, b.od.demand) &&
         same_list(a.flows.flow, b.flows.flow) && same_list(a.ratios, b.ratios) &&
         a.iterations == b.iterations && a.relative_gap == b.relative_gap &&
         a.converged == b.converged;
}

std::string write_records(const std::vector<DatasetRecord>& records) {
  std::string out = json{{"format_version", kDatasetFormatVersion}, {"records", records.size()}}.dump();
  out += '\n';
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

std::vector<DatasetRecord> read_records(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw DataError("dataset: missing header line");
  std::size_t expected = 0;
  try {
    const json h = json::parse(line);
    const int version = h.at("format_version").get<int>();
    if (version != kDatasetFormatVersion)
      throw DataError("dataset: format_version " + std::to_string(version) + " is not supported");
    const auto count = h.at("records").get<long long>();
    if (count < 0) throw DataError("dataset: negative record count");
    expected = static_cast<std::size_t>(count);
  } catch (const json::exception& e) {
    throw DataError(std::string("dataset: bad header: ") + e.what());
  }

  std::vector<DatasetRecord> records;
  records.reserve(expected);
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (records.size() == expected)
      throw DataError("dataset: more records than the header's count " + std::to_string(expected));
    try {
      records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError("dataset: malformed record at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (records.size() != expected)
    throw DataError("dataset: truncated, header declares " + std::to_string(expected) +
                    " records but found " + std::to_string(records.size()));
  return records;
}

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["format_version"] = m.format_version;
  j["network"] = {{"name", m.network_name}, {"fingerprint", m.network_fingerprint}};
  json classes = json::array();
  for (const auto& c : m.classes) {
    std::vector<int> mask(c.edge_mask.begin(), c.edge_mask.end());
    classes.push_back({{"name", c.name}, {"pce", c.pce}, {"mask", mask}});
  }
  j["classes"] = std::move(classes);
  j["scenario"] = m.scenario;
  j["split"] = {{"train", m.train}, {"test", m.test}};
  j["normalization"] = {{"demand_scale", m.normalization.demand_scale},
                        {"edge_mean", {m.normalization.edge_mean[0], m.normalization.edge_mean[1]}},
                        {"edge_std", {m.normalization.edge_std[0], m.normalization.edge_std[1]}}};
  json skipped = json::array();
  for (const auto& [idx, why] : m.skipped) skipped.push_back({{"index", idx}, {"reason", why}});
  j["skipped"] = std::move(skipped);
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kDatasetFormatVersion)
      throw DataError("manifest: format_version " + std::to_string(m.format_version) + " is not supported");
    m.network_name = j.at("network").at("name").get<std::string>();
    m.network_fingerprint = j.at("network").at("fingerprint").get<std::uint64_t>();
    for (const auto& c : j.at("classes")) {
      VehicleClass vc;
      vc.name = c.at("name").get<std::string>();
      vc.pce = c.at("pce").get<double>();
      for (int b : c.at("mask").get<std::vector<int>>()) vc.edge_mask.push_back(b != 0);
      m.classes.push_back(std::move(vc));
    }
    m.scenario = j.at("scenario");
    m.train = j.at("split").at("train").get<std::vector<int>>();
    m.test = j.at("split").at("test").get<std::vector<int>>();
    const auto& n = j.at("normalization");
    m.normalization.demand_scale = n.at("demand_scale").get<double>();
    const auto mean = n.at("edge_mean").get<std::vector<double>>();
    const auto sd = n.at("edge_std").get<std::vector<double>>();
    if (mean.size() != 2 || sd.size() != 2) throw DataError("manifest: edge statistics need 2 entries");
    m.normalization.edge_mean = Eigen::Vector2d(mean[0], mean[1]);
    m.normalization.edge_std = Eigen::Vector2d(sd[0], sd[1]);
    for (const auto& s : j.at("skipped"))
      m.skipped.emplace_back(s.at("index").get<int>(), s.at("reason").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  return m;
}

void write_dataset(const std::string& dir, const std::string& name, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  const std::string stem = (std::filesystem::path(dir) / name).string();
  spill(stem + ".jsonl", write_records(ds.records));
  spill(stem + ".manifest.json", manifest_to_json(ds.manifest).dump(1) + "\n");
}

Dataset read_dataset(const std::string& dir, const std::string& name) {
  return read_dataset((std::filesystem::path(dir) / name).string());
}

Dataset read_dataset(const std::string& path) {
  std::string stem = path;
  for (const std::string suffix : {".jsonl", ".manifest.json"})
    if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
      stem.resize(stem.size() - suffix.size());
  Dataset ds;
  json mj;
  try {
    mj = json::parse(slurp(stem + ".manifest.json"));
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  ds.manifest = manifest_from_json(mj);
  ds.records = read_records(slurp(stem + ".jsonl"));
  const int n = static_cast<int>(ds.records.size());
  for (int p : ds.manifest.train)
    if (p < 0 || p >= n) throw DataError("manifest: train split references record outside dataset");
  for (int p : ds.manifest.test)
    if (p < 0 || p >= n) throw DataError("manifest: test split references record outside dataset");
  return ds;
}

RoadNetwork record_network(const RoadNetwork& base, const DatasetRecord& rec) {
  if (rec.capacity_factors.size() != base.num_links())
    throw DataError("record capacity factors do not match the network's link count");
  return base.with_capacity_factors(rec.capacity_factors);
}

std::vector<VehicleClass> record_classes(const std::vector<VehicleClass>& base,
                                         const DatasetRecord& rec) {
  std::vector<VehicleClass> out;
  for (const auto& c : base) out.push_back(without_links(c, rec.removed_links));
  return out;
}

Normalization fit_normalization(const RoadNetwork& base, const std::vector<VehicleClass>& classes,
                                const std::vector<DatasetRecord>& records,
                                const std::vector<int>& positions) {
  Normalization norm;
  double max_demand = 0.0;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sq = Eigen::Vector2d::Zero();
  double count = 0.0;
  for (int p : positions) {
    const DatasetRecord& r = records.at(p);
    for (const auto& d : r.od.demand) max_demand = std::max(max_demand, d.maxCoeff());
    const RoadNetwork net = record_network(base, r);
    const auto cls = record_classes(classes, r);
    for (const auto& c : cls)
      for (int e = 0; e < net.num_links(); ++e) {
        if (!c.edge_mask[e]) continue;
        const Eigen::Vector2d y(net.links()[e].free_flow_time, net.links()[e].capacity);
        sum += y;
        sq += y.cwiseAbs2();
        count += 1.0;
      }
  }
  if (max_demand > 0.0) norm.demand_scale = max_demand;
  if (count > 0.0) {
    norm.edge_mean = sum / count;
    const Eigen::Vector2d var = (sq / count - norm.edge_mean.cwiseAbs2()).cwiseMax(0.0);
    for (int k = 0; k < 2; ++k) norm.edge_std[k] = var[k] > 1e-24 ? std::sqrt(var[k]) : 1.0;
  }
  return norm;
}

}  // namespace tapnet
