#include "tapnet/tntp.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

namespace tapnet {
namespace {

struct Line {
  int number;
  std::string_view text;
};

std::vector<Line> split_lines(std::string_view text) {
  std::vector<Line> lines;
  int number = 1;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view l = text.substr(start, end - start);
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    lines.push_back({number++, l});
    if (end == text.size()) break;
    start = end + 1;
  }
  return lines;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

[[noreturn]] void fail(const std::string& what, int line) {
  throw DataError(what + " (line " + std::to_string(line) + ")");
}

std::optional<double> to_double(std::string_view tok) {
  std::string s(tok);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<int> to_int(std::string_view tok) {
  int v = 0;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size()) return std::nullopt;
  return v;
}

std::vector<std::string_view> fields(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Metadata tags (`<KEY> value`) and the data rows that follow them.
struct Sections {
  std::map<std::string, std::string> meta;
  std::vector<Line> body;
};

Sections split_sections(std::string_view text) {
  Sections s;
  for (const Line& line : split_lines(text)) {
    std::string_view t = trim(line.text);
    if (t.empty() || t.front() == '~') continue;
    if (t.front() == '<') {
      const auto close = t.find('>');
      if (close == std::string_view::npos) fail("unterminated metadata tag", line.number);
      s.meta[upper(trim(t.substr(1, close - 1)))] = std::string(trim(t.substr(close + 1)));
      continue;
    }
    s.body.push_back({line.number, t});
  }
  return s;
}

std::optional<int> meta_int(const Sections& s, const std::string& key) {
  auto it = s.meta.find(key);
  if (it == s.meta.end()) return std::nullopt;
  auto v = to_double(it->second);
  if (!v) throw DataError("metadata <" + key + "> is not numeric");
  return static_cast<int>(*v);
}

}  // namespace

RoadNetwork parse_network(std::string_view net_text, std::string_view coord_text) {
  const Sections sec = split_sections(net_text);
  const auto header_nodes = meta_int(sec, "NUMBER OF NODES");
  const auto header_links = meta_int(sec, "NUMBER OF LINKS");
  if (!header_nodes || !header_links)
    throw DataError("network header must declare <NUMBER OF NODES> and <NUMBER OF LINKS>");
  if (*header_nodes <= 0 || *header_links <= 0)
    throw DataError("network header declares an empty network");

  struct RawLink {
    int tail, head;
    Link link;
    int line;
  };
  std::vector<RawLink> raw;
  for (const Line& line : sec.body) {
    std::string_view t = line.text;
    if (t.back() == ';') t.remove_suffix(1);
    auto f = fields(t);
    if (f.size() < 5) fail("link row needs at least 5 columns", line.number);
    std::vector<double> v;
    for (auto tok : f) {
      auto d = to_double(tok);
      if (!d) fail("non-numeric field '" + std::string(tok) + "'", line.number);
      v.push_back(*d);
    }
    RawLink r{static_cast<int>(v[0]), static_cast<int>(v[1]), Link{}, line.number};
    r.link.capacity = v[2];
    r.link.free_flow_time = v[4];
    if (v.size() >= 7) {
      r.link.alpha = v[5];
      r.link.beta = v[6];
    }
    raw.push_back(r);
  }
  if (static_cast<int>(raw.size()) != *header_links)
    throw DataError("header declares " + std::to_string(*header_links) + " links but body has " +
                    std::to_string(raw.size()));

  std::vector<Node> nodes;
  if (!trim(coord_text).empty()) {
    for (const Line& line : split_lines(coord_text)) {
      std::string_view t = trim(line.text);
      if (t.empty() || t.front() == '~' || t.front() == '<') continue;
      if (t.back() == ';') t.remove_suffix(1);
      auto f = fields(t);
      if (f.size() < 3) fail("coordinate row needs node, x, y", line.number);
      auto id = to_int(f[0]);
      if (!id) {
        if (nodes.empty()) continue;  // column header
        fail("bad node id '" + std::string(f[0]) + "'", line.number);
      }
      auto x = to_double(f[1]);
      auto y = to_double(f[2]);
      if (!x || !y) fail("non-numeric coordinate", line.number);
      nodes.push_back(Node{*id, *x, *y});
    }
    if (static_cast<int>(nodes.size()) != *header_nodes)
      throw DataError("header declares " + std::to_string(*header_nodes) +
                      " nodes but coordinate table has " + std::to_string(nodes.size()));
  } else {
    for (int i = 1; i <= *header_nodes; ++i) nodes.push_back(Node{i, 0.0, 0.0});
  }

  std::map<int, int> index_of;
  for (std::size_t i = 0; i < nodes.size(); ++i) index_of[nodes[i].id] = static_cast<int>(i);
  auto lookup = [&](int id) {
    auto it = index_of.find(id);
    return it == index_of.end() ? -1 : it->second;
  };
  std::vector<Link> links;
  links.reserve(raw.size());
  for (auto& r : raw) {
    const int t = lookup(r.tail);
    const int h = lookup(r.head);
    if (t < 0 || h < 0) fail("link references unknown node", r.line);
    r.link.tail = t;
    r.link.head = h;
    links.push_back(r.link);
  }
  return RoadNetwork(std::move(nodes), std::move(links));
}

Eigen::MatrixXd parse_trips(std::string_view trips_text, const RoadNetwork& net) {
  const Sections sec = split_sections(trips_text);
  const int n = net.num_nodes();
  Eigen::MatrixXd od = Eigen::MatrixXd::Zero(n, n);
  int origin = -1;
  double parsed_total = 0.0;

  for (const Line& line : sec.body) {
    // Tokens: words, numbers, ':' and ';' as separators.
    std::vector<std::string> toks;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) toks.push_back(cur);
      cur.clear();
    };
    for (char ch : line.text) {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        flush();
      } else if (ch == ':' || ch == ';') {
        flush();
        toks.emplace_back(1, ch);
      } else {
        cur.push_back(ch);
      }
    }
    flush();

    std::size_t i = 0;
    while (i < toks.size()) {
      if (toks[i] == ";") {
        ++i;
        continue;
      }
      if (upper(toks[i]) == "ORIGIN") {
        if (i + 1 >= toks.size()) fail("'Origin' without a node id", line.number);
        auto id = to_int(toks[i + 1]);
        if (!id) fail("bad origin id '" + toks[i + 1] + "'", line.number);
        origin = net.node_index(*id);
        if (origin < 0) fail("origin " + toks[i + 1] + " is not a network node", line.number);
        i += 2;
        continue;
      }
      if (i + 2 >= toks.size() || toks[i + 1] != ":")
        fail("expected 'destination : demand'", line.number);
      if (origin < 0) fail("demand entry before any 'Origin' block", line.number);
      auto id = to_int(toks[i]);
      auto q = to_double(toks[i + 2]);
      if (!id) fail("bad destination id '" + toks[i] + "'", line.number);
      if (!q || *q < 0.0) fail("bad demand value '" + toks[i + 2] + "'", line.number);
      const int dest = net.node_index(*id);
      if (dest < 0) fail("destination " + toks[i] + " is not a network node", line.number);
      od(origin, dest) += *q;
      parsed_total += *q;
      i += 3;
    }
  }

  if (auto it = sec.meta.find("TOTAL OD FLOW"); it != sec.meta.end()) {
    auto declared = to_double(it->second);
    if (!declared) throw DataError("<TOTAL OD FLOW> is not numeric");
    const double tol = 1e-6 * std::max(1.0, std::abs(*declared));
    if (std::abs(parsed_total - *declared) > tol) {
      std::ostringstream os;
      os << "parsed demand " << parsed_total << " does not match <TOTAL OD FLOW> " << *declared;
      throw DataError(os.str());
    }
  }
  od.diagonal().setZero();
  return od;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace tapnet
