#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace blackout {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using LineStatus = std::vector<bool>;

class GridError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// "island detected" / "solve failed"
class SolveError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Line {
  int id = 0;
  int from_bus = 0;  // bus id
  int to_bus = 0;
  double reactance = 0.0;   // per unit
  double flow_limit = 0.0;  // MW
  double switch_cost = 1.0;
};

struct Generator {
  int id = 0;
  int bus = 0;
  double p_min = 0.0;
  double p_max = 0.0;
  double ramp_limit = 0.0;  // MW per step
  double cost_per_mw = 0.0;
  bool dispatchable = true;
};

struct Load {
  int id = 0;
  int bus = 0;
};

// Static network description. Entities are stored sorted by id; everything
// downstream addresses them by position (0-based index).
class Grid {
public:
  double base_mva = 100.0;
  int slack_bus = 0;
  std::vector<int> buses;
  std::vector<Line> lines;
  std::vector<Generator> generators;
  std::vector<Load> loads;

  int num_buses() const { return static_cast<int>(buses.size()); }
  int num_lines() const { return static_cast<int>(lines.size()); }
  int num_generators() const { return static_cast<int>(generators.size()); }
  int num_loads() const { return static_cast<int>(loads.size()); }

  int bus_index(int bus_id) const {
    auto it = bus_pos_.find(bus_id);
    if (it == bus_pos_.end()) throw GridError("unknown bus id " + std::to_string(bus_id));
    return it->second;
  }
  bool has_bus(int bus_id) const { return bus_pos_.count(bus_id) != 0; }

  int line_index(int line_id) const {
    for (int i = 0; i < num_lines(); ++i)
      if (lines[i].id == line_id) return i;
    throw GridError("unknown line id " + std::to_string(line_id));
  }

  int slack_index() const { return bus_index(slack_bus); }
  // Lowest-id generator sitting on the slack bus.
  int slack_generator() const { return slack_gen_; }

  int from_index(int line) const { return from_idx_[line]; }
  int to_index(int line) const { return to_idx_[line]; }
  int gen_bus_index(int gen) const { return gen_bus_idx_[gen]; }
  int load_bus_index(int load) const { return load_bus_idx_[load]; }

  LineStatus all_lines_on() const { return LineStatus(lines.size(), true); }

  // Rebuilds lookup tables and checks every invariant. Throws GridError.
  void finalize();

private:
  std::map<int, int> bus_pos_;
  std::vector<int> from_idx_, to_idx_, gen_bus_idx_, load_bus_idx_;
  int slack_gen_ = -1;
};

// Connected components of the operational topology. label[i] is the
// component of bus index i; components are numbered by their lowest bus index.
struct Islands {
  std::vector<int> label;
  std::vector<std::vector<int>> components;

  int count() const { return static_cast<int>(components.size()); }
  bool connected(int a, int b) const { return label[a] == label[b]; }
};

inline Islands islands(const Grid& grid, const LineStatus& status) {
  const int n = grid.num_buses();
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (int l = 0; l < grid.num_lines(); ++l) {
    if (!status[l]) continue;
    int a = find(grid.from_index(l)), b = find(grid.to_index(l));
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  Islands out;
  out.label.assign(n, -1);
  std::map<int, int> root_to_comp;
  for (int i = 0; i < n; ++i) {
    int r = find(i);
    auto [it, inserted] = root_to_comp.emplace(r, static_cast<int>(out.components.size()));
    if (inserted) out.components.emplace_back();
    out.label[i] = it->second;
    out.components[it->second].push_back(i);
  }
  return out;
}

inline void Grid::finalize() {
  if (!(base_mva > 0.0)) throw GridError("base_mva must be positive");
  if (buses.empty()) throw GridError("buses: empty bus list");

  auto by_id = [](const auto& a, const auto& b) { return a.id < b.id; };
  std::sort(buses.begin(), buses.end());
  std::sort(lines.begin(), lines.end(), by_id);
  std::sort(generators.begin(), generators.end(), by_id);
  std::sort(loads.begin(), loads.end(), by_id);

  bus_pos_.clear();
  for (int i = 0; i < num_buses(); ++i) {
    if (buses[i] <= 0) throw GridError("buses[" + std::to_string(i) + "]: ids must be positive");
    if (!bus_pos_.emplace(buses[i], i).second)
      throw GridError("buses: duplicate id " + std::to_string(buses[i]));
  }
  auto dup_check = [](const auto& items, const char* what) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (items[i].id <= 0)
        throw GridError(std::string(what) + " id " + std::to_string(items[i].id) + ": ids must be positive");
      if (i > 0 && items[i].id == items[i - 1].id)
        throw GridError(std::string(what) + ": duplicate id " + std::to_string(items[i].id));
    }
  };
  dup_check(lines, "lines");
  dup_check(generators, "generators");
  dup_check(loads, "loads");

  auto dangling = [](const std::string& where, int bus) {
    return GridError(where + ": dangling bus reference " + std::to_string(bus));
  };
  from_idx_.clear();
  to_idx_.clear();
  for (const auto& ln : lines) {
    const std::string where = "line " + std::to_string(ln.id);
    if (!has_bus(ln.from_bus)) throw dangling(where, ln.from_bus);
    if (!has_bus(ln.to_bus)) throw dangling(where, ln.to_bus);
    if (ln.from_bus == ln.to_bus) throw GridError(where + ": from_bus equals to_bus");
    if (!(ln.reactance > 0.0)) throw GridError(where + ": reactance must be positive");
    if (!(ln.flow_limit > 0.0)) throw GridError(where + ": flow limit must be positive");
    if (!(ln.switch_cost >= 0.0)) throw GridError(where + ": switch cost must be non-negative");
    from_idx_.push_back(bus_index(ln.from_bus));
    to_idx_.push_back(bus_index(ln.to_bus));
  }
  gen_bus_idx_.clear();
  for (const auto& g : generators) {
    const std::string where = "generator " + std::to_string(g.id);
    if (!has_bus(g.bus)) throw dangling(where, g.bus);
    if (!(g.p_min >= 0.0 && g.p_min <= g.p_max)) throw GridError(where + ": require 0 <= p_min <= p_max");
    if (!(g.ramp_limit > 0.0)) throw GridError(where + ": ramp must be positive");
    if (!(g.cost_per_mw >= 0.0)) throw GridError(where + ": cost must be non-negative");
    gen_bus_idx_.push_back(bus_index(g.bus));
  }
  load_bus_idx_.clear();
  for (const auto& d : loads) {
    if (!has_bus(d.bus)) throw dangling("load " + std::to_string(d.id), d.bus);
    load_bus_idx_.push_back(bus_index(d.bus));
  }
  if (!has_bus(slack_bus)) throw GridError("slack_bus: dangling bus reference " + std::to_string(slack_bus));
  slack_gen_ = -1;
  for (int j = 0; j < num_generators(); ++j)
    if (generators[j].bus == slack_bus) {
      slack_gen_ = j;
      break;
    }
  if (slack_gen_ < 0) throw GridError("slack_bus: no generator on slack bus " + std::to_string(slack_bus));

  if (islands(*this, all_lines_on()).count() != 1)
    throw GridError("lines: disconnected full topology");
}

namespace detail {

template <class T>
T required(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw GridError(where + ": missing key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw GridError(where + "." + key + ": wrong type");
  }
}

template <class T>
T optional(const nlohmann::json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  return required<T>(obj, key, where);
}

inline const nlohmann::json& array_at(const nlohmann::json& doc, const char* key) {
  if (!doc.contains(key) || !doc.at(key).is_array()) throw GridError(std::string(key) + ": expected a list");
  return doc.at(key);
}

}  // namespace detail

// Parses and validates a grid document. Errors name the offending entry.
inline Grid parse_grid(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw GridError("malformed syntax at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object()) throw GridError("malformed syntax: top level must be an object");

  Grid g;
  g.base_mva = detail::required<double>(doc, "base_mva", "grid");
  g.slack_bus = detail::required<int>(doc, "slack_bus", "grid");
  for (const auto& b : detail::array_at(doc, "buses")) {
    if (!b.is_number_integer()) throw GridError("buses: ids must be integers");
    g.buses.push_back(b.get<int>());
  }
  const auto& lines = detail::array_at(doc, "lines");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = "lines[" + std::to_string(i) + "]";
    const auto& o = lines[i];
    Line ln;
    ln.id = detail::required<int>(o, "id", where);
    ln.from_bus = detail::required<int>(o, "from", where);
    ln.to_bus = detail::required<int>(o, "to", where);
    ln.reactance = detail::required<double>(o, "x", where);
    ln.flow_limit = detail::required<double>(o, "f_max", where);
    ln.switch_cost = detail::optional<double>(o, "switch_cost", 1.0, where);
    g.lines.push_back(ln);
  }
  const auto& gens = detail::array_at(doc, "generators");
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const std::string where = "generators[" + std::to_string(i) + "]";
    const auto& o = gens[i];
    Generator gen;
    gen.id = detail::required<int>(o, "id", where);
    gen.bus = detail::required<int>(o, "bus", where);
    gen.p_min = detail::required<double>(o, "p_min", where);
    gen.p_max = detail::required<double>(o, "p_max", where);
    gen.ramp_limit = detail::required<double>(o, "ramp", where);
    gen.cost_per_mw = detail::required<double>(o, "cost", where);
    gen.dispatchable = detail::optional<bool>(o, "dispatchable", true, where);
    g.generators.push_back(gen);
  }
  const auto& loads = detail::array_at(doc, "loads");
  for (std::size_t i = 0; i < loads.size(); ++i) {
    const std::string where = "loads[" + std::to_string(i) + "]";
    g.loads.push_back({detail::required<int>(loads[i], "id", where), detail::required<int>(loads[i], "bus", where)});
  }
  g.finalize();
  return g;
}

inline Grid load_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw GridError("cannot open grid file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_grid(ss.str());
}

inline nlohmann::json to_json(const Grid& g) {
  nlohmann::json doc;
  doc["base_mva"] = g.base_mva;
  doc["slack_bus"] = g.slack_bus;
  doc["buses"] = g.buses;
  for (const auto& l : g.lines)
    doc["lines"].push_back({{"id", l.id}, {"from", l.from_bus}, {"to", l.to_bus}, {"x", l.reactance},
                            {"f_max", l.flow_limit}, {"switch_cost", l.switch_cost}});
  for (const auto& j : g.generators)
    doc["generators"].push_back({{"id", j.id}, {"bus", j.bus}, {"p_min", j.p_min}, {"p_max", j.p_max},
                                 {"ramp", j.ramp_limit}, {"cost", j.cost_per_mw}, {"dispatchable", j.dispatchable}});
  for (const auto& d : g.loads) doc["loads"].push_back({{"id", d.id}, {"bus", d.bus}});
  return doc;
}

// Net injection per bus (generation minus demand), MW.
inline Vec bus_injections(const Grid& grid, const Vec& gen_output, const Vec& load_demand) {
  Vec p = Vec::Zero(grid.num_buses());
  for (int j = 0; j < grid.num_generators(); ++j) p[grid.gen_bus_index(j)] += gen_output[j];
  for (int k = 0; k < grid.num_loads(); ++k) p[grid.load_bus_index(k)] -= load_demand[k];
  return p;
}

struct DcSolution {
  Vec angles;  // rad, slack = 0
  Vec flows;   // MW, positive from_bus -> to_bus
};

// DC power flow on the operational topology. The slack bus closes the
// balance of its component; any other island must carry zero injection
// (its angles are pinned to 0), otherwise the system has no reference.
inline DcSolution solve_dc(const Grid& grid, const Vec& injections, const LineStatus& status) {
  const int n = grid.num_buses();
  if (injections.size() != n || static_cast<int>(status.size()) != grid.num_lines())
    throw SolveError("solve failed: dimension mismatch");

  const Islands isl = islands(grid, status);
  const int slack = grid.slack_index();
  const int slack_comp = isl.label[slack];
  const double scale = std::max(1.0, injections.cwiseAbs().maxCoeff());
  for (int c = 0; c < isl.count(); ++c) {
    if (c == slack_comp) continue;
    for (int i : isl.components[c])
      if (std::abs(injections[i]) > 1e-9 * scale) throw SolveError("island detected");
  }

  // Reduced susceptance matrix over the slack component minus the slack.
  std::vector<int> pos(n, -1);
  int m = 0;
  for (int i : isl.components[slack_comp])
    if (i != slack) pos[i] = m++;

  DcSolution sol;
  sol.angles = Vec::Zero(n);
  sol.flows = Vec::Zero(grid.num_lines());
  if (m > 0) {
    Mat b = Mat::Zero(m, m);
    for (int l = 0; l < grid.num_lines(); ++l) {
      if (!status[l]) continue;
      const int f = pos[grid.from_index(l)], t = pos[grid.to_index(l)];
      const double y = 1.0 / grid.lines[l].reactance;
      if (f >= 0) b(f, f) += y;
      if (t >= 0) b(t, t) += y;
      if (f >= 0 && t >= 0) {
        b(f, t) -= y;
        b(t, f) -= y;
      }
    }
    Vec rhs(m);
    for (int i = 0; i < n; ++i)
      if (pos[i] >= 0) rhs[pos[i]] = injections[i] / grid.base_mva;
    Eigen::LDLT<Mat> ldlt(b);
    if (ldlt.info() != Eigen::Success) throw SolveError("solve failed");
    Vec theta = ldlt.solve(rhs);
    if (!theta.allFinite()) throw SolveError("solve failed");
    for (int i = 0; i < n; ++i)
      if (pos[i] >= 0) sol.angles[i] = theta[pos[i]];
  }
  for (int l = 0; l < grid.num_lines(); ++l) {
    if (!status[l]) continue;
    sol.flows[l] = grid.base_mva * (sol.angles[grid.from_index(l)] - sol.angles[grid.to_index(l)]) /
                   grid.lines[l].reactance;
  }
  return sol;
}

// |F| / F_max on operational lines, 0 on disconnected lines.
inline Vec risk_margins(const Grid& grid, const Vec& flows, const LineStatus& status) {
  Vec rho = Vec::Zero(grid.num_lines());
  for (int l = 0; l < grid.num_lines(); ++l)
    if (status[l]) rho[l] = std::abs(flows[l]) / grid.lines[l].flow_limit;
  return rho;
}

// Per-step feature record.
struct SystemState {
  int step = 0;
  Vec gen_output;   // G, MW
  Vec load_demand;  // D, MW
  Vec line_flow;    // L, MW
  Vec risk_margin;  // L
  LineStatus line_status;
  std::vector<int> overflow_steps;
  std::vector<int> cooldown;

  double max_margin() const { return risk_margin.size() ? risk_margin.maxCoeff() : 0.0; }
};

inline SystemState make_system_state(const Grid& grid, const Vec& gen_output, const Vec& load_demand,
                                     const LineStatus& status, const std::vector<int>& overflow_steps,
                                     const std::vector<int>& cooldown, int step) {
  const DcSolution sol = solve_dc(grid, bus_injections(grid, gen_output, load_demand), status);
  SystemState s;
  s.step = step;
  s.gen_output = gen_output;
  s.load_demand = load_demand;
  s.line_flow = sol.flows;
  s.risk_margin = risk_margins(grid, sol.flows, status);
  s.line_status = status;
  s.overflow_steps = overflow_steps;
  s.cooldown = cooldown;
  return s;
}

inline nlohmann::json to_json(const SystemState& s) {
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  std::vector<bool> status(s.line_status.begin(), s.line_status.end());
  return {{"step", s.step},
          {"gen_output", vec(s.gen_output)},
          {"load_demand", vec(s.load_demand)},
          {"line_flow", vec(s.line_flow)},
          {"risk_margin", vec(s.risk_margin)},
          {"line_status", status},
          {"overflow_steps", s.overflow_steps},
          {"cooldown", s.cooldown}};
}

// FNV-1a over the status bits; identifies a topology snapshot.
inline std::uint64_t topology_tag(const LineStatus& status) {
  std::uint64_t h = 1469598103934665603ULL;
  for (bool b : status) {
    h ^= b ? 0x9eU : 0x37U;
    h *= 1099511628211ULL;
  }
  h ^= status.size();
  h *= 1099511628211ULL;
  return h;
}

}  // namespace blackout
