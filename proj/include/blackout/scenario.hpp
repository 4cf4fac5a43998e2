#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "blackout/grid.hpp"
#include "blackout/rng.hpp"

namespace blackout {

class ScenarioError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Per-step demand and generator set-points. Row n-1 holds step n.
struct Scenario {
  std::string id;
  std::vector<Vec> loads;  // each of length D, MW
  std::vector<Vec> gens;   // each of length G, MW

  int length() const { return static_cast<int>(loads.size()); }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// CSV: header `step,load_<id>...,gen_<id>...`, one row per step, MW.
inline Scenario parse_scenario(const Grid& grid, std::istream& in, std::string id) {
  std::string line;
  if (!std::getline(in, line)) throw ScenarioError(id + ": empty scenario file");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "step") throw ScenarioError(id + ": header must start with 'step'");

  std::vector<int> load_col(grid.num_loads(), -1), gen_col(grid.num_generators(), -1);
  for (std::size_t c = 1; c < header.size(); ++c) {
    const std::string& h = header[c];
    auto assign = [&](const std::string& prefix, auto& cols, const auto& items) {
      if (h.rfind(prefix, 0) != 0) return false;
      int item_id = 0;
      try {
        item_id = std::stoi(h.substr(prefix.size()));
      } catch (const std::exception&) {
        throw ScenarioError(id + ": bad column '" + h + "'");
      }
      for (std::size_t i = 0; i < items.size(); ++i)
        if (items[i].id == item_id) {
          cols[i] = static_cast<int>(c);
          return true;
        }
      throw ScenarioError(id + ": column '" + h + "' references unknown id");
    };
    if (!assign("load_", load_col, grid.loads) && !assign("gen_", gen_col, grid.generators))
      throw ScenarioError(id + ": unexpected column '" + h + "'");
  }
  for (int k = 0; k < grid.num_loads(); ++k)
    if (load_col[k] < 0) throw ScenarioError(id + ": missing column load_" + std::to_string(grid.loads[k].id));
  for (int j = 0; j < grid.num_generators(); ++j)
    if (gen_col[j] < 0) throw ScenarioError(id + ": missing column gen_" + std::to_string(grid.generators[j].id));

  Scenario sc;
  sc.id = std::move(id);
  int row = 1;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ScenarioError(sc.id + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                          " cells, expected " + std::to_string(header.size()));
    auto value = [&](int c) {
      double v = 0.0;
      try {
        v = std::stod(cells[c]);
      } catch (const std::exception&) {
        throw ScenarioError(sc.id + ": row " + std::to_string(row) + ": bad number '" + cells[c] + "'");
      }
      if (!(v >= 0.0) || !std::isfinite(v))
        throw ScenarioError(sc.id + ": row " + std::to_string(row) + ": values must be finite and >= 0");
      return v;
    };
    Vec d(grid.num_loads()), g(grid.num_generators());
    for (int k = 0; k < grid.num_loads(); ++k) d[k] = value(load_col[k]);
    for (int j = 0; j < grid.num_generators(); ++j) g[j] = value(gen_col[j]);
    sc.loads.push_back(std::move(d));
    sc.gens.push_back(std::move(g));
  }
  return sc;
}

inline Scenario load_scenario(const Grid& grid, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario " + path.string());
  return parse_scenario(grid, in, path.stem().string());
}

// Every *.csv in a directory, sorted by file name.
inline std::vector<Scenario> load_scenario_dir(const Grid& grid, const std::filesystem::path& dir) {
  if (std::filesystem::is_regular_file(dir)) return {load_scenario(grid, dir)};
  if (!std::filesystem::is_directory(dir)) throw ScenarioError("no such scenario directory " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Scenario> out;
  for (const auto& f : files) out.push_back(load_scenario(grid, f));
  if (out.empty()) throw ScenarioError("no scenarios in " + dir.string());
  return out;
}

inline void write_scenario(const Grid& grid, const Scenario& sc, std::ostream& os) {
  os << "step";
  for (const auto& d : grid.loads) os << ",load_" << d.id;
  for (const auto& g : grid.generators) os << ",gen_" << g.id;
  os << '\n' << std::setprecision(17);
  for (int n = 0; n < sc.length(); ++n) {
    os << n + 1;
    for (int k = 0; k < sc.loads[n].size(); ++k) os << ',' << sc.loads[n][k];
    for (int j = 0; j < sc.gens[n].size(); ++j) os << ',' << sc.gens[n][j];
    os << '\n';
  }
}

}  // namespace blackout
