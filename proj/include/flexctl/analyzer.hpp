#pragma once

// Route statistics from activation logs: step x block activation frequencies,
// FLOPs-weighted and count-based sparsity curves, and static schedules.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flexctl/blocks.hpp"
#include "flexctl/budget.hpp"
#include "flexctl/errors.hpp"
#include "flexctl/image_io.hpp"
#include "flexctl/sampler.hpp"

namespace flexctl {

struct ActivationMatrix {
  std::size_t steps = 0;
  std::size_t blocks = 0;
  std::size_t samples = 0;
  std::vector<double> timesteps;  // per step
  std::vector<double> cells;      // row-major [step][block]

  double at(std::size_t s, std::size_t l) const { return cells.at(s * blocks + l); }
  double& at(std::size_t s, std::size_t l) { return cells.at(s * blocks + l); }
};

// cell(s, l) = mean over samples of the hard mask. The log must hold exactly
// one row per (sample, step, block) over a dense index range.
inline ActivationMatrix aggregate(const ActivationLog& log) {
  if (log.empty()) throw ParseError("activation log has no rows", 0);
  std::size_t max_s = 0, max_t = 0, max_b = 0;
  std::map<std::size_t, std::size_t> sample_ids;
  for (const auto& r : log) {
    max_t = std::max(max_t, r.step_index);
    max_b = std::max(max_b, r.block_index);
    sample_ids.emplace(r.sample_id, 0);
  }
  std::size_t k = 0;
  for (auto& [id, slot] : sample_ids) slot = k++;
  max_s = sample_ids.size();
  ActivationMatrix m;
  m.steps = max_t + 1;
  m.blocks = max_b + 1;
  m.samples = max_s;
  if (log.size() != m.steps * m.blocks * m.samples) {
    throw ParseError("ragged activation log: " + std::to_string(log.size()) + " rows for " + std::to_string(m.samples) +
                         " samples x " + std::to_string(m.steps) + " steps x " + std::to_string(m.blocks) + " blocks",
                     0);
  }
  std::vector<int> seen(m.samples * m.steps * m.blocks, 0);
  std::vector<double> ts(m.steps, 0.0);
  std::vector<int> ts_set(m.steps, 0);
  std::vector<std::uint64_t> group_flops(m.samples * m.steps, 0);
  std::vector<int> group_set(m.samples * m.steps, 0);
  std::vector<long long> sums(m.steps * m.blocks, 0);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& r = log[i];
    const std::size_t s = sample_ids[r.sample_id];
    const std::size_t key = (s * m.steps + r.step_index) * m.blocks + r.block_index;
    if (seen[key]++) throw ParseError("duplicate activation row for sample " + std::to_string(r.sample_id), i);
    if (!ts_set[r.step_index]) {
      ts[r.step_index] = r.timestep;
      ts_set[r.step_index] = 1;
    } else if (ts[r.step_index] != r.timestep) {
      throw ParseError("inconsistent timestep for step " + std::to_string(r.step_index), i);
    }
    const std::size_t g = s * m.steps + r.step_index;
    if (!group_set[g]) {
      group_flops[g] = r.flops_used;
      group_set[g] = 1;
    } else if (group_flops[g] != r.flops_used) {
      throw ParseError("flops_used differs within one (sample, step) group", i);
    }
    sums[r.step_index * m.blocks + r.block_index] += r.hard;
  }
  m.timesteps = ts;
  m.cells.resize(m.steps * m.blocks);
  for (std::size_t i = 0; i < m.cells.size(); ++i) m.cells[i] = static_cast<double>(sums[i]) / static_cast<double>(m.samples);
  return m;
}

struct SparsityCurve {
  std::vector<double> flops_ratio;  // (base + router + sum cell * f_l) / large_total
  std::vector<double> count_ratio;  // mean cell per step
  double mean_flops_ratio = 0;
  double mean_count_ratio = 0;
};

inline SparsityCurve sparsity_curve(const ActivationMatrix& m, const FlopsTable& table) {
  if (m.blocks != table.blocks()) {
    throw UsageError("matrix has " + std::to_string(m.blocks) + " blocks, FLOPs table has " + std::to_string(table.blocks()));
  }
  if (table.large_total == 0) throw UsageError("FLOPs table is empty");
  SparsityCurve c;
  const double total = static_cast<double>(table.large_total);
  for (std::size_t s = 0; s < m.steps; ++s) {
    double f = static_cast<double>(table.base + table.router), n = 0;
    for (std::size_t l = 0; l < m.blocks; ++l) {
      f += m.at(s, l) * static_cast<double>(table.per_block[l]);
      n += m.at(s, l);
    }
    c.flops_ratio.push_back(f / total);
    c.count_ratio.push_back(n / static_cast<double>(m.blocks));
  }
  c.mean_flops_ratio = std::accumulate(c.flops_ratio.begin(), c.flops_ratio.end(), 0.0) / static_cast<double>(m.steps);
  c.mean_count_ratio = std::accumulate(c.count_ratio.begin(), c.count_ratio.end(), 0.0) / static_cast<double>(m.steps);
  return c;
}

struct StaticSchedule {
  ForceSchedule masks;  // [step][block]
  double target_budget = 0;
  double realized_ratio = 0;
};

inline double schedule_ratio(const ForceSchedule& masks, const FlopsTable& table) {
  if (masks.empty()) throw UsageError("empty schedule");
  double s = 0;
  for (const auto& row : masks) s += static_cast<double>(table.used(row)) / static_cast<double>(table.large_total);
  return s / static_cast<double>(masks.size());
}

inline constexpr double kScheduleTolerance = 0.05;

// Greedy per step: blocks by descending frequency (ties: lower index) while
// the step stays within budget. A global pass then adds the most frequent
// remaining (step, block) cells while that moves the run ratio closer to the
// budget without leaving the tolerance band.
inline StaticSchedule extract_static_schedule(const ActivationMatrix& m, const FlopsTable& table, double budget) {
  if (!(budget > 0.0 && budget <= 1.0)) throw UsageError("budget must lie in (0, 1]");
  if (m.blocks != table.blocks()) throw UsageError("matrix and FLOPs table disagree on block count");
  const double total = static_cast<double>(table.large_total);
  const double floor = static_cast<double>(table.base + table.router) / total;
  if (budget < floor) {
    std::ostringstream os;
    os << "budget " << budget << " is below the always-on share " << floor;
    throw InfeasibleBudget(os.str());
  }
  StaticSchedule out;
  out.target_budget = budget;
  out.masks.assign(m.steps, std::vector<int>(m.blocks, 0));
  const double cap = budget * total;
  for (std::size_t s = 0; s < m.steps; ++s) {
    std::vector<std::size_t> order(m.blocks);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return m.at(s, a) > m.at(s, b); });
    double used = static_cast<double>(table.base + table.router);
    for (auto l : order) {
      const double f = static_cast<double>(table.per_block[l]);
      if (used + f > cap) break;
      used += f;
      out.masks[s][l] = 1;
    }
  }
  struct Cand {
    double freq;
    std::size_t step, block;
  };
  std::vector<Cand> cands;
  for (std::size_t s = 0; s < m.steps; ++s) {
    for (std::size_t l = 0; l < m.blocks; ++l) {
      if (!out.masks[s][l]) cands.push_back({m.at(s, l), s, l});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.freq > b.freq; });
  double ratio = schedule_ratio(out.masks, table);
  for (const auto& c : cands) {
    const double delta = static_cast<double>(table.per_block[c.block]) / total / static_cast<double>(m.steps);
    const double next = ratio + delta;
    if (std::abs(next - budget) < std::abs(ratio - budget) && next <= budget + kScheduleTolerance) {
      out.masks[c.step][c.block] = 1;
      ratio = next;
    }
  }
  out.realized_ratio = schedule_ratio(out.masks, table);
  if (std::abs(out.realized_ratio - budget) > kScheduleTolerance) {
    std::ostringstream os;
    os << "no schedule reaches budget " << budget << " within " << kScheduleTolerance << " (best " << out.realized_ratio << ")";
    throw InfeasibleBudget(os.str());
  }
  return out;
}

// ---- export and parsing ----

inline void write_matrix_csv(const ActivationMatrix& m, std::ostream& os) {
  os << "step_index";
  for (std::size_t l = 0; l < m.blocks; ++l) os << ",block_" << l;
  os << '\n' << std::fixed << std::setprecision(6);
  for (std::size_t s = 0; s < m.steps; ++s) {
    os << s;
    for (std::size_t l = 0; l < m.blocks; ++l) os << ',' << m.at(s, l);
    os << '\n';
  }
  os << std::defaultfloat;
}

inline ActivationMatrix parse_matrix_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty matrix file", 0);
  const auto head = detail::split_csv(detail::strip_cr(line));
  if (head.empty() || head[0] != "step_index") throw ParseError("matrix header must start with step_index", 0);
  ActivationMatrix m;
  m.blocks = head.size() - 1;
  std::size_t offset = line.size() + 1;
  while (std::getline(is, line)) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != m.blocks + 1) throw ParseError("matrix row has the wrong width", offset);
    if (detail::parse_field<std::size_t>(f[0], offset, "step_index") != m.steps) throw ParseError("matrix rows out of order", offset);
    for (std::size_t l = 0; l < m.blocks; ++l) m.cells.push_back(detail::parse_field<double>(f[l + 1], offset, "cell"));
    m.timesteps.push_back(0.0);
    ++m.steps;
    offset += line.size() + 1;
  }
  return m;
}

// One pixel per cell: width = blocks, height = steps.
inline RawImage matrix_heatmap(const ActivationMatrix& m) {
  RawImage img{m.blocks, m.steps, 1, std::vector<std::uint8_t>(m.cells.size())};
  for (std::size_t i = 0; i < m.cells.size(); ++i) img.pixels[i] = quantize_unit(m.cells[i]);
  return img;
}

inline void write_curve_csv(const ActivationMatrix& m, const SparsityCurve& c, std::ostream& os) {
  os << "step_index,timestep,flops_ratio,count_ratio\n" << std::fixed << std::setprecision(6);
  for (std::size_t s = 0; s < c.flops_ratio.size(); ++s) {
    os << s << ',' << detail::fmt_double(m.timesteps.at(s)) << ',' << c.flops_ratio[s] << ',' << c.count_ratio[s] << '\n';
  }
  os << "mean,," << c.mean_flops_ratio << ',' << c.mean_count_ratio << '\n' << std::defaultfloat;
}

// FLOPs table CSV: block_index,kind,flops per control block, then BASE,
// ROUTER and LARGE_TOTAL rows with an empty kind.
inline void write_flops_csv(const FlopsTable& t, const std::vector<BlockKind>& kinds, std::ostream& os) {
  if (kinds.size() != t.blocks()) throw UsageError("one block kind per table entry required");
  os << "block_index,kind,flops\n";
  for (std::size_t l = 0; l < t.blocks(); ++l) os << l << ',' << to_string(kinds[l]) << ',' << t.per_block[l] << '\n';
  os << "BASE,," << t.base << "\nROUTER,," << t.router << "\nLARGE_TOTAL,," << t.large_total << '\n';
}

inline FlopsTable parse_flops_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || detail::strip_cr(line) != "block_index,kind,flops") {
    throw ParseError("FLOPs file must start with header 'block_index,kind,flops'", 0);
  }
  std::size_t offset = line.size() + 1;
  std::vector<std::uint64_t> per;
  std::uint64_t base = 0, router = 0, large = 0;
  int specials = 0;
  while (std::getline(is, line)) {
    line = detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 3) throw ParseError("FLOPs row needs 3 fields", offset);
    const auto v = detail::parse_field<std::uint64_t>(f[2], offset, "flops");
    if (f[0] == "BASE") {
      base = v;
      specials |= 1;
    } else if (f[0] == "ROUTER") {
      router = v;
      specials |= 2;
    } else if (f[0] == "LARGE_TOTAL") {
      large = v;
      specials |= 4;
    } else {
      if (detail::parse_field<std::size_t>(f[0], offset, "block_index") != per.size()) {
        throw ParseError("FLOPs rows out of order", offset);
      }
      per.push_back(v);
    }
    offset += line.size() + 1;
  }
  if (specials != 7) throw ParseError("FLOPs file lacks BASE, ROUTER or LARGE_TOTAL", offset);
  auto t = FlopsTable::make(std::move(per), base, router);
  if (t.large_total != large) throw ParseError("LARGE_TOTAL does not equal BASE + ROUTER + blocks", offset);
  return t;
}

inline FlopsTable read_flops_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return parse_flops_csv(f);
}

// Mean activation over the first and last third of the steps.
struct PhaseDensity {
  double early = 0;
  double late = 0;
};

inline PhaseDensity phase_density(const ActivationMatrix& m) {
  PhaseDensity d;
  const std::size_t third = std::max<std::size_t>(1, m.steps / 3);
  for (std::size_t s = 0; s < third; ++s) {
    for (std::size_t l = 0; l < m.blocks; ++l) {
      d.early += m.at(s, l);
      d.late += m.at(m.steps - 1 - s, l);
    }
  }
  d.early /= static_cast<double>(third * m.blocks);
  d.late /= static_cast<double>(third * m.blocks);
  return d;
}

}  // namespace flexctl
