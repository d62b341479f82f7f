#ifndef COUNTERSEG_SCHEDULE_HPP
#define COUNTERSEG_SCHEDULE_HPP

#include <cmath>
#include <vector>

#include "counterseg/common.hpp"
#include "counterseg/rng.hpp"

namespace counterseg {

// Cyclic schedule: a one-epoch restart spike at the start of each cycle, a
// polynomial decay until the plateau fraction of the cycle, constant after.
struct ScheduleConfig {
  int t_max = 1200;
  int t_cycle = 400;
  double plateau_fraction = 0.8;  // plateau starts at floor(fraction * t_cycle)
  double base_lr = 0.01;
  double restart_lr = 0.1;
  double exponent = 0.9;
  int snapshots_per_cycle = 10;

  int cycles() const { return t_max / t_cycle; }
  int plateau_start() const { return static_cast<int>(plateau_fraction * t_cycle); }

  void validate() const {
    CSEG_CHECK(t_max > 0 && t_cycle > 0, "schedule: t_max and t_cycle must be positive");
    CSEG_CHECK(t_max % t_cycle == 0, "schedule: t_max must be a whole number of cycles");
    CSEG_CHECK(plateau_start() > 0 && plateau_start() < t_cycle,
               "schedule: plateau start must fall inside the cycle");
    CSEG_CHECK(base_lr > 0 && restart_lr > 0 && exponent > 0, "schedule: rates must be positive");
    CSEG_CHECK(snapshots_per_cycle >= 1 && snapshots_per_cycle <= t_cycle - plateau_start(),
               "schedule: snapshots per cycle exceed the plateau window");
  }

  static ScheduleConfig clinical() { return ScheduleConfig{}; }

  static ScheduleConfig desk() {
    ScheduleConfig c;
    c.t_max = 180;
    c.t_cycle = 60;
    c.snapshots_per_cycle = 4;
    return c;
  }
};

// lr(t): restart_lr when t mod t_cycle == 0, else
// base_lr * (1 - min(t_mod, plateau_start)/t_cycle)^exponent.
inline double cyclic_lr(int t_epoch, const ScheduleConfig& cfg) {
  CSEG_CHECK(t_epoch >= 0 && t_epoch < cfg.t_max, "cyclic_lr: epoch out of range");
  const int t_mod = t_epoch % cfg.t_cycle;
  if (t_mod == 0) return cfg.restart_lr;
  const double frac =
      static_cast<double>(std::min(t_mod, cfg.plateau_start())) / static_cast<double>(cfg.t_cycle);
  return cfg.base_lr * std::pow(1.0 - frac, cfg.exponent);
}

// n distinct plateau epochs of one cycle, uniform without replacement.
// Returned epochs are cycle-relative (t_mod), sorted ascending.
inline std::vector<int> snapshot_select(const ScheduleConfig& cfg, int n, Rng& rng) {
  const int window_start = cfg.plateau_start();
  const int window = cfg.t_cycle - window_start;
  CSEG_CHECK(window > 0, "snapshot_select: empty plateau window");
  CSEG_CHECK(n >= 1 && n <= window, "snapshot_select: n exceeds the plateau window");
  std::vector<int> picks = rng.sample_without_replacement(window, n);
  for (int& p : picks) p += window_start;
  std::sort(picks.begin(), picks.end());
  return picks;
}

}  // namespace counterseg

#endif
