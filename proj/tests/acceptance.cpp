// Runs the default experiment matrix and prints one PASS/FAIL line per
// acceptance criterion. Exits non-zero only when the run itself breaks.
//
//   acceptance [OUT_DIR]

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "ptrojan/experiment.hpp"
#include "ptrojan/theory.hpp"
#include "test_util.hpp"

using namespace ptrojan;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int passed = 0;
std::FILE* summary = nullptr;

// printf to stdout and to OUT_DIR/acceptance.txt
void say(const char* f, ...) {
  std::va_list a;
  va_start(a, f);
  std::vprintf(f, a);
  va_end(a);
  std::fflush(stdout);
  if (!summary) return;
  va_start(a, f);
  std::vfprintf(summary, f, a);
  va_end(a);
  std::fflush(summary);
}

void verdict(int n, bool ok, const std::string& detail) {
  passed += ok;
  say("criterion %2d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

class Records {
 public:
  explicit Records(const fs::path& dir) : objects_dir_(dir) {
    for (const auto& r : read_metric_records(dir)) values_[key(r.arm, r.stage, r.task, r.metric, r.seed)] = r.value;
  }

  std::optional<double> get(const std::string& arm, const std::string& stage, const std::string& task,
                            const std::string& metric, std::uint64_t seed) const {
    auto it = values_.find(key(arm, stage, task, metric, std::to_string(seed)));
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  /// Mean over the seeds that have the value; nullopt when none do.
  std::optional<double> mean(const std::string& arm, const std::string& stage, const std::string& task,
                             const std::string& metric, const std::vector<std::uint64_t>& seeds) const {
    double s = 0.0;
    int n = 0;
    for (auto seed : seeds)
      if (auto v = get(arm, stage, task, metric, seed)) s += *v, ++n;
    if (n == 0) return std::nullopt;
    return s / n;
  }

  double wall(const std::string& kind, const std::string& arm, std::uint64_t seed) const {
    double s = 0.0;
    for (const auto& j : read_objects(objects_dir_, kind))
      if (j.at("arm") == arm && j.at("seed") == std::to_string(seed) && j.contains("wall_seconds"))
        s += j.at("wall_seconds").get<double>();
    return s;
  }

 private:
  static std::string key(const std::string& a, const std::string& s, const std::string& t, const std::string& m,
                         const std::string& seed) {
    return a + "|" + s + "|" + t + "|" + m + "|" + seed;
  }
  fs::path objects_dir_;
  std::map<std::string, double> values_;
};

std::map<std::string, std::string> csv_reports(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    out[e.path().filename().string()] = os.str();
  }
  return out;
}

std::string show(std::optional<double> v) { return v ? fmt("%.2f", *v) : "n/a"; }

void criterion1() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : testing::primitive_checks()) {
    const double e = finite_difference_check(c.f, c.x, 1e-5);
    if (e > worst) worst = e, worst_name = c.name;
  }
  const ModelParams p = init_params(testing::tiny_config(1));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto c = testing::model_loss_check(p, i);
    const double e = finite_difference_check(c.f, c.x, 1e-5);
    if (e > worst) worst = e, worst_name = c.name;
  }
  const double secs = since(t0);
  verdict(1, worst <= 1e-4 && secs < 30.0,
          fmt("max rel err %.3g", worst) + " (" + worst_name + ")" + fmt(", %.1f s", secs));
}

void criterion8() {
  const std::string a = format_percent(*persis(70, 100)), b = format_percent(*persis(48, 69));
  verdict(8, a == "70.00" && b == "69.57", "persis(70,100)=" + a + " persis(48,69)=" + b);
}

void criterion9() {
  BoundConstants c;
  c.beta = 1.0;
  c.eta = 1.0;
  const double at1 = theorem1_rhs(c, 1.0);
  const bool mono = theorem1_strictly_decreasing(c, 100);
  c.upsilon = 0.7;
  c.Delta = 0.3;
  c.G = 1.9;
  double worst = 0.0;
  for (double lo : {-1.0, -0.5, 0.0, 0.25}) {
    const double hi = lo + 0.5;
    const double slope = (corollary1_rhs(c, 0.8, hi) - corollary1_rhs(c, 0.8, lo)) / 0.5;
    worst = std::max(worst, std::abs(slope - (-c.upsilon * c.Delta * c.G)));
  }
  verdict(9, at1 == 0.0 && mono && worst <= 1e-14,
          fmt("rhs(cos=1)=%g, monotone=%g, slope err %.2g", at1, mono ? 1.0 : 0.0, worst));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out);
  summary = std::fopen((out / "acceptance.txt").string().c_str(), "w");
  try {
    criterion1();
    criterion8();
    criterion9();

    const ExperimentConfig cfg;
    const auto& seeds = cfg.seeds;
    const fs::path dir = out / "matrix";
    fs::remove_all(dir);
    RunOptions opts;
    opts.out = dir;
    opts.log = [](const std::string& m) { std::cerr << "  " << m << std::endl; };
    say("running matrix: %zu arms x %zu strategies x %zu seeds, config %s -> %s\n", cfg.arms.size(),
        cfg.strategies.size(), seeds.size(), cfg.hash().c_str(), dir.string().c_str());
    const auto t0 = Clock::now();
    Experiment(cfg, opts).cmd_all();
    const double matrix_secs = since(t0);

    const Records rec(dir / "records");
    const std::string cls = task_name(cfg.target_task);
    const std::string P = provenance_name(Provenance::PTrojan), B = provenance_name(Provenance::BadNet);

    {  // 2
      double gain = 0.0, search = 0.0;
      int n = 0;
      for (auto s : seeds) {
        auto p = rec.get(P, "trigger", cls, "COSINE", s), b = rec.get(B, "trigger", cls, "COSINE", s);
        if (p && b) gain += *p - *b, ++n;
        search += rec.wall("trigger", P, s);
      }
      gain = n ? gain / n : 0.0;
      verdict(2, n == static_cast<int>(seeds.size()) && gain >= 0.15 && search < 300.0,
              fmt("mean cosine P_TROJAN %.3f, BADNET %.3f, gain %.3f (>= 0.15); search %.1f s",
                  rec.mean(P, "trigger", cls, "COSINE", seeds).value_or(0), rec.mean(B, "trigger", cls, "COSINE", seeds).value_or(0),
                  gain, search));
    }
    {  // 3
      int good = 0;
      double slowest = 0.0;
      std::string per;
      for (auto s : seeds) {
        const double a = rec.get(P, "implant", "", "ASR", s).value_or(-1);
        const double acc_p = rec.get(P, "implant", cls, "ACC", s).value_or(-100);
        const double acc_c = rec.get("CLEAN", "implant", cls, "ACC", s).value_or(100);
        const bool ok = a == 100.0 && std::abs(acc_p - acc_c) <= 2.0;
        good += ok;
        const double secs = rec.wall("pretrain", "BASE", s) + rec.wall("trigger", P, s) +
                            rec.wall("implant", "CLEAN", s) + rec.wall("implant", P, s);
        slowest = std::max(slowest, secs);
        per += fmt(" [s%g asr %.1f acc %.1f vs %.1f]", static_cast<double>(s), a, acc_p, acc_c);
      }
      verdict(3, good >= 4 && slowest < 300.0,
              std::to_string(good) + "/" + std::to_string(seeds.size()) + " seeds ok" + fmt(", slowest seed %.1f s;", slowest) + per);
    }
    {  // 4
      const auto p = rec.mean(P, "cleanup", "", "PERSIS", seeds), b = rec.mean(B, "cleanup", "", "PERSIS", seeds);
      verdict(4, p && b && *p - *b >= 20.0,
              "cleanup Persis P_TROJAN " + show(p) + ", BADNET " + show(b) + " (gap >= 20)");
    }
    {  // 5
      const auto pr = rec.mean(P, "cross_REPLAY", "", "PERSIS", seeds), pf = rec.mean(P, "cross_FULL", "", "PERSIS", seeds);
      const auto ar = rec.mean(P, "cross_REPLAY", cls, "ACC", seeds), af = rec.mean(P, "cross_FULL", cls, "ACC", seeds);
      verdict(5, pr && pf && ar && af && *pr >= *pf && *ar > *af,
              "P_TROJAN cross-task Persis REPLAY " + show(pr) + " vs FULL " + show(pf) + "; " + cls + " ACC REPLAY " +
                  show(ar) + " vs FULL " + show(af));
    }
    {  // 6
      bool ok = true;
      double worst = 0.0;
      for (const auto& arm : cfg.arms)
        for (auto s : seeds) {
          const std::string a = provenance_name(arm);
          ok &= rec.get(a, "cross_FREEZE", "", "FROZEN_UNCHANGED", s).value_or(0) == 1.0;
          const double d = std::abs(rec.get(a, "cross_FREEZE", cls, "ACC", s).value_or(-100) -
                                    rec.get(a, "cleanup", cls, "ACC", s).value_or(100));
          worst = std::max(worst, d);
        }
      verdict(6, ok && worst <= 3.0,
              std::string("frozen tensors bit-identical: ") + (ok ? "yes" : "no") +
                  fmt("; max |ACC after FREEZE - pre-stage ACC| %.2f (<= 3), all arms and seeds", worst));
    }
    {  // 7
      const auto o = rec.mean(P, "cross_FULL", "", "ASR", seeds), r = rec.mean(P, "rev_cleanup", "", "ASR", seeds);
      verdict(7, o && r && std::abs(*o - *r) <= 5.0,
              "P_TROJAN final ASR original order " + show(o) + ", reversed " + show(r) + " (|diff| <= 5)");
    }

    {  // 10: regenerate the report, then redo seed 0 of one arm from scratch
      const auto first = csv_reports(dir / "reports");
      RunOptions again = opts;
      Experiment(cfg, again).cmd_report();
      const bool same_report = csv_reports(dir / "reports") == first;
      again.seed = seeds.front();
      again.arm = Provenance::PTrojan;
      again.force = true;
      Experiment e(cfg, again);
      e.cmd_pretrain();
      e.cmd_trigger();
      e.cmd_implant();
      e.cmd_eval();
      e.cmd_finetune();
      e.cmd_report();
      const bool same_rerun = csv_reports(dir / "reports") == first;
      verdict(10, same_report && same_rerun && first.size() == 5,
              std::string("report rerun identical: ") + (same_report ? "yes" : "no") +
                  "; forced rerun of seed " + std::to_string(seeds.front()) + " P_TROJAN identical: " +
                  (same_rerun ? "yes" : "no"));
    }
    verdict(11, matrix_secs < 1800.0, fmt("matrix %.1f s (< 1800)", matrix_secs));

    // Diagnostics, not criteria.
    {
      RunOptions rnd = opts;
      rnd.arm = Provenance::Random;
      Experiment e(cfg, rnd);
      e.cmd_trigger();
      e.cmd_implant();
      e.cmd_finetune();
      const Records all(dir / "records");
      struct Row {
        std::string arm;
        double cosine, persis;
      };
      std::vector<Row> rows;
      for (Provenance a : {Provenance::Random, Provenance::BadNet, Provenance::BadNetCe, Provenance::PTrojan}) {
        const std::string n = provenance_name(a);
        rows.push_back({n, all.mean(n, "trigger", cls, "COSINE", seeds).value_or(NAN),
                        all.mean(n, "cleanup", "", "PERSIS", seeds).value_or(NAN)});
      }
      std::sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) { return x.cosine < y.cosine; });
      say("diagnostic rank ordering (mean trigger cosine, mean cleanup Persis):\n");
      for (const auto& r : rows) say("  %-10s %7.3f %7.2f\n", r.arm.c_str(), r.cosine, r.persis);
      say("  top-cosine arm Persis >= bottom-cosine arm Persis: %s\n",
          rows.back().persis >= rows.front().persis ? "yes" : "no");
      say("diagnostic bound checks (mean over seeds):\n");
      for (Provenance a : cfg.arms) {
        const std::string n = provenance_name(a);
        say("  %-10s theorem holds %.2f, corollary holds %.2f, theorem monotone %.2f\n", n.c_str(),
            all.mean(n, "bounds", "", "THEOREM_FRACTION", seeds).value_or(NAN),
            all.mean(n, "bounds", "", "COROLLARY_FRACTION", seeds).value_or(NAN),
            all.mean(n, "bounds", "", "THEOREM_MONOTONE", seeds).value_or(NAN));
      }
      Experiment(cfg, opts).cmd_report();
    }
  } catch (const std::exception& e) {
    std::cerr << "acceptance run failed: " << e.what() << "\n";
    return 2;
  }
  say("%d/11 criteria passed\n", passed);
  if (summary) std::fclose(summary);
  return 0;
}
