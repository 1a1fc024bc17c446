/*
 * Copyright 2026 The ptaudit Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "ptaudit/removal.hpp"
// Acceptance checks. Builds (or reuses) two cached pipeline runs and prints
// one PASS/FAIL line per criterion. Exit status is non-zero if any fails.
//
//   suite run:  seeds 1-2, clean twin + badclip, blended, wanet, siba,
//               badclip_adaptive (12 models); every detector, repair and
//               ablation sweep.
//   extra run:  seeds 3-5, clean twin + badclip, badclip_adaptive; CI,
//               repair and the loss-kind sweep.
//
// The cache lives under PTAUDIT_ACCEPTANCE_DIR (default: the build tree).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ptaudit/attacks.hpp"
#include "ptaudit/evalkit.hpp"
#include "ptaudit/inspector.hpp"
#include "ptaudit/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ptaudit;

// Tolerances and targets.
constexpr double kZooAsr = 0.85;
constexpr double kSibaAsr = 0.40;
constexpr double kMaxAccDrop = 0.05;
constexpr double kZooMinutes = 30.0;
constexpr int kMinCorrectVerdicts = 10;
constexpr double kMinAuroc = 0.95;
constexpr double kBaselineGap = 0.15;
constexpr double kRepairAsr = 0.10;
constexpr double kRepairAccChange = 0.02;
constexpr double kControlAsr = 0.30;
constexpr double kAdaptiveAsrGap = 0.15;
constexpr int kAdaptiveFlagged = 4;
constexpr double kMarginTol = 1e-9;
constexpr double kScoreTol = 1e-12;
constexpr double kSymmetryTol = 1e-9;
constexpr double kGradRelErr = 1e-2;
constexpr double kOracleSeconds = 1.0;
constexpr double kMinSsim = 0.9;

struct Outcome {
  std::string id;
  std::string title;
  bool pass = false;
  std::string detail;
};

std::vector<Outcome> outcomes;

void Report(const std::string& id, const std::string& title, bool pass, const std::string& detail) {
  outcomes.push_back({id, title, pass, detail});
  std::printf("%s  %-4s %-34s %s\n", pass ? "PASS" : "FAIL", id.c_str(), title.c_str(), detail.c_str());
  std::fflush(stdout);
}

std::string Fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string Fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double Mean(const std::vector<double>& v) {
  if (v.empty()) return std::nan("");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

json ReadJsonFile(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

void Progress(const std::string& what) {
  std::fprintf(stderr, "[acceptance] %s\n", what.c_str());
}

RunConfig SuiteConfig(const std::string& root) {
  RunConfig c;
  c.attacks = {"badclip", "blended", "wanet", "siba", "badclip_adaptive"};
  c.seeds = {1, 2};
  c.out_dir = root;
  for (int s : c.seeds) {
    c.ablate.models.push_back(ZooModelId(s, "clean"));
    for (const auto& a : c.attacks) c.ablate.models.push_back(ZooModelId(s, a));
  }
  return c;
}

RunConfig ExtraConfig(const std::string& root) {
  RunConfig c;
  c.attacks = {"badclip", "badclip_adaptive"};
  c.seeds = {3, 4, 5};
  c.baselines = {};
  c.repair_modes = {"ci_trigger", "clean_only", "random_delta"};
  c.out_dir = root;
  c.ablate.ood_sizes = {};
  c.ablate.batch_sizes = {};
  c.ablate.id_pool = false;
  for (int s : c.seeds) c.ablate.models.push_back(ZooModelId(s, "badclip"));
  return c;
}

void Prepare(Workspace& ws, const std::string& name) {
  using clock = std::chrono::steady_clock;
  const auto stage = [&](const std::string& what, const std::function<void()>& fn) {
    const auto t0 = clock::now();
    Progress(name + ": " + what);
    fn();
    Progress(Fmt("%s: %s done in %.1fs", name.c_str(), what.c_str(),
                 std::chrono::duration<double>(clock::now() - t0).count()));
  };
  stage("build-zoo", [&] { BuildZoo(ws); });
  stage("inspect", [&] { InspectZoo(ws); });
  for (const auto& m : ws.config().baselines) stage("baseline " + m, [&] { BaselineZoo(ws, m); });
  stage("repair", [&] { RepairZoo(ws); });
  stage("ablate", [&] { AblateRun(ws); });
  if (!ws.config().baselines.empty()) stage("report", [&] { ReportRun(ws); });
}

// ---------------------------------------------------------------- criteria

void ZooViability(Workspace& suite) {
  std::map<std::string, std::vector<double>> asr, drop;
  double seconds = suite.manifest("pretrain")["seconds"].get<double>() + suite.manifest("data")["seconds"].get<double>();
  for (const auto& e : ListZoo(suite)) {
    if (e.seed == 1) seconds += e.manifest["seconds"].get<double>();
    if (e.attack == "clean") continue;
    asr[e.attack].push_back(e.manifest["metrics"]["asr_eval"].get<double>());
    drop[e.attack].push_back(e.manifest["metrics"]["acc_drop"].get<double>());
  }
  bool ok = true;
  std::string detail;
  for (const char* a : {"badclip", "blended", "wanet", "siba"}) {
    const double need = std::string(a) == "siba" ? kSibaAsr : kZooAsr;
    const double max_drop = *std::max_element(drop[a].begin(), drop[a].end());
    const double min_asr = *std::min_element(asr[a].begin(), asr[a].end());
    const bool good = min_asr >= need && max_drop <= kMaxAccDrop;
    ok = ok && good;
    detail += Fmt("%s asr %.2f drop %.3f%s; ", a, min_asr, max_drop, good ? "" : "(x)");
  }
  const double minutes = seconds / 60.0;
  ok = ok && minutes <= kZooMinutes;
  detail += Fmt("6-model zoo %.1f min", minutes);
  Report("C1", "zoo viability", ok, detail + " [min ASR / max ACC drop over seeds 1-2]");
}

std::vector<ExperimentRecord> MethodRecords(const std::vector<ExperimentRecord>& all, const std::string& method) {
  std::vector<ExperimentRecord> out;
  for (const auto& r : all) {
    if (r.method == method) out.push_back(r);
  }
  return out;
}

double RecordAuroc(const std::vector<ExperimentRecord>& rs) {
  std::vector<double> s;
  std::vector<bool> y;
  for (const auto& r : rs) {
    s.push_back(r.s_max);
    y.push_back(r.true_backdoored);
  }
  return Auroc(s, y);
}

void Detection(const std::vector<ExperimentRecord>& all) {
  const auto ci = MethodRecords(all, "ci");
  int correct = 0, tp = 0, tp_on_target = 0;
  std::string misses;
  for (const auto& r : ci) {
    correct += r.verdict == r.true_backdoored;
    if (r.verdict != r.true_backdoored) misses += " " + r.model_id + (r.verdict ? "(fp)" : "(fn)");
    if (r.verdict && r.true_backdoored) {
      ++tp;
      tp_on_target += r.flagged_class == r.true_target;
      if (r.flagged_class != r.true_target) misses += " " + r.model_id + "(wrong class)";
    }
  }
  const double auroc = RecordAuroc(ci);
  const bool ok = static_cast<int>(ci.size()) == 12 && correct >= kMinCorrectVerdicts && tp_on_target == tp &&
                  auroc >= kMinAuroc;
  Report("C2", "CI detection on 12-model suite", ok,
         Fmt("%d/%zu correct, target on %d/%d TPs, AUROC %.3f;", correct, ci.size(), tp_on_target, tp, auroc) +
             (misses.empty() ? " no errors" : misses));
}

void BaselineGap(const std::vector<ExperimentRecord>& all) {
  const double ci = RecordAuroc(MethodRecords(all, "ci"));
  const double nc = RecordAuroc(MethodRecords(all, "nc"));
  const double pixb = RecordAuroc(MethodRecords(all, "pixb"));
  const bool ok = ci - nc >= kBaselineGap && ci - pixb >= kBaselineGap;
  Report("C3", "baseline AUROC gap", ok, Fmt("CI %.3f, NC %.3f (gap %.3f), PixB %.3f (gap %.3f)", ci, nc, ci - nc, pixb,
                                             ci - pixb));
}

// Rows of one ablation sweep gathered from both runs' manifests.
std::vector<json> SweepRows(Workspace& ws, const std::string& sweep) {
  std::vector<json> rows;
  const fs::path csv = ws.path("ablate/" + sweep + ".csv");
  std::ifstream in(csv);
  if (!in) return rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() < 10) continue;
    rows.push_back({{"model_id", f[0]}, {"attack", f[1]}, {"seed", std::stoi(f[2])}, {"target", std::stoi(f[3])},
                    {"value", f[4]}, {"target_asr", std::stod(f[5])}, {"benign_asr", std::stod(f[6])},
                    {"s_max", std::stod(f[7])}, {"backdoored", f[8] == "1"}, {"flagged_class", std::stoi(f[9])}});
  }
  return rows;
}

void LossAblation(Workspace& suite, Workspace& extra) {
  std::map<std::string, std::vector<double>> target, benign;
  std::vector<int> seeds;
  for (Workspace* ws : {&suite, &extra}) {
    for (const auto& r : SweepRows(*ws, "loss_kind")) {
      if (r["attack"] != "badclip") continue;
      target[r["value"]].push_back(r["target_asr"].get<double>());
      benign[r["value"]].push_back(r["benign_asr"].get<double>());
      if (std::find(seeds.begin(), seeds.end(), r["seed"].get<int>()) == seeds.end()) seeds.push_back(r["seed"]);
    }
  }
  const double tm = Mean(target["margin"]), tc = Mean(target["ce"]), tl = Mean(target["logit"]);
  const double bm = Mean(benign["margin"]), bc = Mean(benign["ce"]), bl = Mean(benign["logit"]);
  const bool ok = seeds.size() >= 3 && tm >= tc && tc >= tl && bm <= bc && bm <= bl;
  Report("C4", "loss ablation direction", ok,
         Fmt("%zu seeds; target ASR margin %.3f ce %.3f logit %.3f; benign margin %.3f ce %.3f logit %.3f", seeds.size(),
             tm, tc, tl, bm, bc, bl));
}

void RepairCriterion(Workspace& suite, Workspace& extra) {
  std::map<std::string, std::vector<double>> after, acc_change;
  int models = 0, skipped = 0;
  std::string per_model;
  for (Workspace* ws : {&suite, &extra}) {
    for (const auto& e : ListZoo(*ws)) {
      if (e.attack != "badclip") continue;
      ++models;
      for (const char* mode : {"ci_trigger", "clean_only", "random_delta"}) {
        const json j = ReadJsonFile(ws->path(std::string("repair/") + e.id + "_" + mode + ".json"));
        if (j.contains("skipped")) {
          ++skipped;
          continue;
        }
        after[mode].push_back(j["after"]["asr_true_trigger"].get<double>());
        acc_change[mode].push_back(j["after"]["acc"].get<double>() - j["before"]["acc"].get<double>());
        if (std::string(mode) == "ci_trigger") {
          per_model += Fmt(" %s %.2f->%.2f", e.id.c_str(), j["before"]["asr_true_trigger"].get<double>(),
                           j["after"]["asr_true_trigger"].get<double>());
        }
      }
    }
  }
  const double ci = Mean(after["ci_trigger"]), clean = Mean(after["clean_only"]), rnd = Mean(after["random_delta"]);
  const double dacc = Mean(acc_change["ci_trigger"]);
  const bool ok = skipped == 0 && ci < kRepairAsr && std::abs(dacc) <= kRepairAccChange && clean > kControlAsr &&
                  rnd > kControlAsr;
  Report("C5", "repair", ok,
         Fmt("%d BadCLIP models (%d skipped); mean ASR after: ci %.3f, clean-only %.3f, random %.3f; ci ACC change %+.3f;",
             models, skipped, ci, clean, rnd, dacc) +
             per_model);
}

double TargetInversionAsr(Workspace& ws, const ZooEntry& e) {
  for (const auto& c : LoadInspection(ws, e).results) {
    if (c.class_id == e.target) return c.asr;
  }
  return std::nan("");
}

void Adaptive(Workspace& suite, Workspace& extra) {
  std::vector<double> own_b, own_a, inv_b, inv_a;
  int flagged = 0, total = 0;
  for (Workspace* ws : {&suite, &extra}) {
    for (const auto& e : ListZoo(*ws)) {
      if (e.attack == "badclip") {
        own_b.push_back(e.manifest["metrics"]["asr_eval"].get<double>());
        inv_b.push_back(TargetInversionAsr(*ws, e));
      } else if (e.attack == "badclip_adaptive") {
        ++total;
        own_a.push_back(e.manifest["metrics"]["asr_eval"].get<double>());
        inv_a.push_back(TargetInversionAsr(*ws, e));
        flagged += LoadInspection(*ws, e).verdict.backdoored;
      }
    }
  }
  const double gap = Mean(own_b) - Mean(own_a);
  const bool ok = total == 5 && gap >= kAdaptiveAsrGap && Mean(inv_a) < Mean(inv_b) && flagged >= kAdaptiveFlagged;
  Report("C6", "adaptive robustness", ok,
         Fmt("own ASR badclip %.3f vs adaptive %.3f (gap %.3f); CI target ASR %.3f vs %.3f; flagged %d/%d", Mean(own_b),
             Mean(own_a), gap, Mean(inv_b), Mean(inv_a), flagged, total));
}

void Oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double margin_err = 0.0, score_err = 0.0, ssim_err = 0.0;
  bool auroc_exact = true, youden_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const int b = 1 + trial % 9, k = 3 + trial % 7;
    Mat l(b, k);
    for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = u(rng);
    for (int c = 0; c < k; ++c) {
      double expect = 0.0;
      for (int r = 0; r < b; ++r) {
        double best = -1e300;
        for (int j = 0; j < k; ++j) {
          if (j != c) best = std::max(best, l(r, j));
        }
        expect -= l(r, c) - best;
      }
      margin_err = std::max(margin_err, std::abs(MarginLoss(l, c) - expect / b));
    }

    std::vector<double> asr(k), loss(k);
    for (int i = 0; i < k; ++i) {
      asr[i] = (u(rng) + 1) / 2;
      loss[i] = u(rng);
    }
    const auto z = [&](const std::vector<double>& v, int i) {
      long double m = 0, s = 0;
      for (double x : v) m += x;
      m /= v.size();
      for (double x : v) s += (x - m) * (x - m);
      return static_cast<double>((v[i] - m) / std::sqrt(s / v.size()));
    };
    const AnomalyScores a = ComputeAnomalyScores(asr, loss);
    std::vector<double> s(k);
    for (int i = 0; i < k; ++i) {
      s[i] = z(asr, i) - z(loss, i);
      score_err = std::max(score_err, std::abs(a.scores[i] - s[i]));
    }
    const Verdict v = ModelVerdict(a.scores, 2.0);
    const int arg = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
    score_err = std::max(score_err, std::abs(v.s_max - z(s, arg)));
    if (v.backdoored != (z(s, arg) >= 2.0) && std::abs(z(s, arg) - 2.0) > kScoreTol) score_err = 1.0;

    const int n = 4 + trial % 13;
    std::vector<double> sc(n);
    std::vector<bool> y(n);
    std::uniform_int_distribution<int> small(0, 4);
    for (int i = 0; i < n; ++i) {
      sc[i] = small(rng);
      y[i] = i % 2 == 0;
    }
    long pairs = 0, twice = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!y[i] || y[j]) continue;
        ++pairs;
        twice += sc[i] > sc[j] ? 2 : (sc[i] == sc[j] ? 1 : 0);
      }
    }
    auroc_exact = auroc_exact && Auroc(sc, y) == static_cast<double>(twice) / (2.0 * pairs);
    const double pos = std::count(y.begin(), y.end(), true), neg = n - pos;
    double best = -2.0;
    for (int cut = 0; cut <= 5; ++cut) {
      double tp = 0, fp = 0;
      for (int i = 0; i < n; ++i) {
        if (sc[i] >= cut) (y[i] ? tp : fp) += 1;
      }
      best = std::max(best, tp / pos - fp / neg);
    }
    youden_exact = youden_exact && CalibrateThreshold(sc, y).youden_j == best;
  }
  const ImageShape shape{32, 32, 3};
  for (int trial = 0; trial < 5; ++trial) {
    Mat x(1, shape.pixels()), y(1, shape.pixels());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.data()[i] = (u(rng) + 1) / 2;
      y.data()[i] = (u(rng) + 1) / 2;
    }
    ssim_err = std::max(ssim_err, std::abs(Ssim(x, x, shape) - 1.0));
    ssim_err = std::max(ssim_err, std::abs(Ssim(x, y, shape) - Ssim(y, x, shape)));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool ok = margin_err <= kMarginTol && score_err <= kScoreTol && auroc_exact && youden_exact &&
                  ssim_err <= kSymmetryTol && secs < kOracleSeconds;
  Report("C7", "exact math oracles", ok,
         Fmt("margin err %.1e, score/verdict err %.1e, AUROC %s, Youden %s, SSIM err %.1e, %.3fs", margin_err, score_err,
             auroc_exact ? "exact" : "MISMATCH", youden_exact ? "exact" : "MISMATCH", ssim_err, secs));
}

double PixelGradientError(const PromptTunedModel& m, const Mat& pixels) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat w(pixels.rows(), m.dims.num_classes);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  const LogitLossFn fn = [&](const Mat& logits, Mat& d) {
    d = w;
    return (logits.array() * w.array()).sum();
  };
  const PixelGradient g = LogitPixelGradient(m, pixels, fn);
  Mat p = pixels;
  double num = 0.0, den = 0.0;
  const double h = 1e-6;
  std::uniform_int_distribution<Eigen::Index> pick(0, p.size() - 1);
  for (int s = 0; s < 64; ++s) {
    const Eigen::Index i = pick(rng);
    const double keep = p.data()[i];
    p.data()[i] = keep + h;
    const double up = (ComputeLogits(m, p).array() * w.array()).sum();
    p.data()[i] = keep - h;
    const double down = (ComputeLogits(m, p).array() * w.array()).sum();
    p.data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    num += std::pow(g.d_pixels.data()[i] - fd, 2);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

void Invariants(Workspace& suite, Workspace& extra) {
  bool projection = true, frozen = true, determinism = true;
  double worst_violation = 0.0;
  for (Workspace* ws : {&suite, &extra}) {
    const std::string encoders = ws->manifest("pretrain")["encoder_checksum"];
    const double eps = ws->config().inspector.epsilon;
    for (const auto& e : ListZoo(*ws)) {
      frozen = frozen && e.manifest["encoder_checksum"] == encoders;
      if (e.manifest.contains("max_budget_violation")) {
        worst_violation = std::max(worst_violation, e.manifest["max_budget_violation"].get<double>());
      }
      const AnomalyReport r = LoadInspection(*ws, e);
      frozen = frozen && r.model_checksum == e.manifest["checksum"];
      for (const auto& c : r.results) projection = projection && c.delta.cwiseAbs().maxCoeff() <= eps;
      if (e.attack == "clean") continue;
      for (const auto& mode : ws->config().repair_modes) {
        const json j = ReadJsonFile(ws->path("repair/" + e.id + "_" + mode + ".json"));
        if (!j.contains("skipped")) frozen = frozen && j["encoder_checksum"] == encoders;
      }
    }
  }
  projection = projection && worst_violation <= 0.0;

  // Fresh inversions on one attacked model: per-step projection, bitwise
  // repeatability, agreement with the cached report, and worker independence.
  const auto zoo = ListZoo(suite);
  const ZooEntry& e = *std::find_if(zoo.begin(), zoo.end(), [](const ZooEntry& z) { return z.attack == "badclip"; });
  const PromptTunedModel m = LoadZooModel(e);
  InversionConfig ic = suite.config().inspector;
  const ClassInversionResult a = InvertTrigger(m, e.target, suite.ood(), ic);
  const ClassInversionResult b = InvertTrigger(m, e.target, suite.ood(), ic);
  projection = projection && a.max_budget_violation <= 0.0;
  determinism = a.delta == b.delta && a.step_losses == b.step_losses;
  for (const auto& c : LoadInspection(suite, e).results) {
    if (c.class_id == e.target) determinism = determinism && c.delta == a.delta;
  }
  ic.candidate_classes = {0, 1, e.target};
  const AnomalyReport serial = InspectModel(m, suite.ood(), ic);
  ic.workers = 3;
  const AnomalyReport parallel = InspectModel(m, suite.ood(), ic);
  for (std::size_t i = 0; i < serial.results.size(); ++i) {
    determinism = determinism && serial.results[i].delta == parallel.results[i].delta;
  }
  frozen = frozen && m.checksum() == e.manifest["checksum"];

  const double grad_err = PixelGradientError(m, suite.ood().pixels.topRows(4));
  const bool ok = projection && frozen && determinism && grad_err <= kGradRelErr;
  Report("C8", "optimization invariants", ok,
         Fmt("projection %s (worst attack violation %.1e), encoders %s, delta bits %s, pixel-grad rel err %.1e",
             projection ? "ok" : "BROKEN", worst_violation, frozen ? "frozen" : "CHANGED",
             determinism ? "identical" : "DIFFER", grad_err));
}

void AblationTrends(Workspace& suite) {
  std::map<std::string, std::vector<double>> by_size, by_batch;
  for (const auto& r : SweepRows(suite, "ood_size")) {
    if (r["attack"] != "clean") by_size[r["value"]].push_back(r["target_asr"].get<double>());
  }
  for (const auto& r : SweepRows(suite, "batch_size")) {
    if (r["attack"] != "clean") by_batch[r["value"]].push_back(r["target_asr"].get<double>());
  }
  std::map<std::string, std::map<std::string, bool>> verdicts;
  for (const auto& r : SweepRows(suite, "pool")) verdicts[r["model_id"]][r["value"]] = r["backdoored"].get<bool>();
  int agree = 0;
  std::string disagree;
  for (auto& [id, v] : verdicts) {
    if (v["ood"] == v["id"]) {
      ++agree;
    } else {
      disagree += " " + id;
    }
  }
  const double s100 = Mean(by_size["100"]), s500 = Mean(by_size["500"]), s1000 = Mean(by_size["1000"]);
  const double b1 = Mean(by_batch["1"]), b32 = Mean(by_batch["32"]);
  const bool monotone = s100 <= s500 && s500 <= s1000;
  const bool ok = monotone && b32 > b1 && agree == static_cast<int>(verdicts.size()) && verdicts.size() == 12;
  Report("C9", "ablation trends", ok,
         Fmt("target ASR by pool size 100/500/1000: %.3f/%.3f/%.3f (%s); batch 1 %.3f vs 32 %.3f; pool verdicts agree "
             "%d/%zu",
             s100, s500, s1000, monotone ? "monotone" : "not monotone", b1, b32, agree, verdicts.size()) +
             (disagree.empty() ? "" : ";" + disagree));
}

void Imperceptibility(Workspace& suite) {
  const ImageSet& ood = suite.ood();
  std::vector<double> per_model;
  double worst = 1.0;
  for (const auto& e : ListZoo(suite)) {
    if (e.attack == "clean") continue;
    const AnomalyReport r = LoadInspection(suite, e);
    const int c = r.flagged_class >= 0 ? r.flagged_class : e.target;
    for (const auto& res : r.results) {
      if (res.class_id != c) continue;
      const Mat stamped = (ood.pixels.rowwise() + res.delta.row(0)).cwiseMax(0.0).cwiseMin(1.0);
      const double s = MeanSsim(ood.pixels, stamped, ood.shape);
      per_model.push_back(s);
      worst = std::min(worst, s);
    }
  }
  const double mean = Mean(per_model);
  Report("C10", "imperceptibility", mean >= kMinSsim,
         Fmt("mean SSIM %.3f over %zu reconstructed triggers (min %.3f) at eps 4/255", mean, per_model.size(), worst));
}

}  // namespace

int main() {
  const char* env = std::getenv("PTAUDIT_ACCEPTANCE_DIR");
  const std::string root = env != nullptr ? env : PTAUDIT_ACCEPTANCE_DEFAULT_DIR;
  Progress("cache directory " + root);
  try {
    Workspace suite(SuiteConfig(root));
    Workspace extra(ExtraConfig(root));
    Prepare(suite, "suite");
    Prepare(extra, "extra");

    std::printf("acceptance results (suite run %s, extra run %s)\n", suite.hash().substr(0, 16).c_str(),
                extra.hash().substr(0, 16).c_str());
    const std::vector<ExperimentRecord> records = CollectRecords(suite);
    ZooViability(suite);
    Detection(records);
    BaselineGap(records);
    LossAblation(suite, extra);
    RepairCriterion(suite, extra);
    Adaptive(suite, extra);
    Oracles();
    Invariants(suite, extra);
    AblationTrends(suite);
    Imperceptibility(suite);

    json out = json::array();
    for (const auto& o : outcomes) out.push_back({{"id", o.id}, {"title", o.title}, {"pass", o.pass}, {"detail", o.detail}});
    std::ofstream(fs::path(root) / "acceptance_results.json") << out.dump(2) << '\n';
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance harness error: %s\n", e.what());
    return 1;
  }
  const auto passed = std::count_if(outcomes.begin(), outcomes.end(), [](const Outcome& o) { return o.pass; });
  std::printf("%ld/%zu criteria passed\n", static_cast<long>(passed), outcomes.size());
  return passed == static_cast<long>(outcomes.size()) ? 0 : 1;
}
