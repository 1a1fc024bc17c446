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

// ptaudit: build a model zoo, audit it, repair it and report.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure,
// 4 an inspection produced a degenerate statistic.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ptaudit/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;
constexpr int kExitDegenerate = 4;

struct Options {
  std::string config;
  std::optional<int> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
};

ptaudit::RunConfig Resolve(const Options& o) {
  ptaudit::RunConfig cfg = o.config.empty() ? ptaudit::RunConfigFromJson(nlohmann::json::object())
                                            : ptaudit::LoadRunConfig(o.config);
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.workers) cfg.workers = *o.workers;
  if (o.out) cfg.out_dir = *o.out;
  cfg.validate();
  return cfg;
}

void PrintZoo(const std::vector<ptaudit::ZooEntry>& zoo) {
  std::printf("%-22s %-17s %6s %8s %8s %8s\n", "model", "attack", "target", "acc", "asr", "acc_drop");
  for (const auto& e : zoo) {
    const auto& m = e.manifest["metrics"];
    std::printf("%-22s %-17s %6d %8.3f %8.3f %8.3f\n", e.id.c_str(), e.attack.c_str(), e.target,
                m["acc_seen"].get<double>(), m.value("asr_eval", 0.0), m.value("acc_drop", 0.0));
  }
}

void PrintVerdicts(const std::vector<nlohmann::json>& reports) {
  std::printf("%-22s %8s %10s %8s\n", "model", "s_max", "backdoored", "flagged");
  for (const auto& r : reports) {
    const auto& v = r["verdict"];
    std::printf("%-22s %8.3f %10s %8d\n", r["model_id"].get<std::string>().c_str(), v["s_max"].get<double>(),
                v["backdoored"].get<bool>() ? "yes" : "no", v["flagged_class"].get<int>());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor audit toolkit for prompt-tuned dual-encoder classifiers"};
  app.require_subcommand(1);
  Options opt;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Run configuration (JSON); defaults are used for missing keys");
    sub->add_option("--seed", opt.seed, "Use a single zoo seed instead of the configured list");
    sub->add_option("--workers", opt.workers, "Worker threads for per-class work")->check(CLI::PositiveNumber);
    sub->add_option("--out", opt.out, "Output root (PTAUDIT_OUT_ROOT takes precedence)");
  };
  CLI::App* build = app.add_subcommand("build-zoo", "Train the clean twin and every configured attack per seed");
  CLI::App* inspect = app.add_subcommand("inspect", "Run trigger-inversion inspection over the zoo");
  CLI::App* baseline = app.add_subcommand("baseline", "Run the NC / PixB baselines over the zoo");
  std::string method;
  baseline->add_option("--method", method, "nc or pixb (default: every configured baseline)");
  CLI::App* repair = app.add_subcommand("repair", "Repair flagged models and run the control conditions");
  CLI::App* report = app.add_subcommand("report", "Write summary tables and plots");
  CLI::App* ablate = app.add_subcommand("ablate", "OOD size, batch size, loss kind and pool sweeps");
  CLI::App* show = app.add_subcommand("show-config", "Print the resolved configuration and its hash");
  for (CLI::App* sub : {build, inspect, baseline, repair, report, ablate, show}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const ptaudit::RunConfig cfg = Resolve(opt);
    if (show->parsed()) {
      nlohmann::json j = ptaudit::RunConfigToJson(cfg);
      j["config_hash"] = ptaudit::RunConfigHash(cfg);
      std::cout << j.dump(2) << '\n';
      return kExitOk;
    }
    ptaudit::Workspace ws(cfg);
    std::fprintf(stderr, "run directory: %s\n", ws.root().string().c_str());
    if (build->parsed()) {
      PrintZoo(ptaudit::BuildZoo(ws));
    } else if (inspect->parsed()) {
      const auto out = ptaudit::InspectZoo(ws);
      PrintVerdicts(out.reports);
      if (out.any_degenerate) {
        std::fprintf(stderr, "at least one model produced a degenerate anomaly statistic\n");
        return kExitDegenerate;
      }
    } else if (baseline->parsed()) {
      std::vector<std::string> methods = cfg.baselines;
      if (!method.empty()) methods = {method};
      for (const auto& m : methods) {
        std::printf("[%s]\n", m.c_str());
        PrintVerdicts(ptaudit::BaselineZoo(ws, m));
      }
    } else if (repair->parsed()) {
      for (const auto& r : ptaudit::RepairZoo(ws)) {
        if (r.contains("skipped")) {
          std::printf("%-22s %-18s skipped\n", r["model_id"].get<std::string>().c_str(),
                      r["mode"].get<std::string>().c_str());
          continue;
        }
        std::printf("%-22s %-18s acc %.3f -> %.3f  asr %.3f -> %.3f\n", r["model_id"].get<std::string>().c_str(),
                    r["mode"].get<std::string>().c_str(), r["before"]["acc"].get<double>(),
                    r["after"]["acc"].get<double>(), r["before"]["asr_true_trigger"].get<double>(),
                    r["after"]["asr_true_trigger"].get<double>());
      }
    } else if (report->parsed()) {
      const auto s = ptaudit::ReportRun(ws);
      for (const auto& m : s.methods) {
        std::printf("%-8s models %2d correct %2d auroc %.3f f1 %.3f\n", m.method.c_str(), m.models, m.correct_verdicts,
                    m.auroc, m.f1.f1());
      }
    } else if (ablate->parsed()) {
      for (const auto& f : ptaudit::AblateRun(ws)) std::printf("%s\n", (ws.root() / f).string().c_str());
    }
  } catch (const ptaudit::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stage failure: %s\n", e.what());
    return kExitStage;
  }
  return kExitOk;
}
