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

#include "ptaudit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

namespace ptaudit {
namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

std::string Num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void CheckLabels(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw DataError("score and label lists differ in length");
  const auto pos = std::count(labels.begin(), labels.end(), true);
  if (pos == 0 || pos == static_cast<long>(labels.size())) {
    throw DataError("AUROC is undefined unless both labels occur");
  }
}

std::vector<double> GaussianWindow() {
  std::vector<double> w(kSsimWindow * kSsimWindow);
  const int r = kSsimWindow / 2;
  double total = 0.0;
  for (int y = 0; y < kSsimWindow; ++y) {
    for (int x = 0; x < kSsimWindow; ++x) {
      const double d2 = static_cast<double>((y - r) * (y - r) + (x - r) * (x - r));
      w[static_cast<std::size_t>(y * kSsimWindow + x)] = std::exp(-d2 / (2.0 * kSsimSigma * kSsimSigma));
      total += w[static_cast<std::size_t>(y * kSsimWindow + x)];
    }
  }
  for (double& v : w) v /= total;
  return w;
}

void WriteText(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string SafeName(std::string s) {
  for (char& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  }
  return s;
}

std::string JoinInts(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

double Auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  CheckLabels(scores, labels);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the U statistic in integers: 2 per won pair, 1 per tie.
  long long twice_u = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    long long pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    twice_u += 2 * pos * neg_below + pos * neg;
    neg_below += neg;
    i = j;
  }
  const long long n_pos = std::count(labels.begin(), labels.end(), true);
  const long long n_neg = static_cast<long long>(labels.size()) - n_pos;
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos * n_neg));
}

std::vector<RocPoint> RocCurve(const std::vector<double>& scores, const std::vector<bool>& labels) {
  CheckLabels(scores, labels);
  std::vector<double> cuts = scores;
  std::sort(cuts.begin(), cuts.end(), std::greater<>());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), true));
  const double n_neg = static_cast<double>(labels.size()) - n_pos;
  std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  for (double cut : cuts) {
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= cut) (labels[i] ? tp : fp) += 1.0;
    }
    out.push_back({cut, fp / n_neg, tp / n_pos});
  }
  return out;
}

double F1Counts::f1() const {
  const int denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * tp / static_cast<double>(denom);
}

F1Counts& F1Counts::operator+=(const F1Counts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

F1Counts ClassF1(const std::vector<int>& flagged, int true_target) {
  F1Counts c;
  bool hit = false;
  for (int f : flagged) {
    if (true_target >= 0 && f == true_target) {
      hit = true;
    } else {
      ++c.fp;
    }
  }
  if (true_target >= 0) (hit ? c.tp : c.fn) = 1;
  return c;
}

double Ssim(const Mat& a, const Mat& b, const ImageShape& shape) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != shape.pixels() || b.cols() != shape.pixels()) {
    throw ConfigError("SSIM inputs must be single images of the given shape");
  }
  if (shape.height < kSsimWindow || shape.width < kSsimWindow) throw ConfigError("image smaller than the SSIM window");
  static const std::vector<double> w = GaussianWindow();
  const int ch = shape.channels;
  double total = 0.0;
  long count = 0;
  for (int c = 0; c < ch; ++c) {
    for (int y0 = 0; y0 + kSsimWindow <= shape.height; ++y0) {
      for (int x0 = 0; x0 + kSsimWindow <= shape.width; ++x0) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = 0; dy < kSsimWindow; ++dy) {
          for (int dx = 0; dx < kSsimWindow; ++dx) {
            const double wt = w[static_cast<std::size_t>(dy * kSsimWindow + dx)];
            const Eigen::Index j = ((y0 + dy) * shape.width + (x0 + dx)) * ch + c;
            const double u = a(0, j), v = b(0, j);
            mx += wt * u;
            my += wt * v;
            sxx += wt * u * u;
            syy += wt * v * v;
            sxy += wt * u * v;
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        total += ((2.0 * mx * my + kSsimC1) * (2.0 * cxy + kSsimC2)) /
                 ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

double MeanSsim(const Mat& a, const Mat& b, const ImageShape& shape) {
  if (a.rows() != b.rows() || a.rows() == 0) throw ConfigError("SSIM batches must be non-empty and equal in size");
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) total += Ssim(a.row(i), b.row(i), shape);
  return total / static_cast<double>(a.rows());
}

nlohmann::json RecordJson(const ExperimentRecord& r) {
  return {{"dataset", r.dataset},         {"model_id", r.model_id},
          {"attack", r.attack},           {"method", r.method},
          {"seed", r.seed},               {"true_backdoored", r.true_backdoored},
          {"true_target", r.true_target}, {"acc", r.acc},
          {"asr", r.asr},                 {"s_max", r.s_max},
          {"verdict", r.verdict},         {"threshold", r.threshold},
          {"flagged_class", r.flagged_class}, {"flagged_classes", r.flagged_classes},
          {"classes", r.classes},         {"class_scores", r.class_scores}};
}

ExperimentRecord RecordFromJson(const nlohmann::json& j) {
  ExperimentRecord r;
  r.dataset = j.at("dataset").get<std::string>();
  r.model_id = j.at("model_id").get<std::string>();
  r.attack = j.at("attack").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<int>();
  r.true_backdoored = j.at("true_backdoored").get<bool>();
  r.true_target = j.at("true_target").get<int>();
  r.acc = j.at("acc").get<double>();
  r.asr = j.at("asr").get<double>();
  r.s_max = j.at("s_max").get<double>();
  r.verdict = j.at("verdict").get<bool>();
  r.threshold = j.value("threshold", 2.0);
  r.flagged_class = j.at("flagged_class").get<int>();
  r.flagged_classes = j.at("flagged_classes").get<std::vector<int>>();
  r.classes = j.at("classes").get<std::vector<int>>();
  r.class_scores = j.at("class_scores").get<std::vector<double>>();
  return r;
}

std::string RocSvg(const std::vector<RocPoint>& roc, double auroc, const std::string& title) {
  const double size = 300.0, pad = 40.0;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad
    << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << pad + size << "\" x2=\"" << pad + size << "\" y2=\"" << pad
    << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& p : roc) s << Num(pad + p.fpr * size) << "," << Num(pad + (1.0 - p.tpr) * size) << " ";
  s << Num(pad + size) << "," << Num(pad) << "\"/>\n";
  s << "<text x=\"" << pad << "\" y=\"" << pad - 12 << "\" font-size=\"13\">" << title << " (AUROC " << Num(auroc)
    << ")</text>\n";
  s << "<text x=\"" << pad + size / 2 - 10 << "\" y=\"" << pad + size + 28 << "\" font-size=\"12\">FPR</text>\n";
  s << "<text x=\"6\" y=\"" << pad + size / 2 << "\" font-size=\"12\">TPR</text>\n</svg>\n";
  return s.str();
}

std::string BarSvg(const std::vector<int>& classes, const std::vector<double>& values, double threshold,
                   const std::string& title) {
  const double width = 480.0, height = 240.0, pad = 40.0;
  double lo = std::min(0.0, threshold), hi = std::max(0.0, threshold);
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const auto ypos = [&](double v) { return pad + (hi - v) / (hi - lo) * height; };
  const double bw = values.empty() ? width : width / static_cast<double>(values.size());
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width + 2 * pad << "\" height=\"" << height + 2 * pad
    << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double top = ypos(std::max(values[i], 0.0)), bottom = ypos(std::min(values[i], 0.0));
    s << "<rect x=\"" << Num(pad + i * bw + 1) << "\" y=\"" << Num(top) << "\" width=\"" << Num(bw - 2)
      << "\" height=\"" << Num(bottom - top) << "\" fill=\"" << (values[i] >= threshold ? "firebrick" : "steelblue")
      << "\"/>\n";
    s << "<text x=\"" << Num(pad + i * bw + bw / 2 - 4) << "\" y=\"" << Num(pad + height + 14)
      << "\" font-size=\"9\">" << classes[i] << "</text>\n";
  }
  s << "<line x1=\"" << pad << "\" x2=\"" << pad + width << "\" y1=\"" << Num(ypos(0.0)) << "\" y2=\""
    << Num(ypos(0.0)) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << pad << "\" x2=\"" << pad + width << "\" y1=\"" << Num(ypos(threshold)) << "\" y2=\""
    << Num(ypos(threshold)) << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
  s << "<text x=\"" << pad << "\" y=\"" << pad - 12 << "\" font-size=\"13\">" << title << "</text>\n</svg>\n";
  return s.str();
}

Summary Summarize(const std::vector<ExperimentRecord>& records, const std::string& out_dir) {
  if (records.empty()) throw DataError("no experiment records to summarize");
  const std::filesystem::path root(out_dir);
  Summary summary;

  std::ostringstream rec;
  rec << "dataset,model_id,attack,method,seed,true_backdoored,true_target,acc,asr,s_max,verdict,flagged_class,"
         "flagged_classes,tp,fp,fn\n";
  for (const auto& r : records) {
    const F1Counts c = ClassF1(r.flagged_classes, r.true_backdoored ? r.true_target : -1);
    rec << r.dataset << ',' << r.model_id << ',' << r.attack << ',' << r.method << ',' << r.seed << ','
        << (r.true_backdoored ? 1 : 0) << ',' << r.true_target << ',' << Num(r.acc) << ',' << Num(r.asr) << ','
        << Num(r.s_max) << ',' << (r.verdict ? 1 : 0) << ',' << r.flagged_class << ',' << JoinInts(r.flagged_classes)
        << ',' << c.tp << ',' << c.fp << ',' << c.fn << '\n';
  }
  WriteText(root / "records.csv", rec.str());
  summary.files.push_back("records.csv");

  // Per (dataset, method): verdicts, pooled class-level F1, AUROC and ROC.
  std::map<std::pair<std::string, std::string>, std::vector<const ExperimentRecord*>> by_method;
  for (const auto& r : records) by_method[{r.dataset, r.method}].push_back(&r);
  std::ostringstream meth;
  meth << "dataset,method,models,correct_verdicts,auroc,tp,fp,fn,f1\n";
  for (const auto& [key, group] : by_method) {
    MethodSummary m;
    m.dataset = key.first;
    m.method = key.second;
    std::vector<double> scores;
    std::vector<bool> labels;
    for (const auto* r : group) {
      ++m.models;
      m.correct_verdicts += r->verdict == r->true_backdoored ? 1 : 0;
      m.f1 += ClassF1(r->flagged_classes, r->true_backdoored ? r->true_target : -1);
      scores.push_back(r->s_max);
      labels.push_back(r->true_backdoored);
    }
    const auto pos = std::count(labels.begin(), labels.end(), true);
    m.auroc = std::numeric_limits<double>::quiet_NaN();
    if (pos > 0 && pos < static_cast<long>(labels.size())) {
      m.auroc = Auroc(scores, labels);
      const auto roc = RocCurve(scores, labels);
      const std::string stem = "roc_" + SafeName(m.dataset) + "_" + SafeName(m.method);
      std::ostringstream side;
      side << "threshold,fpr,tpr,auroc\n";
      for (const auto& p : roc) side << Num(p.threshold) << ',' << Num(p.fpr) << ',' << Num(p.tpr) << ',' << Num(m.auroc) << '\n';
      WriteText(root / (stem + ".csv"), side.str());
      WriteText(root / (stem + ".svg"), RocSvg(roc, m.auroc, m.dataset + " / " + m.method));
      summary.files.push_back(stem + ".csv");
      summary.files.push_back(stem + ".svg");
    }
    meth << m.dataset << ',' << m.method << ',' << m.models << ',' << m.correct_verdicts << ',' << Num(m.auroc) << ','
         << m.f1.tp << ',' << m.f1.fp << ',' << m.f1.fn << ',' << Num(m.f1.f1()) << '\n';
    summary.methods.push_back(m);
  }
  WriteText(root / "methods.csv", meth.str());
  summary.files.push_back("methods.csv");

  std::map<std::tuple<std::string, std::string, std::string>, std::vector<const ExperimentRecord*>> by_attack;
  for (const auto& r : records) by_attack[{r.dataset, r.attack, r.method}].push_back(&r);
  std::ostringstream att;
  att << "dataset,attack,method,models,mean_acc,mean_asr,mean_s_max,detection_rate\n";
  for (const auto& [key, group] : by_attack) {
    AttackSummary a;
    std::tie(a.dataset, a.attack, a.method) = key;
    for (const auto* r : group) {
      ++a.models;
      a.mean_acc += r->acc;
      a.mean_asr += r->asr;
      a.mean_s_max += r->s_max;
      a.detection_rate += r->verdict ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(a.models);
    a.mean_acc /= n;
    a.mean_asr /= n;
    a.mean_s_max /= n;
    a.detection_rate /= n;
    att << a.dataset << ',' << a.attack << ',' << a.method << ',' << a.models << ',' << Num(a.mean_acc) << ','
        << Num(a.mean_asr) << ',' << Num(a.mean_s_max) << ',' << Num(a.detection_rate) << '\n';
    summary.attacks.push_back(a);
  }
  WriteText(root / "attacks.csv", att.str());
  summary.files.push_back("attacks.csv");

  for (const auto& r : records) {
    if (r.class_scores.empty()) continue;
    const std::string name = "bars/" + SafeName(r.model_id) + "_" + SafeName(r.method) + ".svg";
    WriteText(root / name, BarSvg(r.classes, r.class_scores, r.threshold, r.model_id + " / " + r.method));
    summary.files.push_back(name);
  }
  return summary;
}

}  // namespace ptaudit
