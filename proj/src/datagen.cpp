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

#include "ptaudit/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "ptaudit/container.hpp"

namespace ptaudit {
namespace {

using Color = std::array<double, 3>;

struct NamedColor {
  const char* name;
  Color rgb;
};

const std::vector<NamedColor>& LabeledColors() {
  static const std::vector<NamedColor> colors = {
      {"red", {0.90, 0.15, 0.12}},  {"green", {0.15, 0.80, 0.20}},
      {"blue", {0.15, 0.25, 0.92}}, {"yellow", {0.95, 0.88, 0.15}},
      {"magenta", {0.85, 0.20, 0.80}}, {"cyan", {0.15, 0.85, 0.88}},
  };
  return colors;
}

double Clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Signed distance (negative inside) of a unit-scale family at point (x, y)
// relative to the shape center, for a shape of radius r.
double ShapeDistance(const std::string& family, double x, double y, double r) {
  const double ax = std::abs(x), ay = std::abs(y);
  const double rho = std::hypot(x, y);
  if (family == "circle") return rho - r;
  if (family == "square") return std::max(ax, ay) - 0.8 * r;
  if (family == "diamond") return (ax + ay - 1.1 * r) / std::numbers::sqrt2;
  if (family == "ring") return std::abs(rho - 0.75 * r) - 0.25 * r;
  if (family == "plus") {
    const double bar_w = 0.3 * r;
    return std::min(std::max(ax - r, ay - bar_w), std::max(ax - bar_w, ay - r));
  }
  if (family == "triangle") {
    // Upward triangle from three half-planes.
    const double h = 0.5 * r;
    const double s = std::sqrt(3.0) / 2.0;
    const double e1 = y - h;                    // bottom edge (y grows down)
    const double e2 = -s * x - 0.5 * y - h;     // left edge
    const double e3 = s * x - 0.5 * y - h;      // right edge
    return std::max({e1, e2, e3});
  }
  if (family == "star") {
    const double theta = std::atan2(y, x);
    return rho - r * (0.65 + 0.35 * std::cos(5.0 * theta));
  }
  if (family == "hbar") return std::max(ax - r, ay - 0.28 * r);
  if (family == "frame") return std::abs(std::max(ax, ay) - 0.7 * r) - 0.12 * r;
  if (family == "xcross") {
    const double u = (x + y) / std::numbers::sqrt2, v = (x - y) / std::numbers::sqrt2;
    const double au = std::abs(u), av = std::abs(v);
    const double bar_w = 0.22 * r;
    return std::min(std::max(au - r, av - bar_w), std::max(au - bar_w, av - r));
  }
  if (family == "crescent") {
    const double outer = rho - r;
    const double inner = std::hypot(x - 0.45 * r, y) - 0.8 * r;
    return std::max(outer, -inner);
  }
  throw ConfigError("unknown shape family '" + family + "'");
}

struct Wave {
  double fx, fy, phase, amp;
};

std::vector<Wave> RandomWaves(std::mt19937_64& rng, int count, double max_freq, double amp) {
  std::uniform_real_distribution<double> freq(-max_freq, max_freq);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<Wave> waves;
  for (int i = 0; i < count; ++i) waves.push_back({freq(rng), freq(rng), phase(rng), amp / count});
  return waves;
}

double WaveValue(const std::vector<Wave>& waves, double u, double v) {
  double s = 0.0;
  for (const auto& w : waves) s += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
  return s;
}

struct RenderParams {
  std::string family;  // empty for pure texture
  Color color{};
  Color background{};
  double cx = 0, cy = 0, radius = 0;
  std::vector<Wave> texture;        // luminance texture
  std::vector<Wave> color_texture;  // per-channel texture for noise images
  bool stripes = false;
  double stripe_freq = 0, stripe_amp = 0, stripe_angle = 0;
  double noise_std = 0;
};

void Render(const RenderParams& rp, const ImageShape& shape, std::mt19937_64& rng, double* out) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const double ca = std::cos(rp.stripe_angle), sa = std::sin(rp.stripe_angle);
  std::vector<std::vector<Wave>> channel_waves;
  for (int c = 0; c < shape.channels && !rp.color_texture.empty(); ++c) {
    channel_waves.push_back(rp.color_texture);
    for (auto& w : channel_waves.back()) w.phase += 2.1 * c;
  }
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      const double u = static_cast<double>(x) / shape.width;
      const double v = static_cast<double>(y) / shape.height;
      const double tex = WaveValue(rp.texture, u, v);
      double stripe = 0.0;
      if (rp.stripes) {
        stripe = rp.stripe_amp * std::sin(2.0 * std::numbers::pi * rp.stripe_freq * (ca * u + sa * v));
      }
      double alpha = 0.0;
      if (!rp.family.empty()) {
        const double sd = ShapeDistance(rp.family, x + 0.5 - rp.cx, y + 0.5 - rp.cy, rp.radius);
        alpha = Clamp01(0.5 - sd);
      }
      for (int c = 0; c < shape.channels; ++c) {
        double bg = rp.background[static_cast<std::size_t>(c % 3)] + tex + stripe;
        if (!channel_waves.empty()) bg += WaveValue(channel_waves[static_cast<std::size_t>(c)], u, v);
        const double fg = rp.color[static_cast<std::size_t>(c % 3)];
        const double value = (1.0 - alpha) * bg + alpha * fg + rp.noise_std * noise(rng);
        out[(y * shape.width + x) * shape.channels + c] = Clamp01(value);
      }
    }
  }
}

int ColorsPerShape(int num_classes) { return num_classes <= 24 ? 4 : 6; }

RenderParams LabeledParams(const DatasetSpec& spec, const std::string& family, const Color& base,
                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  RenderParams rp;
  rp.family = family;
  for (int c = 0; c < 3; ++c) rp.color[c] = Clamp01(base[c] + spec.color_jitter * unit(rng));
  const double gray = 0.45 + 0.1 * unit(rng);
  rp.background = {gray, gray, gray};
  const double h = spec.image.height, w = spec.image.width;
  rp.cx = w / 2.0 + spec.position_jitter * unit(rng);
  rp.cy = h / 2.0 + spec.position_jitter * unit(rng);
  rp.radius = 0.28 * std::min(h, w) * (1.0 + spec.scale_jitter * unit(rng));
  rp.texture = RandomWaves(rng, 3, 2.0, spec.background_contrast);
  rp.noise_std = spec.noise_std;
  return rp;
}

void BuildSplit(const Dataset& data, int per_class, std::mt19937_64& rng, ImageSet& out) {
  const DatasetSpec& spec = data.spec;
  const int k_classes = data.num_classes();
  const int colors = ColorsPerShape(k_classes);
  out.shape = spec.image;
  out.pixels.resize(static_cast<Eigen::Index>(k_classes) * per_class, spec.image.pixels());
  out.labels.clear();
  out.splits.clear();
  int row = 0;
  for (int c = 0; c < k_classes; ++c) {
    const Color& base = LabeledColors()[static_cast<std::size_t>(c % colors)].rgb;
    const bool seen = std::find(data.seen_classes.begin(), data.seen_classes.end(), c) !=
                      data.seen_classes.end();
    for (int i = 0; i < per_class; ++i, ++row) {
      const RenderParams rp = LabeledParams(spec, data.class_families[static_cast<std::size_t>(c)], base, rng);
      Render(rp, spec.image, rng, out.pixels.row(row).data());
      out.labels.push_back(c);
      out.splits.push_back(seen ? SplitTag::kSeen : SplitTag::kUnseen);
    }
  }
}

}  // namespace

const std::vector<std::string>& LabeledShapeFamilies() {
  static const std::vector<std::string> families = {"circle", "square", "triangle",
                                                    "diamond", "ring", "plus"};
  return families;
}

void DatasetSpec::validate() const {
  if (num_classes < 4) throw ConfigError("dataset needs K >= 4 so both splits are non-trivial");
  const int colors = ColorsPerShape(num_classes);
  if (num_classes > colors * static_cast<int>(LabeledShapeFamilies().size())) {
    throw ConfigError("too many classes for the labeled shape/color families");
  }
  if (!(seen_fraction > 0.0 && seen_fraction < 1.0)) {
    throw ConfigError("seen_fraction must be in (0, 1)");
  }
  if (samples_per_class <= 0 || test_per_class <= 0 || ood.size <= 0) {
    throw ConfigError("sample counts must be positive");
  }
  if (image.height < 8 || image.width < 8 || image.channels != 3) {
    throw ConfigError("images must be at least 8x8 with 3 channels");
  }
}

Dataset GenerateDataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset data;
  data.spec = spec;
  const int colors = ColorsPerShape(spec.num_classes);
  for (int c = 0; c < spec.num_classes; ++c) {
    const std::string& family = LabeledShapeFamilies()[static_cast<std::size_t>(c / colors)];
    data.class_families.push_back(family);
    data.class_names.push_back(std::string(LabeledColors()[static_cast<std::size_t>(c % colors)].name) +
                               "_" + family);
  }
  std::mt19937_64 rng(spec.seed);
  std::vector<int> perm(static_cast<std::size_t>(spec.num_classes));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const int n_seen = std::clamp(static_cast<int>(std::lround(spec.num_classes * spec.seen_fraction)), 2,
                                spec.num_classes - 2);
  data.seen_classes.assign(perm.begin(), perm.begin() + n_seen);
  data.unseen_classes.assign(perm.begin() + n_seen, perm.end());
  std::sort(data.seen_classes.begin(), data.seen_classes.end());
  std::sort(data.unseen_classes.begin(), data.unseen_classes.end());

  BuildSplit(data, spec.samples_per_class, rng, data.train);
  BuildSplit(data, spec.test_per_class, rng, data.test);

  data.probe_accuracy = LinearProbeAccuracy(data.train, data.test, spec.num_classes, spec.seed);
  if (data.probe_accuracy < spec.min_probe_accuracy) {
    throw DataError("generated classes are not linearly separable enough: probe accuracy " +
                    std::to_string(data.probe_accuracy) + " < " +
                    std::to_string(spec.min_probe_accuracy));
  }
  return data;
}

ImageSet GenerateOodPool(const DatasetSpec& spec) {
  spec.validate();
  if (spec.ood.families.empty()) throw ConfigError("OOD spec lists no generator families");
  for (const auto& family : spec.ood.families) {
    const auto& labeled = LabeledShapeFamilies();
    if (std::find(labeled.begin(), labeled.end(), family) != labeled.end()) {
      throw DataError("OOD family '" + family + "' overlaps a labeled class family");
    }
    if (family != "noise") ShapeDistance(family, 0.0, 0.0, 1.0);  // rejects unknown names
  }
  std::mt19937_64 rng(spec.seed ^ 0x00d00d00d00dULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ImageSet pool;
  pool.shape = spec.image;
  pool.pixels.resize(spec.ood.size, spec.image.pixels());
  const double h = spec.image.height, w = spec.image.width;
  for (int i = 0; i < spec.ood.size; ++i) {
    const std::string& family =
        spec.ood.families[static_cast<std::size_t>(i) % spec.ood.families.size()];
    RenderParams rp;
    rp.noise_std = spec.noise_std;
    const double gray = 0.25 + 0.5 * unit(rng);
    rp.background = {gray + 0.1 * (unit(rng) - 0.5), gray + 0.1 * (unit(rng) - 0.5),
                     gray + 0.1 * (unit(rng) - 0.5)};
    if (family == "noise") {
      rp.texture = RandomWaves(rng, 6, 4.0, 0.3);
      rp.color_texture = RandomWaves(rng, 4, 3.0, 0.2);
    } else {
      rp.family = family;
      rp.color = {unit(rng), unit(rng), unit(rng)};
      rp.cx = w / 2.0 + 0.2 * w * (unit(rng) - 0.5);
      rp.cy = h / 2.0 + 0.2 * h * (unit(rng) - 0.5);
      rp.radius = 0.22 * std::min(h, w) * (0.8 + 0.5 * unit(rng));
      rp.texture = RandomWaves(rng, 3, 3.0, 0.15);
      rp.stripes = unit(rng) < 0.5;
      rp.stripe_freq = 2.0 + 4.0 * unit(rng);
      rp.stripe_amp = 0.08 + 0.08 * unit(rng);
      rp.stripe_angle = std::numbers::pi * unit(rng);
    }
    Render(rp, spec.image, rng, pool.pixels.row(i).data());
    pool.labels.push_back(-1);
    pool.splits.push_back(SplitTag::kOod);
  }
  return pool;
}

double LinearProbeAccuracy(const ImageSet& train, const ImageSet& test, int num_classes,
                           std::uint64_t seed) {
  (void)seed;  // full-batch training is deterministic
  const ImageShape& s = train.shape;
  const int pool = 4;
  const int ph = s.height / pool, pw = s.width / pool;
  const int dim = ph * pw * s.channels;
  auto pooled = [&](const ImageSet& set) {
    Mat f = Mat::Zero(set.size(), dim + 1);
    for (int i = 0; i < set.size(); ++i) {
      const double* px = set.pixels.row(i).data();
      for (int y = 0; y < ph * pool; ++y) {
        for (int x = 0; x < pw * pool; ++x) {
          for (int c = 0; c < s.channels; ++c) {
            f(i, ((y / pool) * pw + x / pool) * s.channels + c) +=
                px[(y * s.width + x) * s.channels + c] / (pool * pool);
          }
        }
      }
      f(i, dim) = 1.0;
    }
    return f;
  };
  Mat xtr = pooled(train), xte = pooled(test);
  // Standardize with training statistics (bias column untouched).
  for (int j = 0; j < dim; ++j) {
    const double mu = xtr.col(j).mean();
    const double sd = std::max(1e-6, std::sqrt((xtr.col(j).array() - mu).square().mean()));
    xtr.col(j) = (xtr.col(j).array() - mu) / sd;
    xte.col(j) = (xte.col(j).array() - mu) / sd;
  }
  Mat weights = Mat::Zero(dim + 1, num_classes);
  const double lr = 0.5;
  for (int it = 0; it < 300; ++it) {
    Mat z = xtr * weights;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      z.row(i).array() -= z.row(i).maxCoeff();
      z.row(i) = z.row(i).array().exp();
      z.row(i) /= z.row(i).sum();
      z(i, train.labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    weights -= lr * (xtr.transpose() * z) / static_cast<double>(xtr.rows());
  }
  const Mat scores = xte * weights;
  int hits = 0;
  for (int i = 0; i < test.size(); ++i) {
    if (ArgMax(scores.row(i)) == test.labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / test.size();
}

nlohmann::json DatasetManifest(const Dataset& data) {
  const DatasetSpec& s = data.spec;
  nlohmann::json ood_families = s.ood.families;
  return {
      {"format", "ptaudit-dataset"},
      {"class_names", data.class_names},
      {"class_families", data.class_families},
      {"seen_classes", data.seen_classes},
      {"unseen_classes", data.unseen_classes},
      {"probe_accuracy", data.probe_accuracy},
      {"generator",
       {{"labeled_families", LabeledShapeFamilies()},
        {"ood_families", ood_families},
        {"num_classes", s.num_classes},
        {"seen_fraction", s.seen_fraction},
        {"height", s.image.height},
        {"width", s.image.width},
        {"channels", s.image.channels},
        {"samples_per_class", s.samples_per_class},
        {"test_per_class", s.test_per_class},
        {"position_jitter", s.position_jitter},
        {"scale_jitter", s.scale_jitter},
        {"color_jitter", s.color_jitter},
        {"background_contrast", s.background_contrast},
        {"noise_std", s.noise_std},
        {"ood_size", s.ood.size},
        {"seed", s.seed}}},
  };
}

void SaveDataset(const Dataset& data, const std::string& path) {
  ArrayFile file;
  file.metadata = DatasetManifest(data);
  auto labels_of = [](const ImageSet& set) {
    Mat m(set.size(), 1);
    for (int i = 0; i < set.size(); ++i) m(i, 0) = set.labels[static_cast<std::size_t>(i)];
    return m;
  };
  file.put("train.pixels", data.train.pixels);
  file.put("train.labels", labels_of(data.train));
  file.put("test.pixels", data.test.pixels);
  file.put("test.labels", labels_of(data.test));
  WriteArrayFile(path, file);
}

Dataset LoadDataset(const std::string& path) {
  const ArrayFile file = ReadArrayFile(path);
  const auto& m = file.metadata;
  if (m.value("format", "") != "ptaudit-dataset") throw DataError(path + " is not a dataset file");
  Dataset data;
  const auto& g = m.at("generator");
  data.spec.num_classes = g.at("num_classes");
  data.spec.seen_fraction = g.at("seen_fraction");
  data.spec.image = {g.at("height").get<int>(), g.at("width").get<int>(), g.at("channels").get<int>()};
  data.spec.samples_per_class = g.at("samples_per_class");
  data.spec.test_per_class = g.at("test_per_class");
  data.spec.position_jitter = g.at("position_jitter");
  data.spec.scale_jitter = g.at("scale_jitter");
  data.spec.color_jitter = g.at("color_jitter");
  data.spec.background_contrast = g.at("background_contrast");
  data.spec.noise_std = g.at("noise_std");
  data.spec.ood.size = g.at("ood_size");
  data.spec.ood.families = g.at("ood_families").get<std::vector<std::string>>();
  data.spec.seed = g.at("seed");
  data.class_names = m.at("class_names").get<std::vector<std::string>>();
  data.class_families = m.at("class_families").get<std::vector<std::string>>();
  data.seen_classes = m.at("seen_classes").get<std::vector<int>>();
  data.unseen_classes = m.at("unseen_classes").get<std::vector<int>>();
  data.probe_accuracy = m.at("probe_accuracy");
  auto restore = [&](const std::string& prefix, ImageSet& set) {
    set.shape = data.spec.image;
    set.pixels = file.get(prefix + ".pixels");
    const Mat& labels = file.get(prefix + ".labels");
    for (Eigen::Index i = 0; i < labels.rows(); ++i) {
      const int c = static_cast<int>(labels(i, 0));
      set.labels.push_back(c);
      const bool seen = std::find(data.seen_classes.begin(), data.seen_classes.end(), c) !=
                        data.seen_classes.end();
      set.splits.push_back(seen ? SplitTag::kSeen : SplitTag::kUnseen);
    }
  };
  restore("train", data.train);
  restore("test", data.test);
  return data;
}

}  // namespace ptaudit
