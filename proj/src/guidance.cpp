#include "deepedit/guidance.hpp"

#include <algorithm>
#include <cmath>

#include "deepedit/error.hpp"

namespace deepedit {

using nlohmann::json;

void ClickSet::append(const ClickSet& more) {
  clicks.insert(clicks.end(), more.clicks.begin(), more.clicks.end());
}

void ClickSet::validate(const Shape3D& shape) const {
  for (const Click& c : clicks) {
    if (c.label < 0 || c.label > num_labels || !shape.contains(c.z, c.y, c.x)) {
      throw Error(ErrorKind::kOutOfBounds, "click " + to_json(c).dump() + " invalid for shape " +
                                               shape.str() + " with " + std::to_string(num_labels) +
                                               " labels");
    }
  }
}

json to_json(const Click& click) {
  return {{"label", click.label}, {"z", click.z}, {"y", click.y}, {"x", click.x}};
}

json to_json(const ClickSet& clicks) {
  json arr = json::array();
  for (const Click& c : clicks.clicks) arr.push_back(to_json(c));
  return {{"num_labels", clicks.num_labels}, {"clicks", arr}};
}

ClickSet click_set_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kFormat, "click set must be a JSON object");
  ClickSet out;
  try {
    out.num_labels = j.at("num_labels").get<int>();
    if (out.num_labels < 1) throw Error(ErrorKind::kFormat, "num_labels must be >= 1");
    for (const json& c : j.at("clicks")) {
      out.clicks.push_back(Click{c.at("label").get<int>(), c.at("z").get<long long>(),
                                 c.at("y").get<long long>(), c.at("x").get<long long>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("malformed click set: ") + e.what());
  }
  return out;
}

void GuidanceConfig::validate() const {
  if (!(sigma > 0.0)) throw Error(ErrorKind::kConfig, "guidance sigma must be > 0");
  if (radius < 1 || radius < static_cast<int>(std::ceil(2.0 * sigma))) {
    throw Error(ErrorKind::kConfig, "guidance radius must be >= ceil(2*sigma)");
  }
}

Volume zero_guidance(const Shape3D& shape, int num_labels) {
  if (num_labels < 1) throw Error(ErrorKind::kInvalidArgument, "zero_guidance: L must be >= 1");
  return Volume(static_cast<std::size_t>(num_labels) + 1, shape, 0.0f);
}

Volume rasterize_clicks(const ClickSet& clicks, const Shape3D& shape) {
  clicks.validate(shape);
  Volume out = zero_guidance(shape, clicks.num_labels);
  for (const Click& c : clicks.clicks) {
    out.at(guidance_channel(c.label, clicks.num_labels), static_cast<std::size_t>(c.z),
           static_cast<std::size_t>(c.y), static_cast<std::size_t>(c.x)) = 1.0f;
  }
  return out;
}

namespace {

// One separable pass along an axis with stride `step` and extent `len`.
// Symmetric taps are added pairwise so the result is exactly flip-invariant.
void smooth_line_pass(std::vector<double>& buf, const Shape3D& s, Axis axis, const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size()) - 1;
  std::size_t len = 0;
  std::size_t step = 0;
  switch (axis) {
    case Axis::kZ: len = s.depth; step = s.height * s.width; break;
    case Axis::kY: len = s.height; step = s.width; break;
    case Axis::kX: len = s.width; step = 1; break;
  }
  std::vector<double> line(len);
  std::vector<double> out(len);
  const std::size_t n = s.voxels();
  for (std::size_t base = 0; base < n; ++base) {
    // Visit each line once, from its first element.
    if ((base / step) % len != 0) continue;
    for (std::size_t i = 0; i < len; ++i) line[i] = buf[base + i * step];
    for (std::size_t i = 0; i < len; ++i) {
      double acc = taps[0] * line[i];
      for (int d = 1; d <= r; ++d) {
        const long long lo = static_cast<long long>(i) - d;
        const std::size_t hi = i + static_cast<std::size_t>(d);
        const double a = lo >= 0 ? line[static_cast<std::size_t>(lo)] : 0.0;
        const double b = hi < len ? line[hi] : 0.0;
        acc += taps[static_cast<std::size_t>(d)] * (a + b);
      }
      out[i] = acc;
    }
    for (std::size_t i = 0; i < len; ++i) buf[base + i * step] = out[i];
  }
}

}  // namespace

Volume smooth_guidance(const Volume& raster, const GuidanceConfig& cfg) {
  cfg.validate();
  std::vector<double> taps(static_cast<std::size_t>(cfg.radius) + 1);
  for (int d = 0; d <= cfg.radius; ++d) {
    taps[static_cast<std::size_t>(d)] = std::exp(-static_cast<double>(d * d) / (2.0 * cfg.sigma * cfg.sigma));
  }
  const Shape3D& s = raster.shape();
  Volume out(raster.channels(), s, 0.0f);
  std::vector<double> buf(s.voxels());
  for (std::size_t c = 0; c < raster.channels(); ++c) {
    const auto in = raster.channel(c);
    if (std::none_of(in.begin(), in.end(), [](float v) { return v != 0.0f; })) continue;
    std::copy(in.begin(), in.end(), buf.begin());
    smooth_line_pass(buf, s, Axis::kZ, taps);
    smooth_line_pass(buf, s, Axis::kY, taps);
    smooth_line_pass(buf, s, Axis::kX, taps);
    const double peak = *std::max_element(buf.begin(), buf.end());
    auto o = out.channel(c);
    for (std::size_t i = 0; i < buf.size(); ++i) o[i] = static_cast<float>(buf[i] / peak);
  }
  return out;
}

Volume make_guidance(const ClickSet& clicks, const Shape3D& shape, const GuidanceConfig& cfg) {
  return smooth_guidance(rasterize_clicks(clicks, shape), cfg);
}

Discrepancy compute_discrepancy(const LabelMap& pred, const LabelMap& gt) {
  if (!(pred.shape() == gt.shape())) throw Error(ErrorKind::kShapeMismatch, "discrepancy: shape mismatch");
  if (pred.num_labels() != gt.num_labels()) {
    throw Error(ErrorKind::kShapeMismatch, "discrepancy: num_labels mismatch");
  }
  Discrepancy d;
  const auto p = pred.data();
  const auto g = gt.data();
  for (int k = 1; k <= gt.num_labels(); ++k) {
    LabelMap fn(gt.shape(), 1);
    LabelMap fp(gt.shape(), 1);
    auto fnd = fn.data();
    auto fpd = fp.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      fnd[i] = (g[i] == k && p[i] != k) ? 1 : 0;
      fpd[i] = (p[i] == k && g[i] != k) ? 1 : 0;
    }
    d.false_negative.push_back(std::move(fn));
    d.false_positive.push_back(std::move(fp));
  }
  return d;
}

namespace {

Click click_at(const Shape3D& s, std::size_t index, int label) {
  const std::size_t plane = s.height * s.width;
  return Click{label, static_cast<long long>(index / plane), static_cast<long long>((index / s.width) % s.height),
               static_cast<long long>(index % s.width)};
}

Click pick_uniform(const Shape3D& s, const std::vector<std::size_t>& voxels, int label, SeededRng& rng) {
  return click_at(s, voxels[rng.below(voxels.size())], label);
}

}  // namespace

std::optional<Click> sample_click(const LabelMap& mask, int label, ClickStrategy strategy, SeededRng& rng) {
  if (strategy == ClickStrategy::kUniformInLargestComponent) {
    const auto comps = connected_components(mask);
    if (comps.empty()) return std::nullopt;
    return pick_uniform(mask.shape(), comps.front(), label, rng);
  }
  std::vector<std::size_t> voxels;
  const auto m = mask.data();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) voxels.push_back(i);
  }
  if (voxels.empty()) return std::nullopt;
  return pick_uniform(mask.shape(), voxels, label, rng);
}

ClickSet simulate_interaction_clicks(const LabelMap& gt, const std::optional<LabelMap>& pred, int k,
                                     SeededRng& rng) {
  if (k < 1) throw Error(ErrorKind::kInvalidArgument, "simulate_interaction_clicks: k must be >= 1");
  ClickSet out;
  out.num_labels = gt.num_labels();

  if (!pred) {
    std::vector<int> present;
    for (int l = 1; l <= gt.num_labels(); ++l) {
      if (gt.count(l) > 0) present.push_back(l);
    }
    if (present.empty()) return out;
    for (int i = 0; i < k; ++i) {
      const int l = present[static_cast<std::size_t>(i) % present.size()];
      auto c = sample_click(gt.mask_of(l), l, ClickStrategy::kUniformInMask, rng);
      out.clicks.push_back(*c);
    }
    return out;
  }

  struct Target {
    std::vector<std::size_t> voxels;
    int click_label;
  };
  std::vector<Target> targets;
  const Discrepancy d = compute_discrepancy(*pred, gt);
  for (int l = 1; l <= gt.num_labels(); ++l) {
    for (auto& comp : connected_components(d.false_negative[static_cast<std::size_t>(l - 1)])) {
      targets.push_back({std::move(comp), l});
    }
    // Background clicks only where the truth is background; a voxel carrying
    // another label is already part of that label's FN target.
    LabelMap fp = d.false_positive[static_cast<std::size_t>(l - 1)];
    for (std::size_t i = 0; i < fp.voxels(); ++i) {
      if (gt.data()[i] != 0) fp.data()[i] = 0;
    }
    for (auto& comp : connected_components(fp)) {
      targets.push_back({std::move(comp), 0});
    }
  }
  if (targets.empty()) return out;
  // Largest first; ties by first voxel, then by the order labels were scanned.
  std::stable_sort(targets.begin(), targets.end(), [](const Target& a, const Target& b) {
    if (a.voxels.size() != b.voxels.size()) return a.voxels.size() > b.voxels.size();
    return a.voxels.front() < b.voxels.front();
  });
  for (int i = 0; i < k; ++i) {
    const Target& t = targets[static_cast<std::size_t>(i) % targets.size()];
    out.clicks.push_back(pick_uniform(gt.shape(), t.voxels, t.click_label, rng));
  }
  return out;
}

Volume build_input(const Volume& image, const Volume& guidance) {
  if (!(image.shape() == guidance.shape())) {
    throw Error(ErrorKind::kShapeMismatch, "build_input: image " + image.shape().str() + " vs guidance " +
                                               guidance.shape().str());
  }
  if (guidance.channels() < 2) throw Error(ErrorKind::kShapeMismatch, "build_input: guidance needs L+1 >= 2 channels");
  return concat_channels({image, guidance});
}

}  // namespace deepedit
