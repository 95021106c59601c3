#include "deepedit/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "conv_kernels.hpp"
#include "deepedit/error.hpp"

namespace deepedit {

using nlohmann::json;

void ArchConfig::validate() const {
  if (in_channels < 1) throw Error(ErrorKind::kConfig, "arch: in_channels must be >= 1");
  if (num_classes < 2) throw Error(ErrorKind::kConfig, "arch: num_classes must be >= 2");
  if (base_width < 1) throw Error(ErrorKind::kConfig, "arch: base_width must be >= 1");
  if (levels < 2 || levels > 8) throw Error(ErrorKind::kConfig, "arch: levels must be in 2..8");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw Error(ErrorKind::kConfig, "arch: dropout_rate must be in [0, 1)");
  }
}

void ArchConfig::check_shape(const Shape3D& shape) const {
  const std::size_t div = divisor();
  if (shape.depth % div || shape.height % div || shape.width % div) {
    throw Error(ErrorKind::kShapeMismatch, "input shape " + shape.str() + " is not divisible by " +
                                               std::to_string(div) + " (levels=" + std::to_string(levels) + ")");
  }
}

json to_json(const ArchConfig& cfg) {
  return {{"in_channels", cfg.in_channels}, {"num_classes", cfg.num_classes}, {"base_width", cfg.base_width},
          {"levels", cfg.levels}, {"dropout_rate", cfg.dropout_rate}};
}

ArchConfig arch_config_from_json(const json& j) {
  ArchConfig cfg;
  try {
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.base_width = j.value("base_width", cfg.base_width);
    cfg.levels = j.value("levels", cfg.levels);
    cfg.dropout_rate = j.value("dropout_rate", cfg.dropout_rate);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("arch: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<LayerSpec> layer_manifest(const ArchConfig& cfg) {
  cfg.validate();
  std::vector<LayerSpec> layers;
  for (int l = 0; l < cfg.levels; ++l) {
    const std::string tag = std::to_string(l);
    const int w = cfg.width_at(l);
    int in = l == 0 ? cfg.in_channels : w;
    if (l > 0) layers.push_back({"down" + tag, LayerKind::kDown2, cfg.width_at(l - 1), w});
    layers.push_back({"enc" + tag + "a", LayerKind::kConv3, in, w});
    layers.push_back({"enc" + tag + "b", LayerKind::kConv3, w, w});
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const std::string tag = std::to_string(l);
    const int w = cfg.width_at(l);
    layers.push_back({"up" + tag, LayerKind::kPointwise, cfg.width_at(l + 1), w});
    layers.push_back({"dec" + tag + "a", LayerKind::kConv3, 2 * w, w});
    layers.push_back({"dec" + tag + "b", LayerKind::kConv3, w, w});
  }
  layers.push_back({"head", LayerKind::kPointwise, cfg.base_width, cfg.num_classes});
  return layers;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.weight.size() + t.bias.size();
  return n;
}

ModelParams init_model(const ArchConfig& cfg, SeededRng& rng) {
  ModelParams p;
  p.cfg = cfg;
  p.layers = layer_manifest(cfg);
  for (const LayerSpec& spec : p.layers) {
    ParamTensor t;
    const double fan_in = static_cast<double>(spec.in_channels * spec.taps());
    const double fan_out = static_cast<double>(spec.out_channels * spec.taps());
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    t.weight.resize(spec.weight_count());
    for (float& w : t.weight) w = static_cast<float>(rng.uniform(-bound, bound));
    t.bias.assign(static_cast<std::size_t>(spec.out_channels), 0.0f);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

ParamGrads zero_grads(const ModelParams& params) {
  ParamGrads g;
  for (const auto& t : params.tensors) {
    g.push_back({std::vector<float>(t.weight.size(), 0.0f), std::vector<float>(t.bias.size(), 0.0f)});
  }
  return g;
}

namespace {

// Layer indices in manifest order.
struct Layout {
  std::vector<int> down;   // down[l] for l >= 1 (down[0] unused)
  std::vector<int> enc_a, enc_b;
  std::vector<int> up, dec_a, dec_b;  // indexed by level
  int head = -1;

  explicit Layout(int levels)
      : down(levels, -1), enc_a(levels, -1), enc_b(levels, -1), up(levels, -1), dec_a(levels, -1),
        dec_b(levels, -1) {
    int i = 0;
    for (int l = 0; l < levels; ++l) {
      if (l > 0) down[l] = i++;
      enc_a[l] = i++;
      enc_b[l] = i++;
    }
    for (int l = levels - 2; l >= 0; --l) {
      up[l] = i++;
      dec_a[l] = i++;
      dec_b[l] = i++;
    }
    head = i;
  }
};

Shape3D half(const Shape3D& s) { return Shape3D(s.depth / 2, s.height / 2, s.width / 2); }

// ELU, alpha = 1 (continuously differentiable).
void elu_inplace(Volume& v) {
  for (float& x : v.data()) x = x > 0.0f ? x : std::expm1(x);
}

// The ELU derivative recovered from its output: 1 for y > 0, y + 1 otherwise.
void elu_backward(Volume& grad, const Volume& out) {
  auto g = grad.data();
  const auto o = out.data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(o[i] > 0.0f)) g[i] *= o[i] + 1.0f;
  }
}

thread_local std::vector<float> tl_col;

std::span<float> workspace(std::size_t n) {
  if (tl_col.size() < n) tl_col.resize(n);
  return std::span<float>(tl_col.data(), n);
}

std::size_t col_rows(const LayerSpec& spec) {
  return static_cast<std::size_t>(spec.in_channels * spec.taps());
}

// Applies a layer (without activation). Pointwise layers run at the input's resolution.
Volume apply_layer(const LayerSpec& spec, const ParamTensor& t, const Volume& in) {
  const auto cout = static_cast<std::size_t>(spec.out_channels);
  const std::size_t k = col_rows(spec);
  switch (spec.kind) {
    case LayerKind::kConv3: {
      const std::size_t n = in.voxels();
      auto col = workspace(k * n);
      kernels::im2col3(in.data(), in.channels(), in.shape(), col);
      Volume out(cout, in.shape());
      kernels::gemm_bias(t.weight, t.bias, col, cout, k, n, out.data());
      return out;
    }
    case LayerKind::kDown2: {
      const Shape3D low = half(in.shape());
      const std::size_t n = low.voxels();
      auto col = workspace(k * n);
      kernels::im2col_down2(in.data(), in.channels(), in.shape(), col);
      Volume out(cout, low);
      kernels::gemm_bias(t.weight, t.bias, col, cout, k, n, out.data());
      return out;
    }
    case LayerKind::kPointwise: {
      Volume out(cout, in.shape());
      kernels::gemm_bias(t.weight, t.bias, in.data(), cout, k, in.voxels(), out.data());
      return out;
    }
  }
  return {};
}

// Accumulates parameter gradients; returns the input gradient unless skip_input.
Volume layer_backward(const LayerSpec& spec, const ParamTensor& t, const Volume& in, const Volume& dout,
                      ParamTensor& grad, bool skip_input) {
  const auto cout = static_cast<std::size_t>(spec.out_channels);
  const std::size_t k = col_rows(spec);
  Volume din;
  switch (spec.kind) {
    case LayerKind::kConv3: {
      const std::size_t n = in.voxels();
      auto col = workspace(k * n);
      kernels::im2col3(in.data(), in.channels(), in.shape(), col);
      kernels::gemm_weight_grad(dout.data(), col, cout, k, n, grad.weight, grad.bias);
      if (skip_input) return din;
      kernels::gemm_input_grad(t.weight, dout.data(), cout, k, n, col);
      din = Volume(in.channels(), in.shape(), 0.0f);
      kernels::col2im3(col, in.channels(), in.shape(), din.data());
      return din;
    }
    case LayerKind::kDown2: {
      const std::size_t n = dout.voxels();
      auto col = workspace(k * n);
      kernels::im2col_down2(in.data(), in.channels(), in.shape(), col);
      kernels::gemm_weight_grad(dout.data(), col, cout, k, n, grad.weight, grad.bias);
      if (skip_input) return din;
      kernels::gemm_input_grad(t.weight, dout.data(), cout, k, n, col);
      din = Volume(in.channels(), in.shape(), 0.0f);
      kernels::col2im_down2(col, in.channels(), in.shape(), din.data());
      return din;
    }
    case LayerKind::kPointwise: {
      kernels::gemm_weight_grad(dout.data(), in.data(), cout, k, in.voxels(), grad.weight, grad.bias);
      if (skip_input) return din;
      din = Volume(in.channels(), in.shape(), 0.0f);
      kernels::gemm_input_grad(t.weight, dout.data(), cout, k, in.voxels(), din.data());
      return din;
    }
  }
  return din;
}

Volume upsample(const Volume& low, const Shape3D& high) {
  Volume out(low.channels(), high);
  kernels::upsample2(low.data(), low.channels(), high, out.data());
  return out;
}

void add_into(Volume& acc, const Volume& g) {
  auto a = acc.data();
  const auto b = g.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void check_params(const ModelParams& params) {
  if (params.layers.size() != params.tensors.size()) {
    throw Error(ErrorKind::kConfig, "model: layer manifest and tensors disagree");
  }
}

ForwardResult run_forward(const ModelParams& params, const Volume& input, Mode mode, SeededRng* rng,
                          bool keep_cache) {
  check_params(params);
  const ArchConfig& cfg = params.cfg;
  if (static_cast<int>(input.channels()) != cfg.in_channels) {
    throw Error(ErrorKind::kShapeMismatch, "forward: input has " + std::to_string(input.channels()) +
                                               " channels, model expects " + std::to_string(cfg.in_channels));
  }
  cfg.check_shape(input.shape());
  const Layout lay(cfg.levels);
  ForwardResult res;
  ForwardCache& cache = res.cache;
  cache.mode = mode;
  if (keep_cache) {
    cache.inputs.resize(params.layers.size());
    cache.outputs.resize(params.layers.size());
    cache.keep.resize(static_cast<std::size_t>(cfg.levels));
  }

  auto run = [&](int li, const Volume& in, bool act) {
    Volume out = apply_layer(params.layers[li], params.tensors[li], in);
    if (act) elu_inplace(out);
    if (keep_cache) {
      cache.inputs[li] = in;
      cache.outputs[li] = out;
    }
    return out;
  };

  std::vector<Volume> skips(static_cast<std::size_t>(cfg.levels));
  Volume x = input;
  for (int l = 0; l < cfg.levels; ++l) {
    if (l > 0) x = run(lay.down[l], skips[l - 1], true);
    x = run(lay.enc_a[l], x, true);
    x = run(lay.enc_b[l], x, true);
    skips[l] = x;
  }
  const double rate = cfg.dropout_rate;
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const Volume low = run(lay.up[l], x, false);
    const Volume cat = concat_channels({upsample(low, skips[l].shape()), skips[l]});
    x = run(lay.dec_a[l], cat, true);
    x = run(lay.dec_b[l], x, true);
    if (mode == Mode::kTrain && rate > 0.0) {
      std::vector<std::uint8_t> keep(x.data().size());
      const float scale = static_cast<float>(1.0 / (1.0 - rate));
      auto d = x.data();
      for (std::size_t i = 0; i < d.size(); ++i) {
        keep[i] = rng->uniform() >= rate ? 1 : 0;
        d[i] = keep[i] ? d[i] * scale : 0.0f;
      }
      if (keep_cache) cache.keep[static_cast<std::size_t>(l)] = std::move(keep);
    }
  }
  res.logits = run(lay.head, x, false);
  return res;
}

}  // namespace

ForwardResult forward(const ModelParams& params, const Volume& input, Mode mode, SeededRng& rng) {
  return run_forward(params, input, mode, &rng, true);
}

Volume infer(const ModelParams& params, const Volume& input) {
  return run_forward(params, input, Mode::kEval, nullptr, false).logits;
}

ParamGrads backward(const ModelParams& params, const ForwardCache& cache, const Volume& dlogits) {
  check_params(params);
  const ArchConfig& cfg = params.cfg;
  if (cache.inputs.size() != params.layers.size() || cache.outputs.size() != params.layers.size()) {
    throw Error(ErrorKind::kConfig, "backward: cache does not match model");
  }
  const Layout lay(cfg.levels);
  const Volume& logits = cache.outputs[lay.head];
  if (dlogits.channels() != logits.channels() || !(dlogits.shape() == logits.shape())) {
    throw Error(ErrorKind::kShapeMismatch, "backward: dlogits shape does not match forward output");
  }
  ParamGrads grads = zero_grads(params);
  auto back = [&](int li, const Volume& dout, bool skip_input = false) {
    return layer_backward(params.layers[li], params.tensors[li], cache.inputs[li], dout, grads[li], skip_input);
  };

  Volume g = back(lay.head, dlogits);
  std::vector<Volume> skip_grads(static_cast<std::size_t>(cfg.levels));
  const double rate = cfg.dropout_rate;
  for (int l = 0; l <= cfg.levels - 2; ++l) {
    const auto& keep = cache.keep.empty() ? std::vector<std::uint8_t>{} : cache.keep[static_cast<std::size_t>(l)];
    if (cache.mode == Mode::kTrain && rate > 0.0) {
      if (keep.size() != g.data().size()) throw Error(ErrorKind::kConfig, "backward: missing dropout mask");
      const float scale = static_cast<float>(1.0 / (1.0 - rate));
      auto d = g.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = keep[i] ? d[i] * scale : 0.0f;
    }
    elu_backward(g, cache.outputs[lay.dec_b[l]]);
    g = back(lay.dec_b[l], g);
    elu_backward(g, cache.outputs[lay.dec_a[l]]);
    const Volume dcat = back(lay.dec_a[l], g);
    const auto w = static_cast<std::size_t>(cfg.width_at(l));
    const Volume d_up = slice_channels(dcat, 0, w);
    skip_grads[static_cast<std::size_t>(l)] = slice_channels(dcat, w, w);
    const Volume& low_out = cache.outputs[lay.up[l]];
    Volume d_low(low_out.channels(), low_out.shape());
    kernels::upsample2_adjoint(d_up.data(), d_up.channels(), d_up.shape(), d_low.data());
    g = back(lay.up[l], d_low);
  }
  // g is now the gradient w.r.t. the deepest encoder output.
  for (int l = cfg.levels - 1; l >= 0; --l) {
    if (l < cfg.levels - 1) add_into(g, skip_grads[static_cast<std::size_t>(l)]);
    elu_backward(g, cache.outputs[lay.enc_b[l]]);
    g = back(lay.enc_b[l], g);
    elu_backward(g, cache.outputs[lay.enc_a[l]]);
    g = back(lay.enc_a[l], g, l == 0);
    if (l > 0) {
      elu_backward(g, cache.outputs[lay.down[l]]);
      g = back(lay.down[l], g);
    }
  }
  return grads;
}

LossResult loss_and_grad(const Volume& logits, const LabelMap& gt) {
  if (!logits.all_finite()) throw Error(ErrorKind::kNonFinite, "loss: non-finite logits");
  if (!(logits.shape() == gt.shape()) || static_cast<int>(logits.channels()) != gt.num_labels() + 1) {
    throw Error(ErrorKind::kShapeMismatch, "loss: logits/labels shape mismatch");
  }
  constexpr double kSmooth = 1e-5;
  const std::size_t c = logits.channels();
  const std::size_t n = logits.voxels();
  const float* z = logits.data().data();
  const auto g = gt.data();

  std::vector<double> p(c * n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = z[i];
    for (std::size_t k = 1; k < c; ++k) m = std::max(m, static_cast<double>(z[k * n + i]));
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      p[k * n + i] = std::exp(static_cast<double>(z[k * n + i]) - m);
      s += p[k * n + i];
    }
    for (std::size_t k = 0; k < c; ++k) p[k * n + i] /= s;
  }

  // Soft Dice per class: D = (2I + s) / (U + s), I = sum p*g, U = sum p + sum g.
  std::vector<double> inter(c, 0.0), uni(c, 0.0);
  double ce = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = g[i];
    for (std::size_t k = 0; k < c; ++k) uni[k] += p[k * n + i];
    inter[t] += p[t * n + i];
    uni[t] += 1.0;
    ce -= std::log(std::max(p[t * n + i], 1e-300));
  }
  ce /= static_cast<double>(n);
  double dice_mean = 0.0;
  for (std::size_t k = 0; k < c; ++k) dice_mean += (2.0 * inter[k] + kSmooth) / (uni[k] + kSmooth);
  dice_mean /= static_cast<double>(c);

  LossResult r;
  r.dice_term = 1.0 - dice_mean;
  r.ce_term = ce;
  r.loss = 0.5 * r.dice_term + 0.5 * ce;
  r.dlogits = Volume(c, logits.shape());

  // dL/dp for the Dice part, then through the softmax Jacobian; the CE part
  // has the closed form (p - onehot) / n.
  std::vector<double> a(c);
  const double dice_scale = -0.5 / static_cast<double>(c);
  float* out = r.dlogits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = g[i];
    double dot = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double den = uni[k] + kSmooth;
      const double gk = k == t ? 1.0 : 0.0;
      a[k] = dice_scale * (2.0 * gk * den - (2.0 * inter[k] + kSmooth)) / (den * den);
      dot += p[k * n + i] * a[k];
    }
    for (std::size_t k = 0; k < c; ++k) {
      const double pk = p[k * n + i];
      const double gk = k == t ? 1.0 : 0.0;
      out[k * n + i] = static_cast<float>(pk * (a[k] - dot) + 0.5 * (pk - gk) / static_cast<double>(n));
    }
  }
  return r;
}

AdamState init_adam(const ModelParams& params) {
  AdamState s;
  s.m = zero_grads(params);
  s.v = zero_grads(params);
  return s;
}

void adam_step(ModelParams& params, const ParamGrads& grads, AdamState& state, double lr) {
  if (grads.size() != params.tensors.size() || state.m.size() != params.tensors.size() ||
      state.v.size() != params.tensors.size()) {
    throw Error(ErrorKind::kShapeMismatch, "adam: gradient/state layout does not match params");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].weight.size() != params.tensors[i].weight.size() ||
        grads[i].bias.size() != params.tensors[i].bias.size()) {
      throw Error(ErrorKind::kShapeMismatch, "adam: gradient shape mismatch at layer " + std::to_string(i));
    }
    for (float g : grads[i].weight) {
      if (!std::isfinite(g)) throw Error(ErrorKind::kNonFinite, "adam: non-finite gradient");
    }
    for (float g : grads[i].bias) {
      if (!std::isfinite(g)) throw Error(ErrorKind::kNonFinite, "adam: non-finite gradient");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto update = [&](std::vector<float>& w, const std::vector<float>& g, std::vector<float>& m,
                    std::vector<float>& v) {
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double step = lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      w[j] = static_cast<float>(static_cast<double>(w[j]) - step);
    }
  };
  for (std::size_t i = 0; i < grads.size(); ++i) {
    update(params.tensors[i].weight, grads[i].weight, state.m[i].weight, state.v[i].weight);
    update(params.tensors[i].bias, grads[i].bias, state.m[i].bias, state.v[i].bias);
  }
}

}  // namespace deepedit
