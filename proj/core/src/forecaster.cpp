#include "tsprobe/forecaster.hpp"

#include <cmath>

#include "tsprobe/ops.hpp"

namespace tsprobe {

ForecasterConfig ForecasterConfig::for_width(std::size_t d_model, std::size_t horizon) {
  ForecasterConfig c;
  c.d_model = d_model;
  c.d_ff = 2 * d_model;
  c.horizon = horizon;
  c.n_heads = d_model >= 32 ? 4 : 2;
  return c;
}

void ForecasterConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("forecaster config: " + msg); };
  if (depth != 1) fail("only depth 1 is supported");
  if (d_model == 0 || horizon == 0 || patch_len == 0 || stride == 0) fail("zero-sized dimension");
  if (d_ff != 2 * d_model) fail("d_ff must equal 2*d_model");
  if (lookback < patch_len) fail("lookback shorter than patch_len");
  if ((lookback - patch_len) % stride != 0) fail("patches do not tile the lookback");
  if (n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_head() % 2 != 0) fail("d_head must be even for rotary embeddings");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (revin_affine && channels == 0) fail("affine RevIN needs the channel count");
}

nlohmann::json ForecasterConfig::to_json() const {
  return {{"d_model", d_model},     {"d_ff", d_ff},           {"patch_len", patch_len},
          {"stride", stride},       {"lookback", lookback},   {"horizon", horizon},
          {"n_heads", n_heads},     {"depth", depth},         {"dropout", dropout},
          {"rope_base", rope_base}, {"norm_eps", norm_eps},   {"revin_eps", revin_eps},
          {"revin_affine", revin_affine}, {"channels", channels}};
}

ForecasterConfig ForecasterConfig::from_json(const nlohmann::json& j) {
  ForecasterConfig c;
  c.d_model = j.at("d_model");
  c.d_ff = j.at("d_ff");
  c.patch_len = j.at("patch_len");
  c.stride = j.at("stride");
  c.lookback = j.at("lookback");
  c.horizon = j.at("horizon");
  c.n_heads = j.at("n_heads");
  c.depth = j.at("depth");
  c.dropout = j.at("dropout");
  c.rope_base = j.at("rope_base");
  c.norm_eps = j.at("norm_eps");
  c.revin_eps = j.at("revin_eps");
  c.revin_affine = j.at("revin_affine");
  c.channels = j.at("channels");
  return c;
}

std::size_t expected_param_count(const ForecasterConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  std::size_t n = c.patch_len * d + d;          // patch embedding
  n += 4 * d * d;                               // q, k, v, o
  n += 2 * d;                                   // norm gains
  n += d * f + f + f * d + d;                   // ffn
  n += c.num_patches() * d * c.horizon + c.horizon;  // flatten head
  if (c.revin_affine) n += 2 * c.channels;
  return n;
}

template <typename T>
ForecasterParams<T> ForecasterParams<T>::init(const ForecasterConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
  };
  const std::size_t d = c.d_model, f = c.d_ff;
  ForecasterParams p;
  p.patch_w = uniform({c.patch_len, d}, c.patch_len);
  p.patch_b = uniform({d}, c.patch_len);
  p.norm1 = Tensor<T>({d}, T(1));
  p.wq = uniform({d, d}, d);
  p.wk = uniform({d, d}, d);
  p.wv = uniform({d, d}, d);
  p.wo = uniform({d, d}, d);
  p.norm2 = Tensor<T>({d}, T(1));
  p.up_w = uniform({d, f}, d);
  p.up_b = uniform({f}, d);
  p.down_w = uniform({f, d}, f);
  p.down_b = uniform({d}, f);
  const std::size_t flat = c.num_patches() * d;
  p.head_w = uniform({flat, c.horizon}, flat);
  p.head_b = uniform({c.horizon}, flat);
  if (c.revin_affine) {
    p.revin_w = Tensor<T>({c.channels}, T(1));
    p.revin_b = Tensor<T>({c.channels}, T(0));
  }
  return p;
}

template <typename T>
std::vector<ParamRef<T>> ForecasterParams<T>::named() {
  std::vector<ParamRef<T>> out = {
      {"patch_w", &patch_w}, {"patch_b", &patch_b}, {"norm1", &norm1}, {"wq", &wq},
      {"wk", &wk},           {"wv", &wv},           {"wo", &wo},       {"norm2", &norm2},
      {"up_w", &up_w},       {"up_b", &up_b},       {"down_w", &down_w}, {"down_b", &down_b},
      {"head_w", &head_w},   {"head_b", &head_b},
  };
  if (!revin_w.empty()) {
    out.push_back({"revin_w", &revin_w});
    out.push_back({"revin_b", &revin_b});
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ForecasterParams<T>::named() const {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (const auto& ref : const_cast<ForecasterParams*>(this)->named()) out.emplace_back(ref.name, ref.value);
  return out;
}

template <typename T>
std::size_t ForecasterParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

template <typename T>
bool ForecasterParams<T>::all_finite() const {
  for (const auto& [name, t] : named()) {
    for (T v : t->data()) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
  }
  return true;
}

template <typename T>
Tensor<T> revin_normalize(const Tensor<T>& x, T eps, RevinStats<T>& stats) {
  if (x.rank() != 3) throw DimensionError("revin_normalize: expected [batch x steps x channels], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), len = x.dim(1), ch = x.dim(2);
  stats.mean.assign(b * ch, T(0));
  stats.stdev.assign(b * ch, T(0));
  Tensor<T> out(x.shape());
  const T* xp = x.data().data();
  T* op = out.data().data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t c = 0; c < ch; ++c) {
      double total = 0.0;
      for (std::size_t t = 0; t < len; ++t) total += xp[(i * len + t) * ch + c];
      const double mu = total / static_cast<double>(len);
      double ss = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double d = xp[(i * len + t) * ch + c] - mu;
        ss += d * d;
      }
      const double sd = std::sqrt(ss / static_cast<double>(len) + static_cast<double>(eps));
      stats.mean[i * ch + c] = static_cast<T>(mu);
      stats.stdev[i * ch + c] = static_cast<T>(sd);
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t k = (i * len + t) * ch + c;
        op[k] = static_cast<T>((xp[k] - mu) / sd);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> revin_denormalize(const Tensor<T>& y, const RevinStats<T>& stats) {
  if (y.rank() != 3 || y.dim(0) * y.dim(2) != stats.mean.size()) {
    throw DimensionError("revin_denormalize: " + shape_str(y.shape()) + " vs " + std::to_string(stats.mean.size()) +
                         " statistics");
  }
  const std::size_t b = y.dim(0), len = y.dim(1), ch = y.dim(2);
  Tensor<T> out(y.shape());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < ch; ++c) {
        const std::size_t k = (i * len + t) * ch + c;
        out[k] = y[k] * stats.stdev[i * ch + c] + stats.mean[i * ch + c];
      }
    }
  }
  return out;
}

template <typename T>
Var<T> unfold_patches(Var<T> x, std::size_t patch_len, std::size_t stride) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) < patch_len) {
    throw DimensionError("patchify: expected [N x lookback>=patch_len], got " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(0), len = xv.dim(1);
  const std::size_t np = (len - patch_len) / stride + 1;
  Tensor<T> out({n, np, patch_len});
  const T* xp = xv.data().data();
  T* op = out.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t p = 0; p < np; ++p) {
      const T* src = xp + r * len + p * stride;
      std::copy(src, src + patch_len, op + (r * np + p) * patch_len);
    }
  }
  return x.tape->push(std::move(out), {x}, [xi = x.id, n, len, np, patch_len, stride](Tape<T>& t, std::size_t self) {
    T* dx = t.accum(xi);
    if (!dx) return;
    const T* g = t.out_grad(self).data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t p = 0; p < np; ++p) {
        for (std::size_t j = 0; j < patch_len; ++j) dx[r * len + p * stride + j] += g[(r * np + p) * patch_len + j];
      }
    }
  });
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch_len, std::size_t stride) {
  Tape<T> tape(false);
  return unfold_patches(tape.constant(x), patch_len, stride).value();
}

template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> w, Var<T> b, bool inverse, T eps) {
  const auto& xv = x.value();
  const std::size_t ch = w.value().size();
  if (xv.rank() != 2 || ch == 0 || b.value().size() != ch || xv.dim(0) % ch != 0) {
    throw DimensionError("channel_affine: rows of " + shape_str(xv.shape()) + " vs " + std::to_string(ch) + " channels");
  }
  const std::size_t rows = xv.dim(0), width = xv.dim(1);
  const T eps2 = eps * eps;
  const T* wp = w.value().data().data();
  const T* bp = b.value().data().data();
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r % ch;
    for (std::size_t j = 0; j < width; ++j) {
      const T v = xv[r * width + j];
      out[r * width + j] = inverse ? (v - bp[c]) / (wp[c] + eps2) : v * wp[c] + bp[c];
    }
  }
  return x.tape->push(std::move(out), {x, w, b},
                      [xi = x.id, wi = w.id, bi = b.id, rows, width, ch, inverse, eps2](Tape<T>& t, std::size_t self) {
                        const T* g = t.out_grad(self).data();
                        const T* xp = t.value(xi).data().data();
                        const T* wp = t.value(wi).data().data();
                        const T* bp = t.value(bi).data().data();
                        T* dx = t.accum(xi);
                        T* dw = t.accum(wi);
                        T* db = t.accum(bi);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const std::size_t c = r % ch;
                          const T denom = wp[c] + eps2;
                          for (std::size_t j = 0; j < width; ++j) {
                            const std::size_t k = r * width + j;
                            if (inverse) {
                              if (dx) dx[k] += g[k] / denom;
                              if (dw) dw[c] -= g[k] * (xp[k] - bp[c]) / (denom * denom);
                              if (db) db[c] -= g[k] / denom;
                            } else {
                              if (dx) dx[k] += g[k] * wp[c];
                              if (dw) dw[c] += g[k] * xp[k];
                              if (db) db[c] += g[k];
                            }
                          }
                        }
                      });
}

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ForecasterParams<T>& params, bool requires_grad) {
  BoundParams<T> bound;
  for (const auto& [name, t] : params.named()) bound.vars.push_back(tape.leaf(*t, requires_grad));
  return bound;
}

template <typename T>
Tensor<T> channels_to_rows(const Tensor<T>& x) {
  const std::size_t b = x.dim(0), len = x.dim(1), ch = x.dim(2);
  Tensor<T> out({b * ch, len});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < ch; ++c) out[(i * ch + c) * len + t] = x[(i * len + t) * ch + c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> rows_to_channels(const Tensor<T>& rows, std::size_t ch) {
  const std::size_t n = rows.dim(0), len = rows.dim(1), b = n / ch;
  Tensor<T> out({b, len, ch});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t c = 0; c < ch; ++c) out[(i * len + t) * ch + c] = rows[(i * ch + c) * len + t];
    }
  }
  return out;
}

namespace {

enum ParamSlot : std::size_t {
  kPatchW, kPatchB, kNorm1, kWq, kWk, kWv, kWo, kNorm2, kUpW, kUpB, kDownW, kDownB, kHeadW, kHeadB, kRevinW, kRevinB
};

template <typename T>
Var<T> apply_hook(Var<T> act, ActivationHook<T>* hook, std::size_t d_ff) {
  if (hook == nullptr) return act;
  const Shape live_shape = act.shape();
  const Shape token_shape = {act.value().size() / d_ff, d_ff};
  switch (hook->mode) {
    case HookMode::kRecord:
      hook->buffer = act.value().reshaped(token_shape);
      return act;
    case HookMode::kZero:
      return substitute(act, Tensor<T>(live_shape));
    case HookMode::kReplace: {
      Tensor<T> sub = hook->substitute_fn ? hook->substitute_fn(act.value().reshaped(token_shape)) : hook->buffer;
      if (sub.shape() != token_shape) {
        throw DimensionError("activation hook: substitute " + shape_str(sub.shape()) + " does not match live " +
                             shape_str(token_shape));
      }
      return substitute(act, std::move(sub).reshaped(live_shape));
    }
  }
  return act;
}

}  // namespace

template <typename T>
Var<T> forward_flat(Tape<T>& tape, const BoundParams<T>& bound, const ForecasterConfig& c, const Tensor<T>& x,
                    ActivationHook<T>* hook, std::mt19937_64* dropout_rng) {
  if (x.rank() != 3 || x.dim(1) != c.lookback || (c.revin_affine && x.dim(2) != c.channels)) {
    throw ConfigError("forecaster input " + shape_str(x.shape()) + " does not match lookback " +
                      std::to_string(c.lookback));
  }
  const auto& v = bound.vars;
  const std::size_t ch = x.dim(2);
  const std::size_t n = x.dim(0) * ch;
  const std::size_t np = c.num_patches();
  const T drop = dropout_rng ? static_cast<T>(c.dropout) : T(0);

  RevinStats<T> stats;
  const Tensor<T> normed = channels_to_rows(revin_normalize(x, static_cast<T>(c.revin_eps), stats));
  Var<T> series = tape.constant(normed);
  if (c.revin_affine) series = channel_affine(series, v[kRevinW], v[kRevinB], false, static_cast<T>(c.revin_eps));

  Var<T> h = linear(unfold_patches(series, c.patch_len, c.stride), v[kPatchW], v[kPatchB]);  // [N x P x D]

  // attention block
  {
    const Var<T> a = rmsnorm(h, v[kNorm1], static_cast<T>(c.norm_eps));
    const T rope_base = static_cast<T>(c.rope_base);
    const Var<T> q = apply_rope(split_heads(linear(a, v[kWq]), c.n_heads), rope_base);
    const Var<T> k = apply_rope(split_heads(linear(a, v[kWk]), c.n_heads), rope_base);
    const Var<T> val = split_heads(linear(a, v[kWv]), c.n_heads);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(c.d_head()));
    Var<T> attn = softmax_lastdim(scale(bmm(q, k, true), inv_sqrt));
    if (drop > T(0)) attn = dropout(attn, drop, *dropout_rng);
    const Var<T> ctx = merge_heads(bmm(attn, val), c.n_heads);
    h = add(h, linear(ctx, v[kWo]));
  }

  // feed-forward block
  {
    const Var<T> a = rmsnorm(h, v[kNorm2], static_cast<T>(c.norm_eps));
    Var<T> act = gelu(linear(a, v[kUpW], v[kUpB]));
    act = apply_hook(act, hook, c.d_ff);
    if (drop > T(0)) act = dropout(act, drop, *dropout_rng);
    h = add(h, linear(act, v[kDownW], v[kDownB]));
  }

  Var<T> y = linear(reshape(h, {n, np * c.d_model}), v[kHeadW], v[kHeadB]);  // [N x H]
  if (c.revin_affine) y = channel_affine(y, v[kRevinW], v[kRevinB], true, static_cast<T>(c.revin_eps));
  return affine_rows(y, std::move(stats.stdev), std::move(stats.mean));
}

template <typename T>
Tensor<T> forward(const ForecasterParams<T>& params, const ForecasterConfig& config, const Tensor<T>& x,
                  ActivationHook<T>* hook) {
  Tape<T> tape(false);
  const auto bound = bind_params(tape, params, false);
  const Var<T> y = forward_flat(tape, bound, config, x, hook, nullptr);
  return rows_to_channels(y.value(), x.dim(2));
}

template <typename T>
double mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    total += d * d;
  }
  return total / static_cast<double>(pred.size());
}

template <typename T>
double mae(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mae: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    total += std::abs(static_cast<double>(pred[i]) - static_cast<double>(target[i]));
  }
  return total / static_cast<double>(pred.size());
}

#define TSPROBE_INSTANTIATE_FORECASTER(T)                                                                       \
  template struct ForecasterParams<T>;                                                                          \
  template Tensor<T> revin_normalize(const Tensor<T>&, T, RevinStats<T>&);                                      \
  template Tensor<T> revin_denormalize(const Tensor<T>&, const RevinStats<T>&);                                 \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t, std::size_t);                                      \
  template Var<T> unfold_patches(Var<T>, std::size_t, std::size_t);                                             \
  template Var<T> channel_affine(Var<T>, Var<T>, Var<T>, bool, T);                                              \
  template BoundParams<T> bind_params(Tape<T>&, const ForecasterParams<T>&, bool);                              \
  template Var<T> forward_flat(Tape<T>&, const BoundParams<T>&, const ForecasterConfig&, const Tensor<T>&,      \
                               ActivationHook<T>*, std::mt19937_64*);                                           \
  template Tensor<T> forward(const ForecasterParams<T>&, const ForecasterConfig&, const Tensor<T>&,             \
                             ActivationHook<T>*);                                                               \
  template Tensor<T> channels_to_rows(const Tensor<T>&);                                                        \
  template Tensor<T> rows_to_channels(const Tensor<T>&, std::size_t);                                           \
  template double mse(const Tensor<T>&, const Tensor<T>&);                                                      \
  template double mae(const Tensor<T>&, const Tensor<T>&);

TSPROBE_INSTANTIATE_FORECASTER(float)
TSPROBE_INSTANTIATE_FORECASTER(double)

}  // namespace tsprobe
