#include "tsprobe/sae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "tsprobe/checkpoint.hpp"
#include "tsprobe/ops.hpp"
#include "tsprobe/optim.hpp"

namespace tsprobe {

template <typename T>
Tensor<T> ActivationStore::rows(std::span<const std::size_t> indices) const {
  Tensor<T> out({indices.size(), d_ff});
  T* o = out.data().data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const float* src = data.data() + indices[r] * d_ff;
    for (std::size_t j = 0; j < d_ff; ++j) o[r * d_ff + j] = static_cast<T>(src[j]);
  }
  return out;
}

template <typename T>
Tensor<T> ActivationStore::slice(std::size_t begin, std::size_t end) const {
  Tensor<T> out({end - begin, d_ff});
  const float* src = data.data() + begin * d_ff;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src[i]);
  return out;
}

namespace {

constexpr char kStoreMagic[8] = {'T', 'S', 'P', 'R', 'A', 'C', 'T', 'S'};
constexpr std::uint32_t kStoreVersion = 1;

}  // namespace

void save_store(const std::filesystem::path& path, const ActivationStore& store) {
  const std::string meta = store.meta.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    const std::uint64_t n = store.n, d = store.d_ff, len = meta.size();
    out.write(kStoreMagic, sizeof(kStoreMagic));
    out.write(reinterpret_cast<const char*>(&kStoreVersion), sizeof(kStoreVersion));
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    out.write(reinterpret_cast<const char*>(store.data.data()),
              static_cast<std::streamsize>(store.data.size() * sizeof(float)));
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

struct StoreHeader {
  std::uint64_t n = 0;
  std::uint64_t d_ff = 0;
  nlohmann::json meta;
};

StoreHeader read_store_header(std::ifstream& in, const std::filesystem::path& path) {
  if (!in) throw DataError("cannot open activation store " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kStoreMagic, sizeof(magic)) != 0) throw DataError(path.string() + ": not an activation store");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  StoreHeader h;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kStoreVersion) throw DataError(path.string() + ": unsupported store version");
  in.read(reinterpret_cast<char*>(&h.n), sizeof(h.n));
  in.read(reinterpret_cast<char*>(&h.d_ff), sizeof(h.d_ff));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw DataError(path.string() + ": truncated store header");
  std::string meta(len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated store header");
  h.meta = nlohmann::json::parse(meta);
  return h;
}

}  // namespace

ActivationStore load_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  StoreHeader h = read_store_header(in, path);
  ActivationStore s;
  s.n = h.n;
  s.d_ff = h.d_ff;
  s.meta = std::move(h.meta);
  s.data.resize(s.n * s.d_ff);
  in.read(reinterpret_cast<char*>(s.data.data()), static_cast<std::streamsize>(s.data.size() * sizeof(float)));
  if (!in) throw DataError(path.string() + ": truncated activation data");
  return s;
}

nlohmann::json read_store_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return read_store_header(in, path).meta;
}

template <typename T>
ActivationStore harvest(const ForecasterParams<T>& params, const ForecasterConfig& config, const SeriesDataset& ds,
                        std::size_t cap, std::uint64_t seed, std::size_t batch_size) {
  if (cap == 0) throw ConfigError("harvest cap must be positive");
  ActivationStore store;
  store.d_ff = config.d_ff;
  std::vector<std::uint64_t> origin;
  std::mt19937_64 rng(seed);
  std::uint64_t seen = 0;

  WindowStream<T> stream(ds, Partition::kTrain, config.lookback, config.horizon, batch_size);
  WindowBatch<T> batch;
  while (stream.next(batch)) {
    auto hook = ActivationHook<T>::record();
    forward(params, config, batch.inputs, &hook);
    const Tensor<T>& acts = hook.buffer;
    const std::size_t rows = acts.dim(0);
    for (std::size_t r = 0; r < rows; ++r, ++seen) {
      const T* src = acts.data().data() + r * config.d_ff;
      if (seen < cap) {
        for (std::size_t j = 0; j < config.d_ff; ++j) store.data.push_back(static_cast<float>(src[j]));
        origin.push_back(seen);
      } else {
        std::uniform_int_distribution<std::uint64_t> pick(0, seen);
        const std::uint64_t slot = pick(rng);
        if (slot < cap) {
          float* dst = store.data.data() + slot * config.d_ff;
          for (std::size_t j = 0; j < config.d_ff; ++j) dst[j] = static_cast<float>(src[j]);
          origin[slot] = seen;
        }
      }
    }
  }
  store.n = origin.size();

  if (seen > cap) {
    std::vector<std::size_t> order(store.n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return origin[a] < origin[b]; });
    std::vector<float> sorted(store.data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
      std::copy_n(store.data.data() + order[i] * config.d_ff, config.d_ff, sorted.data() + i * config.d_ff);
    }
    store.data = std::move(sorted);
  }
  store.meta = {{"dataset", ds.name},     {"horizon", config.horizon}, {"harvest_seed", seed},
                {"cap", cap},             {"rows_seen", seen},         {"d_ff", config.d_ff}};
  return store;
}

std::size_t SaeConfig::d_hidden() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scale * static_cast<double>(d_ff))));
}

void SaeConfig::validate() const {
  if (d_ff == 0) throw ConfigError("sae config: d_ff must be positive");
  if (!(scale > 0.0)) throw ConfigError("sae config: scale must be positive");
  if (lambda < 0.0) throw ConfigError("sae config: lambda must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("sae config: lr must be positive");
  if (batch_size == 0 || max_epochs == 0) throw ConfigError("sae config: zero batch size or epochs");
}

nlohmann::json SaeConfig::to_json() const {
  return {{"d_ff", d_ff},         {"scale", scale},
          {"lambda", lambda},     {"lr", lr},
          {"max_epochs", max_epochs}, {"patience", patience},
          {"improvement_threshold", improvement_threshold},
          {"batch_size", batch_size}, {"max_steps", max_steps}};
}

SaeConfig SaeConfig::from_json(const nlohmann::json& j) {
  SaeConfig c;
  c.d_ff = j.at("d_ff");
  c.scale = j.at("scale");
  c.lambda = j.value("lambda", c.lambda);
  c.lr = j.value("lr", c.lr);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.improvement_threshold = j.value("improvement_threshold", c.improvement_threshold);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  return c;
}

template <typename T>
SaeParams<T> SaeParams<T>::init(std::size_t d_ff, std::size_t d_hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_ff));
  std::uniform_real_distribution<double> uni(-bound, bound);
  std::normal_distribution<double> normal(0.0, 1.0);
  SaeParams p;
  p.w_enc = Tensor<T>({d_ff, d_hidden});
  for (auto& v : p.w_enc.data()) v = static_cast<T>(uni(rng));
  p.b_enc = Tensor<T>({d_hidden});
  p.w_dec = Tensor<T>({d_hidden, d_ff});
  for (auto& v : p.w_dec.data()) v = static_cast<T>(normal(rng));
  p.b_dec = Tensor<T>({d_ff});
  p.normalize_decoder();
  return p;
}

template <typename T>
SaeParams<T> SaeParams<T>::identity(std::size_t d_ff) {
  SaeParams p;
  p.w_enc = Tensor<T>({d_ff, d_ff});
  p.w_dec = Tensor<T>({d_ff, d_ff});
  for (std::size_t i = 0; i < d_ff; ++i) {
    p.w_enc.at(i, i) = T(1);
    p.w_dec.at(i, i) = T(1);
  }
  p.b_enc = Tensor<T>({d_ff});
  p.b_dec = Tensor<T>({d_ff});
  return p;
}

template <typename T>
std::vector<ParamRef<T>> SaeParams<T>::named() {
  return {{"w_enc", &w_enc}, {"b_enc", &b_enc}, {"w_dec", &w_dec}, {"b_dec", &b_dec}};
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> SaeParams<T>::named() const {
  return {{"w_enc", &w_enc}, {"b_enc", &b_enc}, {"w_dec", &w_dec}, {"b_dec", &b_dec}};
}

template <typename T>
void SaeParams<T>::normalize_decoder() {
  const std::size_t h = w_dec.dim(0), d = w_dec.dim(1);
  for (std::size_t i = 0; i < h; ++i) {
    T* row = w_dec.data().data() + i * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(row[j]) * static_cast<double>(row[j]);
    const double norm = std::sqrt(ss);
    if (norm > 0.0) {
      for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<T>(static_cast<double>(row[j]) / norm);
    } else {
      row[0] = T(1);  // a zero direction is reset to the first axis
    }
  }
}

template <typename T>
double SaeParams<T>::max_decoder_norm_error() const {
  const std::size_t h = w_dec.dim(0), d = w_dec.dim(1);
  double worst = 0.0;
  for (std::size_t i = 0; i < h; ++i) {
    const T* row = w_dec.data().data() + i * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(row[j]) * static_cast<double>(row[j]);
    worst = std::max(worst, std::abs(std::sqrt(ss) - 1.0));
  }
  return worst;
}

template <typename T>
Tensor<T> sae_decode(const SaeParams<T>& sae, const Tensor<T>& f) {
  const std::size_t n = f.dim(0), h = sae.d_hidden(), d = sae.d_ff();
  if (f.rank() != 2 || f.dim(1) != h) throw DimensionError("sae_decode: latents " + shape_str(f.shape()));
  Tensor<T> xhat({n, d});
  T* o = xhat.data().data();
  for (std::size_t r = 0; r < n; ++r) std::copy_n(sae.b_dec.data().data(), d, o + r * d);
  kernel::gemm(f.data().data(), sae.w_dec.data().data(), o, n, h, d, false, false, true);
  return xhat;
}

template <typename T>
SaeOutput<T> sae_forward(const SaeParams<T>& sae, const Tensor<T>& x) {
  const std::size_t d = sae.d_ff(), h = sae.d_hidden();
  if (x.rank() != 2 || x.dim(1) != d) {
    throw DimensionError("sae_forward: input " + shape_str(x.shape()) + " vs d_ff " + std::to_string(d));
  }
  const std::size_t n = x.dim(0);
  SaeOutput<T> out;
  out.f = Tensor<T>({n, h});
  T* f = out.f.data().data();
  for (std::size_t r = 0; r < n; ++r) std::copy_n(sae.b_enc.data().data(), h, f + r * h);
  kernel::gemm(x.data().data(), sae.w_enc.data().data(), f, n, d, h, false, false, true);
  for (auto& v : out.f.data()) v = v > T(0) ? v : T(0);
  out.xhat = sae_decode(sae, out.f);
  return out;
}

template <typename T>
double sae_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<T>& f, double lambda) {
  if (x.shape() != xhat.shape() || f.rank() != 2 || f.dim(0) != x.dim(0)) {
    throw DimensionError("sae_loss: x" + shape_str(x.shape()) + " xhat" + shape_str(xhat.shape()) + " f" +
                         shape_str(f.shape()));
  }
  double se = 0.0, l1 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(xhat[i]);
    se += d * d;
  }
  for (T v : f.data()) l1 += std::abs(static_cast<double>(v));
  return (se + lambda * l1) / static_cast<double>(x.dim(0));
}

template <typename T>
Var<T> sae_objective(Tape<T>& tape, Var<T> w_enc, Var<T> b_enc, Var<T> w_dec, Var<T> b_dec, const Tensor<T>& x,
                     T lambda) {
  const Var<T> xv = tape.constant(x);
  const Var<T> f = relu(linear(xv, w_enc, b_enc));
  const Var<T> xhat = linear(f, w_dec, b_dec);
  const Var<T> total = add(sq_err_sum(xhat, x), scale(abs_sum(f), lambda));
  return scale(total, T(1) / static_cast<T>(x.dim(0)));
}

template <typename T>
SaeTrainResult<T> train_sae(const ActivationStore& store, const SaeConfig& config, std::uint64_t seed,
                            const SaeStepCallback& on_step) {
  config.validate();
  if (store.n == 0) throw DataError("cannot train an SAE on an empty activation store");
  if (store.d_ff != config.d_ff) {
    throw ConfigError("sae d_ff " + std::to_string(config.d_ff) + " does not match store d_ff " +
                      std::to_string(store.d_ff));
  }
  SaeTrainResult<T> result;
  SaeParams<T>& sae = result.params;
  sae = SaeParams<T>::init(config.d_ff, config.d_hidden(), seed);
  SaeParams<T> best = sae;

  std::vector<Shape> shapes;
  for (const auto& ref : sae.named()) shapes.push_back(ref.value->shape());
  OptimizerState opt = OptimizerState::for_shapes(shapes, config.lr, 0.0);
  const T lambda = static_cast<T>(config.lambda);

  std::vector<std::size_t> order(store.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x5AE5AE5AEULL);
  std::size_t bad_epochs = 0;
  bool done = false;

  for (std::size_t epoch = 1; epoch <= config.max_epochs && !done; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_total = 0.0;
    std::size_t rows_total = 0;
    for (std::size_t begin = 0; begin < store.n; begin += config.batch_size) {
      if (config.max_steps > 0 && result.log.steps >= config.max_steps) {
        done = true;
        break;
      }
      const std::size_t end = std::min(store.n, begin + config.batch_size);
      const Tensor<T> x = store.rows<T>(std::span<const std::size_t>(order).subspan(begin, end - begin));
      Tape<T> tape;
      const Var<T> we = tape.leaf(sae.w_enc, true);
      const Var<T> be = tape.leaf(sae.b_enc, true);
      const Var<T> wd = tape.leaf(sae.w_dec, true);
      const Var<T> bd = tape.leaf(sae.b_dec, true);
      const Var<T> loss = sae_objective(tape, we, be, wd, bd, x, lambda);
      const double loss_value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(loss_value)) {
        throw NonFiniteError("non-finite SAE loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(result.log.steps));
      }
      tape.backward(loss);
      const std::vector<Tensor<T>> grads = {tape.grad(we), tape.grad(be), tape.grad(wd), tape.grad(bd)};
      adamw_step<T>(sae.named(), grads, opt);
      sae.normalize_decoder();
      ++result.log.steps;

      const double norm_error = sae.max_decoder_norm_error();
      result.log.max_decoder_norm_error = std::max(result.log.max_decoder_norm_error, norm_error);
      if (norm_error > 1e-5) {
        throw std::logic_error("decoder directions left the unit sphere (error " + std::to_string(norm_error) + ")");
      }
      if (on_step) on_step(result.log.steps, norm_error);

      loss_total += loss_value * static_cast<double>(end - begin);
      rows_total += end - begin;
    }
    if (rows_total == 0) break;
    const double epoch_loss = loss_total / static_cast<double>(rows_total);
    result.log.epoch_loss.push_back(epoch_loss);
    if (result.log.best_epoch == 0 || epoch_loss < result.log.best_loss * (1.0 - config.improvement_threshold)) {
      result.log.best_epoch = epoch;
      result.log.best_loss = epoch_loss;
      best = sae;
      bad_epochs = 0;
    } else if (++bad_epochs >= config.patience) {
      break;
    }
  }
  result.params = std::move(best);
  return result;
}

template <typename T>
Fidelity fidelity_metrics(const SaeParams<T>& sae, const ActivationStore& store, double activity_threshold) {
  Fidelity fid;
  if (store.n == 0) return fid;
  constexpr std::size_t kChunk = 4096;
  double active = 0.0, se = 0.0;
  for (std::size_t begin = 0; begin < store.n; begin += kChunk) {
    const std::size_t end = std::min(store.n, begin + kChunk);
    const Tensor<T> x = store.slice<T>(begin, end);
    const SaeOutput<T> out = sae_forward(sae, x);
    for (T v : out.f.data()) {
      if (static_cast<double>(v) > activity_threshold) active += 1.0;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = static_cast<double>(x[i]) - static_cast<double>(out.xhat[i]);
      se += d * d;
    }
  }
  fid.l0 = active / static_cast<double>(store.n);
  fid.recon_mse = se / static_cast<double>(store.n * store.d_ff);
  return fid;
}

template <typename T>
void save_sae(const std::filesystem::path& path, const SaeParams<T>& sae, const SaeConfig& config,
              const nlohmann::json& extra_meta) {
  nlohmann::json meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  meta["kind"] = "sae";
  meta["config"] = config.to_json();
  save_bundle<T>(path, meta, sae.named());
}

template <typename T>
LoadedSae<T> load_sae(const std::filesystem::path& path) {
  auto bundle = load_bundle<T>(path);
  if (bundle.meta.value("kind", "") != "sae") throw DataError(path.string() + ": not an SAE checkpoint");
  LoadedSae<T> out;
  out.config = SaeConfig::from_json(bundle.meta.at("config"));
  out.meta = bundle.meta;
  out.params.w_enc = bundle.at("w_enc");
  out.params.b_enc = bundle.at("b_enc");
  out.params.w_dec = bundle.at("w_dec");
  out.params.b_dec = bundle.at("b_dec");
  if (out.params.d_ff() != out.config.d_ff || out.params.d_hidden() != out.config.d_hidden()) {
    throw DataError(path.string() + ": SAE tensor shapes disagree with the stored config");
  }
  return out;
}

#define TSPROBE_INSTANTIATE_SAE(T)                                                                              \
  template Tensor<T> ActivationStore::rows<T>(std::span<const std::size_t>) const;                              \
  template Tensor<T> ActivationStore::slice<T>(std::size_t, std::size_t) const;                                 \
  template ActivationStore harvest<T>(const ForecasterParams<T>&, const ForecasterConfig&, const SeriesDataset&, \
                                      std::size_t, std::uint64_t, std::size_t);                                 \
  template struct SaeParams<T>;                                                                                 \
  template SaeOutput<T> sae_forward<T>(const SaeParams<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sae_decode<T>(const SaeParams<T>&, const Tensor<T>&);                                      \
  template double sae_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);                    \
  template Var<T> sae_objective<T>(Tape<T>&, Var<T>, Var<T>, Var<T>, Var<T>, const Tensor<T>&, T);              \
  template SaeTrainResult<T> train_sae<T>(const ActivationStore&, const SaeConfig&, std::uint64_t,              \
                                          const SaeStepCallback&);                                              \
  template Fidelity fidelity_metrics<T>(const SaeParams<T>&, const ActivationStore&, double);                   \
  template void save_sae<T>(const std::filesystem::path&, const SaeParams<T>&, const SaeConfig&,                \
                            const nlohmann::json&);                                                             \
  template LoadedSae<T> load_sae<T>(const std::filesystem::path&);

TSPROBE_INSTANTIATE_SAE(float)
TSPROBE_INSTANTIATE_SAE(double)

}  // namespace tsprobe
