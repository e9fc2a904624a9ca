#include "tsprobe/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace tsprobe {

namespace kernel {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ni = static_cast<Eigen::Index>(n);
  Eigen::Map<Mat> out(c, mi, ni);
  if (!accumulate) out.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  const CMap A(a, trans_a ? ki : mi, trans_a ? mi : ki);
  const CMap B(b, trans_b ? ni : ki, trans_b ? ki : ni);
  if (!trans_a && !trans_b) {
    out.noalias() += A * B;
  } else if (!trans_a && trans_b) {
    out.noalias() += A * B.transpose();
  } else if (trans_a && !trans_b) {
    out.noalias() += A.transpose() * B;
  } else {
    out.noalias() += A.transpose() * B.transpose();
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace kernel

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernel::gemm(av.data().data(), bv.data().data(), out.data().data(), m, k, n, false, false, false);
  return a.tape->push(std::move(out), {a, b}, [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
    const T* dc = t.out_grad(self).data();
    if (T* da = t.accum(ai)) kernel::gemm(dc, t.value(bi).data().data(), da, m, n, k, false, true, true);
    if (T* db = t.accum(bi)) kernel::gemm(t.value(ai).data().data(), dc, db, k, m, n, true, false, true);
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = bias.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.shape().back() != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                         shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  }
  const std::size_t k = wv.dim(0), n = wv.dim(1), m = xv.size() / k;
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  T* o = out.data().data();
  const T* bp = bv.data().data();
  for (std::size_t r = 0; r < m; ++r) std::copy(bp, bp + n, o + r * n);
  kernel::gemm(xv.data().data(), wv.data().data(), o, m, k, n, false, false, true);
  return x.tape->push(std::move(out), {x, w, bias},
                      [xi = x.id, wi = w.id, bi = bias.id, m, k, n](Tape<T>& t, std::size_t self) {
                        const T* dy = t.out_grad(self).data();
                        if (T* dx = t.accum(xi)) kernel::gemm(dy, t.value(wi).data().data(), dx, m, n, k, false, true, true);
                        if (T* dw = t.accum(wi)) kernel::gemm(t.value(xi).data().data(), dy, dw, k, m, n, true, false, true);
                        if (T* db = t.accum(bi)) {
                          for (std::size_t r = 0; r < m; ++r) {
                            const T* row = dy + r * n;
                            for (std::size_t j = 0; j < n; ++j) db[j] += row[j];
                          }
                        }
                      });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  if (xv.rank() < 1 || wv.rank() != 2 || xv.shape().back() != wv.dim(0)) {
    throw DimensionError("linear: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                         shape_str(wv.shape()));
  }
  const std::size_t k = wv.dim(0), n = wv.dim(1), m = xv.size() / k;
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  kernel::gemm(xv.data().data(), wv.data().data(), out.data().data(), m, k, n, false, false, false);
  return x.tape->push(std::move(out), {x, w}, [xi = x.id, wi = w.id, m, k, n](Tape<T>& t, std::size_t self) {
    const T* dy = t.out_grad(self).data();
    if (T* dx = t.accum(xi)) kernel::gemm(dy, t.value(wi).data().data(), dx, m, n, k, false, true, true);
    if (T* dw = t.accum(wi)) kernel::gemm(t.value(xi).data().data(), dy, dw, k, m, n, true, false, true);
  });
}

template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool ok = av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                  av.dim(2) == (transpose_b ? bv.dim(2) : bv.dim(1));
  if (!ok) {
    throw DimensionError("bmm: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  Tensor<T> out({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    kernel::gemm(av.data().data() + i * m * k, bv.data().data() + i * k * n, out.data().data() + i * m * n, m, k,
                 n, false, transpose_b, false);
  }
  return a.tape->push(std::move(out), {a, b},
                      [ai = a.id, bi = b.id, batch, m, k, n, transpose_b](Tape<T>& t, std::size_t self) {
                        const T* dc = t.out_grad(self).data();
                        const T* ap = t.value(ai).data().data();
                        const T* bp = t.value(bi).data().data();
                        T* da = t.accum(ai);
                        T* db = t.accum(bi);
                        for (std::size_t i = 0; i < batch; ++i) {
                          const T* dci = dc + i * m * n;
                          if (da) {
                            // dA = dC . B^T  (or dC . B when B was transposed)
                            kernel::gemm(dci, bp + i * k * n, da + i * m * k, m, n, k, false, !transpose_b, true);
                          }
                          if (db) {
                            if (transpose_b) {
                              // B is [n x k]: dB = dC^T . A
                              kernel::gemm(dci, ap + i * m * k, db + i * k * n, n, m, k, true, false, true);
                            } else {
                              kernel::gemm(ap + i * m * k, dci, db + i * k * n, k, m, n, true, false, true);
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape("add", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return a.tape->push(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (T* da = t.accum(ai)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (T* db = t.accum(bi)) for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor<T> out = a.value();
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] -= bd[i];
  return a.tape->push(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (T* da = t.accum(ai)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (T* db = t.accum(bi)) for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape->push(std::move(out), {a}, [ai = a.id, factor](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (T* da = t.accum(ai)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = kernel::gelu(v);
  return x.tape->push(std::move(out), {x}, [xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    const auto xv = t.value(xi).data();
    if (T* dx = t.accum(xi)) for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * kernel::gelu_grad(xv[i]);
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return x.tape->push(std::move(out), {x}, [xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    const auto xv = t.value(xi).data();
    if (T* dx = t.accum(xi)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T(0)) dx[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps) {
  const auto& xv = x.value();
  const auto& gv = gain.value();
  if (xv.rank() < 1 || gv.rank() != 1 || xv.shape().back() != gv.size()) {
    throw DimensionError("rmsnorm: last dim of " + shape_str(xv.shape()) + " vs gain " + shape_str(gv.shape()));
  }
  const std::size_t d = gv.size(), rows = xv.size() / d;
  Tensor<T> out(xv.shape());
  std::vector<T> inv(rows);
  const T* xp = xv.data().data();
  const T* gp = gv.data().data();
  T* op = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += row[j] * row[j];
    const T ir = T(1) / std::sqrt(ss / T(d) + eps);
    inv[r] = ir;
    for (std::size_t j = 0; j < d; ++j) op[r * d + j] = gp[j] * row[j] * ir;
  }
  return x.tape->push(std::move(out), {x, gain},
                      [xi = x.id, gi = gain.id, d, rows, inv = std::move(inv)](Tape<T>& t, std::size_t self) {
                        const T* dy = t.out_grad(self).data();
                        const T* xp = t.value(xi).data().data();
                        const T* gp = t.value(gi).data().data();
                        T* dx = t.accum(xi);
                        T* dg = t.accum(gi);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const T* row = xp + r * d;
                          const T* dyr = dy + r * d;
                          const T ir = inv[r];
                          if (dg) for (std::size_t j = 0; j < d; ++j) dg[j] += dyr[j] * row[j] * ir;
                          if (dx) {
                            T dot = 0;
                            for (std::size_t j = 0; j < d; ++j) dot += gp[j] * dyr[j] * row[j];
                            const T c = ir * ir * ir * dot / T(d);
                            for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += ir * gp[j] * dyr[j] - c * row[j];
                          }
                        }
                      });
}

namespace {

// cos/sin tables [positions x d_head/2].
template <typename T>
void rope_tables(std::size_t positions, std::size_t d_head, T base, std::vector<T>& cs, std::vector<T>& sn) {
  const std::size_t half = d_head / 2;
  cs.resize(positions * half);
  sn.resize(positions * half);
  for (std::size_t i = 0; i < half; ++i) {
    const double theta = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
    for (std::size_t p = 0; p < positions; ++p) {
      const double angle = static_cast<double>(p) * theta;
      cs[p * half + i] = static_cast<T>(std::cos(angle));
      sn[p * half + i] = static_cast<T>(std::sin(angle));
    }
  }
}

}  // namespace

template <typename T>
Var<T> apply_rope(Var<T> x, T base) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw DimensionError("apply_rope: need [..., positions, d_head], got " + shape_str(xv.shape()));
  const std::size_t d_head = xv.shape().back();
  const std::size_t positions = xv.shape()[xv.rank() - 2];
  if (d_head % 2 != 0) throw ConfigError("apply_rope: d_head must be even, got " + std::to_string(d_head));
  const std::size_t half = d_head / 2;
  const std::size_t groups = xv.size() / (positions * d_head);
  std::vector<T> cs, sn;
  rope_tables(positions, d_head, base, cs, sn);

  auto rotate = [=](const T* in, T* out, const std::vector<T>& c, const std::vector<T>& s, T sign) {
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t p = 0; p < positions; ++p) {
        const std::size_t off = (g * positions + p) * d_head;
        for (std::size_t i = 0; i < half; ++i) {
          const T co = c[p * half + i];
          const T si = sign * s[p * half + i];
          const T x0 = in[off + 2 * i];
          const T x1 = in[off + 2 * i + 1];
          out[off + 2 * i] += x0 * co - x1 * si;
          out[off + 2 * i + 1] += x0 * si + x1 * co;
        }
      }
    }
  };

  Tensor<T> out(xv.shape());
  rotate(xv.data().data(), out.data().data(), cs, sn, T(1));
  return x.tape->push(std::move(out), {x},
                      [xi = x.id, rotate, cs = std::move(cs), sn = std::move(sn)](Tape<T>& t, std::size_t self) {
                        if (T* dx = t.accum(xi)) rotate(t.out_grad(self).data(), dx, cs, sn, T(-1));
                      });
}

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t d = xv.shape().back(), rows = xv.size() / d;
  Tensor<T> out(xv.shape());
  const T* xp = xv.data().data();
  T* op = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xp + r * d;
    T* o = op + r * d;
    const T mx = *std::max_element(in, in + d);
    T total = 0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
  }
  return x.tape->push(std::move(out), {x}, [xi = x.id, d, rows](Tape<T>& t, std::size_t self) {
    T* dx = t.accum(xi);
    if (!dx) return;
    const T* dy = t.out_grad(self).data();
    const T* y = t.value(self).data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += dy[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += y[r * d + j] * (dy[r * d + j] - dot);
    }
  });
}

namespace {

// Copies between [N x P x h x dh] (merged) and [N x h x P x dh] (split) layouts.
template <typename T>
void head_permute(const T* in, T* out, std::size_t n, std::size_t p, std::size_t h, std::size_t dh, bool to_split,
                  bool accumulate) {
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t pos = 0; pos < p; ++pos) {
      for (std::size_t hh = 0; hh < h; ++hh) {
        const std::size_t merged = ((a * p + pos) * h + hh) * dh;
        const std::size_t split = ((a * h + hh) * p + pos) * dh;
        const T* src = in + (to_split ? merged : split);
        T* dst = out + (to_split ? split : merged);
        for (std::size_t j = 0; j < dh; ++j) {
          if (accumulate) {
            dst[j] += src[j];
          } else {
            dst[j] = src[j];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t n_heads) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || n_heads == 0 || xv.dim(2) % n_heads != 0) {
    throw DimensionError("split_heads: " + shape_str(xv.shape()) + " into " + std::to_string(n_heads) + " heads");
  }
  const std::size_t n = xv.dim(0), p = xv.dim(1), dh = xv.dim(2) / n_heads;
  Tensor<T> out({n * n_heads, p, dh});
  head_permute(xv.data().data(), out.data().data(), n, p, n_heads, dh, true, false);
  return x.tape->push(std::move(out), {x}, [xi = x.id, n, p, n_heads, dh](Tape<T>& t, std::size_t self) {
    if (T* dx = t.accum(xi)) head_permute(t.out_grad(self).data(), dx, n, p, n_heads, dh, false, true);
  });
}

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t n_heads) {
  const auto& xv = x.value();
  if (xv.rank() != 3 || n_heads == 0 || xv.dim(0) % n_heads != 0) {
    throw DimensionError("merge_heads: " + shape_str(xv.shape()) + " from " + std::to_string(n_heads) + " heads");
  }
  const std::size_t n = xv.dim(0) / n_heads, p = xv.dim(1), dh = xv.dim(2);
  Tensor<T> out({n, p, n_heads * dh});
  head_permute(xv.data().data(), out.data().data(), n, p, n_heads, dh, false, false);
  return x.tape->push(std::move(out), {x}, [xi = x.id, n, p, n_heads, dh](Tape<T>& t, std::size_t self) {
    if (T* dx = t.accum(xi)) head_permute(t.out_grad(self).data(), dx, n, p, n_heads, dh, true, true);
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->push(std::move(out), {x}, [xi = x.id](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (T* dx = t.accum(xi)) for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Var<T> dropout(Var<T> x, T p, std::mt19937_64& rng) {
  if (p <= T(0)) return x;
  if (p >= T(1)) throw ConfigError("dropout: rate must be < 1");
  const T keep_scale = T(1) / (T(1) - p);
  // Compare raw 64-bit draws against a threshold: drop with probability p.
  const auto threshold = static_cast<std::uint64_t>(static_cast<long double>(p) * 18446744073709551616.0L);
  std::vector<T> mask(x.value().size());
  for (auto& m : mask) m = rng() >= threshold ? keep_scale : T(0);
  Tensor<T> out = x.value();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= mask[i];
  return x.tape->push(std::move(out), {x}, [xi = x.id, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const auto& g = t.out_grad(self);
    if (T* dx = t.accum(xi)) for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
  });
}

template <typename T>
Var<T> affine_rows(Var<T> x, std::vector<T> mul, std::vector<T> add) {
  const auto& xv = x.value();
  const std::size_t rows = mul.size();
  if (rows == 0 || add.size() != rows || xv.size() % rows != 0) {
    throw DimensionError("affine_rows: " + std::to_string(rows) + " row coefficients for " + shape_str(xv.shape()));
  }
  const std::size_t width = xv.size() / rows;
  Tensor<T> out = xv;
  T* op = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < width; ++j) op[r * width + j] = op[r * width + j] * mul[r] + add[r];
  }
  return x.tape->push(std::move(out), {x}, [xi = x.id, width, mul = std::move(mul)](Tape<T>& t, std::size_t self) {
    const T* g = t.out_grad(self).data();
    if (T* dx = t.accum(xi)) {
      for (std::size_t r = 0; r < mul.size(); ++r) {
        for (std::size_t j = 0; j < width; ++j) dx[r * width + j] += g[r * width + j] * mul[r];
      }
    }
  });
}

template <typename T>
Var<T> substitute(Var<T> x, Tensor<T> replacement) {
  if (replacement.shape() != x.shape()) {
    throw DimensionError("substitute: replacement " + shape_str(replacement.shape()) + " does not match live " +
                         shape_str(x.shape()));
  }
  return x.tape->constant(std::move(replacement));
}

template <typename T>
Var<T> sum(Var<T> x) {
  T total = 0;
  for (T v : x.value().data()) total += v;
  return x.tape->push(Tensor<T>({1}, total), {x}, [xi = x.id](Tape<T>& t, std::size_t self) {
    const T g = t.out_grad(self)[0];
    if (T* dx = t.accum(xi)) {
      const std::size_t n = t.value(xi).size();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    }
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> sum_squares(Var<T> x) {
  T total = 0;
  for (T v : x.value().data()) total += v * v;
  return x.tape->push(Tensor<T>({1}, total), {x}, [xi = x.id](Tape<T>& t, std::size_t self) {
    const T g = t.out_grad(self)[0];
    const auto xv = t.value(xi).data();
    if (T* dx = t.accum(xi)) for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += T(2) * g * xv[i];
  });
}

template <typename T>
Var<T> abs_sum(Var<T> x) {
  T total = 0;
  for (T v : x.value().data()) total += std::abs(v);
  return x.tape->push(Tensor<T>({1}, total), {x}, [xi = x.id](Tape<T>& t, std::size_t self) {
    const T g = t.out_grad(self)[0];
    const auto xv = t.value(xi).data();
    if (T* dx = t.accum(xi)) {
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] > T(0)) {
          dx[i] += g;
        } else if (xv[i] < T(0)) {
          dx[i] -= g;
        }
      }
    }
  });
}

template <typename T>
Var<T> sq_err_sum(Var<T> a, const Tensor<T>& target) {
  require_same_shape("sq_err_sum", a.value(), target);
  const auto av = a.value().data();
  const auto tv = target.data();
  std::vector<T> diff(av.size());
  T total = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    diff[i] = av[i] - tv[i];
    total += diff[i] * diff[i];
  }
  return a.tape->push(Tensor<T>({1}, total), {a}, [ai = a.id, diff = std::move(diff)](Tape<T>& t, std::size_t self) {
    const T g = t.out_grad(self)[0];
    if (T* da = t.accum(ai)) for (std::size_t i = 0; i < diff.size(); ++i) da[i] += T(2) * g * diff[i];
  });
}

template <typename T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target) {
  return scale(sq_err_sum(pred, target), T(1) / static_cast<T>(target.size()));
}

#define TSPROBE_INSTANTIATE_OPS(T)                                                                       \
  template Var<T> matmul(Var<T>, Var<T>);                                                                \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                        \
  template Var<T> linear(Var<T>, Var<T>);                                                                \
  template Var<T> bmm(Var<T>, Var<T>, bool);                                                             \
  template Var<T> add(Var<T>, Var<T>);                                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                                   \
  template Var<T> scale(Var<T>, T);                                                                      \
  template Var<T> gelu(Var<T>);                                                                          \
  template Var<T> relu(Var<T>);                                                                          \
  template Var<T> rmsnorm(Var<T>, Var<T>, T);                                                            \
  template Var<T> apply_rope(Var<T>, T);                                                                 \
  template Var<T> softmax_lastdim(Var<T>);                                                               \
  template Var<T> split_heads(Var<T>, std::size_t);                                                      \
  template Var<T> merge_heads(Var<T>, std::size_t);                                                      \
  template Var<T> reshape(Var<T>, Shape);                                                                \
  template Var<T> dropout(Var<T>, T, std::mt19937_64&);                                                  \
  template Var<T> affine_rows(Var<T>, std::vector<T>, std::vector<T>);                                   \
  template Var<T> substitute(Var<T>, Tensor<T>);                                                         \
  template Var<T> sum(Var<T>);                                                                           \
  template Var<T> mean(Var<T>);                                                                          \
  template Var<T> sum_squares(Var<T>);                                                                   \
  template Var<T> abs_sum(Var<T>);                                                                       \
  template Var<T> sq_err_sum(Var<T>, const Tensor<T>&);                                                  \
  template Var<T> mse_loss(Var<T>, const Tensor<T>&);                                                    \
  template void kernel::gemm(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool, bool, bool); \
  template T kernel::gelu(T);                                                                            \
  template T kernel::gelu_grad(T);

TSPROBE_INSTANTIATE_OPS(float)
TSPROBE_INSTANTIATE_OPS(double)

}  // namespace tsprobe
