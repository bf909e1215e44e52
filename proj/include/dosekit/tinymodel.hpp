#pragma once

// Small 3D convolutional encoder-decoder with skip connections and hand-written reverse mode.
//
// Encoder level l: conv3 -> ReLU (-> dropout) with base*2^l filters, then 2x max-pool.
// Bottleneck: conv3 -> ReLU with base*2^levels filters.
// Decoder level l: trilinear 2x upsample, concat with encoder level l, conv3 -> ReLU.
// Head: 1x1x1 conv to one channel, multiplied by output_scale.
// Tensors are [channel][z][y][x], x fastest, matching Grid3 storage.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dosekit/error.hpp"
#include "dosekit/losses.hpp"
#include "dosekit/metrics.hpp"
#include "dosekit/mimic.hpp"
#include "dosekit/mvol.hpp"
#include "dosekit/parallel.hpp"
#include "dosekit/preprocess.hpp"
#include "dosekit/rng.hpp"
#include "dosekit/volume.hpp"

namespace dosekit {

struct ModelConfig {
  int in_channels = 7;  // CT + 5 OARs + PTV
  int levels = 2;
  int base_filters = 8;
  Index3 dims{32, 32, 32};
  double dropout = 0.0;
  double output_scale = 60.0;  // Gy per unit of head output
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels < 1 || levels < 0 || base_filters < 1) throw Error(ErrorKind::Config, "invalid model shape");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::Config, "dropout must lie in [0, 1)");
    if (!(output_scale > 0.0)) throw Error(ErrorKind::Config, "output_scale must be positive");
    const int div = 1 << levels;
    for (int a = 0; a < 3; ++a)
      if (dims[a] < div || dims[a] % div != 0)
        throw Error(ErrorKind::Config, "model dims must be divisible by 2^levels = " + std::to_string(div));
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& m) {
  return {{"in_channels", m.in_channels}, {"levels", m.levels},   {"base_filters", m.base_filters},
          {"dims", m.dims},               {"dropout", m.dropout}, {"output_scale", m.output_scale},
          {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  try {
    m.in_channels = j.value("in_channels", m.in_channels);
    m.levels = j.value("levels", m.levels);
    m.base_filters = j.value("base_filters", m.base_filters);
    if (j.contains("dims")) m.dims = j.at("dims").get<Index3>();
    m.dropout = j.value("dropout", m.dropout);
    m.output_scale = j.value("output_scale", m.output_scale);
    m.seed = j.value("seed", m.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("malformed model config: ") + e.what());
  }
  m.validate();
  return m;
}

template <typename T>
struct Tensor {
  int channels = 0;
  Index3 dims{0, 0, 0};  // nx, ny, nz
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c, Index3 d) : channels(c), dims(d), data(static_cast<std::size_t>(c) * spatial(d), T(0)) {}

  static std::size_t spatial(Index3 d) {
    return static_cast<std::size_t>(d[0]) * static_cast<std::size_t>(d[1]) * static_cast<std::size_t>(d[2]);
  }
  std::size_t plane() const { return spatial(dims); }
  T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * plane(); }
  const T* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * plane(); }
};

namespace nn {

struct ConvLayer {
  int cin = 0, cout = 0, k = 3;
  std::size_t w_off = 0, b_off = 0;

  std::size_t weight_count() const { return static_cast<std::size_t>(cout) * cin * k * k * k; }
};

// o[x] += w0*i[x-1] + w1*i[x] + w2*i[x+1] with zero padding, n >= 2.
template <typename T>
inline void row_taps3(T* __restrict o, const T* __restrict i, T w0, T w1, T w2, int n) {
  o[0] += w1 * i[0] + w2 * i[1];
#pragma omp simd
  for (int x = 1; x < n - 1; ++x) o[x] += w0 * i[x - 1] + w1 * i[x] + w2 * i[x + 1];
  o[n - 1] += w0 * i[n - 2] + w1 * i[n - 1];
}

// d[t] += sum_x g[x] * i[x + t - 1] for t = 0, 1, 2, n >= 2.
template <typename T>
inline void row_corr3(const T* __restrict g, const T* __restrict i, T* d, int n) {
  T s0 = 0, s1 = 0, s2 = 0;
#pragma omp simd reduction(+ : s0, s1, s2)
  for (int x = 1; x < n - 1; ++x) {
    s0 += g[x] * i[x - 1];
    s1 += g[x] * i[x];
    s2 += g[x] * i[x + 1];
  }
  s1 += g[0] * i[0] + g[n - 1] * i[n - 1];
  s2 += g[0] * i[1];
  s0 += g[n - 1] * i[n - 2];
  d[0] += s0;
  d[1] += s1;
  d[2] += s2;
}

// Generic odd-k row kernels, used for 1x1x1 convs and rows shorter than 2.
template <typename T>
inline void row_taps(T* o, const T* i, const T* w, int k, int n) {
  const int r = k / 2;
  for (int t = 0; t < k; ++t) {
    const int dx = t - r;
    for (int x = std::max(0, -dx); x < std::min(n, n - dx); ++x) o[x] += w[t] * i[x + dx];
  }
}

template <typename T>
inline void row_corr(const T* g, const T* i, T* d, int k, int n) {
  const int r = k / 2;
  for (int t = 0; t < k; ++t) {
    const int dx = t - r;
    T s = 0;
    for (int x = std::max(0, -dx); x < std::min(n, n - dx); ++x) s += g[x] * i[x + dx];
    d[t] += s;
  }
}

// Calls fn(out_row_offset, in_row_offset, kz, ky) for every valid (z, y) row pair.
template <typename Fn>
inline void for_each_row_pair(Index3 dims, int k, Fn&& fn) {
  const int ny = dims[1], nz = dims[2], r = k / 2;
  for (int kz = 0; kz < k; ++kz)
    for (int ky = 0; ky < k; ++ky) {
      const int dz = kz - r, dy = ky - r;
      for (int z = std::max(0, -dz); z < std::min(nz, nz - dz); ++z)
        for (int y = std::max(0, -dy); y < std::min(ny, ny - dy); ++y)
          fn((static_cast<std::size_t>(z) * ny + y) * dims[0], (static_cast<std::size_t>(z + dz) * ny + (y + dy)) * dims[0],
             kz, ky);
    }
}

// out = bias + conv(in, w), zero padding, stride 1, odd kernel k.
template <typename T>
void conv_forward(const Tensor<T>& in, Tensor<T>& out, const T* params, const ConvLayer& L) {
  const int nx = in.dims[0], k = L.k;
  const bool fast = k == 3 && nx >= 2;
  const std::size_t kk = static_cast<std::size_t>(k * k * k);
  out = Tensor<T>(L.cout, in.dims);
  parallel_for(static_cast<std::size_t>(L.cout), [&](std::size_t co) {
    T* o = out.channel(static_cast<int>(co));
    std::fill(o, o + out.plane(), params[L.b_off + co]);
    for (int ci = 0; ci < L.cin; ++ci) {
      const T* src = in.channel(ci);
      const T* w = params + L.w_off + (co * L.cin + ci) * kk;
      for_each_row_pair(in.dims, k, [&](std::size_t orow, std::size_t irow, int kz, int ky) {
        const T* wr = w + (kz * k + ky) * k;
        if (fast) row_taps3(o + orow, src + irow, wr[0], wr[1], wr[2], nx);
        else row_taps(o + orow, src + irow, wr, k, nx);
      });
    }
  });
}

// Accumulates weight/bias gradients into `gparams` and writes the input gradient to `gin`.
template <typename T>
void conv_backward(const Tensor<T>& in, const Tensor<T>& gout, const T* params, const ConvLayer& L, T* gparams,
                   Tensor<T>* gin) {
  const int nx = in.dims[0], k = L.k;
  const bool fast = k == 3 && nx >= 2;
  const std::size_t kk = static_cast<std::size_t>(k * k * k);
  parallel_for(static_cast<std::size_t>(L.cout), [&](std::size_t co) {
    const T* g = gout.channel(static_cast<int>(co));
    T bsum = 0;
    for (std::size_t i = 0; i < gout.plane(); ++i) bsum += g[i];
    gparams[L.b_off + co] += bsum;
    for (int ci = 0; ci < L.cin; ++ci) {
      const T* src = in.channel(ci);
      T* gw = gparams + L.w_off + (co * L.cin + ci) * kk;
      for_each_row_pair(in.dims, k, [&](std::size_t grow, std::size_t irow, int kz, int ky) {
        T* d = gw + (kz * k + ky) * k;
        if (fast) row_corr3(g + grow, src + irow, d, nx);
        else row_corr(g + grow, src + irow, d, k, nx);
      });
    }
  });
  if (!gin) return;
  *gin = Tensor<T>(L.cin, in.dims);
  parallel_for(static_cast<std::size_t>(L.cin), [&](std::size_t ci) {
    T* gi = gin->channel(static_cast<int>(ci));
    std::vector<T> flipped(static_cast<std::size_t>(k));
    for (int co = 0; co < L.cout; ++co) {
      const T* g = gout.channel(co);
      const T* w = params + L.w_off + (static_cast<std::size_t>(co) * L.cin + ci) * kk;
      // gi[row_in][x] += w[t] * g[row_out][x - (t - r)]: the x taps are mirrored.
      for_each_row_pair(in.dims, k, [&](std::size_t grow, std::size_t irow, int kz, int ky) {
        const T* wr = w + (kz * k + ky) * k;
        if (fast) {
          row_taps3(gi + irow, g + grow, wr[2], wr[1], wr[0], nx);
        } else {
          for (int t = 0; t < k; ++t) flipped[static_cast<std::size_t>(t)] = wr[k - 1 - t];
          row_taps(gi + irow, g + grow, flipped.data(), k, nx);
        }
      });
    }
  });
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (T& v : t.data) v = v > T(0) ? v : T(0);
}

// Gradient through ReLU given its output `act`.
template <typename T>
void relu_backward(const Tensor<T>& act, Tensor<T>& g) {
  for (std::size_t i = 0; i < g.data.size(); ++i)
    if (!(act.data[i] > T(0))) g.data[i] = T(0);
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& in, std::vector<std::uint32_t>& argmax) {
  const Index3 od{in.dims[0] / 2, in.dims[1] / 2, in.dims[2] / 2};
  Tensor<T> out(in.channels, od);
  argmax.assign(out.data.size(), 0);
  const int nx = in.dims[0], ny = in.dims[1];
  std::size_t o = 0;
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.channel(c);
    for (int z = 0; z < od[2]; ++z)
      for (int y = 0; y < od[1]; ++y)
        for (int x = 0; x < od[0]; ++x, ++o) {
          std::size_t best = (static_cast<std::size_t>(2 * z) * ny + 2 * y) * nx + 2 * x;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i = (static_cast<std::size_t>(2 * z + dz) * ny + (2 * y + dy)) * nx + (2 * x + dx);
                if (src[i] > src[best]) best = i;
              }
          out.data[o] = src[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& gout, const std::vector<std::uint32_t>& argmax, Index3 in_dims) {
  Tensor<T> gin(gout.channels, in_dims);
  const std::size_t plane = gout.plane();
  for (std::size_t o = 0; o < gout.data.size(); ++o) {
    const std::size_t c = o / plane;
    gin.channel(static_cast<int>(c))[argmax[o]] += gout.data[o];
  }
  return gin;
}

// Linear 2x upsampling along one axis with voxel-centre alignment: output i samples source
// coordinate i/2 - 1/4, clamped at the ends.
template <typename T>
Tensor<T> upsample_axis(const Tensor<T>& in, int axis, bool adjoint) {
  Index3 od = in.dims;
  if (adjoint) od[axis] /= 2;
  else od[axis] *= 2;
  Tensor<T> out(in.channels, od);
  const Index3& fine = adjoint ? in.dims : od;  // the 2n side
  const int n = fine[axis] / 2;
  const std::size_t stride_in = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(in.dims[0])
                                                           : static_cast<std::size_t>(in.dims[0]) * in.dims[1]);
  const std::size_t stride_out = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(od[0])
                                                            : static_cast<std::size_t>(od[0]) * od[1]);
  // Enumerate all lines along `axis`.
  Index3 other = od;
  other[axis] = 1;
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.channel(c);
    T* dst = out.channel(c);
    for (int a = 0; a < other[2]; ++a)
      for (int b = 0; b < other[1]; ++b)
        for (int e = 0; e < other[0]; ++e) {
          const std::size_t base_in = (static_cast<std::size_t>(a) * in.dims[1] + b) * in.dims[0] + e;
          const std::size_t base_out = (static_cast<std::size_t>(a) * od[1] + b) * od[0] + e;
          for (int i = 0; i < 2 * n; ++i) {
            const int kk = i / 2;
            int lo, hi;
            T wlo, whi;
            if (i % 2 == 0) {
              lo = std::max(kk - 1, 0), hi = kk, wlo = T(0.25), whi = T(0.75);
            } else {
              lo = kk, hi = std::min(kk + 1, n - 1), wlo = T(0.75), whi = T(0.25);
            }
            if (!adjoint) {
              dst[base_out + i * stride_out] = wlo * src[base_in + lo * stride_in] + whi * src[base_in + hi * stride_in];
            } else {
              const T g = src[base_in + i * stride_in];
              dst[base_out + lo * stride_out] += wlo * g;
              dst[base_out + hi * stride_out] += whi * g;
            }
          }
        }
  }
  return out;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& in) {
  return upsample_axis(upsample_axis(upsample_axis(in, 0, false), 1, false), 2, false);
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& g) {
  return upsample_axis(upsample_axis(upsample_axis(g, 2, true), 1, true), 0, true);
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out(a.channels + b.channels, a.dims);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

}  // namespace nn

/// Activations kept by forward() for backward().
template <typename T>
struct ForwardCache {
  bool valid = false;
  Tensor<T> input;
  std::vector<Tensor<T>> enc_in, enc_act;  // per level, plus the bottleneck at index `levels`
  std::vector<std::vector<T>> dropout_mask;
  std::vector<std::vector<std::uint32_t>> pool_idx;
  std::vector<Tensor<T>> dec_in, dec_act;  // indexed by level
  Tensor<T> output;                        // one channel, Gy
};

template <typename T>
class TinyUNet {
 public:
  explicit TinyUNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::size_t off = 0;
    auto add = [&](int cin, int cout, int k) {
      nn::ConvLayer L{cin, cout, k, off, 0};
      off += L.weight_count();
      L.b_off = off;
      off += static_cast<std::size_t>(cout);
      return L;
    };
    const int F = cfg_.base_filters;
    int cin = cfg_.in_channels;
    for (int l = 0; l <= cfg_.levels; ++l) {
      enc_.push_back(add(cin, F << l, 3));
      cin = F << l;
    }
    dec_.resize(static_cast<std::size_t>(cfg_.levels));
    for (int l = cfg_.levels - 1; l >= 0; --l) dec_[static_cast<std::size_t>(l)] = add((F << (l + 1)) + (F << l), F << l, 3);
    head_ = add(F, 1, 1);
    params_.assign(off, T(0));
    initialize(cfg_.seed);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  /// He-normal weights, zero biases.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    auto init = [&](const nn::ConvLayer& L) {
      const double sd = std::sqrt(2.0 / (L.cin * L.k * L.k * L.k));
      for (std::size_t i = 0; i < L.weight_count(); ++i) params_[L.w_off + i] = static_cast<T>(rng.normal(0.0, sd));
      for (int c = 0; c < L.cout; ++c) params_[L.b_off + static_cast<std::size_t>(c)] = T(0);
    };
    for (const auto& L : enc_) init(L);
    for (int l = cfg_.levels - 1; l >= 0; --l) init(dec_[static_cast<std::size_t>(l)]);
    init(head_);
  }

  /// `dropout_rng` enables dropout (training mode); nullptr is evaluation mode.
  Tensor<T> forward(const Tensor<T>& input, ForwardCache<T>& cache, Rng* dropout_rng = nullptr) const {
    if (input.channels != cfg_.in_channels || input.dims != cfg_.dims)
      throw Error(ErrorKind::Config, "input shape does not match the model configuration");
    const auto L = static_cast<std::size_t>(cfg_.levels);
    const T* p = params_.data();
    cache = ForwardCache<T>{};
    cache.input = input;
    cache.enc_in.resize(L + 1);
    cache.enc_act.resize(L + 1);
    cache.dropout_mask.resize(L + 1);
    cache.pool_idx.resize(L);
    cache.dec_in.resize(L);
    cache.dec_act.resize(L);

    for (std::size_t l = 0; l <= L; ++l) {
      cache.enc_in[l] = l == 0 ? input : nn::maxpool2(cache.enc_act[l - 1], cache.pool_idx[l - 1]);
      nn::conv_forward(cache.enc_in[l], cache.enc_act[l], p, enc_[l]);
      nn::relu_inplace(cache.enc_act[l]);
      if (dropout_rng && cfg_.dropout > 0.0) {
        auto& mask = cache.dropout_mask[l];
        mask.resize(cache.enc_act[l].data.size());
        const T keep = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
        for (std::size_t i = 0; i < mask.size(); ++i) {
          mask[i] = dropout_rng->uniform() < cfg_.dropout ? T(0) : keep;
          cache.enc_act[l].data[i] *= mask[i];
        }
      }
    }
    const Tensor<T>* below = &cache.enc_act[L];
    for (std::size_t l = L; l-- > 0;) {
      cache.dec_in[l] = nn::concat(nn::upsample2(*below), cache.enc_act[l]);
      nn::conv_forward(cache.dec_in[l], cache.dec_act[l], p, dec_[l]);
      nn::relu_inplace(cache.dec_act[l]);
      below = &cache.dec_act[l];
    }
    nn::conv_forward(*below, cache.output, p, head_);
    const T scale = static_cast<T>(cfg_.output_scale);
    for (T& v : cache.output.data) v *= scale;
    cache.valid = true;
    return cache.output;
  }

  Tensor<T> forward(const Tensor<T>& input) const {
    ForwardCache<T> cache;
    return forward(input, cache);
  }

  /// Parameter gradient for upstream gradient `grad_out` (dL/d output, one channel).
  std::vector<T> backward(const ForwardCache<T>& cache, const Tensor<T>& grad_out) const {
    if (!cache.valid) throw Error(ErrorKind::Config, "backward called without a forward cache");
    if (grad_out.data.size() != cache.output.data.size())
      throw Error(ErrorKind::Config, "upstream gradient shape does not match the output");
    const auto L = static_cast<std::size_t>(cfg_.levels);
    const T* p = params_.data();
    std::vector<T> grads(params_.size(), T(0));

    Tensor<T> g = grad_out;
    const T scale = static_cast<T>(cfg_.output_scale);
    for (T& v : g.data) v *= scale;
    const Tensor<T>& top = L == 0 ? cache.enc_act[0] : cache.dec_act[0];
    Tensor<T> g_act;
    nn::conv_backward(top, g, p, head_, grads.data(), &g_act);

    // Decoder, level 0 first. g_act is the gradient w.r.t. dec_act[l] on entry and w.r.t.
    // the activation below it on exit.
    std::vector<Tensor<T>> g_enc(L + 1);
    for (std::size_t l = 0; l < L; ++l) {
      nn::relu_backward(cache.dec_act[l], g_act);
      Tensor<T> g_in;
      nn::conv_backward(cache.dec_in[l], g_act, p, dec_[l], grads.data(), &g_in);
      const int skip = cache.enc_act[l].channels;
      Tensor<T> g_up(cache.dec_in[l].channels - skip, g_in.dims);
      g_enc[l] = Tensor<T>(skip, g_in.dims);
      const auto split = static_cast<std::ptrdiff_t>(g_up.data.size());
      std::copy(g_in.data.begin(), g_in.data.begin() + split, g_up.data.begin());
      std::copy(g_in.data.begin() + split, g_in.data.end(), g_enc[l].data.begin());
      g_act = nn::upsample2_backward(g_up);
    }
    g_enc[L] = std::move(g_act);

    // Encoder, bottom first; each level passes its input gradient through the pool below.
    for (std::size_t l = L + 1; l-- > 0;) {
      Tensor<T>& g_e = g_enc[l];
      if (!cache.dropout_mask[l].empty())
        for (std::size_t i = 0; i < g_e.data.size(); ++i) g_e.data[i] *= cache.dropout_mask[l][i];
      nn::relu_backward(cache.enc_act[l], g_e);
      Tensor<T> g_in;
      nn::conv_backward(cache.enc_in[l], g_e, p, enc_[l], grads.data(), l > 0 ? &g_in : nullptr);
      if (l > 0) {
        const Tensor<T> g_pool = nn::maxpool2_backward(g_in, cache.pool_idx[l - 1], cache.enc_act[l - 1].dims);
        for (std::size_t i = 0; i < g_pool.data.size(); ++i) g_enc[l - 1].data[i] += g_pool.data[i];
      }
    }
    return grads;
  }

 private:
  ModelConfig cfg_;
  std::vector<nn::ConvLayer> enc_, dec_;
  nn::ConvLayer head_;
  std::vector<T> params_;
};

// ---------------------------------------------------------------------------
// data

/// Network input: clipped/rescaled CT, then the one-hot OAR channels, then the PTV channel.
template <typename T>
Tensor<T> make_input(const CaseBundle& c, const PreprocessConfig& pre = {}) {
  const Grid3 ct = clip_rescale_ct(c.ct, pre);
  const ChannelStack stack = one_hot_structures(c.structures);
  if (!(stack.geometry == ct.geometry)) throw Error(ErrorKind::InvalidGeometry, "masks differ from CT geometry");
  Tensor<T> t(1 + static_cast<int>(stack.channels.size()), ct.geometry.dims);
  for (std::size_t i = 0; i < ct.size(); ++i) t.data[i] = static_cast<T>(ct.values[i]);
  for (std::size_t ch = 0; ch < stack.channels.size(); ++ch) {
    T* dst = t.channel(static_cast<int>(ch) + 1);
    for (std::size_t i = 0; i < ct.size(); ++i) dst[i] = static_cast<T>(stack.channels[ch][i]);
  }
  return t;
}

template <typename T>
Grid3 tensor_to_grid(const Tensor<T>& t, const GridGeometry& geometry, bool clamp_negative) {
  if (t.channels != 1 || t.dims != geometry.dims) throw Error(ErrorKind::InvalidGeometry, "output shape mismatch");
  Grid3 g(geometry, Unit::Gy);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double v = static_cast<double>(t.data[i]);
    g.values[i] = clamp_negative && v < 0.0 ? 0.0 : v;
  }
  return g;
}

template <typename T>
Tensor<T> grid_to_tensor(const Grid3& g) {
  Tensor<T> t(1, g.geometry.dims);
  for (std::size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<T>(g.values[i]);
  return t;
}

/// A prepared case (geometry equal to the model dims) with its network input.
struct TrainSample {
  CaseBundle bundle;
  Tensor<float> input;
};

/// Brings a case to `dims` (crop window = whole volume) and builds the input tensor.
inline TrainSample make_sample(const CaseBundle& raw, Index3 dims, double prescription = 60.0) {
  TrainSample s;
  if (raw.ct.geometry.dims == dims && raw.dose.geometry == raw.ct.geometry) {
    s.bundle = raw;
    s.bundle.dose = normalize_ptv_mean(raw.dose, raw.ptv(), prescription).dose;
  } else {
    PreprocessConfig pre;
    pre.crop_size = raw.ct.geometry.dims;
    pre.net_dims = dims;
    pre.prescription = prescription;
    s.bundle = prepare_case(raw, pre);
  }
  s.input = make_input<float>(s.bundle);
  return s;
}

/// Model prediction in Gy; negative outputs are clamped to zero.
template <typename T>
Grid3 predict_dose(const TinyUNet<T>& model, const Tensor<T>& input, const GridGeometry& geometry) {
  return tensor_to_grid(model.forward(input), geometry, true);
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  LossConfig loss;
  OptimizerConfig opt;  // `iterations` is ignored; the schedule runs over epochs
  int epochs = 40;
  std::uint64_t seed = 7;  // case order and dropout

  void validate() const {
    loss.validate();
    opt.validate();
    if (epochs < 2 || epochs % 2 != 0) throw Error(ErrorKind::Config, "epochs must be even and >= 2");
  }
};

inline nlohmann::ordered_json to_json(const OptimizerConfig& o) {
  return {{"lr", o.lr},       {"beta1", o.beta1},           {"beta2", o.beta2},    {"eps", o.eps},
          {"iterations", o.iterations}, {"decay", o.decay}, {"project", o.project}};
}

inline OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  OptimizerConfig o;
  try {
    o.lr = j.value("lr", o.lr);
    o.beta1 = j.value("beta1", o.beta1);
    o.beta2 = j.value("beta2", o.beta2);
    o.eps = j.value("eps", o.eps);
    o.iterations = j.value("iterations", o.iterations);
    o.decay = j.value("decay", o.decay);
    o.project = j.value("project", o.project);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("malformed optimizer config: ") + e.what());
  }
  o.validate();
  return o;
}

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;                    // mean over the epoch's cases
  std::map<std::string, double> train_terms;  // mean unweighted term values
  double val_dose_score = 0.0;
  double val_dvh_score = 0.0;
  std::uint64_t param_hash = 0;  // FNV-1a of the parameter bytes after the epoch
};

inline nlohmann::ordered_json to_json(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["train_loss"] = e.train_loss;
  j["train_terms"] = e.train_terms;
  j["val_dose_score"] = e.val_dose_score;
  j["val_dvh_score"] = e.val_dvh_score;
  j["param_hash"] = e.param_hash;
  return j;
}

template <typename T>
std::uint64_t fnv1a(const std::vector<T>& v) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
  for (std::size_t i = 0; i < v.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

struct TrainResult {
  std::vector<float> final_params;
  std::vector<float> best_params;  // lowest validation DVH score
  int best_epoch = 0;
  double best_val_dvh = 0.0;
  std::vector<EpochLog> log;
};

struct HoldoutReport {
  std::vector<MetricsReport> cases;
  double mean_dose_score = 0.0;
  double mean_dvh_score = 0.0;
};

using Predictor = std::function<Grid3(const TrainSample&)>;

inline HoldoutReport evaluate_holdout(const Predictor& predict, const std::vector<TrainSample>& test,
                                      const ReportOptions& opt = {}) {
  if (test.empty()) throw Error(ErrorKind::Config, "empty test set");
  HoldoutReport r;
  for (const auto& s : test) {
    const Grid3 pred = predict(s);
    r.cases.push_back(evaluate_case(pred, s.bundle.dose, s.bundle.structures, s.bundle.case_id, opt));
    r.mean_dose_score += r.cases.back().dose_score;
    r.mean_dvh_score += r.cases.back().dvh_score;
  }
  r.mean_dose_score /= static_cast<double>(test.size());
  r.mean_dvh_score /= static_cast<double>(test.size());
  return r;
}

inline HoldoutReport evaluate_holdout(const TinyUNet<float>& model, const std::vector<TrainSample>& test,
                                      const ReportOptions& opt = {}) {
  return evaluate_holdout(
      [&](const TrainSample& s) { return predict_dose(model, s.input, s.bundle.dose.geometry); }, test, opt);
}

/// Batch-size-1 Adam training. The learning rate is constant for the first half of the
/// epochs and decays linearly to 0 over the second half. Moment terms clamp negative
/// network outputs to zero.
inline TrainResult train(TinyUNet<float>& model, const std::vector<TrainSample>& train_set,
                         const std::vector<TrainSample>& val_set, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error(ErrorKind::Config, "empty training set");
  LossConfig loss = cfg.loss;
  loss.moments.negative = NegativeDosePolicy::Clamp;
  OptimizerConfig opt = cfg.opt;
  opt.project = false;

  Rng rng(cfg.seed);
  AdamState state(model.param_count());
  std::vector<std::size_t> order(train_set.size());
  std::vector<double> grad64(model.param_count());
  TrainResult result;
  result.best_val_dvh = std::numeric_limits<double>::infinity();
  ReportOptions quick;
  quick.include_curves = false;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    log.lr = scheduled_lr(opt.lr, epoch, cfg.epochs, opt.decay);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t idx : order) {
      const TrainSample& s = train_set[idx];
      ForwardCache<float> cache;
      model.forward(s.input, cache, &rng);
      const Grid3 pred = tensor_to_grid(cache.output, s.bundle.dose.geometry, false);
      const LossValueGrad lg = total_loss_grad(pred, s.bundle.dose, s.bundle.structures, loss);
      if (!std::isfinite(lg.value))
        throw Error(ErrorKind::Numerical, "non-finite loss at epoch " + std::to_string(epoch) + ", case " +
                                              s.bundle.case_id);
      const std::vector<float> g = model.backward(cache, grid_to_tensor<float>(lg.grad));
      for (std::size_t i = 0; i < g.size(); ++i) grad64[i] = static_cast<double>(g[i]);
      try {
        adam_step(model.params(), grad64, state, log.lr, opt);
      } catch (const Error& e) {
        throw Error(e.kind(), std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", case " +
                                  s.bundle.case_id);
      }
      log.train_loss += lg.value;
      for (const auto& [k, v] : lg.terms) log.train_terms[k] += v;
    }
    log.train_loss /= static_cast<double>(train_set.size());
    for (auto& [k, v] : log.train_terms) v /= static_cast<double>(train_set.size());
    if (!val_set.empty()) {
      const HoldoutReport val = evaluate_holdout(model, val_set, quick);
      log.val_dose_score = val.mean_dose_score;
      log.val_dvh_score = val.mean_dvh_score;
    }
    log.param_hash = fnv1a(model.params());
    const double score = val_set.empty() ? log.train_loss : log.val_dvh_score;
    if (score < result.best_val_dvh) {
      result.best_val_dvh = score;
      result.best_epoch = epoch;
      result.best_params = model.params();
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.final_params = model.params();
  return result;
}

// ---------------------------------------------------------------------------
// checkpoints: "DKCKPT1\n", one JSON header line, then the parameters as f32le.

inline constexpr std::string_view kCheckpointMagic = "DKCKPT1";

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const std::vector<float>& params,
                            int epoch) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write checkpoint " + path.string());
  nlohmann::ordered_json h;
  h["model"] = to_json(cfg);
  h["param_count"] = params.size();
  h["dtype"] = "f32le";
  h["epoch"] = epoch;
  out << kCheckpointMagic << "\n" << h.dump() << "\n";
  for (float v : params) detail::put_f32le(out, v);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

inline TinyUNet<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::string magic, header;
  if (!std::getline(in, magic) || magic != kCheckpointMagic) throw Error(ErrorKind::Io, "not a checkpoint file");
  if (!std::getline(in, header)) throw Error(ErrorKind::Io, "missing checkpoint header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Io, std::string("malformed checkpoint header: ") + e.what());
  }
  TinyUNet<float> model(model_config_from_json(h.at("model")));
  const auto n = h.at("param_count").get<std::size_t>();
  if (n != model.param_count()) throw Error(ErrorKind::Io, "checkpoint parameter count does not match its model");
  const std::string buf = detail::read_payload(in, 4 * n);
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  for (std::size_t i = 0; i < n; ++i) model.params()[i] = detail::get_f32le(p + 4 * i);
  return model;
}

}  // namespace dosekit
