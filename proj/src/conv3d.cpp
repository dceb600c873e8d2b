#include "eqtrack/conv3d.hpp"

#include <cstring>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace eqtrack {

namespace {

struct ConvDims {
  int cin, cout, d, h, w, k, r;
  std::int64_t vol, pvol;  // voxels per channel, padded voxels per channel
  int ph, pw;
};

ConvDims check_dims(const Tensor& in, const Tensor& kernel) {
  if (in.rank() != 4) throw Error("conv3d: input must be [C,D,H,W], got " +
                                  Tensor::shape_str(in.shape()));
  if (kernel.rank() != 5)
    throw Error("conv3d: kernel must be [Cout,Cin,k,k,k], got " +
                Tensor::shape_str(kernel.shape()));
  ConvDims dm;
  dm.cin = in.dim(0);
  dm.d = in.dim(1);
  dm.h = in.dim(2);
  dm.w = in.dim(3);
  dm.cout = kernel.dim(0);
  dm.k = kernel.dim(2);
  if (kernel.dim(1) != dm.cin)
    throw Error("conv3d: kernel expects " + std::to_string(kernel.dim(1)) +
                " input channels, input has " + std::to_string(dm.cin));
  if (kernel.dim(3) != dm.k || kernel.dim(4) != dm.k)
    throw Error("conv3d: kernel must be cubic");
  if (dm.k % 2 == 0) throw Error("conv3d: kernel width must be odd");
  dm.r = dm.k / 2;
  dm.vol = static_cast<std::int64_t>(dm.d) * dm.h * dm.w;
  dm.ph = dm.h + 2 * dm.r;
  dm.pw = dm.w + 2 * dm.r;
  dm.pvol = static_cast<std::int64_t>(dm.d + 2 * dm.r) * dm.ph * dm.pw;
  return dm;
}

// zero-pad every channel by r voxels on each side
std::vector<double> pad_channels(const Tensor& in, const ConvDims& dm) {
  std::vector<double> pad(static_cast<size_t>(dm.cin) * dm.pvol + 8, 0.0);
  for (int c = 0; c < dm.cin; ++c) {
    const double* src = in.data() + static_cast<std::int64_t>(c) * dm.vol;
    double* dst = pad.data() + static_cast<std::int64_t>(c) * dm.pvol;
    for (int z = 0; z < dm.d; ++z)
      for (int y = 0; y < dm.h; ++y)
        std::memcpy(dst + ((static_cast<std::int64_t>(z + dm.r) * dm.ph) + y + dm.r) * dm.pw + dm.r,
                    src + (static_cast<std::int64_t>(z) * dm.h + y) * dm.w,
                    static_cast<size_t>(dm.w) * sizeof(double));
  }
  return pad;
}

#if defined(__AVX512F__)
// fused 25-tap sweep for k == 5: out row += sum_{dy,dx} w[dy*5+dx] * rows[dy][x+dx]
inline void row_taps_k5(double* __restrict o, const double* const* rows, const double* w,
                        int width) {
  int x = 0;
  for (; x + 8 <= width; x += 8) {
    __m512d acc = _mm512_loadu_pd(o + x);
    for (int j = 0; j < 5; ++j) {
      const double* rp = rows[j] + x;
      __m512d a = _mm512_loadu_pd(rp);
      __m512d b = _mm512_loadu_pd(rp + 8);
      __m512i ai = _mm512_castpd_si512(a), bi = _mm512_castpd_si512(b);
      acc = _mm512_fmadd_pd(_mm512_set1_pd(w[5 * j + 0]), a, acc);
      acc = _mm512_fmadd_pd(_mm512_set1_pd(w[5 * j + 1]),
                            _mm512_castsi512_pd(_mm512_alignr_epi64(bi, ai, 1)), acc);
      acc = _mm512_fmadd_pd(_mm512_set1_pd(w[5 * j + 2]),
                            _mm512_castsi512_pd(_mm512_alignr_epi64(bi, ai, 2)), acc);
      acc = _mm512_fmadd_pd(_mm512_set1_pd(w[5 * j + 3]),
                            _mm512_castsi512_pd(_mm512_alignr_epi64(bi, ai, 3)), acc);
      acc = _mm512_fmadd_pd(_mm512_set1_pd(w[5 * j + 4]),
                            _mm512_castsi512_pd(_mm512_alignr_epi64(bi, ai, 4)), acc);
    }
    _mm512_storeu_pd(o + x, acc);
  }
  for (; x < width; ++x) {
    double acc = o[x];
    for (int j = 0; j < 5; ++j)
      for (int d = 0; d < 5; ++d) acc += w[5 * j + d] * rows[j][x + d];
    o[x] = acc;
  }
}
#endif

// one output channel given pre-padded input
void conv_one_output(const double* pad, double* out, const double* kc, const ConvDims& dm) {
  const int k = dm.k, r = dm.r, D = dm.d, H = dm.h, W = dm.w, PH = dm.ph, PW = dm.pw;
  std::memset(out, 0, static_cast<size_t>(dm.vol) * sizeof(double));
  for (int ci = 0; ci < dm.cin; ++ci) {
    const double* inc = pad + static_cast<std::int64_t>(ci) * dm.pvol;
    const double* kch = kc + static_cast<std::int64_t>(ci) * k * k * k;
    for (int dz = 0; dz < k; ++dz) {
      const double* w = kch + dz * k * k;
      for (int z = 0; z < D; ++z) {
        const double* zplane = inc + static_cast<std::int64_t>(z + dz) * PH * PW;
        double* op = out + static_cast<std::int64_t>(z) * H * W;
        for (int y = 0; y < H; ++y) {
          double* o = op + static_cast<std::int64_t>(y) * W;
#if defined(__AVX512F__)
          if (k == 5) {
            const double* rows[5] = {zplane + static_cast<std::int64_t>(y + 0) * PW,
                                     zplane + static_cast<std::int64_t>(y + 1) * PW,
                                     zplane + static_cast<std::int64_t>(y + 2) * PW,
                                     zplane + static_cast<std::int64_t>(y + 3) * PW,
                                     zplane + static_cast<std::int64_t>(y + 4) * PW};
            row_taps_k5(o, rows, w, W);
            continue;
          }
#endif
          for (int dy = 0; dy < k; ++dy) {
            const double* pr = zplane + static_cast<std::int64_t>(y + dy) * PW;
            const double* wr = w + dy * k;
            for (int x = 0; x < W; ++x) {
              double acc = 0.0;
              for (int dx = 0; dx < k; ++dx) acc += wr[dx] * pr[x + dx];
              o[x] += acc;
            }
          }
        }
      }
    }
  }
}

// deterministic 5-way shifted dot: acc[dx] += sum_x a[x] * b[x+dx]
inline void row_dots5(const double* __restrict a, const double* __restrict b, int width,
                      double* acc) {
#if defined(__AVX512F__)
  __m512d va[5] = {_mm512_setzero_pd(), _mm512_setzero_pd(), _mm512_setzero_pd(),
                   _mm512_setzero_pd(), _mm512_setzero_pd()};
  int x = 0;
  for (; x + 8 <= width; x += 8) {
    __m512d av = _mm512_loadu_pd(a + x);
    for (int d = 0; d < 5; ++d)
      va[d] = _mm512_fmadd_pd(av, _mm512_loadu_pd(b + x + d), va[d]);
  }
  for (int d = 0; d < 5; ++d) acc[d] += _mm512_reduce_add_pd(va[d]);
  for (; x < width; ++x)
    for (int d = 0; d < 5; ++d) acc[d] += a[x] * b[x + d];
#else
  for (int d = 0; d < 5; ++d) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int x = 0;
    for (; x + 4 <= width; x += 4) {
      s0 += a[x] * b[x + d];
      s1 += a[x + 1] * b[x + 1 + d];
      s2 += a[x + 2] * b[x + 2 + d];
      s3 += a[x + 3] * b[x + 3 + d];
    }
    double s = (s0 + s1) + (s2 + s3);
    for (; x < width; ++x) s += a[x] * b[x + d];
    acc[d] += s;
  }
#endif
}

}  // namespace

Tensor conv3d_forward(const Tensor& in, const Tensor& kernel) {
  ConvDims dm = check_dims(in, kernel);
  std::vector<double> pad = pad_channels(in, dm);
  Tensor out({dm.cout, dm.d, dm.h, dm.w});
  const std::int64_t kvol = static_cast<std::int64_t>(dm.k) * dm.k * dm.k;
  parallel_for(dm.cout, [&](int co) {
    conv_one_output(pad.data(), out.data() + co * dm.vol,
                    kernel.data() + co * dm.cin * kvol, dm);
  });
  return out;
}

Tensor conv3d_grad_input(const Tensor& gout, const Tensor& kernel, int cin) {
  const int cout = kernel.dim(0), k = kernel.dim(2);
  if (gout.dim(0) != cout) throw Error("conv3d_grad_input: channel mismatch");
  // flipped kernel with (co, ci) swapped
  Tensor kf({cin, cout, k, k, k});
  const std::int64_t kvol = static_cast<std::int64_t>(k) * k * k;
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci) {
      const double* src = kernel.data() + (static_cast<std::int64_t>(co) * cin + ci) * kvol;
      double* dst = kf.data() + (static_cast<std::int64_t>(ci) * cout + co) * kvol;
      for (std::int64_t i = 0; i < kvol; ++i) dst[i] = src[kvol - 1 - i];
    }
  return conv3d_forward(gout, kf);
}

Tensor conv3d_grad_kernel(const Tensor& gout, const Tensor& in, int k) {
  Tensor dummy_kernel({gout.dim(0), in.dim(0), k, k, k});
  ConvDims dm = check_dims(in, dummy_kernel);
  if (gout.dim(1) != dm.d || gout.dim(2) != dm.h || gout.dim(3) != dm.w)
    throw Error("conv3d_grad_kernel: spatial shape mismatch");
  std::vector<double> pad = pad_channels(in, dm);
  Tensor gk({dm.cout, dm.cin, k, k, k});
  const std::int64_t kvol = static_cast<std::int64_t>(k) * k * k;
  parallel_for(dm.cout, [&](int co) {
    const double* go = gout.data() + co * dm.vol;
    for (int ci = 0; ci < dm.cin; ++ci) {
      const double* inc = pad.data() + static_cast<std::int64_t>(ci) * dm.pvol;
      double* acc = gk.data() + (static_cast<std::int64_t>(co) * dm.cin + ci) * kvol;
      for (int z = 0; z < dm.d; ++z)
        for (int y = 0; y < dm.h; ++y) {
          const double* grow = go + (static_cast<std::int64_t>(z) * dm.h + y) * dm.w;
          for (int dz = 0; dz < k; ++dz)
            for (int dy = 0; dy < k; ++dy) {
              const double* irow =
                  inc + (static_cast<std::int64_t>(z + dz) * dm.ph + y + dy) * dm.pw;
              double* a = acc + (dz * k + dy) * k;
              if (k == 5) {
                row_dots5(grow, irow, dm.w, a);
              } else {
                for (int dx = 0; dx < k; ++dx) {
                  double s = 0.0;
                  for (int x = 0; x < dm.w; ++x) s += grow[x] * irow[x + dx];
                  a[dx] += s;
                }
              }
            }
        }
    }
  });
  return gk;
}

}  // namespace eqtrack
