#pragma once

// Raw compute kernels behind the graph primitives. Convolutions are lowered to
// im2col + GEMM; the GEMM inner loop is an axpy over the contiguous output row,
// which keeps every output element owned by a single accumulation chain
// (bitwise deterministic for any worker count).

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

#include "dc/parallel.hpp"
#include "dc/tensor.hpp"

namespace dc::kern {

// C[M,N] += A[M,K] * B[K,N], all row-major. The k loop is unrolled by four so
// each pass over the output row performs four fused updates; the association
// order is fixed, so results are bitwise reproducible.
template <typename T>
void gemm_acc(T* __restrict c, const T* __restrict a, const T* __restrict b,
              int64_t m, int64_t k, int64_t n) {
    constexpr int64_t kb = 256;
    for (int64_t k0 = 0; k0 < k; k0 += kb) {
        const int64_t k1 = std::min(k, k0 + kb);
        for (int64_t i = 0; i < m; ++i) {
            T* __restrict crow = c + i * n;
            const T* __restrict arow = a + i * k;
            int64_t kk = k0;
            for (; kk + 4 <= k1; kk += 4) {
                const T a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2], a3 = arow[kk + 3];
                if (a0 == T{0} && a1 == T{0} && a2 == T{0} && a3 == T{0}) continue;
                const T* __restrict b0 = b + kk * n;
                const T* __restrict b1 = b0 + n;
                const T* __restrict b2 = b1 + n;
                const T* __restrict b3 = b2 + n;
                for (int64_t j = 0; j < n; ++j)
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            for (; kk < k1; ++kk) {
                const T av = arow[kk];
                if (av == T{0}) continue;
                const T* __restrict brow = b + kk * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <typename T>
void transpose2d(T* __restrict out, const T* __restrict in, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) out[j * rows + i] = in[i * cols + j];
}

// col[(ci*kh+ky)*kw+kx][oy*wo+ox] = x[ci][oy+ky-ph][ox+kx-pw], zero outside.
template <typename T>
void im2col(T* __restrict col, const T* __restrict x, int64_t ci, int64_t h, int64_t w,
            int64_t kh, int64_t kw, int64_t ph, int64_t pw, int64_t ho, int64_t wo) {
    for (int64_t c = 0; c < ci; ++c) {
        const T* __restrict xc = x + c * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* __restrict crow = col + ((c * kh + ky) * kw + kx) * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy + ky - ph;
                    T* __restrict dst = crow + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, T{0});
                        continue;
                    }
                    const int64_t lo = std::max<int64_t>(0, pw - kx);
                    const int64_t hi = std::min<int64_t>(wo, w + pw - kx);
                    std::fill(dst, dst + std::min(lo, wo), T{0});
                    for (int64_t ox = lo; ox < hi; ++ox) dst[ox] = xc[iy * w + ox + kx - pw];
                    if (hi < wo) std::fill(dst + std::max<int64_t>(hi, 0), dst + wo, T{0});
                }
            }
        }
    }
}

// colt[oy*wo+ox][(ci*kh+ky)*kw+kx] — transposed layout for the weight-gradient GEMM.
template <typename T>
void im2col_t(T* __restrict colt, const T* __restrict x, int64_t ci, int64_t h, int64_t w,
              int64_t kh, int64_t kw, int64_t ph, int64_t pw, int64_t ho, int64_t wo) {
    const int64_t patch = ci * kh * kw;
    std::fill(colt, colt + ho * wo * patch, T{0});
    for (int64_t c = 0; c < ci; ++c) {
        const T* __restrict xc = x + c * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t off = (c * kh + ky) * kw + kx;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy + ky - ph;
                    if (iy < 0 || iy >= h) continue;
                    const int64_t lo = std::max<int64_t>(0, pw - kx);
                    const int64_t hi = std::min<int64_t>(wo, w + pw - kx);
                    for (int64_t ox = lo; ox < hi; ++ox)
                        colt[(oy * wo + ox) * patch + off] = xc[iy * w + ox + kx - pw];
                }
            }
        }
    }
}

// col2im accumulate: inverse scatter of im2col.
template <typename T>
void col2im_acc(T* __restrict x, const T* __restrict col, int64_t ci, int64_t h, int64_t w,
                int64_t kh, int64_t kw, int64_t ph, int64_t pw, int64_t ho, int64_t wo) {
    for (int64_t c = 0; c < ci; ++c) {
        T* __restrict xc = x + c * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* __restrict crow = col + ((c * kh + ky) * kw + kx) * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy + ky - ph;
                    if (iy < 0 || iy >= h) continue;
                    const int64_t lo = std::max<int64_t>(0, pw - kx);
                    const int64_t hi = std::min<int64_t>(wo, w + pw - kx);
                    for (int64_t ox = lo; ox < hi; ++ox)
                        xc[iy * w + ox + kx - pw] += crow[oy * wo + ox];
                }
            }
        }
    }
}

struct ConvDims {
    int64_t batch, cin, h, w;      // input
    int64_t cout, kh, kw, ph, pw;  // kernel / padding
    int64_t ho, wo;                // output spatial
};

inline ConvDims conv_dims(const Shape& x, const Shape& k, int64_t ph, int64_t pw) {
    ConvDims d{};
    d.batch = x[0]; d.cin = x[1]; d.h = x[2]; d.w = x[3];
    d.cout = k[0]; d.kh = k[2]; d.kw = k[3];
    d.ph = ph; d.pw = pw;
    d.ho = d.h + 2 * ph - d.kh + 1;
    d.wo = d.w + 2 * pw - d.kw + 1;
    return d;
}

// y[b,co,oy,ox] = sum_{ci,ky,kx} x[b,ci,oy+ky-ph,ox+kx-pw] * k[co,ci,ky,kx]
template <typename T>
void conv2d(T* y, const T* x, const T* k, const ConvDims& d, int workers) {
    const int64_t patch = d.cin * d.kh * d.kw;
    const int64_t osp = d.ho * d.wo;
    parallel_for(d.batch, workers, [&](int64_t b0, int64_t b1) {
        std::vector<T> col(static_cast<size_t>(patch * osp));
        for (int64_t b = b0; b < b1; ++b) {
            im2col(col.data(), x + b * d.cin * d.h * d.w, d.cin, d.h, d.w,
                   d.kh, d.kw, d.ph, d.pw, d.ho, d.wo);
            T* yb = y + b * d.cout * osp;
            std::fill(yb, yb + d.cout * osp, T{0});
            gemm_acc(yb, k, col.data(), d.cout, patch, osp);
        }
    });
}

// dx[b,ci,iy,ix] = sum_{co,ky,kx} g[b,co,iy-ky+ph,ix-kx+pw] * k[co,ci,ky,kx]
template <typename T>
void conv2d_dx(T* dx, const T* g, const T* k, const ConvDims& d, int workers) {
    const int64_t patch = d.cin * d.kh * d.kw;
    const int64_t osp = d.ho * d.wo;
    // kt[(ci*kh+ky)*kw+kx][co]
    std::vector<T> kt(static_cast<size_t>(patch * d.cout));
    for (int64_t co = 0; co < d.cout; ++co)
        for (int64_t p = 0; p < patch; ++p) kt[p * d.cout + co] = k[co * patch + p];
    parallel_for(d.batch, workers, [&](int64_t b0, int64_t b1) {
        std::vector<T> col(static_cast<size_t>(patch * osp));
        for (int64_t b = b0; b < b1; ++b) {
            std::fill(col.begin(), col.end(), T{0});
            gemm_acc(col.data(), kt.data(), g + b * d.cout * osp, patch, d.cout, osp);
            T* dxb = dx + b * d.cin * d.h * d.w;
            std::fill(dxb, dxb + d.cin * d.h * d.w, T{0});
            col2im_acc(dxb, col.data(), d.cin, d.h, d.w, d.kh, d.kw, d.ph, d.pw, d.ho, d.wo);
        }
    });
}

// dk[co,ci,ky,kx] = sum_{b,oy,ox} g[b,co,oy,ox] * x[b,ci,oy+ky-ph,ox+kx-pw]
template <typename T>
void conv2d_dw(T* dk, const T* x, const T* g, const ConvDims& d, int workers) {
    (void)workers;  // batch accumulation is ordered; keep it single-threaded
    const int64_t patch = d.cin * d.kh * d.kw;
    const int64_t osp = d.ho * d.wo;
    std::fill(dk, dk + d.cout * patch, T{0});
    std::vector<T> colt(static_cast<size_t>(osp * patch));
    for (int64_t b = 0; b < d.batch; ++b) {
        im2col_t(colt.data(), x + b * d.cin * d.h * d.w, d.cin, d.h, d.w,
                 d.kh, d.kw, d.ph, d.pw, d.ho, d.wo);
        gemm_acc(dk, g + b * d.cout * osp, colt.data(), d.cout, osp, patch);
    }
}

// ---- 2x2 pooling (even spatial dims; callers pad odd inputs first) ----

template <typename T>
void avgpool2(T* y, const T* x, int64_t planes, int64_t h, int64_t w) {
    const int64_t ho = h / 2, wo = w / 2;
    for (int64_t p = 0; p < planes; ++p) {
        const T* xp = x + p * h * w;
        T* yp = y + p * ho * wo;
        for (int64_t i = 0; i < ho; ++i)
            for (int64_t j = 0; j < wo; ++j) {
                const T* c = xp + 2 * i * w + 2 * j;
                yp[i * wo + j] = (c[0] + c[1] + c[w] + c[w + 1]) * T(0.25);
            }
    }
}

template <typename T>
void avgunpool2(T* y, const T* g, int64_t planes, int64_t h, int64_t w) {
    const int64_t ho = h / 2, wo = w / 2;
    for (int64_t p = 0; p < planes; ++p) {
        const T* gp = g + p * ho * wo;
        T* yp = y + p * h * w;
        for (int64_t i = 0; i < ho; ++i)
            for (int64_t j = 0; j < wo; ++j) {
                const T v = gp[i * wo + j] * T(0.25);
                T* c = yp + 2 * i * w + 2 * j;
                c[0] = v; c[1] = v; c[w] = v; c[w + 1] = v;
            }
    }
}

// idx stores the winning cell (0..3 = di*2+dj); ties go to the first in scan order.
template <typename T>
void maxpool2(T* y, int32_t* idx, const T* x, int64_t planes, int64_t h, int64_t w) {
    const int64_t ho = h / 2, wo = w / 2;
    for (int64_t p = 0; p < planes; ++p) {
        const T* xp = x + p * h * w;
        T* yp = y + p * ho * wo;
        int32_t* ip = idx + p * ho * wo;
        for (int64_t i = 0; i < ho; ++i)
            for (int64_t j = 0; j < wo; ++j) {
                const T* c = xp + 2 * i * w + 2 * j;
                T best = c[0];
                int32_t bi = 0;
                if (c[1] > best) { best = c[1]; bi = 1; }
                if (c[w] > best) { best = c[w]; bi = 2; }
                if (c[w + 1] > best) { best = c[w + 1]; bi = 3; }
                yp[i * wo + j] = best;
                ip[i * wo + j] = bi;
            }
    }
}

template <typename T>
void pool_scatter2(T* y, const T* g, const int32_t* idx, int64_t planes, int64_t h, int64_t w) {
    const int64_t ho = h / 2, wo = w / 2;
    std::fill(y, y + planes * h * w, T{0});
    for (int64_t p = 0; p < planes; ++p) {
        const T* gp = g + p * ho * wo;
        const int32_t* ip = idx + p * ho * wo;
        T* yp = y + p * h * w;
        for (int64_t i = 0; i < ho; ++i)
            for (int64_t j = 0; j < wo; ++j) {
                const int32_t k = ip[i * wo + j];
                yp[(2 * i + k / 2) * w + 2 * j + k % 2] = gp[i * wo + j];
            }
    }
}

template <typename T>
void pool_gather2(T* y, const T* x, const int32_t* idx, int64_t planes, int64_t h, int64_t w) {
    const int64_t ho = h / 2, wo = w / 2;
    for (int64_t p = 0; p < planes; ++p) {
        const T* xp = x + p * h * w;
        const int32_t* ip = idx + p * ho * wo;
        T* yp = y + p * ho * wo;
        for (int64_t i = 0; i < ho; ++i)
            for (int64_t j = 0; j < wo; ++j) {
                const int32_t k = ip[i * wo + j];
                yp[i * wo + j] = xp[(2 * i + k / 2) * w + 2 * j + k % 2];
            }
    }
}

template <typename T>
void pad2d(T* y, const T* x, int64_t planes, int64_t h, int64_t w,
           int64_t top, int64_t bottom, int64_t left, int64_t right) {
    const int64_t ho = h + top + bottom, wo = w + left + right;
    std::fill(y, y + planes * ho * wo, T{0});
    for (int64_t p = 0; p < planes; ++p)
        for (int64_t i = 0; i < h; ++i)
            std::memcpy(y + (p * ho + i + top) * wo + left, x + (p * h + i) * w,
                        static_cast<size_t>(w) * sizeof(T));
}

template <typename T>
void crop2d(T* y, const T* x, int64_t planes, int64_t h, int64_t w,
            int64_t top, int64_t left, int64_t ho, int64_t wo) {
    for (int64_t p = 0; p < planes; ++p)
        for (int64_t i = 0; i < ho; ++i)
            std::memcpy(y + (p * ho + i) * wo, x + (p * h + i + top) * w + left,
                        static_cast<size_t>(wo) * sizeof(T));
}

// ---- axis reductions / broadcast (odometer walk, no div/mod per element) ----

struct AxisMap {
    Shape in_shape, out_shape;
    std::vector<int64_t> out_strides;  // per input axis; 0 where reduced/broadcast
};

inline AxisMap reduce_map(const Shape& in, const std::vector<int>& axes) {
    AxisMap m;
    m.in_shape = in;
    m.out_shape = in;
    std::vector<bool> red(in.size(), false);
    for (int a : axes) red[static_cast<size_t>(a)] = true;
    for (size_t i = 0; i < in.size(); ++i)
        if (red[i]) m.out_shape[i] = 1;
    m.out_strides.assign(in.size(), 0);
    int64_t stride = 1;
    for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
        const auto ui = static_cast<size_t>(i);
        if (!red[ui]) m.out_strides[ui] = stride;
        stride *= m.out_shape[ui];
    }
    return m;
}

// Walk the full input index space; fn(in_linear, out_linear).
template <typename F>
void odometer(const AxisMap& m, F&& fn) {
    const int rank = static_cast<int>(m.in_shape.size());
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    const int64_t total = numel(m.in_shape);
    int64_t out = 0;
    for (int64_t lin = 0; lin < total; ++lin) {
        fn(lin, out);
        for (int a = rank - 1; a >= 0; --a) {
            const auto ua = static_cast<size_t>(a);
            idx[ua]++;
            out += m.out_strides[ua];
            if (idx[ua] < m.in_shape[ua]) break;
            out -= m.out_strides[ua] * m.in_shape[ua];
            idx[ua] = 0;
        }
    }
}

} // namespace dc::kern
