#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>

// Raw dense kernels shared by the differentiable f64 graph and the f32
// inference path. No allocation, no error handling: callers own shape
// checking. Layouts are row-major with the last axis contiguous.
namespace vb::nn::detail {

struct Conv3dShape {
    int n;                  // batch
    int ci, d, h, w;        // input channels + spatial
    int co, kd, kh, kw;     // output channels + kernel extents
    int stride, pad;
    int od, oh, ow;         // output spatial

    static Conv3dShape make(int n, int ci, int d, int h, int w, int co, int kd, int kh,
                            int kw, int stride, int pad) {
        Conv3dShape s{n, ci, d, h, w, co, kd, kh, kw, stride, pad, 0, 0, 0};
        s.od = (d + 2 * pad - kd) / stride + 1;
        s.oh = (h + 2 * pad - kh) / stride + 1;
        s.ow = (w + 2 * pad - kw) / stride + 1;
        return s;
    }
    bool valid() const {
        return n > 0 && ci > 0 && co > 0 && stride > 0 && pad >= 0 && kd > 0 && kh > 0 &&
               kw > 0 && d + 2 * pad >= kd && h + 2 * pad >= kh && w + 2 * pad >= kw;
    }
};

// Output index range [lo, hi] for one axis such that
// 0 <= o*stride - pad + koff < in_n; empty when lo > hi.
inline void conv_axis_range(int out_n, int in_n, int stride, int pad, int koff, int& lo,
                            int& hi) {
    lo = 0;
    const int a = pad - koff;
    if (a > 0) lo = (a + stride - 1) / stride;
    const int b = in_n - 1 + pad - koff;
    hi = b < 0 ? -1 : std::min(out_n - 1, b / stride);
}

// Reference direct convolution: one output element at a time, taps summed
// in kernel order. Deliberately simple; serves as the agreement oracle for
// the blocked path below.
template <typename T>
void conv3d_forward_ref(const T* x, const T* k, T* out, const Conv3dShape& s) {
    for (int n = 0; n < s.n; ++n)
        for (int co = 0; co < s.co; ++co)
            for (int od = 0; od < s.od; ++od)
                for (int oh = 0; oh < s.oh; ++oh)
                    for (int ow = 0; ow < s.ow; ++ow) {
                        T acc = T(0);
                        for (int ci = 0; ci < s.ci; ++ci)
                            for (int kd = 0; kd < s.kd; ++kd)
                                for (int kh = 0; kh < s.kh; ++kh)
                                    for (int kw = 0; kw < s.kw; ++kw) {
                                        const int id = od * s.stride - s.pad + kd;
                                        const int ih = oh * s.stride - s.pad + kh;
                                        const int iw = ow * s.stride - s.pad + kw;
                                        if (id < 0 || id >= s.d || ih < 0 || ih >= s.h ||
                                            iw < 0 || iw >= s.w)
                                            continue;
                                        const std::size_t xi =
                                            (((static_cast<std::size_t>(n) * s.ci + ci) * s.d +
                                              id) * s.h + ih) * s.w + iw;
                                        const std::size_t ki =
                                            (((static_cast<std::size_t>(co) * s.ci + ci) * s.kd +
                                              kd) * s.kh + kh) * s.kw + kw;
                                        acc += x[xi] * k[ki];
                                    }
                        const std::size_t oi =
                            (((static_cast<std::size_t>(n) * s.co + co) * s.od + od) * s.oh +
                             oh) * s.ow + ow;
                        out[oi] = acc;
                    }
}

// Blocked fast path: taps hoisted to the outside, contiguous accumulation
// along the output row so the inner loop vectorises. Summation order differs
// from the reference, which is exactly why the two are cross-checked.
template <typename T>
void conv3d_forward_blocked(const T* x, const T* k, T* out, const Conv3dShape& s) {
    const std::size_t out_total = static_cast<std::size_t>(s.n) * s.co * s.od * s.oh * s.ow;
    std::fill(out, out + out_total, T(0));
    for (int n = 0; n < s.n; ++n)
        for (int co = 0; co < s.co; ++co)
            for (int ci = 0; ci < s.ci; ++ci)
                for (int kd = 0; kd < s.kd; ++kd) {
                    int od_lo, od_hi;
                    conv_axis_range(s.od, s.d, s.stride, s.pad, kd, od_lo, od_hi);
                    for (int kh = 0; kh < s.kh; ++kh) {
                        int oh_lo, oh_hi;
                        conv_axis_range(s.oh, s.h, s.stride, s.pad, kh, oh_lo, oh_hi);
                        for (int kw = 0; kw < s.kw; ++kw) {
                            int ow_lo, ow_hi;
                            conv_axis_range(s.ow, s.w, s.stride, s.pad, kw, ow_lo, ow_hi);
                            const std::size_t ki =
                                (((static_cast<std::size_t>(co) * s.ci + ci) * s.kd + kd) *
                                 s.kh + kh) * s.kw + kw;
                            const T kval = k[ki];
                            if (kval == T(0)) continue;
                            for (int od = od_lo; od <= od_hi; ++od) {
                                const int id = od * s.stride - s.pad + kd;
                                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const int ih = oh * s.stride - s.pad + kh;
                                    const T* xrow =
                                        x + (((static_cast<std::size_t>(n) * s.ci + ci) * s.d +
                                              id) * s.h + ih) * s.w;
                                    T* orow =
                                        out + (((static_cast<std::size_t>(n) * s.co + co) * s.od +
                                                od) * s.oh + oh) * s.ow;
                                    const int base = -s.pad + kw;
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        orow[ow] += kval * xrow[ow * s.stride + base];
                                }
                            }
                        }
                    }
                }
}

// Gradient w.r.t. the input (scatter form of the blocked forward).
template <typename T>
void conv3d_backward_input(const T* gout, const T* k, T* gx, const Conv3dShape& s) {
    for (int n = 0; n < s.n; ++n)
        for (int co = 0; co < s.co; ++co)
            for (int ci = 0; ci < s.ci; ++ci)
                for (int kd = 0; kd < s.kd; ++kd) {
                    int od_lo, od_hi;
                    conv_axis_range(s.od, s.d, s.stride, s.pad, kd, od_lo, od_hi);
                    for (int kh = 0; kh < s.kh; ++kh) {
                        int oh_lo, oh_hi;
                        conv_axis_range(s.oh, s.h, s.stride, s.pad, kh, oh_lo, oh_hi);
                        for (int kw = 0; kw < s.kw; ++kw) {
                            int ow_lo, ow_hi;
                            conv_axis_range(s.ow, s.w, s.stride, s.pad, kw, ow_lo, ow_hi);
                            const std::size_t ki =
                                (((static_cast<std::size_t>(co) * s.ci + ci) * s.kd + kd) *
                                 s.kh + kh) * s.kw + kw;
                            const T kval = k[ki];
                            if (kval == T(0)) continue;
                            for (int od = od_lo; od <= od_hi; ++od) {
                                const int id = od * s.stride - s.pad + kd;
                                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const int ih = oh * s.stride - s.pad + kh;
                                    T* gxrow =
                                        gx + (((static_cast<std::size_t>(n) * s.ci + ci) * s.d +
                                               id) * s.h + ih) * s.w;
                                    const T* grow =
                                        gout + (((static_cast<std::size_t>(n) * s.co + co) *
                                                 s.od + od) * s.oh + oh) * s.ow;
                                    const int base = -s.pad + kw;
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        gxrow[ow * s.stride + base] += kval * grow[ow];
                                }
                            }
                        }
                    }
                }
}

// Gradient w.r.t. the kernel.
template <typename T>
void conv3d_backward_kernel(const T* x, const T* gout, T* gk, const Conv3dShape& s) {
    for (int n = 0; n < s.n; ++n)
        for (int co = 0; co < s.co; ++co)
            for (int ci = 0; ci < s.ci; ++ci)
                for (int kd = 0; kd < s.kd; ++kd) {
                    int od_lo, od_hi;
                    conv_axis_range(s.od, s.d, s.stride, s.pad, kd, od_lo, od_hi);
                    for (int kh = 0; kh < s.kh; ++kh) {
                        int oh_lo, oh_hi;
                        conv_axis_range(s.oh, s.h, s.stride, s.pad, kh, oh_lo, oh_hi);
                        for (int kw = 0; kw < s.kw; ++kw) {
                            int ow_lo, ow_hi;
                            conv_axis_range(s.ow, s.w, s.stride, s.pad, kw, ow_lo, ow_hi);
                            T acc = T(0);
                            for (int od = od_lo; od <= od_hi; ++od) {
                                const int id = od * s.stride - s.pad + kd;
                                for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                                    const int ih = oh * s.stride - s.pad + kh;
                                    const T* xrow =
                                        x + (((static_cast<std::size_t>(n) * s.ci + ci) * s.d +
                                              id) * s.h + ih) * s.w;
                                    const T* grow =
                                        gout + (((static_cast<std::size_t>(n) * s.co + co) *
                                                 s.od + od) * s.oh + oh) * s.ow;
                                    const int base = -s.pad + kw;
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        acc += grow[ow] * xrow[ow * s.stride + base];
                                }
                            }
                            const std::size_t ki =
                                (((static_cast<std::size_t>(co) * s.ci + ci) * s.kd + kd) *
                                 s.kh + kh) * s.kw + kw;
                            gk[ki] += acc;
                        }
                    }
                }
}

// y = x W^T + b with x: [n, in], w: [out, in], b: [out] (b may be null).
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int n, int in, int out) {
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < out; ++o) {
            T acc = b ? b[o] : T(0);
            const T* xr = x + static_cast<std::size_t>(i) * in;
            const T* wr = w + static_cast<std::size_t>(o) * in;
            for (int c = 0; c < in; ++c) acc += xr[c] * wr[c];
            y[static_cast<std::size_t>(i) * out + o] = acc;
        }
}

template <typename T>
inline T sigmoid_scalar(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

// Row-wise softmax over [n, k], numerically shifted by the row max.
template <typename T>
void softmax_rows(const T* x, T* y, int n, int k) {
    for (int i = 0; i < n; ++i) {
        const T* xr = x + static_cast<std::size_t>(i) * k;
        T* yr = y + static_cast<std::size_t>(i) * k;
        T mx = xr[0];
        for (int c = 1; c < k; ++c) mx = std::max(mx, xr[c]);
        T sum = T(0);
        for (int c = 0; c < k; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        for (int c = 0; c < k; ++c) yr[c] /= sum;
    }
}

// Spatial mean per channel: x [c, spatial] -> y [c].
template <typename T>
void gap_forward(const T* x, T* y, int c, std::int64_t spatial) {
    for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        const T* xr = x + static_cast<std::size_t>(ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) acc += xr[i];
        y[ch] = acc / static_cast<T>(spatial);
    }
}

// z_c = sum_v(F_cv * M_v) / (sum_v M_v + eps); mask entries are 0/1 weights.
template <typename T>
void masked_avg_pool_forward(const T* f, const T* m, T* z, int c, std::int64_t spatial,
                             T eps) {
    T msum = T(0);
    for (std::int64_t i = 0; i < spatial; ++i) msum += m[i];
    const T denom = msum + eps;
    for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        const T* fr = f + static_cast<std::size_t>(ch) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) acc += fr[i] * m[i];
        z[ch] = acc / denom;
    }
}

} // namespace vb::nn::detail
