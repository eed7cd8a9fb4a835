#pragma once

#include <cstddef>
#include <cmath>

// Raw dense kernels shared by the plain forward pass and the tape ops.
// All tensors are row-major; images are N x C x H x W.

namespace fssentry::kernels {

// stride-1 convolution with symmetric zero padding `pad`; output H, W match
// the input when pad == k/2.
template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* b, T* y,
                size_t n, size_t cin, size_t h, size_t wd,
                size_t cout, size_t k, size_t pad) {
    size_t oh = h + 2 * pad - k + 1;
    size_t ow = wd + 2 * pad - k + 1;
    for (size_t in = 0; in < n; ++in) {
        for (size_t co = 0; co < cout; ++co) {
            T* yp = y + ((in * cout + co) * oh) * ow;
            for (size_t i = 0; i < oh * ow; ++i) yp[i] = b[co];
            for (size_t ci = 0; ci < cin; ++ci) {
                const T* xp = x + ((in * cin + ci) * h) * wd;
                const T* wp = w + ((co * cin + ci) * k) * k;
                for (size_t kh = 0; kh < k; ++kh) {
                    for (size_t kw = 0; kw < k; ++kw) {
                        T wv = wp[kh * k + kw];
                        for (size_t i = 0; i < oh; ++i) {
                            long ih = static_cast<long>(i + kh) - static_cast<long>(pad);
                            if (ih < 0 || ih >= static_cast<long>(h)) continue;
                            size_t j0 = pad > kw ? pad - kw : 0;
                            size_t j1 = ow;
                            if (kw + ow > wd + pad) j1 = wd + pad - kw;
                            const T* xrow = xp + static_cast<size_t>(ih) * wd + kw - pad;
                            T* yrow = yp + i * ow;
                            for (size_t j = j0; j < j1; ++j) yrow[j] += wv * xrow[j];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_bwd(const T* x, const T* w, const T* gy,
                T* gx, T* gw, T* gb,
                size_t n, size_t cin, size_t h, size_t wd,
                size_t cout, size_t k, size_t pad) {
    size_t oh = h + 2 * pad - k + 1;
    size_t ow = wd + 2 * pad - k + 1;
    for (size_t in = 0; in < n; ++in) {
        for (size_t co = 0; co < cout; ++co) {
            const T* gyp = gy + ((in * cout + co) * oh) * ow;
            T acc = 0;
            for (size_t i = 0; i < oh * ow; ++i) acc += gyp[i];
            gb[co] += acc;
            for (size_t ci = 0; ci < cin; ++ci) {
                const T* xp = x + ((in * cin + ci) * h) * wd;
                T* gxp = gx ? gx + ((in * cin + ci) * h) * wd : nullptr;
                const T* wp = w + ((co * cin + ci) * k) * k;
                T* gwp = gw + ((co * cin + ci) * k) * k;
                for (size_t kh = 0; kh < k; ++kh) {
                    for (size_t kw = 0; kw < k; ++kw) {
                        T wv = wp[kh * k + kw];
                        T gwacc = 0;
                        for (size_t i = 0; i < oh; ++i) {
                            long ih = static_cast<long>(i + kh) - static_cast<long>(pad);
                            if (ih < 0 || ih >= static_cast<long>(h)) continue;
                            size_t j0 = pad > kw ? pad - kw : 0;
                            size_t j1 = ow;
                            if (kw + ow > wd + pad) j1 = wd + pad - kw;
                            const T* xrow = xp + static_cast<size_t>(ih) * wd + kw - pad;
                            const T* gyrow = gyp + i * ow;
                            if (gxp) {
                                T* gxrow = gxp + static_cast<size_t>(ih) * wd + kw - pad;
                                for (size_t j = j0; j < j1; ++j) {
                                    gwacc += gyrow[j] * xrow[j];
                                    gxrow[j] += wv * gyrow[j];
                                }
                            } else {
                                for (size_t j = j0; j < j1; ++j) gwacc += gyrow[j] * xrow[j];
                            }
                        }
                        gwp[kh * k + kw] += gwacc;
                    }
                }
            }
        }
    }
}

template <typename T>
void fc_fwd(const T* x, const T* w, const T* b, T* y, size_t n, size_t din, size_t dout) {
    for (size_t in = 0; in < n; ++in) {
        const T* xp = x + in * din;
        T* yp = y + in * dout;
        for (size_t m = 0; m < dout; ++m) {
            const T* wp = w + m * din;
            T acc = b[m];
            for (size_t d = 0; d < din; ++d) acc += wp[d] * xp[d];
            yp[m] = acc;
        }
    }
}

template <typename T>
void fc_bwd(const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb,
            size_t n, size_t din, size_t dout) {
    for (size_t in = 0; in < n; ++in) {
        const T* xp = x + in * din;
        const T* gyp = gy + in * dout;
        T* gxp = gx ? gx + in * din : nullptr;
        for (size_t m = 0; m < dout; ++m) {
            T g = gyp[m];
            gb[m] += g;
            const T* wp = w + m * din;
            T* gwp = gw + m * din;
            for (size_t d = 0; d < din; ++d) gwp[d] += g * xp[d];
            if (gxp)
                for (size_t d = 0; d < din; ++d) gxp[d] += g * wp[d];
        }
    }
}

template <typename T>
void relu_fwd(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void relu_bwd(const T* x, const T* gy, T* gx, size_t n) {
    for (size_t i = 0; i < n; ++i) gx[i] += x[i] > T(0) ? gy[i] : T(0);
}

template <typename T>
void sigmoid_fwd(const T* x, T* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <typename T>
void sigmoid_bwd(const T* y, const T* gy, T* gx, size_t n) {
    for (size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
}

// 2x2 average pooling, stride 2; H and W must be even.
template <typename T>
void avgpool2_fwd(const T* x, T* y, size_t nc, size_t h, size_t w) {
    size_t oh = h / 2, ow = w / 2;
    for (size_t p = 0; p < nc; ++p) {
        const T* xp = x + p * h * w;
        T* yp = y + p * oh * ow;
        for (size_t i = 0; i < oh; ++i)
            for (size_t j = 0; j < ow; ++j)
                yp[i * ow + j] = (xp[(2 * i) * w + 2 * j] + xp[(2 * i) * w + 2 * j + 1] +
                                  xp[(2 * i + 1) * w + 2 * j] + xp[(2 * i + 1) * w + 2 * j + 1]) /
                                 T(4);
    }
}

template <typename T>
void avgpool2_bwd(const T* gy, T* gx, size_t nc, size_t h, size_t w) {
    size_t oh = h / 2, ow = w / 2;
    for (size_t p = 0; p < nc; ++p) {
        const T* gyp = gy + p * oh * ow;
        T* gxp = gx + p * h * w;
        for (size_t i = 0; i < oh; ++i)
            for (size_t j = 0; j < ow; ++j) {
                T g = gyp[i * ow + j] / T(4);
                gxp[(2 * i) * w + 2 * j] += g;
                gxp[(2 * i) * w + 2 * j + 1] += g;
                gxp[(2 * i + 1) * w + 2 * j] += g;
                gxp[(2 * i + 1) * w + 2 * j + 1] += g;
            }
    }
}

// nearest-neighbour 2x upsampling
template <typename T>
void upsample2_fwd(const T* x, T* y, size_t nc, size_t h, size_t w) {
    size_t oh = h * 2, ow = w * 2;
    for (size_t p = 0; p < nc; ++p) {
        const T* xp = x + p * h * w;
        T* yp = y + p * oh * ow;
        for (size_t i = 0; i < h; ++i)
            for (size_t j = 0; j < w; ++j) {
                T v = xp[i * w + j];
                yp[(2 * i) * ow + 2 * j] = v;
                yp[(2 * i) * ow + 2 * j + 1] = v;
                yp[(2 * i + 1) * ow + 2 * j] = v;
                yp[(2 * i + 1) * ow + 2 * j + 1] = v;
            }
    }
}

template <typename T>
void upsample2_bwd(const T* gy, T* gx, size_t nc, size_t h, size_t w) {
    size_t ow = w * 2;
    for (size_t p = 0; p < nc; ++p) {
        const T* gyp = gy + p * (h * 2) * ow;
        T* gxp = gx + p * h * w;
        for (size_t i = 0; i < h; ++i)
            for (size_t j = 0; j < w; ++j)
                gxp[i * w + j] += gyp[(2 * i) * ow + 2 * j] + gyp[(2 * i) * ow + 2 * j + 1] +
                                  gyp[(2 * i + 1) * ow + 2 * j] + gyp[(2 * i + 1) * ow + 2 * j + 1];
    }
}

} // namespace fssentry::kernels
