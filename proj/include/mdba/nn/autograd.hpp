#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "mdba/core/ndarray.hpp"
#include "mdba/losses.hpp"
#include "mdba/sobel.hpp"

namespace mdba::nn {

template <typename T>
struct Variable {
    NdArray<T> value;
    NdArray<T> grad;  // allocated on first use
    bool needs_grad = true;

    Variable(NdArray<T> v, bool ng) : value(std::move(v)), needs_grad(ng) {}

    NdArray<T>& ensure_grad() {
        if (grad.size() == 0) grad = NdArray<T>(value.shape());
        return grad;
    }
    bool has_grad() const { return grad.size() != 0; }
};

template <typename T>
using VarPtr = std::shared_ptr<Variable<T>>;

/// Records backward closures during the forward pass; replaying them in
/// reverse accumulates gradients. A non-recording tape runs forward only
/// (inference mode).
template <typename T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    VarPtr<T> leaf(NdArray<T> v, bool needs_grad = true) {
        return std::make_shared<Variable<T>>(std::move(v), needs_grad && recording_);
    }

    void push(std::function<void()> f) {
        if (recording_) ops_.push_back(std::move(f));
    }

    void backward(const VarPtr<T>& root) {
        if (!recording_) throw std::logic_error("Tape::backward: tape is not recording");
        if (root->value.size() != 1) throw std::invalid_argument("Tape::backward: root must be a scalar");
        root->ensure_grad().fill(T(1));
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    size_t num_ops() const { return ops_.size(); }

private:
    bool recording_;
    std::vector<std::function<void()>> ops_;
};

namespace detail {

/// Cross-correlation of one {Z,Y,X} block with a 3x3x3 kernel, replicate
/// (clamp-to-edge) padding, same shape; the convention of the fixed Sobel
/// layer. Overwrites `outp`.
template <typename T>
inline void correlate3_block(const T* in, T* outp, int64_t dz, int64_t dy, int64_t dx, const NdArray<T>& kernel) {
    const int64_t s = dz * dy * dx;
    const int64_t plane = dy * dx;
    for (int64_t i = 0; i < s; ++i) outp[i] = T(0);
    auto clampi = [](int64_t v, int64_t n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    for (int64_t az = 0; az < 3; ++az)
        for (int64_t ay = 0; ay < 3; ++ay)
            for (int64_t ax = 0; ax < 3; ++ax) {
                const T w = kernel.at(az, ay, ax);
                if (w == T(0)) continue;
                const int64_t oz = az - 1, oy = ay - 1, ox = ax - 1;
                for (int64_t z = 0; z < dz; ++z) {
                    const int64_t zs = clampi(z + oz, dz);
                    for (int64_t y = 0; y < dy; ++y) {
                        const T* src = in + zs * plane + clampi(y + oy, dy) * dx;
                        T* dst = outp + z * plane + y * dx;
                        const int64_t x0 = std::max<int64_t>(0, -ox), x1 = std::min(dx, dx - ox);
                        for (int64_t x = x0; x < x1; ++x) dst[x] += w * src[x + ox];
                        for (int64_t x = 0; x < x0; ++x) dst[x] += w * src[clampi(x + ox, dx)];
                        for (int64_t x = x1; x < dx; ++x) dst[x] += w * src[clampi(x + ox, dx)];
                    }
                }
            }
}

/// Exact adjoint of correlate3_block under replicate padding: scatters
/// grad_out back through the clamped reads. Accumulates into grad_in.
template <typename T>
inline void correlate3_block_adjoint(const T* grad_out, T* grad_in, int64_t dz, int64_t dy, int64_t dx,
                                     const NdArray<T>& kernel) {
    const int64_t plane = dy * dx;
    auto clampi = [](int64_t v, int64_t n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    for (int64_t az = 0; az < 3; ++az)
        for (int64_t ay = 0; ay < 3; ++ay)
            for (int64_t ax = 0; ax < 3; ++ax) {
                const T w = kernel.at(az, ay, ax);
                if (w == T(0)) continue;
                const int64_t oz = az - 1, oy = ay - 1, ox = ax - 1;
                for (int64_t z = 0; z < dz; ++z) {
                    const int64_t zs = clampi(z + oz, dz);
                    for (int64_t y = 0; y < dy; ++y) {
                        const T* go = grad_out + z * plane + y * dx;
                        T* gi = grad_in + zs * plane + clampi(y + oy, dy) * dx;
                        const int64_t x0 = std::max<int64_t>(0, -ox), x1 = std::min(dx, dx - ox);
                        for (int64_t x = x0; x < x1; ++x) gi[x + ox] += w * go[x];
                        for (int64_t x = 0; x < x0; ++x) gi[clampi(x + ox, dx)] += w * go[x];
                        for (int64_t x = x1; x < dx; ++x) gi[clampi(x + ox, dx)] += w * go[x];
                    }
                }
            }
}

/// Dot product with fixed-width lane accumulation; vectorizes without
/// reassociating a single serial reduction, and stays deterministic.
template <typename T>
inline T lane_dot(const T* __restrict a, const T* __restrict b, int64_t n) {
    constexpr int64_t kLanes = 16;
    T lanes[kLanes] = {};
    int64_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (int64_t l = 0; l < kLanes; ++l) lanes[l] += a[i + l] * b[i + l];
    T acc = T(0);
    for (int64_t l = 0; l < kLanes; ++l) acc += lanes[l];
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
inline T lane_dot_strided(const T* __restrict a, int64_t stride, const T* __restrict b, int64_t n) {
    constexpr int64_t kLanes = 8;
    T lanes[kLanes] = {};
    int64_t i = 0;
    for (; i + kLanes <= n; i += kLanes)
        for (int64_t l = 0; l < kLanes; ++l) lanes[l] += a[(i + l) * stride] * b[i + l];
    T acc = T(0);
    for (int64_t l = 0; l < kLanes; ++l) acc += lanes[l];
    for (; i < n; ++i) acc += a[i * stride] * b[i];
    return acc;
}

/// Valid output index range [lo, hi] so that lo*stride + k - pad stays
/// inside [0, in_dim).
inline void conv_range(int64_t k, int64_t pad, int64_t stride, int64_t in_dim, int64_t out_dim, int64_t& lo,
                       int64_t& hi) {
    int64_t shift = k - pad;  // in = out*stride + shift
    lo = 0;
    if (shift < 0) lo = (-shift + stride - 1) / stride;
    hi = std::min(out_dim - 1, (in_dim - 1 - shift) / stride);
}

template <typename T>
inline void check_rank5(const NdArray<T>& x, const char* who) {
    if (x.rank() != 5) throw std::invalid_argument(std::string(who) + ": rank-5 tensor (N,C,Z,Y,X) required");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// raw kernels (value in, value out); the autograd wrappers sit on top
// ---------------------------------------------------------------------------

template <typename T>
inline NdArray<T> conv3d_forward(const NdArray<T>& x, const NdArray<T>& w, const NdArray<T>* bias, int64_t stride,
                                 int64_t pad) {
    detail::check_rank5(x, "conv3d");
    const int64_t n = x.dim(0), ci = x.dim(1), zi = x.dim(2), yi = x.dim(3), xi = x.dim(4);
    const int64_t co = w.dim(0), k = w.dim(2);
    if (w.rank() != 5 || w.dim(1) != ci || w.dim(3) != k || w.dim(4) != k)
        throw std::invalid_argument("conv3d: weight shape mismatch");
    const int64_t zo = (zi + 2 * pad - k) / stride + 1;
    const int64_t yo = (yi + 2 * pad - k) / stride + 1;
    const int64_t xo = (xi + 2 * pad - k) / stride + 1;

    NdArray<T> out({n, co, zo, yo, xo});
    const int64_t in_plane = yi * xi, out_plane = yo * xo;
    const int64_t in_ch = zi * in_plane, out_ch = zo * out_plane;
    for (int64_t in = 0; in < n; ++in)
        for (int64_t oc = 0; oc < co; ++oc) {
            T* ybase = out.data() + (in * co + oc) * out_ch;
            if (bias) {
                const T bv = (*bias)[oc];
                for (int64_t i = 0; i < out_ch; ++i) ybase[i] = bv;
            }
            for (int64_t ic = 0; ic < ci; ++ic) {
                const T* xbase = x.data() + (in * ci + ic) * in_ch;
                for (int64_t kz = 0; kz < k; ++kz)
                    for (int64_t ky = 0; ky < k; ++ky)
                        for (int64_t kx = 0; kx < k; ++kx) {
                            const T wv = w.at(oc, ic, kz, ky, kx);
                            if (wv == T(0)) continue;
                            int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                            detail::conv_range(kz, pad, stride, zi, zo, zlo, zhi);
                            detail::conv_range(ky, pad, stride, yi, yo, ylo, yhi);
                            detail::conv_range(kx, pad, stride, xi, xo, xlo, xhi);
                            const int64_t cnt = xhi - xlo + 1;
                            if (cnt <= 0) continue;
                            for (int64_t z = zlo; z <= zhi; ++z) {
                                const int64_t src_z = z * stride + kz - pad;
                                for (int64_t y = ylo; y <= yhi; ++y) {
                                    const int64_t src_y = y * stride + ky - pad;
                                    const T* __restrict xrow = xbase + src_z * in_plane + src_y * xi + (xlo * stride + kx - pad);
                                    T* __restrict yrow = ybase + z * out_plane + y * xo + xlo;
                                    if (stride == 1) {
                                        for (int64_t i = 0; i < cnt; ++i) yrow[i] += wv * xrow[i];
                                    } else {
                                        for (int64_t i = 0; i < cnt; ++i) yrow[i] += wv * xrow[i * stride];
                                    }
                                }
                            }
                        }
            }
        }
    return out;
}

template <typename T>
inline void conv3d_backward(const NdArray<T>& x, const NdArray<T>& w, const NdArray<T>& grad_out, int64_t stride,
                            int64_t pad, NdArray<T>* grad_x, NdArray<T>* grad_w, NdArray<T>* grad_b) {
    const int64_t n = x.dim(0), ci = x.dim(1), zi = x.dim(2), yi = x.dim(3), xi = x.dim(4);
    const int64_t co = w.dim(0), k = w.dim(2);
    const int64_t zo = grad_out.dim(2), yo = grad_out.dim(3), xo = grad_out.dim(4);
    const int64_t in_plane = yi * xi, out_plane = yo * xo;
    const int64_t in_ch = zi * in_plane, out_ch = zo * out_plane;

    if (grad_b) {
        for (int64_t in = 0; in < n; ++in)
            for (int64_t oc = 0; oc < co; ++oc) {
                const T* gy = grad_out.data() + (in * co + oc) * out_ch;
                T acc = T(0);
                for (int64_t i = 0; i < out_ch; ++i) acc += gy[i];
                (*grad_b)[oc] += acc;
            }
    }

    for (int64_t kz = 0; kz < k; ++kz)
        for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx) {
                int64_t zlo, zhi, ylo, yhi, xlo, xhi;
                detail::conv_range(kz, pad, stride, zi, zo, zlo, zhi);
                detail::conv_range(ky, pad, stride, yi, yo, ylo, yhi);
                detail::conv_range(kx, pad, stride, xi, xo, xlo, xhi);
                const int64_t cnt = xhi - xlo + 1;
                if (cnt <= 0) continue;
                for (int64_t in = 0; in < n; ++in)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* gybase = grad_out.data() + (in * co + oc) * out_ch;
                        for (int64_t ic = 0; ic < ci; ++ic) {
                            const T wv = w.at(oc, ic, kz, ky, kx);
                            const int64_t xoff = xlo * stride + kx - pad;
                            T* gxbase = grad_x ? grad_x->data() + (in * ci + ic) * in_ch : nullptr;
                            const T* xbase = grad_w ? x.data() + (in * ci + ic) * in_ch : nullptr;
                            T wacc = T(0);
                            for (int64_t z = zlo; z <= zhi; ++z) {
                                const int64_t src_z = z * stride + kz - pad;
                                for (int64_t y = ylo; y <= yhi; ++y) {
                                    const int64_t src_y = y * stride + ky - pad;
                                    const T* __restrict gyrow = gybase + z * out_plane + y * xo + xlo;
                                    const int64_t in_off = src_z * in_plane + src_y * xi + xoff;
                                    if (gxbase) {
                                        T* __restrict gxrow = gxbase + in_off;
                                        if (stride == 1) {
                                            for (int64_t i = 0; i < cnt; ++i) gxrow[i] += wv * gyrow[i];
                                        } else {
                                            for (int64_t i = 0; i < cnt; ++i) gxrow[i * stride] += wv * gyrow[i];
                                        }
                                    }
                                    if (xbase) {
                                        const T* __restrict xrow = xbase + in_off;
                                        if (stride == 1) {
                                            wacc += detail::lane_dot(xrow, gyrow, cnt);
                                        } else {
                                            wacc += detail::lane_dot_strided(xrow, stride, gyrow, cnt);
                                        }
                                    }
                                }
                            }
                            if (grad_w) grad_w->at(oc, ic, kz, ky, kx) += wacc;
                        }
                    }
            }
}

/// Transposed convolution, kernel 2, stride 2 (doubles each spatial dim).
/// Weight layout (Ci, Co, 2, 2, 2).
template <typename T>
inline NdArray<T> conv_transpose3d_forward(const NdArray<T>& x, const NdArray<T>& w, const NdArray<T>* bias) {
    detail::check_rank5(x, "conv_transpose3d");
    const int64_t n = x.dim(0), ci = x.dim(1), zi = x.dim(2), yi = x.dim(3), xi = x.dim(4);
    if (w.rank() != 5 || w.dim(0) != ci || w.dim(2) != 2 || w.dim(3) != 2 || w.dim(4) != 2)
        throw std::invalid_argument("conv_transpose3d: weight shape mismatch");
    const int64_t co = w.dim(1);
    const int64_t zo = zi * 2, yo = yi * 2, xo = xi * 2;
    NdArray<T> out({n, co, zo, yo, xo});
    const int64_t in_plane = yi * xi, out_plane = yo * xo;
    const int64_t in_ch = zi * in_plane, out_ch = zo * out_plane;

    for (int64_t in = 0; in < n; ++in)
        for (int64_t oc = 0; oc < co; ++oc) {
            T* ybase = out.data() + (in * co + oc) * out_ch;
            if (bias) {
                const T bv = (*bias)[oc];
                for (int64_t i = 0; i < out_ch; ++i) ybase[i] = bv;
            }
            for (int64_t ic = 0; ic < ci; ++ic) {
                const T* xbase = x.data() + (in * ci + ic) * in_ch;
                for (int64_t kz = 0; kz < 2; ++kz)
                    for (int64_t ky = 0; ky < 2; ++ky)
                        for (int64_t kx = 0; kx < 2; ++kx) {
                            const T wv = w.at(ic, oc, kz, ky, kx);
                            for (int64_t z = 0; z < zi; ++z)
                                for (int64_t y = 0; y < yi; ++y) {
                                    const T* __restrict xrow = xbase + z * in_plane + y * xi;
                                    T* __restrict yrow = ybase + (2 * z + kz) * out_plane + (2 * y + ky) * xo + kx;
                                    for (int64_t i = 0; i < xi; ++i) yrow[2 * i] += wv * xrow[i];
                                }
                        }
            }
        }
    return out;
}

template <typename T>
inline void conv_transpose3d_backward(const NdArray<T>& x, const NdArray<T>& w, const NdArray<T>& grad_out,
                                      NdArray<T>* grad_x, NdArray<T>* grad_w, NdArray<T>* grad_b) {
    const int64_t n = x.dim(0), ci = x.dim(1), zi = x.dim(2), yi = x.dim(3), xi = x.dim(4);
    const int64_t co = w.dim(1);
    const int64_t zo = zi * 2, yo = yi * 2, xo = xi * 2;
    const int64_t in_plane = yi * xi, out_plane = yo * xo;
    const int64_t in_ch = zi * in_plane, out_ch = zo * out_plane;

    for (int64_t in = 0; in < n; ++in)
        for (int64_t oc = 0; oc < co; ++oc) {
            const T* gybase = grad_out.data() + (in * co + oc) * out_ch;
            if (grad_b) {
                T acc = T(0);
                for (int64_t i = 0; i < out_ch; ++i) acc += gybase[i];
                (*grad_b)[oc] += acc;
            }
            for (int64_t ic = 0; ic < ci; ++ic) {
                const T* xbase = x.data() + (in * ci + ic) * in_ch;
                T* gxbase = grad_x ? grad_x->data() + (in * ci + ic) * in_ch : nullptr;
                for (int64_t kz = 0; kz < 2; ++kz)
                    for (int64_t ky = 0; ky < 2; ++ky)
                        for (int64_t kx = 0; kx < 2; ++kx) {
                            const T wv = w.at(ic, oc, kz, ky, kx);
                            T wacc = T(0);
                            for (int64_t z = 0; z < zi; ++z)
                                for (int64_t y = 0; y < yi; ++y) {
                                    const T* __restrict gyrow = gybase + (2 * z + kz) * out_plane + (2 * y + ky) * xo + kx;
                                    const int64_t row = z * in_plane + y * xi;
                                    if (gxbase) {
                                        T* __restrict gxrow = gxbase + row;
                                        for (int64_t i = 0; i < xi; ++i) gxrow[i] += wv * gyrow[2 * i];
                                    }
                                    if (grad_w) {
                                        const T* __restrict xrow = xbase + row;
                                        wacc += detail::lane_dot_strided(gyrow, 2, xrow, xi);
                                    }
                                }
                            if (grad_w) grad_w->at(ic, oc, kz, ky, kx) += wacc;
                        }
            }
        }
}

// ---------------------------------------------------------------------------
// autograd ops
// ---------------------------------------------------------------------------

template <typename T>
inline VarPtr<T> conv3d(Tape<T>& tape, const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b, int64_t stride,
                        int64_t pad) {
    NdArray<T> y = conv3d_forward(x->value, w->value, b ? &b->value : nullptr, stride, pad);
    bool ng = tape.recording() && (x->needs_grad || w->needs_grad || (b && b->needs_grad));
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([x, w, b, out, stride, pad]() {
            if (!out->has_grad()) return;
            conv3d_backward(x->value, w->value, out->grad, stride, pad,
                            x->needs_grad ? &x->ensure_grad() : nullptr,
                            w->needs_grad ? &w->ensure_grad() : nullptr,
                            (b && b->needs_grad) ? &b->ensure_grad() : nullptr);
        });
    }
    return out;
}

template <typename T>
inline VarPtr<T> conv_transpose3d(Tape<T>& tape, const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
    NdArray<T> y = conv_transpose3d_forward(x->value, w->value, b ? &b->value : nullptr);
    bool ng = tape.recording() && (x->needs_grad || w->needs_grad || (b && b->needs_grad));
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([x, w, b, out]() {
            if (!out->has_grad()) return;
            conv_transpose3d_backward(x->value, w->value, out->grad,
                                      x->needs_grad ? &x->ensure_grad() : nullptr,
                                      w->needs_grad ? &w->ensure_grad() : nullptr,
                                      (b && b->needs_grad) ? &b->ensure_grad() : nullptr);
        });
    }
    return out;
}

/// Instance normalization over the spatial dims of each (sample, channel),
/// with per-channel affine parameters.
template <typename T>
inline VarPtr<T> instance_norm(Tape<T>& tape, const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                               double eps = 1e-5) {
    detail::check_rank5(x->value, "instance_norm");
    const int64_t n = x->value.dim(0), c = x->value.dim(1);
    const int64_t s = x->value.dim(2) * x->value.dim(3) * x->value.dim(4);

    auto xhat = std::make_shared<NdArray<T>>(x->value.shape());
    auto invstd = std::make_shared<std::vector<double>>(size_t(n * c));
    NdArray<T> y(x->value.shape());

    for (int64_t in = 0; in < n; ++in)
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* xb = x->value.data() + (in * c + ch) * s;
            T* xh = xhat->data() + (in * c + ch) * s;
            T* yb = y.data() + (in * c + ch) * s;
            double sum = 0.0, sum2 = 0.0;
            for (int64_t i = 0; i < s; ++i) {
                sum += double(xb[i]);
                sum2 += double(xb[i]) * double(xb[i]);
            }
            const double mean = sum / double(s);
            const double var = std::max(0.0, sum2 / double(s) - mean * mean);
            const double istd = 1.0 / std::sqrt(var + eps);
            (*invstd)[size_t(in * c + ch)] = istd;
            const T g = gamma->value[ch], bta = beta->value[ch];
            for (int64_t i = 0; i < s; ++i) {
                xh[i] = T((double(xb[i]) - mean) * istd);
                yb[i] = g * xh[i] + bta;
            }
        }

    bool ng = tape.recording() && (x->needs_grad || gamma->needs_grad || beta->needs_grad);
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([x, gamma, beta, out, xhat, invstd, n, c, s]() {
            if (!out->has_grad()) return;
            NdArray<T>* gx = x->needs_grad ? &x->ensure_grad() : nullptr;
            NdArray<T>* gg = gamma->needs_grad ? &gamma->ensure_grad() : nullptr;
            NdArray<T>* gb = beta->needs_grad ? &beta->ensure_grad() : nullptr;
            for (int64_t in = 0; in < n; ++in)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T* gy = out->grad.data() + (in * c + ch) * s;
                    const T* xh = xhat->data() + (in * c + ch) * s;
                    if (gg || gb) {
                        double ag = 0.0, ab = 0.0;
                        for (int64_t i = 0; i < s; ++i) {
                            ag += double(gy[i]) * double(xh[i]);
                            ab += double(gy[i]);
                        }
                        if (gg) (*gg)[ch] += T(ag);
                        if (gb) (*gb)[ch] += T(ab);
                    }
                    if (gx) {
                        const double g = double(gamma->value[ch]);
                        const double istd = (*invstd)[size_t(in * c + ch)];
                        double m1 = 0.0, m2 = 0.0;  // mean(gxhat), mean(gxhat*xhat)
                        for (int64_t i = 0; i < s; ++i) {
                            const double gxh = double(gy[i]) * g;
                            m1 += gxh;
                            m2 += gxh * double(xh[i]);
                        }
                        m1 /= double(s);
                        m2 /= double(s);
                        T* gxp = gx->data() + (in * c + ch) * s;
                        for (int64_t i = 0; i < s; ++i) {
                            const double gxh = double(gy[i]) * g;
                            gxp[i] += T(istd * (gxh - m1 - double(xh[i]) * m2));
                        }
                    }
                }
        });
    }
    return out;
}

template <typename T>
inline VarPtr<T> leaky_relu(Tape<T>& tape, const VarPtr<T>& x, T slope = T(0.01)) {
    NdArray<T> y(x->value.shape());
    for (int64_t i = 0; i < y.size(); ++i) {
        const T v = x->value[i];
        y[i] = v > T(0) ? v : slope * v;
    }
    bool ng = tape.recording() && x->needs_grad;
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([x, out, slope]() {
            if (!out->has_grad()) return;
            NdArray<T>& gx = x->ensure_grad();
            for (int64_t i = 0; i < gx.size(); ++i)
                gx[i] += out->grad[i] * (x->value[i] > T(0) ? T(1) : slope);
        });
    }
    return out;
}

template <typename T>
inline VarPtr<T> sigmoid(Tape<T>& tape, const VarPtr<T>& x) {
    NdArray<T> y(x->value.shape());
    for (int64_t i = 0; i < y.size(); ++i) y[i] = T(1.0 / (1.0 + std::exp(-double(x->value[i]))));
    bool ng = tape.recording() && x->needs_grad;
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([x, out]() {
            if (!out->has_grad()) return;
            NdArray<T>& gx = x->ensure_grad();
            for (int64_t i = 0; i < gx.size(); ++i) {
                const T s = out->value[i];
                gx[i] += out->grad[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <typename T>
inline VarPtr<T> concat_channels(Tape<T>& tape, const VarPtr<T>& a, const VarPtr<T>& b) {
    detail::check_rank5(a->value, "concat_channels");
    detail::check_rank5(b->value, "concat_channels");
    for (int d : {0, 2, 3, 4})
        if (a->value.dim(d) != b->value.dim(d))
            throw std::invalid_argument("concat_channels: shape mismatch " + a->value.shape_string() + " vs " +
                                        b->value.shape_string());
    const int64_t n = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
    const int64_t s = a->value.dim(2) * a->value.dim(3) * a->value.dim(4);
    NdArray<T> y({n, ca + cb, a->value.dim(2), a->value.dim(3), a->value.dim(4)});
    for (int64_t in = 0; in < n; ++in) {
        std::copy(a->value.data() + in * ca * s, a->value.data() + (in + 1) * ca * s,
                  y.data() + in * (ca + cb) * s);
        std::copy(b->value.data() + in * cb * s, b->value.data() + (in + 1) * cb * s,
                  y.data() + (in * (ca + cb) + ca) * s);
    }
    bool ng = tape.recording() && (a->needs_grad || b->needs_grad);
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([a, b, out, n, ca, cb, s]() {
            if (!out->has_grad()) return;
            for (int64_t in = 0; in < n; ++in) {
                if (a->needs_grad) {
                    T* ga = a->ensure_grad().data() + in * ca * s;
                    const T* gy = out->grad.data() + in * (ca + cb) * s;
                    for (int64_t i = 0; i < ca * s; ++i) ga[i] += gy[i];
                }
                if (b->needs_grad) {
                    T* gb = b->ensure_grad().data() + in * cb * s;
                    const T* gy = out->grad.data() + (in * (ca + cb) + ca) * s;
                    for (int64_t i = 0; i < cb * s; ++i) gb[i] += gy[i];
                }
            }
        });
    }
    return out;
}

template <typename T>
inline VarPtr<T> multiply(Tape<T>& tape, const VarPtr<T>& a, const VarPtr<T>& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("multiply: shape mismatch");
    NdArray<T> y(a->value.shape());
    for (int64_t i = 0; i < y.size(); ++i) y[i] = a->value[i] * b->value[i];
    bool ng = tape.recording() && (a->needs_grad || b->needs_grad);
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([a, b, out]() {
            if (!out->has_grad()) return;
            if (a->needs_grad) {
                NdArray<T>& ga = a->ensure_grad();
                for (int64_t i = 0; i < ga.size(); ++i) ga[i] += out->grad[i] * b->value[i];
            }
            if (b->needs_grad) {
                NdArray<T>& gb = b->ensure_grad();
                for (int64_t i = 0; i < gb.size(); ++i) gb[i] += out->grad[i] * a->value[i];
            }
        });
    }
    return out;
}

/// Elementwise sum(coeff_i * var_i) over same-shape inputs. Serves both the
/// per-depth output fusion (coeffs 1/N) and the signed loss total.
template <typename T>
inline VarPtr<T> affine_combine(Tape<T>& tape, const std::vector<VarPtr<T>>& vars, const std::vector<T>& coeffs) {
    if (vars.empty() || vars.size() != coeffs.size())
        throw std::invalid_argument("affine_combine: empty or mismatched inputs");
    for (const auto& v : vars)
        if (!v->value.same_shape(vars[0]->value)) throw std::invalid_argument("affine_combine: shape mismatch");
    NdArray<T> y(vars[0]->value.shape());
    for (size_t j = 0; j < vars.size(); ++j) {
        const T c = coeffs[j];
        for (int64_t i = 0; i < y.size(); ++i) y[i] += c * vars[j]->value[i];
    }
    bool ng = false;
    for (const auto& v : vars) ng = ng || v->needs_grad;
    ng = ng && tape.recording();
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([vars, coeffs, out]() {
            if (!out->has_grad()) return;
            for (size_t j = 0; j < vars.size(); ++j) {
                if (!vars[j]->needs_grad) continue;
                NdArray<T>& g = vars[j]->ensure_grad();
                const T c = coeffs[j];
                for (int64_t i = 0; i < g.size(); ++i) g[i] += c * out->grad[i];
            }
        });
    }
    return out;
}

/// Per-channel Sobel boundary magnitude with the fixed kernel set; no
/// trainable parameters. Input and output are (N,C,Z,Y,X).
template <typename T>
inline VarPtr<T> sobel_magnitude(Tape<T>& tape, const VarPtr<T>& x) {
    detail::check_rank5(x->value, "sobel_magnitude");
    static const SobelKernelSet kset = make_sobel_kernels();
    const NdArray<T> kx = kset.kx.template cast<T>(), ky = kset.ky.template cast<T>(), kz = kset.kz.template cast<T>();

    const int64_t n = x->value.dim(0), c = x->value.dim(1);
    const int64_t dz = x->value.dim(2), dy = x->value.dim(3), dx = x->value.dim(4);
    const int64_t s = dz * dy * dx;

    auto g1 = std::make_shared<NdArray<T>>(x->value.shape());
    auto g2 = std::make_shared<NdArray<T>>(x->value.shape());
    auto g3 = std::make_shared<NdArray<T>>(x->value.shape());
    NdArray<T> mag(x->value.shape());
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* in = x->value.data() + nc * s;
        detail::correlate3_block(in, g1->data() + nc * s, dz, dy, dx, kx);
        detail::correlate3_block(in, g2->data() + nc * s, dz, dy, dx, ky);
        detail::correlate3_block(in, g3->data() + nc * s, dz, dy, dx, kz);
    }
    for (int64_t i = 0; i < mag.size(); ++i) {
        const T a = (*g1)[i], b = (*g2)[i], d = (*g3)[i];
        mag[i] = T(std::sqrt(double(a) * double(a) + double(b) * double(b) + double(d) * double(d)));
    }

    bool ng = tape.recording() && x->needs_grad;
    auto out = std::make_shared<Variable<T>>(std::move(mag), ng);
    if (ng) {
        tape.push([x, out, g1, g2, g3, kx, ky, kz, n, c, s, dz, dy, dx]() {
            if (!out->has_grad()) return;
            NdArray<T>& gx = x->ensure_grad();
            NdArray<T> t(x->value.shape());
            const std::shared_ptr<NdArray<T>> gs[3] = {g1, g2, g3};
            const NdArray<T>* kerns[3] = {&kx, &ky, &kz};
            for (int axis = 0; axis < 3; ++axis) {
                // d(mag)/d(g_axis) = g_axis / mag, zero where mag == 0
                for (int64_t i = 0; i < t.size(); ++i) {
                    const T m = out->value[i];
                    t[i] = m > T(0) ? out->grad[i] * (*gs[axis])[i] / m : T(0);
                }
                for (int64_t nc = 0; nc < n * c; ++nc)
                    detail::correlate3_block_adjoint(t.data() + nc * s, gx.data() + nc * s, dz, dy, dx,
                                                     *kerns[axis]);
            }
        });
    }
    return out;
}

/// Soft Dice score as a scalar graph node (target is a constant).
template <typename T>
inline VarPtr<T> dice_score_op(Tape<T>& tape, const VarPtr<T>& pred, std::shared_ptr<NdArray<T>> target) {
    T v = dice_score_soft(pred->value, *target);
    NdArray<T> y({1});
    y[0] = v;
    bool ng = tape.recording() && pred->needs_grad;
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([pred, target, out]() {
            if (!out->has_grad()) return;
            dice_score_soft_backward(pred->value, *target, out->grad[0], pred->ensure_grad());
        });
    }
    return out;
}

/// Mean binary cross-entropy as a scalar graph node.
template <typename T>
inline VarPtr<T> cross_entropy_op(Tape<T>& tape, const VarPtr<T>& pred, std::shared_ptr<NdArray<T>> target) {
    T v = cross_entropy(pred->value, *target);
    NdArray<T> y({1});
    y[0] = v;
    bool ng = tape.recording() && pred->needs_grad;
    auto out = std::make_shared<Variable<T>>(std::move(y), ng);
    if (ng) {
        tape.push([pred, target, out]() {
            if (!out->has_grad()) return;
            cross_entropy_backward(pred->value, *target, out->grad[0], pred->ensure_grad());
        });
    }
    return out;
}

}  // namespace mdba::nn
