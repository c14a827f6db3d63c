#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdba/core/ndarray.hpp"
#include "mdba/volume.hpp"

namespace mdba {

enum class AttentionMode { raw, sigmoid };
enum class FusionMode { none, multiply, sobel };

inline std::string to_string(AttentionMode m) { return m == AttentionMode::raw ? "raw" : "sigmoid"; }
inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::none: return "none";
        case FusionMode::multiply: return "multiply";
        default: return "sobel";
    }
}
inline AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "raw") return AttentionMode::raw;
    if (s == "sigmoid") return AttentionMode::sigmoid;
    throw std::invalid_argument("unknown attention mode: " + s);
}
inline FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "none") return FusionMode::none;
    if (s == "multiply") return FusionMode::multiply;
    if (s == "sobel") return FusionMode::sobel;
    throw std::invalid_argument("unknown fusion mode: " + s);
}

/// The three fixed 3x3x3 derivative kernels. Storage order is (z,y,x);
/// kx differentiates along x, ky along y, kz along z. These are constants:
/// they are never registered as trainable parameters.
struct SobelKernelSet {
    NdArray<float> kx, ky, kz;
};

/// Separable construction: derivative (-1,0,+1) along the kernel's axis,
/// smoothing (1,2,1) along the other two.
inline SobelKernelSet make_sobel_kernels() {
    const float d[3] = {-1.0f, 0.0f, 1.0f};
    const float s[3] = {1.0f, 2.0f, 1.0f};
    SobelKernelSet k{NdArray<float>({3, 3, 3}), NdArray<float>({3, 3, 3}), NdArray<float>({3, 3, 3})};
    for (int64_t z = 0; z < 3; ++z)
        for (int64_t y = 0; y < 3; ++y)
            for (int64_t x = 0; x < 3; ++x) {
                k.kx.at(z, y, x) = s[z] * s[y] * d[x];
                k.ky.at(z, y, x) = s[z] * d[y] * s[x];
                k.kz.at(z, y, x) = d[z] * s[y] * s[x];
            }
    return k;
}

namespace detail {

/// Cross-correlation of one channel with a 3x3x3 kernel, replicate
/// (clamp-to-edge) padding, same output shape. Replication keeps flat
/// regions at exactly zero response all the way to the border, which the
/// fusion gate relies on; double accumulation keeps the zero-sum
/// cancellation exact. `in` and `out` are {Z,Y,X} blocks of `nz*ny*nx`.
inline void correlate3x3x3(const float* in, double* out, int64_t nz, int64_t ny, int64_t nx,
                           const NdArray<float>& kernel) {
    const int64_t plane = ny * nx;
    for (int64_t i = 0; i < nz * plane; ++i) out[i] = 0.0;
    auto clampi = [](int64_t v, int64_t n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    for (int64_t kz = 0; kz < 3; ++kz)
        for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
                const double w = kernel.at(kz, ky, kx);
                if (w == 0.0) continue;
                const int64_t dz = kz - 1, dy = ky - 1, dx = kx - 1;
                for (int64_t z = 0; z < nz; ++z) {
                    const int64_t zs = clampi(z + dz, nz);
                    for (int64_t y = 0; y < ny; ++y) {
                        const float* src = in + zs * plane + clampi(y + dy, ny) * nx;
                        double* dst = out + z * plane + y * nx;
                        // interior of the row is unclamped and contiguous
                        const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min<int64_t>(nx, nx - dx);
                        for (int64_t x = x0; x < x1; ++x) dst[x] += w * double(src[x + dx]);
                        for (int64_t x = 0; x < x0; ++x) dst[x] += w * double(src[clampi(x + dx, nx)]);
                        for (int64_t x = x1; x < nx; ++x) dst[x] += w * double(src[clampi(x + dx, nx)]);
                    }
                }
            }
}

/// Boundary magnitude for one channel: sqrt(gx^2 + gy^2 + gz^2). Scratch
/// buffers g[0..2] must each hold nz*ny*nx doubles.
inline void sobel_magnitude_channel(const float* in, float* out, int64_t nz, int64_t ny, int64_t nx,
                                    const SobelKernelSet& k, double* gx, double* gy, double* gz) {
    correlate3x3x3(in, gx, nz, ny, nx, k.kx);
    correlate3x3x3(in, gy, nz, ny, nx, k.ky);
    correlate3x3x3(in, gz, nz, ny, nx, k.kz);
    const int64_t n = nz * ny * nx;
    for (int64_t i = 0; i < n; ++i)
        out[i] = float(std::sqrt(gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]));
}

}  // namespace detail

/// Per-channel boundary response: convolve with the three fixed kernels and
/// combine directional responses into one Euclidean magnitude. Channel
/// count is preserved; output is everywhere >= 0.
inline FeatureMap sobel_response(const FeatureMap& f) {
    if (f.values.rank() != 4) throw std::invalid_argument("sobel_response: FeatureMap must be rank 4 (C,Z,Y,X)");
    static const SobelKernelSet kernels = make_sobel_kernels();
    const int64_t c = f.values.dim(0), nz = f.values.dim(1), ny = f.values.dim(2), nx = f.values.dim(3);
    const int64_t n = nz * ny * nx;
    FeatureMap out{NdArray<float>(f.values.shape()), f.level};
    std::vector<double> gx(static_cast<size_t>(n));
    std::vector<double> gy(static_cast<size_t>(n));
    std::vector<double> gz(static_cast<size_t>(n));
    for (int64_t ch = 0; ch < c; ++ch) {
        detail::sobel_magnitude_channel(f.values.data() + ch * n, out.values.data() + ch * n, nz, ny, nx, kernels,
                                        gx.data(), gy.data(), gz.data());
    }
    return out;
}

/// Normalize a boundary response into a gating map. raw keeps magnitudes
/// (unbounded, exactly zero on flat inputs); sigmoid maps into (0,1) with
/// 0.5 at zero response, which preserves gradient flow through the gate.
inline FeatureMap attention_map(const FeatureMap& response, AttentionMode mode) {
    FeatureMap out{NdArray<float>(response.values.shape()), response.level};
    if (mode == AttentionMode::raw) {
        for (int64_t i = 0; i < response.values.size(); ++i) out.values[i] = response.values[i];
    } else {
        for (int64_t i = 0; i < response.values.size(); ++i)
            out.values[i] = 1.0f / (1.0f + std::exp(-response.values[i]));
    }
    return out;
}

/// Sobel fusion: gate the scar decoder features with the LA boundary
/// attention, then concatenate the encoder skip. Channel count doubles.
/// fusion=multiply gates with the raw LA features; fusion=none is a plain
/// skip concatenation.
inline FeatureMap sfm(const FeatureMap& f_dec_scar, const FeatureMap& f_dec_la, const FeatureMap& f_enc_scar,
                      FusionMode fusion, AttentionMode attention) {
    if (f_dec_scar.values.rank() != 4 || f_dec_la.values.rank() != 4 || f_enc_scar.values.rank() != 4)
        throw std::invalid_argument("sfm: rank-4 feature maps required");
    if (f_dec_scar.level != f_dec_la.level || f_dec_scar.level != f_enc_scar.level)
        throw std::invalid_argument("sfm: inputs must share a resolution level");
    if (fusion != FusionMode::none && !f_dec_scar.values.same_shape(f_dec_la.values))
        throw std::invalid_argument("sfm: scar and LA decoder features must share shape");
    for (int a = 1; a < 4; ++a)
        if (f_dec_scar.values.dim(a) != f_enc_scar.values.dim(a))
            throw std::invalid_argument("sfm: encoder skip spatial shape mismatch");

    const int64_t c = f_dec_scar.values.dim(0);
    const int64_t ce = f_enc_scar.values.dim(0);
    const int64_t n = f_dec_scar.values.dim(1) * f_dec_scar.values.dim(2) * f_dec_scar.values.dim(3);

    NdArray<float> gated(f_dec_scar.values.shape());
    if (fusion == FusionMode::sobel) {
        FeatureMap a = attention_map(sobel_response(f_dec_la), attention);
        for (int64_t i = 0; i < gated.size(); ++i) gated[i] = f_dec_scar.values[i] * a.values[i];
    } else if (fusion == FusionMode::multiply) {
        for (int64_t i = 0; i < gated.size(); ++i) gated[i] = f_dec_scar.values[i] * f_dec_la.values[i];
    } else {
        for (int64_t i = 0; i < gated.size(); ++i) gated[i] = f_dec_scar.values[i];
    }

    FeatureMap out{NdArray<float>({c + ce, f_dec_scar.values.dim(1), f_dec_scar.values.dim(2),
                                   f_dec_scar.values.dim(3)}),
                   f_dec_scar.level};
    std::copy(gated.data(), gated.data() + c * n, out.values.data());
    std::copy(f_enc_scar.values.data(), f_enc_scar.values.data() + ce * n, out.values.data() + c * n);
    return out;
}

}  // namespace mdba
