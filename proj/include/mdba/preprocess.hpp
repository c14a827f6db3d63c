#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "mdba/volume.hpp"

namespace mdba {

/// Z-score over the nonzero voxels; zero voxels stay zero so masked
/// background does not pollute the statistics. A constant input maps to
/// all zeros (degenerate variance).
inline Volume normalize_intensity(const Volume& v) {
    Volume out = v;
    double sum = 0.0, sum2 = 0.0;
    int64_t n = 0;
    for (int64_t i = 0; i < v.voxels.size(); ++i) {
        float x = v.voxels[i];
        if (x != 0.0f) {
            sum += x;
            sum2 += double(x) * double(x);
            ++n;
        }
    }
    if (n == 0) {
        out.voxels.fill(0.0f);
        return out;
    }
    double mean = sum / double(n);
    double var = sum2 / double(n) - mean * mean;
    if (var <= 0.0) {
        out.voxels.fill(0.0f);
        return out;
    }
    double inv_std = 1.0 / std::sqrt(var);
    for (int64_t i = 0; i < v.voxels.size(); ++i) {
        float x = v.voxels[i];
        out.voxels[i] = (x == 0.0f) ? 0.0f : static_cast<float>((x - mean) * inv_std);
    }
    return out;
}

/// Padding applied by pad_to_grid, recorded for inverse cropping. Content
/// is kept at the origin; padding is appended at the high end of each axis.
struct PadInfo {
    int64_t orig_nz = 0, orig_ny = 0, orig_nx = 0;
    int64_t pad_z = 0, pad_y = 0, pad_x = 0;
};

inline int64_t round_up(int64_t n, int64_t divisor) { return ((n + divisor - 1) / divisor) * divisor; }

/// Pad each dimension up to the next multiple of `divisor`, filling with the
/// input minimum so normalized volumes get no artificial bright border.
inline Volume pad_to_grid(const Volume& v, int64_t divisor, PadInfo* info = nullptr) {
    if (divisor < 1) throw std::invalid_argument("pad_to_grid: divisor must be >= 1");
    int64_t nz = v.nz(), ny = v.ny(), nx = v.nx();
    int64_t tz = round_up(nz, divisor), ty = round_up(ny, divisor), tx = round_up(nx, divisor);
    PadInfo pi{nz, ny, nx, tz - nz, ty - ny, tx - nx};
    if (info) *info = pi;
    if (tz == nz && ty == ny && tx == nx) return v;

    float pad_value = v.voxels[0];
    for (int64_t i = 1; i < v.voxels.size(); ++i) pad_value = std::min(pad_value, v.voxels[i]);

    Volume out;
    out.spacing = v.spacing;
    out.case_id = v.case_id;
    out.voxels = NdArray<float>({tz, ty, tx}, pad_value);
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y) {
            const float* src = &v.voxels.at(z, y, 0);
            float* dst = &out.voxels.at(z, y, 0);
            std::copy(src, src + nx, dst);
        }
    return out;
}

/// Same padding for a label map; pads with background.
inline LabelMap pad_to_grid(const LabelMap& l, int64_t divisor, PadInfo* info = nullptr) {
    if (divisor < 1) throw std::invalid_argument("pad_to_grid: divisor must be >= 1");
    int64_t nz = l.nz(), ny = l.ny(), nx = l.nx();
    int64_t tz = round_up(nz, divisor), ty = round_up(ny, divisor), tx = round_up(nx, divisor);
    PadInfo pi{nz, ny, nx, tz - nz, ty - ny, tx - nx};
    if (info) *info = pi;
    if (tz == nz && ty == ny && tx == nx) return l;
    LabelMap out;
    out.spacing = l.spacing;
    out.labels = NdArray<uint8_t>({tz, ty, tx}, kBackgroundLabel);
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y) {
            const uint8_t* src = &l.labels.at(z, y, 0);
            uint8_t* dst = &out.labels.at(z, y, 0);
            std::copy(src, src + nx, dst);
        }
    return out;
}

template <typename T>
inline NdArray<T> crop_to_original(const NdArray<T>& padded, const PadInfo& info) {
    if (padded.rank() != 3) throw std::invalid_argument("crop_to_original: rank-3 array required");
    NdArray<T> out({info.orig_nz, info.orig_ny, info.orig_nx});
    for (int64_t z = 0; z < info.orig_nz; ++z)
        for (int64_t y = 0; y < info.orig_ny; ++y) {
            const T* src = &padded.at(z, y, 0);
            std::copy(src, src + info.orig_nx, &out.at(z, y, 0));
        }
    return out;
}

inline Volume crop_to_original(const Volume& padded, const PadInfo& info) {
    Volume out;
    out.spacing = padded.spacing;
    out.case_id = padded.case_id;
    out.voxels = crop_to_original(padded.voxels, info);
    return out;
}

}  // namespace mdba
