#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "mdba/core/ndarray.hpp"
#include "mdba/metrics.hpp"
#include "mdba/png_io.hpp"
#include "mdba/volume.hpp"

namespace mdba {

/// Overlay palette; tests reference these to tell reference and prediction
/// contours apart.
struct OverlayColors {
    static constexpr std::array<uint8_t, 3> ref_la{60, 220, 60};      // green
    static constexpr std::array<uint8_t, 3> ref_scar{250, 220, 40};   // yellow
    static constexpr std::array<uint8_t, 3> pred_la{80, 140, 255};    // blue
    static constexpr std::array<uint8_t, 3> pred_scar{255, 70, 70};   // red
};

/// In-slice contour: mask pixels with a 4-neighbor outside the mask (image
/// borders count as outside).
inline NdArray<uint8_t> contour_mask(const NdArray<uint8_t>& slice) {
    if (slice.rank() != 2) throw std::invalid_argument("contour_mask: rank-2 mask required");
    const int64_t h = slice.dim(0), w = slice.dim(1);
    NdArray<uint8_t> out({h, w}, 0);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (!slice.at(y, x)) continue;
            bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1 || !slice.at(y - 1, x) || !slice.at(y + 1, x) ||
                        !slice.at(y, x - 1) || !slice.at(y, x + 1);
            if (edge) out.at(y, x) = 1;
        }
    return out;
}

namespace detail {

inline NdArray<uint8_t> label_slice(const NdArray<uint8_t>& labels, int64_t z, uint8_t which) {
    NdArray<uint8_t> s({labels.dim(1), labels.dim(2)});
    for (int64_t y = 0; y < labels.dim(1); ++y)
        for (int64_t x = 0; x < labels.dim(2); ++x) {
            uint8_t v = labels.at(z, y, x);
            s.at(y, x) = which == kScarLabel ? v == kScarLabel : v >= kLaLabel;
        }
    return s;
}

inline void paint_contour(RgbImage& img, const NdArray<uint8_t>& contour, int64_t zoom,
                          const std::array<uint8_t, 3>& rgb) {
    for (int64_t y = 0; y < contour.dim(0); ++y)
        for (int64_t x = 0; x < contour.dim(1); ++x) {
            if (!contour.at(y, x)) continue;
            img.fill_rect(x * zoom, y * zoom, zoom, zoom, rgb[0], rgb[1], rgb[2]);
        }
}

}  // namespace detail

/// One axial slice: grayscale image, reference contours, then prediction
/// contours on top, in distinct colors. Output is slice size times the
/// integer zoom.
inline RgbImage render_overlay(const Volume& vol, const LabelMap& reference, const LabelMap* prediction, int64_t z,
                               int64_t zoom = 2) {
    if (zoom < 1) throw std::invalid_argument("render_overlay: zoom must be >= 1");
    if (reference.labels.shape() != vol.voxels.shape())
        throw std::invalid_argument("render_overlay: reference/image shape mismatch");
    if (prediction && prediction->labels.shape() != vol.voxels.shape())
        throw std::invalid_argument("render_overlay: prediction/image shape mismatch");
    if (z < 0 || z >= vol.nz()) throw std::invalid_argument("render_overlay: slice index out of range");

    const int64_t h = vol.ny(), w = vol.nx();
    float lo = vol.voxels.at(z, 0, 0), hi = lo;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            float v = vol.voxels.at(z, y, x);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const float range = hi > lo ? hi - lo : 1.0f;

    RgbImage img(w * zoom, h * zoom);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            auto g = uint8_t(std::lround(255.0f * (vol.voxels.at(z, y, x) - lo) / range));
            img.fill_rect(x * zoom, y * zoom, zoom, zoom, g, g, g);
        }

    detail::paint_contour(img, contour_mask(detail::label_slice(reference.labels, z, kLaLabel)), zoom,
                          OverlayColors::ref_la);
    detail::paint_contour(img, contour_mask(detail::label_slice(reference.labels, z, kScarLabel)), zoom,
                          OverlayColors::ref_scar);
    if (prediction) {
        detail::paint_contour(img, contour_mask(detail::label_slice(prediction->labels, z, kLaLabel)), zoom,
                              OverlayColors::pred_la);
        detail::paint_contour(img, contour_mask(detail::label_slice(prediction->labels, z, kScarLabel)), zoom,
                              OverlayColors::pred_scar);
    }
    return img;
}

/// Slice with the most reference scar, falling back to the middle slice.
inline int64_t pick_overlay_slice(const LabelMap& reference) {
    int64_t best_z = reference.nz() / 2;
    int64_t best_count = 0;
    for (int64_t z = 0; z < reference.nz(); ++z) {
        int64_t c = 0;
        for (int64_t y = 0; y < reference.ny(); ++y)
            for (int64_t x = 0; x < reference.nx(); ++x)
                if (reference.labels.at(z, y, x) == kScarLabel) ++c;
        if (c > best_count) {
            best_count = c;
            best_z = z;
        }
    }
    return best_z;
}

/// Side-by-side count% / volume% bars per size bin.
inline RgbImage render_scar_histogram(const ScarSizeHistogram& h) {
    const int64_t bins = ScarSizeHistogram::kNumBins;
    const int64_t bar_w = 18, pair_gap = 10, margin = 24;
    const int64_t plot_h = 180;
    const int64_t width = margin * 2 + bins * (2 * bar_w + pair_gap) - pair_gap;
    const int64_t height = plot_h + margin * 2;
    RgbImage img(width, height);

    double max_pct = 1.0;
    for (int i = 0; i < bins; ++i) max_pct = std::max({max_pct, h.count_pct(i), h.volume_pct(i)});

    const int64_t base_y = height - margin;
    for (int64_t x = margin - 4; x < width - margin + 4; ++x) img.set(x, base_y, 60, 60, 60);
    for (int i = 0; i < bins; ++i) {
        const int64_t x0 = margin + i * (2 * bar_w + pair_gap);
        const int64_t hc = int64_t(std::lround(h.count_pct(i) / max_pct * double(plot_h)));
        const int64_t hv = int64_t(std::lround(h.volume_pct(i) / max_pct * double(plot_h)));
        img.fill_rect(x0, base_y - hc, bar_w, hc, 70, 120, 200);        // count share
        img.fill_rect(x0 + bar_w, base_y - hv, bar_w, hv, 235, 140, 50);  // volume share
    }
    return img;
}

}  // namespace mdba
