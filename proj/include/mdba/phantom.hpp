#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include "mdba/core/edt.hpp"
#include "mdba/core/ndarray.hpp"
#include "mdba/core/rng.hpp"
#include "mdba/volume.hpp"

namespace mdba {

/// Recipe for a desk-scale labeled volume: an ellipsoidal atrium with
/// blob-shaped scars confined to a shell around the atrial boundary.
struct PhantomSpec {
    uint64_t seed = 0;
    int64_t nx = 48, ny = 48, nz = 48;
    Spacing spacing{1.0, 1.0, 1.0};
    int n_scars = 4;
    double scar_radius_lo_mm = 2.0;
    double scar_radius_hi_mm = 5.0;
    double shell_thickness_mm = 3.0;
    double noise_sigma = 5.0;

    void validate() const {
        if (nx < 1 || ny < 1 || nz < 1) throw std::invalid_argument("phantom: shape components must be >= 1");
        if (!spacing.valid()) throw std::invalid_argument("phantom: spacing must be > 0");
        if (n_scars < 0) throw std::invalid_argument("phantom: n_scars must be >= 0");
        if (scar_radius_lo_mm <= 0 || scar_radius_hi_mm < scar_radius_lo_mm)
            throw std::invalid_argument("phantom: invalid scar radius range");
        if (shell_thickness_mm <= 0) throw std::invalid_argument("phantom: shell thickness must be > 0");
        if (noise_sigma < 0) throw std::invalid_argument("phantom: noise sigma must be >= 0");
    }
};

/// Exhaustive flood-fill component counter; the reference for everything
/// the production connected-component labeling claims. Returns component
/// voxel counts in descending order.
inline std::vector<int64_t> oracle_connected_components(const LabelMap& labels, int target_label,
                                                        int connectivity) {
    if (target_label < 1 || target_label > 2)
        throw std::invalid_argument("oracle_connected_components: target_label must be 1 or 2");
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw std::invalid_argument("oracle_connected_components: connectivity must be 6, 18 or 26");

    std::vector<std::array<int, 3>> offs;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (manhattan == 0) continue;
                if (connectivity == 6 && manhattan > 1) continue;
                if (connectivity == 18 && manhattan > 2) continue;
                offs.push_back({dz, dy, dx});
            }

    const int64_t nz = labels.nz(), ny = labels.ny(), nx = labels.nx();
    NdArray<uint8_t> seen({nz, ny, nx}, 0);
    std::vector<int64_t> sizes;
    std::deque<std::array<int64_t, 3>> queue;

    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                if (labels.labels.at(z, y, x) != target_label || seen.at(z, y, x)) continue;
                int64_t count = 0;
                seen.at(z, y, x) = 1;
                queue.push_back({z, y, x});
                while (!queue.empty()) {
                    auto [cz, cy, cx] = queue.front();
                    queue.pop_front();
                    ++count;
                    for (const auto& o : offs) {
                        int64_t pz = cz + o[0], py = cy + o[1], px = cx + o[2];
                        if (pz < 0 || pz >= nz || py < 0 || py >= ny || px < 0 || px >= nx) continue;
                        if (seen.at(pz, py, px) || labels.labels.at(pz, py, px) != target_label) continue;
                        seen.at(pz, py, px) = 1;
                        queue.push_back({pz, py, px});
                    }
                }
                sizes.push_back(count);
            }
    std::sort(sizes.begin(), sizes.end(), std::greater<int64_t>());
    return sizes;
}

/// Direct nested-loop cross-correlation with zero padding, "same" output
/// shape. Deliberately naive; the Sobel layer is checked against this.
template <typename T>
inline NdArray<T> oracle_convolve3d(const NdArray<T>& field, const NdArray<T>& kernel) {
    if (field.rank() != 3 || kernel.rank() != 3)
        throw std::invalid_argument("oracle_convolve3d: rank-3 arrays required");
    for (int a = 0; a < 3; ++a)
        if (kernel.dim(a) % 2 == 0) throw std::invalid_argument("oracle_convolve3d: kernel must be odd-sized");

    const int64_t nz = field.dim(0), ny = field.dim(1), nx = field.dim(2);
    const int64_t kz = kernel.dim(0), ky = kernel.dim(1), kx = kernel.dim(2);
    const int64_t cz = kz / 2, cy = ky / 2, cx = kx / 2;
    NdArray<T> out({nz, ny, nx});
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                double acc = 0.0;
                for (int64_t a = 0; a < kz; ++a)
                    for (int64_t b = 0; b < ky; ++b)
                        for (int64_t c = 0; c < kx; ++c) {
                            int64_t pz = z + a - cz, py = y + b - cy, px = x + c - cx;
                            if (pz < 0 || pz >= nz || py < 0 || py >= ny || px < 0 || px >= nx) continue;
                            acc += double(kernel.at(a, b, c)) * double(field.at(pz, py, px));
                        }
                out.at(z, y, x) = static_cast<T>(acc);
            }
    return out;
}

namespace detail {

/// Boundary of the LA mask: LA voxels with a face neighbor outside the mask.
inline NdArray<uint8_t> la_boundary_mask(const NdArray<uint8_t>& la) {
    const int64_t nz = la.dim(0), ny = la.dim(1), nx = la.dim(2);
    NdArray<uint8_t> b({nz, ny, nx}, 0);
    const std::array<std::array<int, 3>, 6> face{{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                if (!la.at(z, y, x)) continue;
                for (const auto& o : face) {
                    int64_t pz = z + o[0], py = y + o[1], px = x + o[2];
                    bool outside = pz < 0 || pz >= nz || py < 0 || py >= ny || px < 0 || px >= nx || !la.at(pz, py, px);
                    if (outside) {
                        b.at(z, y, x) = 1;
                        break;
                    }
                }
            }
    return b;
}

}  // namespace detail

/// Deterministic per seed: identical spec gives bitwise identical outputs.
inline std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    const int64_t nz = spec.nz, ny = spec.ny, nx = spec.nx;
    const double sx = spec.spacing.sx, sy = spec.spacing.sy, sz = spec.spacing.sz;
    const double ex = double(nx) * sx, ey = double(ny) * sy, ez = double(nz) * sz;
    const double max_sp = std::max({sx, sy, sz});

    const double margin = spec.shell_thickness_mm + 2.0 * max_sp;
    const double avail = 0.5 * std::min({ex, ey, ez}) - margin;
    if (avail <= 2.0 * max_sp)
        throw std::runtime_error("phantom: shape too small for requested geometry (need > " +
                                 std::to_string(2.0 * (margin + 2.0 * max_sp)) + " mm extent per axis)");

    const double cx = 0.5 * ex + rng.uniform(-0.04, 0.04) * ex;
    const double cy = 0.5 * ey + rng.uniform(-0.04, 0.04) * ey;
    const double cz = 0.5 * ez + rng.uniform(-0.04, 0.04) * ez;
    const double ax = avail * rng.uniform(0.62, 0.88);
    const double ay = avail * rng.uniform(0.62, 0.88);
    const double az = avail * rng.uniform(0.62, 0.88);

    NdArray<uint8_t> la({nz, ny, nx}, 0);
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                double dx = (double(x) * sx - cx) / ax;
                double dy = (double(y) * sy - cy) / ay;
                double dz = (double(z) * sz - cz) / az;
                if (dx * dx + dy * dy + dz * dz <= 1.0) la.at(z, y, x) = 1;
            }

    NdArray<uint8_t> boundary = detail::la_boundary_mask(la);
    std::vector<std::array<int64_t, 3>> boundary_voxels;
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x)
                if (boundary.at(z, y, x)) boundary_voxels.push_back({z, y, x});
    if (boundary_voxels.empty()) throw std::runtime_error("phantom: degenerate atrium (no boundary voxels)");

    NdArray<double> dist2 = edt_squared_mm(boundary, spec.spacing);
    const double shell2 = spec.shell_thickness_mm * spec.shell_thickness_mm;

    LabelMap labels;
    labels.spacing = spec.spacing;
    labels.labels = NdArray<uint8_t>({nz, ny, nx}, kBackgroundLabel);
    for (int64_t i = 0; i < la.size(); ++i)
        if (la[i]) labels.labels[i] = kLaLabel;

    // Scars: balls around boundary voxels, clipped to the boundary shell.
    std::vector<std::array<double, 3>> centers_mm;
    std::vector<double> radii;
    for (int s = 0; s < spec.n_scars; ++s) {
        double r = rng.uniform(spec.scar_radius_lo_mm, spec.scar_radius_hi_mm);
        bool placed = false;
        for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
            const auto& bv = boundary_voxels[size_t(rng.uniform_int(0, int64_t(boundary_voxels.size()) - 1))];
            std::array<double, 3> c{double(bv[0]) * sz, double(bv[1]) * sy, double(bv[2]) * sx};  // (z,y,x) mm
            bool ok = true;
            for (size_t j = 0; j < centers_mm.size(); ++j) {
                double dz = c[0] - centers_mm[j][0], dy = c[1] - centers_mm[j][1], dx = c[2] - centers_mm[j][2];
                double sep = std::sqrt(dz * dz + dy * dy + dx * dx);
                if (sep < r + radii[j] + 3.0 * max_sp) {
                    ok = false;
                    break;
                }
            }
            if (ok) {
                centers_mm.push_back(c);
                radii.push_back(r);
                placed = true;
            }
        }
        if (!placed) {
            // crowded geometry: place anyway, components may merge
            const auto& bv = boundary_voxels[size_t(rng.uniform_int(0, int64_t(boundary_voxels.size()) - 1))];
            centers_mm.push_back({double(bv[0]) * sz, double(bv[1]) * sy, double(bv[2]) * sx});
            radii.push_back(r);
        }
    }
    for (size_t s = 0; s < centers_mm.size(); ++s) {
        const auto& c = centers_mm[s];
        double r2 = radii[s] * radii[s];
        int64_t z0 = std::max<int64_t>(0, int64_t(std::floor((c[0] - radii[s]) / sz)));
        int64_t z1 = std::min<int64_t>(nz - 1, int64_t(std::ceil((c[0] + radii[s]) / sz)));
        int64_t y0 = std::max<int64_t>(0, int64_t(std::floor((c[1] - radii[s]) / sy)));
        int64_t y1 = std::min<int64_t>(ny - 1, int64_t(std::ceil((c[1] + radii[s]) / sy)));
        int64_t x0 = std::max<int64_t>(0, int64_t(std::floor((c[2] - radii[s]) / sx)));
        int64_t x1 = std::min<int64_t>(nx - 1, int64_t(std::ceil((c[2] + radii[s]) / sx)));
        for (int64_t z = z0; z <= z1; ++z)
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t x = x0; x <= x1; ++x) {
                    double dz = double(z) * sz - c[0], dy = double(y) * sy - c[1], dx = double(x) * sx - c[2];
                    if (dz * dz + dy * dy + dx * dx > r2) continue;
                    if (!la.at(z, y, x)) continue;             // scars live on the wall, inside the atrium
                    if (dist2.at(z, y, x) > shell2) continue;  // stay within the boundary shell
                    labels.labels.at(z, y, x) = kScarLabel;
                }
    }

    // Intensities: background < LA < scar, separated by well over 3 sigmas.
    const double base = 100.0;
    const double la_contrast = std::max(30.0, 4.0 * spec.noise_sigma);
    const double scar_contrast = la_contrast;
    Volume vol;
    vol.spacing = spec.spacing;
    vol.case_id = "phantom_" + std::to_string(spec.seed);
    vol.voxels = NdArray<float>({nz, ny, nx});
    for (int64_t i = 0; i < vol.voxels.size(); ++i) {
        double v = base;
        if (labels.labels[i] == kLaLabel) v += la_contrast;
        if (labels.labels[i] == kScarLabel) v += la_contrast + scar_contrast;
        if (spec.noise_sigma > 0) v += rng.normal(0.0, spec.noise_sigma);
        vol.voxels[i] = static_cast<float>(v);
    }
    return {std::move(vol), std::move(labels)};
}

}  // namespace mdba
