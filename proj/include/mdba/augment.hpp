#pragma once

#include <array>
#include <cmath>
#include <optional>

#include "mdba/core/ndarray.hpp"
#include "mdba/core/rng.hpp"
#include "mdba/volume.hpp"

namespace mdba {

struct AugmentOptions {
    bool rotation = true;
    bool scaling = true;
    bool elastic = true;
    bool gamma = true;
    bool mirror = true;

    double rot_max_deg = 15.0;
    double scale_lo = 0.85, scale_hi = 1.15;
    double gamma_lo = 0.7, gamma_hi = 1.5;
    double elastic_max_disp_voxels = 3.0;
    int64_t elastic_grid_voxels = 8;

    bool any() const { return rotation || scaling || elastic || gamma || mirror; }
    bool warping() const { return rotation || scaling || elastic; }
};

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;  // acts on (z,y,x) mm vectors

inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

inline Mat3 mat_identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline Mat3 mat_inverse(const Mat3& m) {
    const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                       m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                       m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    const double inv = 1.0 / det;
    Mat3 r;
    r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv;
    r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv;
    r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv;
    r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv;
    r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv;
    r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv;
    r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv;
    r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv;
    r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv;
    return r;
}

/// Rotation by `a` radians about the given axis (0=z,1=y,2=x of the
/// (z,y,x) coordinate frame).
inline Mat3 mat_rotation(int axis, double a) {
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r = mat_identity();
    const int i = (axis + 1) % 3, j = (axis + 2) % 3;
    r[i][i] = c;
    r[i][j] = -s;
    r[j][i] = s;
    r[j][j] = c;
    return r;
}

inline float sample_trilinear(const NdArray<float>& a, double z, double y, double x, float fill) {
    const int64_t nz = a.dim(0), ny = a.dim(1), nx = a.dim(2);
    if (z < -1 || y < -1 || x < -1 || z > double(nz) || y > double(ny) || x > double(nx)) return fill;
    const int64_t z0 = int64_t(std::floor(z)), y0 = int64_t(std::floor(y)), x0 = int64_t(std::floor(x));
    const double fz = z - double(z0), fy = y - double(y0), fx = x - double(x0);
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                if (w == 0.0) continue;
                const int64_t zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
                const double v = (zz < 0 || zz >= nz || yy < 0 || yy >= ny || xx < 0 || xx >= nx)
                                     ? double(fill)
                                     : double(a.at(zz, yy, xx));
                acc += w * v;
            }
    return float(acc);
}

inline uint8_t sample_nearest(const NdArray<uint8_t>& a, double z, double y, double x) {
    const int64_t zz = int64_t(std::lround(z)), yy = int64_t(std::lround(y)), xx = int64_t(std::lround(x));
    if (zz < 0 || zz >= a.dim(0) || yy < 0 || yy >= a.dim(1) || xx < 0 || xx >= a.dim(2)) return kBackgroundLabel;
    return a.at(zz, yy, xx);
}

}  // namespace detail

/// Smooth random displacement field stored on a coarse grid (voxel units),
/// upsampled trilinearly at lookup time.
struct DisplacementField {
    NdArray<float> dz, dy, dx;  // coarse grids
    int64_t grid_step = 8;

    std::array<double, 3> at(double z, double y, double x) const {
        const double gz = z / double(grid_step), gy = y / double(grid_step), gx = x / double(grid_step);
        return {double(detail::sample_trilinear(dz, gz, gy, gx, 0.0f)),
                double(detail::sample_trilinear(dy, gz, gy, gx, 0.0f)),
                double(detail::sample_trilinear(dx, gz, gy, gx, 0.0f))};
    }

    static DisplacementField random(int64_t nz, int64_t ny, int64_t nx, int64_t grid_step, double sigma_voxels,
                                    Rng& rng) {
        DisplacementField f;
        f.grid_step = grid_step;
        std::vector<int64_t> gshape{nz / grid_step + 2, ny / grid_step + 2, nx / grid_step + 2};
        f.dz = NdArray<float>(gshape);
        f.dy = NdArray<float>(gshape);
        f.dx = NdArray<float>(gshape);
        for (int64_t i = 0; i < f.dz.size(); ++i) f.dz[i] = float(rng.normal(0.0, sigma_voxels));
        for (int64_t i = 0; i < f.dy.size(); ++i) f.dy[i] = float(rng.normal(0.0, sigma_voxels));
        for (int64_t i = 0; i < f.dx.size(); ++i) f.dx[i] = float(rng.normal(0.0, sigma_voxels));
        return f;
    }
};

/// Apply the same spatial transform to image (trilinear) and labels
/// (nearest neighbor). Rotation/scaling act in physical mm about the
/// volume center; the displacement field adds voxel-space jitter.
inline std::pair<Volume, LabelMap> warp(const Volume& v, const LabelMap& l, const std::array<double, 3>& rot_rad,
                                        double scale, const DisplacementField* disp) {
    detail::Mat3 fwd = detail::mat_identity();
    fwd = detail::mat_mul(detail::mat_rotation(0, rot_rad[0]), fwd);
    fwd = detail::mat_mul(detail::mat_rotation(1, rot_rad[1]), fwd);
    fwd = detail::mat_mul(detail::mat_rotation(2, rot_rad[2]), fwd);
    for (auto& row : fwd)
        for (auto& m : row) m *= scale;
    const detail::Mat3 inv = detail::mat_inverse(fwd);

    const int64_t nz = v.nz(), ny = v.ny(), nx = v.nx();
    const double sz = v.spacing.sz, sy = v.spacing.sy, sx = v.spacing.sx;
    const double cz = 0.5 * double(nz - 1) * sz, cy = 0.5 * double(ny - 1) * sy, cx = 0.5 * double(nx - 1) * sx;

    float fill = v.voxels[0];
    for (int64_t i = 1; i < v.voxels.size(); ++i) fill = std::min(fill, v.voxels[i]);

    Volume ov;
    ov.spacing = v.spacing;
    ov.case_id = v.case_id;
    ov.voxels = NdArray<float>({nz, ny, nx});
    LabelMap ol;
    ol.spacing = l.spacing;
    ol.labels = NdArray<uint8_t>({nz, ny, nx});

    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                const double pz = double(z) * sz - cz, py = double(y) * sy - cy, px = double(x) * sx - cx;
                double qz = inv[0][0] * pz + inv[0][1] * py + inv[0][2] * px;
                double qy = inv[1][0] * pz + inv[1][1] * py + inv[1][2] * px;
                double qx = inv[2][0] * pz + inv[2][1] * py + inv[2][2] * px;
                double vz = (qz + cz) / sz, vy = (qy + cy) / sy, vx = (qx + cx) / sx;
                if (disp) {
                    auto d = disp->at(double(z), double(y), double(x));
                    vz += d[0];
                    vy += d[1];
                    vx += d[2];
                }
                ov.voxels.at(z, y, x) = detail::sample_trilinear(v.voxels, vz, vy, vx, fill);
                ol.labels.at(z, y, x) = detail::sample_nearest(l.labels, vz, vy, vx);
            }
    return {std::move(ov), std::move(ol)};
}

/// In-place flip along axis 0=z, 1=y, 2=x; an involution.
inline void mirror_axis(Volume& v, LabelMap* l, int axis) {
    const int64_t nz = v.nz(), ny = v.ny(), nx = v.nx();
    auto flip = [&](auto& arr) {
        using Elem = std::decay_t<decltype(arr[0])>;
        for (int64_t z = 0; z < nz; ++z)
            for (int64_t y = 0; y < ny; ++y)
                for (int64_t x = 0; x < nx; ++x) {
                    int64_t mz = axis == 0 ? nz - 1 - z : z;
                    int64_t my = axis == 1 ? ny - 1 - y : y;
                    int64_t mx = axis == 2 ? nx - 1 - x : x;
                    bool past_middle = (axis == 0 && z > mz) || (axis == 1 && y > my) || (axis == 2 && x > mx);
                    if (past_middle) continue;
                    if (z == mz && y == my && x == mx) continue;
                    Elem tmp = arr.at(z, y, x);
                    arr.at(z, y, x) = arr.at(mz, my, mx);
                    arr.at(mz, my, mx) = tmp;
                }
    };
    flip(v.voxels);
    if (l) flip(l->labels);
}

/// Gamma correction on the image only: rescale to [0,1], raise to the
/// exponent, rescale back. Labels are untouched by intensity transforms.
inline void apply_gamma(Volume& v, double exponent) {
    float lo = v.voxels[0], hi = v.voxels[0];
    for (int64_t i = 1; i < v.voxels.size(); ++i) {
        lo = std::min(lo, v.voxels[i]);
        hi = std::max(hi, v.voxels[i]);
    }
    if (hi <= lo) return;
    const double range = double(hi) - double(lo);
    for (int64_t i = 0; i < v.voxels.size(); ++i) {
        double u = (double(v.voxels[i]) - double(lo)) / range;
        v.voxels[i] = float(std::pow(u, exponent) * range + double(lo));
    }
}

/// On-the-fly augmentation: rotation + scaling + elastic warp, axis
/// mirroring, gamma correction, each gated by its switch. Identity (bitwise)
/// when every switch is off; deterministic for a given rng state.
inline std::pair<Volume, LabelMap> augment(const Volume& v, const LabelMap& l, const AugmentOptions& opt,
                                           Rng& rng) {
    if (!opt.any()) return {v, l};
    Volume ov = v;
    LabelMap ol = l;

    if (opt.warping()) {
        std::array<double, 3> rot{0, 0, 0};
        if (opt.rotation) {
            const double r = opt.rot_max_deg * M_PI / 180.0;
            for (auto& a : rot) a = rng.uniform(-r, r);
        }
        double scale = opt.scaling ? rng.uniform(opt.scale_lo, opt.scale_hi) : 1.0;
        std::optional<DisplacementField> disp;
        if (opt.elastic)
            disp = DisplacementField::random(v.nz(), v.ny(), v.nx(), opt.elastic_grid_voxels,
                                             opt.elastic_max_disp_voxels / 2.0, rng);
        auto warped = warp(ov, ol, rot, scale, disp ? &*disp : nullptr);
        ov = std::move(warped.first);
        ol = std::move(warped.second);
    }
    if (opt.mirror) {
        for (int axis = 0; axis < 3; ++axis)
            if (rng.bernoulli(0.5)) mirror_axis(ov, &ol, axis);
    }
    if (opt.gamma) apply_gamma(ov, rng.uniform(opt.gamma_lo, opt.gamma_hi));
    return {std::move(ov), std::move(ol)};
}

}  // namespace mdba
