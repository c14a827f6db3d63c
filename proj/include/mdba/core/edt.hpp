#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "mdba/core/ndarray.hpp"
#include "mdba/volume.hpp"

namespace mdba {

inline constexpr double kEdtInf = 1e15;

namespace detail {

/// 1D squared-distance transform (lower-envelope algorithm) with grid
/// step `w`. `f` holds squared source values, `n` samples at positions i*w.
inline void edt_1d(const double* f, double* d, int64_t n, double w, std::vector<int64_t>& v,
                   std::vector<double>& z) {
    v.assign(size_t(n), 0);
    z.assign(size_t(n) + 1, 0.0);
    int64_t k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    for (int64_t q = 1; q < n; ++q) {
        double xq = double(q) * w;
        double s;
        while (true) {
            double xv = double(v[size_t(k)]) * w;
            s = ((f[q] + xq * xq) - (f[v[size_t(k)]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[size_t(k)] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        ++k;
        v[size_t(k)] = q;
        z[size_t(k)] = s;
        z[size_t(k) + 1] = kEdtInf;
    }
    k = 0;
    for (int64_t q = 0; q < n; ++q) {
        double xq = double(q) * w;
        while (z[size_t(k) + 1] < xq) ++k;
        double dx = xq - double(v[size_t(k)]) * w;
        d[q] = dx * dx + f[v[size_t(k)]];
    }
}

}  // namespace detail

/// Exact squared Euclidean distance (mm^2) from every voxel center to the
/// nearest voxel where `inside(flat_index)` is true, under anisotropic
/// spacing. All-empty masks yield kEdtInf everywhere.
template <typename Pred>
inline NdArray<double> edt_squared_mm(int64_t nz, int64_t ny, int64_t nx, const Spacing& spacing, Pred inside) {
    NdArray<double> d({nz, ny, nx});
    for (int64_t i = 0; i < d.size(); ++i) d[i] = inside(i) ? 0.0 : kEdtInf;

    std::vector<int64_t> v;
    std::vector<double> z;
    std::vector<double> f, g;

    // pass along x
    f.resize(size_t(nx));
    g.resize(size_t(nx));
    for (int64_t zz = 0; zz < nz; ++zz)
        for (int64_t yy = 0; yy < ny; ++yy) {
            double* row = &d.at(zz, yy, 0);
            for (int64_t x = 0; x < nx; ++x) f[size_t(x)] = row[x];
            detail::edt_1d(f.data(), g.data(), nx, spacing.sx, v, z);
            for (int64_t x = 0; x < nx; ++x) row[x] = g[size_t(x)];
        }
    // pass along y
    f.resize(size_t(ny));
    g.resize(size_t(ny));
    for (int64_t zz = 0; zz < nz; ++zz)
        for (int64_t x = 0; x < nx; ++x) {
            for (int64_t yy = 0; yy < ny; ++yy) f[size_t(yy)] = d.at(zz, yy, x);
            detail::edt_1d(f.data(), g.data(), ny, spacing.sy, v, z);
            for (int64_t yy = 0; yy < ny; ++yy) d.at(zz, yy, x) = g[size_t(yy)];
        }
    // pass along z
    f.resize(size_t(nz));
    g.resize(size_t(nz));
    for (int64_t yy = 0; yy < ny; ++yy)
        for (int64_t x = 0; x < nx; ++x) {
            for (int64_t zz = 0; zz < nz; ++zz) f[size_t(zz)] = d.at(zz, yy, x);
            detail::edt_1d(f.data(), g.data(), nz, spacing.sz, v, z);
            for (int64_t zz = 0; zz < nz; ++zz) d.at(zz, yy, x) = g[size_t(zz)];
        }
    return d;
}

inline NdArray<double> edt_squared_mm(const NdArray<uint8_t>& mask, const Spacing& spacing) {
    return edt_squared_mm(mask.dim(0), mask.dim(1), mask.dim(2), spacing,
                          [&](int64_t i) { return mask[i] != 0; });
}

}  // namespace mdba
