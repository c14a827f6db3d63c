#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "mdba/core/ndarray.hpp"

namespace mdba {

/// Voxel spacing in mm along the x, y, z axes.
struct Spacing {
    double sx = 1.0, sy = 1.0, sz = 1.0;

    bool valid() const { return sx > 0 && sy > 0 && sz > 0; }
    double voxel_volume_mm3() const { return sx * sy * sz; }
    bool approx_equal(const Spacing& o, double tol = 1e-6) const {
        return std::abs(sx - o.sx) <= tol && std::abs(sy - o.sy) <= tol && std::abs(sz - o.sz) <= tol;
    }
};

/// Label semantics shared across the project.
inline constexpr uint8_t kBackgroundLabel = 0;
inline constexpr uint8_t kLaLabel = 1;
inline constexpr uint8_t kScarLabel = 2;

/// 3D intensity image. Voxels are stored z-slowest / x-fastest, i.e. the
/// array shape is {nz, ny, nx}; voxel (x,y,z) sits at mm position
/// (x*sx, y*sy, z*sz).
struct Volume {
    NdArray<float> voxels;  // shape {nz, ny, nx}
    Spacing spacing;
    std::string case_id;

    int64_t nz() const { return voxels.dim(0); }
    int64_t ny() const { return voxels.dim(1); }
    int64_t nx() const { return voxels.dim(2); }

    void validate() const {
        if (voxels.rank() != 3) throw std::invalid_argument("Volume: voxels must be rank 3");
        if (!spacing.valid()) throw std::invalid_argument("Volume: spacing components must be > 0");
        for (int64_t i = 0; i < voxels.size(); ++i) {
            if (!std::isfinite(voxels[i]))
                throw std::invalid_argument("Volume '" + case_id + "': non-finite intensity at flat index " +
                                            std::to_string(i));
        }
    }
};

/// Integer labels over {0=background, 1=LA, 2=scar}, paired with a Volume.
struct LabelMap {
    NdArray<uint8_t> labels;  // shape {nz, ny, nx}
    Spacing spacing;

    int64_t nz() const { return labels.dim(0); }
    int64_t ny() const { return labels.dim(1); }
    int64_t nx() const { return labels.dim(2); }

    void validate() const {
        if (labels.rank() != 3) throw std::invalid_argument("LabelMap: labels must be rank 3");
        if (!spacing.valid()) throw std::invalid_argument("LabelMap: spacing components must be > 0");
        for (int64_t i = 0; i < labels.size(); ++i) {
            if (labels[i] > kScarLabel)
                throw std::invalid_argument("LabelMap: unknown label value " + std::to_string(int(labels[i])));
        }
    }

    void validate_paired(const Volume& v) const {
        validate();
        if (labels.shape() != v.voxels.shape()) {
            throw std::invalid_argument("LabelMap/Volume shape mismatch: " + labels.shape_string() + " vs " +
                                        v.voxels.shape_string());
        }
        if (!spacing.approx_equal(v.spacing))
            throw std::invalid_argument("LabelMap/Volume spacing mismatch");
    }
};

/// Activation block at one resolution level: shape {C, Z, Y, X}.
struct FeatureMap {
    NdArray<float> values;
    int level = 0;

    int64_t channels() const { return values.dim(0); }
};

}  // namespace mdba
