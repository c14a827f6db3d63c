#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdba/volume.hpp"

namespace mdba {

namespace nifti {

// NIfTI-1 header, 348 bytes. Only the fields this project reads/writes are
// meaningful; the rest are zero on write and ignored on read.
#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;     // must be 348
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];         // dim[0]=rank, dim[1..3]=nx,ny,nz
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];        // pixdim[1..3] = sx,sy,sz in mm
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];          // "n+1\0" for single-file
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum DataType : int16_t {
    DT_UINT8 = 2,
    DT_INT16 = 4,
    DT_INT32 = 8,
    DT_FLOAT32 = 16,
    DT_FLOAT64 = 64,
    DT_UINT16 = 512,
};

inline void swap_bytes(void* p, size_t elem_size, size_t count) {
    auto* b = static_cast<unsigned char*>(p);
    for (size_t i = 0; i < count; ++i, b += elem_size) {
        for (size_t j = 0; j < elem_size / 2; ++j) std::swap(b[j], b[elem_size - 1 - j]);
    }
}

inline void swap_header(Nifti1Header& h) {
    swap_bytes(&h.sizeof_hdr, 4, 1);
    swap_bytes(h.dim, 2, 8);
    swap_bytes(&h.intent_p1, 4, 3);
    swap_bytes(&h.intent_code, 2, 4);
    swap_bytes(h.pixdim, 4, 8);
    swap_bytes(&h.vox_offset, 4, 3);
    swap_bytes(&h.slice_end, 2, 1);
    swap_bytes(&h.cal_max, 4, 4);
    swap_bytes(&h.glmax, 4, 2);
    swap_bytes(&h.qform_code, 2, 2);
    swap_bytes(&h.quatern_b, 4, 6 + 12);
}

/// Raw volume as stored on disk: float data plus spacing.
struct RawNifti {
    NdArray<float> data;  // shape {nz, ny, nx}
    Spacing spacing;
};

inline RawNifti read(const std::string& path) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("NIfTI file not found: " + path);
    gzFile f = gzopen(path.c_str(), "rb");  // handles both plain and gzip streams
    if (!f) throw std::runtime_error("cannot open NIfTI file: " + path);
    struct Closer {
        gzFile f;
        ~Closer() { gzclose(f); }
    } closer{f};

    Nifti1Header h{};
    if (gzread(f, &h, sizeof(h)) != static_cast<int>(sizeof(h)))
        throw std::runtime_error("truncated NIfTI header: " + path);

    bool swapped = false;
    if (h.sizeof_hdr != 348) {
        swap_header(h);
        swapped = true;
        if (h.sizeof_hdr != 348) throw std::runtime_error("not a NIfTI-1 file: " + path);
    }
    if (std::strncmp(h.magic, "n+1", 3) != 0)
        throw std::runtime_error("unsupported NIfTI magic (need single-file 'n+1'): " + path);

    int rank = h.dim[0];
    if (rank < 3 || rank > 7) throw std::runtime_error("unsupported NIfTI rank " + std::to_string(rank) + ": " + path);
    for (int i = 4; i <= rank; ++i) {
        if (h.dim[i] > 1) throw std::runtime_error("only 3D NIfTI volumes are supported: " + path);
    }
    int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
    if (nx < 1 || ny < 1 || nz < 1) throw std::runtime_error("invalid NIfTI dimensions: " + path);

    RawNifti out;
    out.spacing = {double(h.pixdim[1]), double(h.pixdim[2]), double(h.pixdim[3])};
    if (!out.spacing.valid())
        throw std::runtime_error("invalid NIfTI voxel spacing in header: " + path);

    int64_t n = nx * ny * nz;
    size_t elem = size_t(h.bitpix) / 8;
    int64_t offset = static_cast<int64_t>(h.vox_offset);
    if (offset < 348) throw std::runtime_error("invalid vox_offset: " + path);
    // skip to data start
    std::vector<char> skip(static_cast<size_t>(offset) - sizeof(h));
    if (!skip.empty() && gzread(f, skip.data(), static_cast<unsigned>(skip.size())) != static_cast<int>(skip.size()))
        throw std::runtime_error("truncated NIfTI file (extensions): " + path);

    std::vector<unsigned char> buf(static_cast<size_t>(n) * elem);
    int64_t got = 0;
    while (got < static_cast<int64_t>(buf.size())) {
        unsigned chunk = static_cast<unsigned>(std::min<int64_t>(int64_t(buf.size()) - got, 1 << 28));
        int r = gzread(f, buf.data() + got, chunk);
        if (r <= 0) throw std::runtime_error("truncated NIfTI voxel data: " + path);
        got += r;
    }
    if (swapped && elem > 1) swap_bytes(buf.data(), elem, static_cast<size_t>(n));

    float slope = h.scl_slope;
    float inter = h.scl_inter;
    bool scale = slope != 0.0f && !(slope == 1.0f && inter == 0.0f);

    // NIfTI stores x fastest, which matches the {nz,ny,nx} C-order array.
    out.data = NdArray<float>({nz, ny, nx});
    float* dst = out.data.data();
    auto convert = [&](auto* src) {
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
    };
    switch (h.datatype) {
        case DT_UINT8: convert(reinterpret_cast<uint8_t*>(buf.data())); break;
        case DT_INT16: convert(reinterpret_cast<int16_t*>(buf.data())); break;
        case DT_UINT16: convert(reinterpret_cast<uint16_t*>(buf.data())); break;
        case DT_INT32: convert(reinterpret_cast<int32_t*>(buf.data())); break;
        case DT_FLOAT32: convert(reinterpret_cast<float*>(buf.data())); break;
        case DT_FLOAT64: convert(reinterpret_cast<double*>(buf.data())); break;
        default:
            throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(h.datatype) + ": " + path);
    }
    if (scale) {
        for (int64_t i = 0; i < n; ++i) dst[i] = dst[i] * slope + inter;
    }
    return out;
}

template <typename T>
inline void write_raw(const std::string& path, const NdArray<T>& data, const Spacing& spacing, int16_t datatype,
                      int16_t bitpix) {
    if (data.rank() != 3) throw std::invalid_argument("NIfTI write: rank-3 array required");
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(data.dim(2));  // nx
    h.dim[2] = static_cast<int16_t>(data.dim(1));  // ny
    h.dim[3] = static_cast<int16_t>(data.dim(0));  // nz
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(spacing.sx);
    h.pixdim[2] = static_cast<float>(spacing.sy);
    h.pixdim[3] = static_cast<float>(spacing.sz);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.xyzt_units = 2;  // NIFTI_UNITS_MM
    std::memcpy(h.magic, "n+1", 4);

    const char extender[4] = {0, 0, 0, 0};

    bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
    if (gz) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw std::runtime_error("cannot create NIfTI file: " + path);
        bool ok = gzwrite(f, &h, sizeof(h)) == static_cast<int>(sizeof(h)) &&
                  gzwrite(f, extender, 4) == 4 &&
                  gzwrite(f, data.data(), static_cast<unsigned>(size_t(data.size()) * sizeof(T))) ==
                      static_cast<int>(size_t(data.size()) * sizeof(T));
        gzclose(f);
        if (!ok) throw std::runtime_error("failed writing NIfTI file: " + path);
    } else {
        FILE* f = std::fopen(path.c_str(), "wb");
        if (!f) throw std::runtime_error("cannot create NIfTI file: " + path);
        bool ok = std::fwrite(&h, 1, sizeof(h), f) == sizeof(h) && std::fwrite(extender, 1, 4, f) == 4 &&
                  std::fwrite(data.data(), sizeof(T), size_t(data.size()), f) == size_t(data.size());
        std::fclose(f);
        if (!ok) throw std::runtime_error("failed writing NIfTI file: " + path);
    }
}

}  // namespace nifti

inline void save_volume(const std::string& path, const Volume& v) {
    nifti::write_raw<float>(path, v.voxels, v.spacing, nifti::DT_FLOAT32, 32);
}

inline void save_labels(const std::string& path, const LabelMap& l) {
    nifti::write_raw<uint8_t>(path, l.labels, l.spacing, nifti::DT_UINT8, 8);
}

inline Volume load_volume(const std::string& path, const std::string& case_id = "") {
    nifti::RawNifti raw = nifti::read(path);
    Volume v{std::move(raw.data), raw.spacing, case_id};
    v.validate();
    return v;
}

}  // namespace mdba
