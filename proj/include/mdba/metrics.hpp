#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdba/core/edt.hpp"
#include "mdba/core/ndarray.hpp"
#include "mdba/volume.hpp"

namespace mdba {

/// Binary Dice overlap 2|A^B|/(|A|+|B|); two empty masks score 1.0 by
/// convention.
inline double dice_binary(const NdArray<uint8_t>& a, const NdArray<uint8_t>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("dice_binary: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    int64_t inter = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        bool ia = a[i] != 0, ib = b[i] != 0;
        na += ia;
        nb += ib;
        inter += (ia && ib);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(inter) / double(na + nb);
}

namespace detail {

/// Directed distance set {d(p, B) : p in A} in mm, computed from the exact
/// anisotropic distance transform of B.
inline std::vector<double> directed_distances_mm(const NdArray<uint8_t>& a, const NdArray<uint8_t>& b,
                                                 const Spacing& spacing) {
    NdArray<double> d2 = edt_squared_mm(b, spacing);
    std::vector<double> out;
    for (int64_t i = 0; i < a.size(); ++i)
        if (a[i]) out.push_back(std::sqrt(d2[i]));
    return out;
}

inline double rank_percentile(std::vector<double>& v, double percentile) {
    std::sort(v.begin(), v.end());
    if (percentile >= 100.0) return v.back();
    size_t rank = size_t(std::ceil(percentile / 100.0 * double(v.size())));
    rank = std::max<size_t>(1, std::min(rank, v.size()));
    return v[rank - 1];
}

}  // namespace detail

/// Symmetric Hausdorff distance in mm between the voxel-center point sets
/// of two masks, honoring anisotropic spacing. Returns nullopt when either
/// mask is empty (undefined rather than 0 or infinity). percentile=100
/// gives the classic maximum; lower values give the robust variants.
inline std::optional<double> hausdorff_mm(const NdArray<uint8_t>& a, const NdArray<uint8_t>& b,
                                          const Spacing& spacing, double percentile = 100.0) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("hausdorff_mm: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    bool has_a = false, has_b = false;
    for (int64_t i = 0; i < a.size() && !(has_a && has_b); ++i) {
        has_a = has_a || a[i] != 0;
        has_b = has_b || b[i] != 0;
    }
    if (!has_a || !has_b) return std::nullopt;

    std::vector<double> ab = detail::directed_distances_mm(a, b, spacing);
    std::vector<double> ba = detail::directed_distances_mm(b, a, spacing);
    return std::max(detail::rank_percentile(ab, percentile), detail::rank_percentile(ba, percentile));
}

/// Production connected-component sizes (union-find, two-pass), descending.
/// The flood-fill oracle in phantom.hpp independently checks this.
inline std::vector<int64_t> connected_component_sizes(const LabelMap& labels, int target_label, int connectivity) {
    if (connectivity != 6 && connectivity != 18 && connectivity != 26)
        throw std::invalid_argument("connected_component_sizes: connectivity must be 6, 18 or 26");
    const int64_t nz = labels.nz(), ny = labels.ny(), nx = labels.nx();
    const int64_t n = nz * ny * nx;

    // backward half-neighborhood: offsets that point to already-scanned voxels
    std::vector<std::array<int64_t, 3>> offs;
    for (int dz = -1; dz <= 0; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                int64_t lin = int64_t(dz) * nx * ny + int64_t(dy) * nx + dx;
                if (lin >= 0) continue;
                int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (connectivity == 6 && manhattan > 1) continue;
                if (connectivity == 18 && manhattan > 2) continue;
                offs.push_back({dz, dy, dx});
            }

    std::vector<int32_t> parent(size_t(n), -1);
    auto find = [&](int32_t i) {
        int32_t root = i;
        while (parent[size_t(root)] != root) root = parent[size_t(root)];
        while (parent[size_t(i)] != root) {
            int32_t next = parent[size_t(i)];
            parent[size_t(i)] = root;
            i = next;
        }
        return root;
    };

    const auto& lab = labels.labels;
    for (int64_t z = 0; z < nz; ++z)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t x = 0; x < nx; ++x) {
                if (lab.at(z, y, x) != target_label) continue;
                int32_t self = int32_t(z * ny * nx + y * nx + x);
                parent[size_t(self)] = self;
                for (const auto& o : offs) {
                    int64_t pz = z + o[0], py = y + o[1], px = x + o[2];
                    if (pz < 0 || py < 0 || py >= ny || px < 0 || px >= nx) continue;
                    if (lab.at(pz, py, px) != target_label) continue;
                    int32_t other = int32_t(pz * ny * nx + py * nx + px);
                    int32_t ra = find(self), rb = find(other);
                    if (ra != rb) parent[size_t(ra)] = rb;
                }
            }

    std::vector<int64_t> sizes;
    std::vector<int32_t> root_slot(size_t(n), -1);
    for (int64_t i = 0; i < n; ++i) {
        if (parent[size_t(i)] < 0) continue;
        int32_t r = find(int32_t(i));
        if (root_slot[size_t(r)] < 0) {
            root_slot[size_t(r)] = int32_t(sizes.size());
            sizes.push_back(0);
        }
        ++sizes[size_t(root_slot[size_t(r)])];
    }
    std::sort(sizes.begin(), sizes.end(), std::greater<int64_t>());
    return sizes;
}

/// Scar-size distribution over the fixed mm^3 bins
/// [0,50),[50,100),...,[450,500),[500,inf).
struct ScarSizeHistogram {
    static constexpr int kNumBins = 11;
    static constexpr std::array<double, kNumBins> kLowerEdges = {0,   50,  100, 150, 200, 250,
                                                                 300, 350, 400, 450, 500};

    std::array<int64_t, kNumBins> counts{};
    std::array<double, kNumBins> volumes_mm3{};
    int64_t total_count = 0;
    double total_volume_mm3 = 0.0;

    double count_pct(int bin) const { return total_count ? 100.0 * double(counts[size_t(bin)]) / double(total_count) : 0.0; }
    double volume_pct(int bin) const {
        return total_volume_mm3 > 0 ? 100.0 * volumes_mm3[size_t(bin)] / total_volume_mm3 : 0.0;
    }

    static int bin_of(double volume_mm3) {
        for (int i = kNumBins - 1; i >= 0; --i)
            if (volume_mm3 >= kLowerEdges[size_t(i)]) return i;
        return 0;
    }

    void add_component(double volume_mm3) {
        int b = bin_of(volume_mm3);
        ++counts[size_t(b)];
        volumes_mm3[size_t(b)] += volume_mm3;
        ++total_count;
        total_volume_mm3 += volume_mm3;
    }

    void merge(const ScarSizeHistogram& o) {
        for (int i = 0; i < kNumBins; ++i) {
            counts[size_t(i)] += o.counts[size_t(i)];
            volumes_mm3[size_t(i)] += o.volumes_mm3[size_t(i)];
        }
        total_count += o.total_count;
        total_volume_mm3 += o.total_volume_mm3;
    }

    static std::string bin_label(int i) {
        if (i == kNumBins - 1) return ">500";
        return std::to_string(int(kLowerEdges[size_t(i)])) + "-" + std::to_string(int(kLowerEdges[size_t(i)]) + 50);
    }
};

/// Component analysis on the scar label; component volume is voxel count
/// times voxel volume in mm^3.
inline ScarSizeHistogram scar_histogram(const LabelMap& labels, int connectivity = 26) {
    ScarSizeHistogram h;
    const double voxel = labels.spacing.voxel_volume_mm3();
    for (int64_t count : connected_component_sizes(labels, kScarLabel, connectivity))
        h.add_component(double(count) * voxel);
    return h;
}

/// Per-case evaluation record. LA metrics are absent when the network has
/// no LA branch; HDs are absent when either mask was empty.
struct CaseMetrics {
    std::string case_id;
    std::optional<double> ds_la;
    std::optional<double> hd_la_mm;
    double ds_scar = 0.0;
    std::optional<double> hd_scar_mm;
};

struct MetricAggregate {
    double mean = 0.0;
    double stddev = 0.0;  // population std
    int n = 0;
    int excluded = 0;
};

struct EvalResult {
    std::string method;
    std::vector<CaseMetrics> per_case;
    MetricAggregate ds_la, hd_la_mm, ds_scar, hd_scar_mm;
};

namespace detail {

inline MetricAggregate aggregate_values(const std::vector<std::optional<double>>& values) {
    MetricAggregate agg;
    double sum = 0.0;
    for (const auto& v : values) {
        if (!v) {
            ++agg.excluded;
            continue;
        }
        sum += *v;
        ++agg.n;
    }
    if (agg.n == 0) return agg;
    agg.mean = sum / agg.n;
    double ss = 0.0;
    for (const auto& v : values)
        if (v) ss += (*v - agg.mean) * (*v - agg.mean);
    agg.stddev = std::sqrt(ss / agg.n);
    return agg;
}

}  // namespace detail

/// Mean and population std per metric; undefined values are excluded from
/// the aggregate and counted.
inline EvalResult aggregate_eval(std::vector<CaseMetrics> records, const std::string& method = "") {
    if (records.empty()) throw std::invalid_argument("aggregate_eval: no records");
    EvalResult r;
    r.method = method;
    std::vector<std::optional<double>> ds_la, hd_la, ds_scar, hd_scar;
    for (const auto& c : records) {
        ds_la.push_back(c.ds_la);
        hd_la.push_back(c.hd_la_mm);
        ds_scar.push_back(c.ds_scar);
        hd_scar.push_back(c.hd_scar_mm);
    }
    r.ds_la = detail::aggregate_values(ds_la);
    r.hd_la_mm = detail::aggregate_values(hd_la);
    r.ds_scar = detail::aggregate_values(ds_scar);
    r.hd_scar_mm = detail::aggregate_values(hd_scar);
    r.per_case = std::move(records);
    return r;
}

namespace detail {

inline std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

inline std::string fmt_opt(const std::optional<double>& v, const char* spec = "%.6f") {
    return v ? fmt(*v, spec) : std::string();
}

inline std::string fmt_mean_std(const MetricAggregate& a, const char* spec) {
    if (a.n == 0) return "-";
    return fmt(a.mean, spec) + "(" + fmt(a.stddev, spec) + ")";
}

}  // namespace detail

/// One row per case plus an aggregate row in mean(std) form.
inline void write_eval_csv(const std::string& path, const EvalResult& r) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write eval csv: " + path);
    out << "case_id,ds_la,hd_la_mm,ds_scar,hd_scar_mm\n";
    for (const auto& c : r.per_case) {
        out << c.case_id << ',' << detail::fmt_opt(c.ds_la) << ',' << detail::fmt_opt(c.hd_la_mm) << ','
            << detail::fmt(c.ds_scar) << ',' << detail::fmt_opt(c.hd_scar_mm) << '\n';
    }
    out << "aggregate," << detail::fmt_mean_std(r.ds_la, "%.3f") << ',' << detail::fmt_mean_std(r.hd_la_mm, "%.2f")
        << ',' << detail::fmt_mean_std(r.ds_scar, "%.3f") << ',' << detail::fmt_mean_std(r.hd_scar_mm, "%.2f")
        << '\n';
}

inline nlohmann::json aggregate_to_json(const MetricAggregate& a) {
    return {{"mean", a.mean}, {"std", a.stddev}, {"n", a.n}, {"excluded", a.excluded}};
}

inline void write_eval_json(const std::string& path, const EvalResult& r) {
    nlohmann::json j;
    j["method"] = r.method;
    j["n_cases"] = r.per_case.size();
    j["ds_scar"] = aggregate_to_json(r.ds_scar);
    j["hd_scar_mm"] = aggregate_to_json(r.hd_scar_mm);
    j["ds_la"] = aggregate_to_json(r.ds_la);
    j["hd_la_mm"] = aggregate_to_json(r.hd_la_mm);
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : r.per_case) {
        nlohmann::json rec;
        rec["case_id"] = c.case_id;
        rec["ds_scar"] = c.ds_scar;
        if (c.hd_scar_mm) rec["hd_scar_mm"] = *c.hd_scar_mm;
        if (c.ds_la) rec["ds_la"] = *c.ds_la;
        if (c.hd_la_mm) rec["hd_la_mm"] = *c.hd_la_mm;
        cases.push_back(std::move(rec));
    }
    j["per_case"] = std::move(cases);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write eval json: " + path);
    out << j.dump(2) << "\n";
}

/// Table-style scar statistics: count, count %, volume, volume % per bin.
inline void write_scar_histogram_csv(const std::string& path, const ScarSizeHistogram& h) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write histogram csv: " + path);
    out << "range_mm3,count,count_pct,volume_mm3,volume_pct\n";
    for (int i = 0; i < ScarSizeHistogram::kNumBins; ++i) {
        out << ScarSizeHistogram::bin_label(i) << ',' << h.counts[size_t(i)] << ','
            << detail::fmt(h.count_pct(i), "%.2f") << ',' << detail::fmt(h.volumes_mm3[size_t(i)], "%.2f") << ','
            << detail::fmt(h.volume_pct(i), "%.2f") << '\n';
    }
    out << "total," << h.total_count << ",100.00," << detail::fmt(h.total_volume_mm3, "%.2f") << ",100.00\n";
}

inline void write_scar_histogram_json(const std::string& path, const ScarSizeHistogram& h) {
    nlohmann::json bins = nlohmann::json::array();
    for (int i = 0; i < ScarSizeHistogram::kNumBins; ++i) {
        bins.push_back({{"range", ScarSizeHistogram::bin_label(i)},
                        {"count", h.counts[size_t(i)]},
                        {"count_pct", h.count_pct(i)},
                        {"volume_mm3", h.volumes_mm3[size_t(i)]},
                        {"volume_pct", h.volume_pct(i)}});
    }
    nlohmann::json j;
    j["bins"] = std::move(bins);
    j["total_count"] = h.total_count;
    j["total_volume_mm3"] = h.total_volume_mm3;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write histogram json: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace mdba
