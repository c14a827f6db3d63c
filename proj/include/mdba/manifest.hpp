#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdba/core/rng.hpp"
#include "mdba/nifti_io.hpp"
#include "mdba/volume.hpp"

namespace mdba {

enum class Split { none, train, eval };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::eval: return "eval";
        default: return "none";
    }
}

inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "eval") return Split::eval;
    if (s == "none" || s.empty()) return Split::none;
    throw std::invalid_argument("unknown split name: " + s);
}

struct ManifestEntry {
    std::string case_id;
    std::string image;              // path, possibly relative to the manifest file
    std::optional<std::string> label;
    Split split = Split::none;

    bool labeled() const { return label.has_value(); }
};

/// Dataset manifest: one JSON document holding a list of case records.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    void validate() const {
        std::set<std::string> ids;
        for (const auto& e : entries) {
            if (e.case_id.empty()) throw std::invalid_argument("manifest: empty case_id");
            if (!ids.insert(e.case_id).second)
                throw std::invalid_argument("manifest: duplicate case_id '" + e.case_id + "'");
            if (e.split == Split::eval && !e.labeled())
                throw std::invalid_argument("manifest: eval case '" + e.case_id + "' has no label");
        }
    }

    std::vector<const ManifestEntry*> with_split(Split s) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries)
            if (e.split == s) out.push_back(&e);
        return out;
    }

    size_t labeled_count() const {
        return size_t(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.labeled(); }));
    }
};

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("manifest parse error in " + path + ": " + e.what());
    }
    if (!j.is_array()) throw std::runtime_error("manifest must be a JSON array of records: " + path);

    std::filesystem::path base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };

    DatasetManifest m;
    for (const auto& rec : j) {
        ManifestEntry e;
        e.case_id = rec.at("case_id").get<std::string>();
        e.image = resolve(rec.at("image").get<std::string>());
        if (rec.contains("label") && !rec["label"].is_null()) e.label = resolve(rec["label"].get<std::string>());
        if (rec.contains("split") && !rec["split"].is_null()) e.split = split_from_string(rec["split"].get<std::string>());
        m.entries.push_back(std::move(e));
    }
    m.validate();
    return m;
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
    m.validate();
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json rec;
        rec["case_id"] = e.case_id;
        rec["image"] = e.image;
        if (e.label) rec["label"] = *e.label;
        if (e.split != Split::none) rec["split"] = to_string(e.split);
        j.push_back(std::move(rec));
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

/// Map of raw file label values onto the {0=background,1=LA,2=scar} scheme.
using LabelValueMap = std::map<int, int>;

/// Load an image and (optionally) its label map. Raw label values outside
/// {0,1,2} must be covered by `value_map`; anything unmapped is a hard
/// error naming the offending value. Non-identity mappings are logged.
inline std::pair<Volume, std::optional<LabelMap>> load_case(const std::string& image_path,
                                                            const std::optional<std::string>& label_path,
                                                            const std::string& case_id = "",
                                                            const LabelValueMap& value_map = {}) {
    Volume v = load_volume(image_path, case_id.empty() ? image_path : case_id);
    if (!label_path) return {std::move(v), std::nullopt};

    nifti::RawNifti raw = nifti::read(*label_path);
    LabelMap l;
    l.spacing = raw.spacing;
    l.labels = NdArray<uint8_t>(raw.data.shape());
    bool mapped_any = false;
    for (int64_t i = 0; i < raw.data.size(); ++i) {
        int value = static_cast<int>(std::lround(double(raw.data[i])));
        auto it = value_map.find(value);
        if (it != value_map.end()) {
            if (it->second != value) mapped_any = true;
            value = it->second;
        }
        if (value < 0 || value > int(kScarLabel))
            throw std::runtime_error("unknown label value " + std::to_string(value) + " in " + *label_path);
        l.labels[i] = static_cast<uint8_t>(value);
    }
    if (mapped_any) {
        std::string desc;
        for (const auto& [from, to] : value_map) desc += std::to_string(from) + "->" + std::to_string(to) + " ";
        std::fprintf(stderr, "[volume_io] applied label mapping %sfor %s\n", desc.c_str(), label_path->c_str());
    }
    l.validate_paired(v);
    return {std::move(v), std::move(l)};
}

/// Deterministic train/eval split over the labeled entries: shuffle by
/// seed, first n_train go to train, the rest to eval. Unlabeled entries are
/// left unassigned.
inline DatasetManifest split_dataset(const DatasetManifest& manifest, int n_train, uint64_t seed) {
    std::vector<size_t> labeled;
    for (size_t i = 0; i < manifest.entries.size(); ++i)
        if (manifest.entries[i].labeled()) labeled.push_back(i);
    if (n_train < 1 || size_t(n_train) >= labeled.size())
        throw std::invalid_argument("split_dataset: n_train must be in [1, labeled_count), got " +
                                    std::to_string(n_train) + " of " + std::to_string(labeled.size()));

    // Fisher-Yates with our own Rng for cross-platform reproducibility.
    Rng rng(seed);
    for (size_t i = labeled.size() - 1; i > 0; --i) {
        size_t j = size_t(rng.uniform_int(0, int64_t(i)));
        std::swap(labeled[i], labeled[j]);
    }

    DatasetManifest out = manifest;
    for (auto& e : out.entries) e.split = Split::none;
    for (size_t k = 0; k < labeled.size(); ++k)
        out.entries[labeled[k]].split = (k < size_t(n_train)) ? Split::train : Split::eval;
    out.validate();
    return out;
}

}  // namespace mdba
