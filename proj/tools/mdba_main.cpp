// Command-line front end: phantom generation, scar statistics, training,
// prediction, evaluation and overlay reports from one binary.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mdba/mdba.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

/// Thrown for anything the user got wrong (bad flags, bad config, missing
/// inputs); maps to exit code 1.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_snapshot(const std::string& out_dir, const std::string& command, const json& resolved) {
    json j;
    j["command"] = command;
    j["resolved"] = resolved;
    std::ofstream out(out_dir + "/resolved_config.json");
    if (!out) throw std::runtime_error("cannot write resolved_config.json in " + out_dir);
    out << j.dump(2) << "\n";
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ValidationError("cannot create output directory '" + dir + "': " + ec.message());
}

mdba::Split parse_split(const std::string& s) {
    if (s == "all") return mdba::Split::none;  // evaluate() treats none as "all labeled"
    try {
        return mdba::split_from_string(s);
    } catch (const std::exception&) {
        throw ValidationError("unknown split '" + s + "' (use train, eval or all)");
    }
}

mdba::LabelValueMap parse_label_map(const std::string& s) {
    mdba::LabelValueMap map;
    if (s.empty()) return map;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) {
                auto pos = cur.find(':');
                if (pos == std::string::npos)
                    throw ValidationError("--label-map entries must be from:to, got '" + cur + "'");
                map[std::stoi(cur.substr(0, pos))] = std::stoi(cur.substr(pos + 1));
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    return map;
}

std::vector<int64_t> parse_int_triple(const std::string& s, const char* what) {
    std::vector<int64_t> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(std::stoll(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (out.size() == 1) out = {out[0], out[0], out[0]};
    if (out.size() != 3) throw ValidationError(std::string(what) + " must be one integer or three comma-separated");
    return out;
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
    std::string out_dir;
    int count = 4;
    uint64_t seed = 1;
    std::string shape = "48";
    std::string spacing = "1";
    int n_scars = 4;
    double radius_lo = 2.0, radius_hi = 5.0;
    double shell = 3.0;
    double noise = 5.0;
    std::string split = "train";
};

int run_phantom(const PhantomArgs& a) {
    if (a.count < 1) throw ValidationError("--count must be >= 1");
    auto shape = parse_int_triple(a.shape, "--shape");
    std::vector<double> spacing;
    {
        std::string cur;
        for (char c : a.spacing + ",") {
            if (c == ',') {
                if (!cur.empty()) spacing.push_back(std::stod(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (spacing.size() == 1) spacing = {spacing[0], spacing[0], spacing[0]};
        if (spacing.size() != 3) throw ValidationError("--spacing must be one value or three comma-separated");
    }
    mdba::Split split = parse_split(a.split);

    mdba::PhantomSpec base;
    base.nx = shape[0];
    base.ny = shape[1];
    base.nz = shape[2];
    base.spacing = {spacing[0], spacing[1], spacing[2]};
    base.n_scars = a.n_scars;
    base.scar_radius_lo_mm = a.radius_lo;
    base.scar_radius_hi_mm = a.radius_hi;
    base.shell_thickness_mm = a.shell;
    base.noise_sigma = a.noise;
    base.seed = a.seed;
    base.validate();

    ensure_dir(a.out_dir);
    mdba::DatasetManifest manifest;
    for (int i = 0; i < a.count; ++i) {
        mdba::PhantomSpec spec = base;
        spec.seed = mdba::Rng::derive_seed(a.seed, uint64_t(i));
        auto [vol, lab] = mdba::generate_phantom(spec);
        char name[64];
        std::snprintf(name, sizeof(name), "phantom_%03d", i);
        vol.case_id = name;
        std::string img = a.out_dir + "/" + name + "_img.nii.gz";
        std::string labp = a.out_dir + "/" + name + "_lab.nii.gz";
        mdba::save_volume(img, vol);
        mdba::save_labels(labp, lab);
        mdba::ManifestEntry e;
        e.case_id = name;
        e.image = std::string(name) + "_img.nii.gz";
        e.label = std::string(name) + "_lab.nii.gz";
        e.split = split;
        manifest.entries.push_back(std::move(e));
    }
    mdba::save_manifest(a.out_dir + "/manifest.json", manifest);

    json resolved;
    resolved["out"] = a.out_dir;
    resolved["count"] = a.count;
    resolved["seed"] = a.seed;
    resolved["shape"] = shape;
    resolved["spacing"] = spacing;
    resolved["n_scars"] = a.n_scars;
    resolved["scar_radius_mm"] = {a.radius_lo, a.radius_hi};
    resolved["shell_thickness_mm"] = a.shell;
    resolved["noise_sigma"] = a.noise;
    resolved["split"] = a.split;
    write_snapshot(a.out_dir, "phantom", resolved);
    std::printf("wrote %d phantom cases to %s\n", a.count, a.out_dir.c_str());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct StatsArgs {
    std::string manifest;
    std::string out_dir;
    int connectivity = 26;
    std::string label_map;
};

int run_stats(const StatsArgs& a) {
    mdba::DatasetManifest manifest = mdba::load_manifest(a.manifest);
    mdba::LabelValueMap value_map = parse_label_map(a.label_map);
    size_t labeled = manifest.labeled_count();
    if (labeled == 0) throw ValidationError("stats: manifest has no labeled cases");

    ensure_dir(a.out_dir);
    mdba::ScarSizeHistogram total;
    for (const auto& e : manifest.entries) {
        if (!e.labeled()) continue;
        auto [vol, lab] = mdba::load_case(e.image, e.label, e.case_id, value_map);
        total.merge(mdba::scar_histogram(*lab, a.connectivity));
    }
    mdba::write_scar_histogram_csv(a.out_dir + "/scar_stats.csv", total);
    mdba::write_scar_histogram_json(a.out_dir + "/scar_stats.json", total);
    mdba::write_png(a.out_dir + "/scar_sizes.png", mdba::render_scar_histogram(total));

    json resolved;
    resolved["manifest"] = a.manifest;
    resolved["out"] = a.out_dir;
    resolved["connectivity"] = a.connectivity;
    if (!a.label_map.empty()) resolved["label_map"] = a.label_map;
    write_snapshot(a.out_dir, "stats", resolved);
    std::printf("scar statistics over %zu cases: %lld components, %.2f mm3 total\n", labeled,
                (long long)total.total_count, total.total_volume_mm3);
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string manifest;
    std::string out_dir;
    std::string fusion;
    std::string attention;
    int epochs = -1;
    int steps_per_epoch = -1;
    int64_t seed = -1;
    bool la_on = false;   // --la-branch given
    bool la_off = false;  // --no-la-branch given
};

struct ResolvedTrain {
    mdba::nn::NetworkConfig network;
    mdba::TrainConfig train;
    std::string manifest_path;
    std::string out_dir;
};

ResolvedTrain resolve_train_config(const TrainArgs& a) {
    ResolvedTrain r;
    if (!a.config.empty()) {
        std::ifstream in(a.config);
        if (!in) throw ValidationError("cannot open config file: " + a.config);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ValidationError(std::string("config parse error: ") + e.what());
        }
        try {
            if (j.contains("network")) r.network = j["network"].get<mdba::nn::NetworkConfig>();
            if (j.contains("train")) r.train = j["train"].get<mdba::TrainConfig>();
            if (j.contains("manifest")) r.manifest_path = j["manifest"].get<std::string>();
            if (j.contains("out_dir")) r.out_dir = j["out_dir"].get<std::string>();
        } catch (const json::exception& e) {
            throw ValidationError(std::string("config field error: ") + e.what());
        }
        // relative paths resolve against the config file
        fs::path base = fs::path(a.config).parent_path();
        if (!r.manifest_path.empty() && fs::path(r.manifest_path).is_relative())
            r.manifest_path = (base / r.manifest_path).string();
        if (!r.out_dir.empty() && fs::path(r.out_dir).is_relative()) r.out_dir = (base / r.out_dir).string();
    }
    if (!a.manifest.empty()) r.manifest_path = a.manifest;
    if (!a.out_dir.empty()) r.out_dir = a.out_dir;
    if (a.la_on && a.la_off) throw ValidationError("--la-branch and --no-la-branch are mutually exclusive");
    if (!a.fusion.empty()) {
        try {
            r.network.fusion_mode = mdba::fusion_mode_from_string(a.fusion);
        } catch (const std::exception& e) {
            throw ValidationError(e.what());
        }
        // --fusion none means the MDnet ablation unless the LA branch is forced on
        if (r.network.fusion_mode == mdba::FusionMode::none && !a.la_on) r.network.la_branch = false;
    }
    if (!a.attention.empty()) {
        try {
            r.network.attention_mode = mdba::attention_mode_from_string(a.attention);
        } catch (const std::exception& e) {
            throw ValidationError(e.what());
        }
    }
    if (a.epochs > 0) r.train.max_epochs = a.epochs;
    if (a.steps_per_epoch > 0) r.train.steps_per_epoch = a.steps_per_epoch;
    if (a.seed >= 0) r.train.seed = uint64_t(a.seed);
    if (a.la_on) r.network.la_branch = true;
    if (a.la_off) r.network.la_branch = false;

    if (r.manifest_path.empty()) throw ValidationError("train: no manifest given (config or --manifest)");
    if (r.out_dir.empty()) throw ValidationError("train: no output directory given (config or --out)");
    try {
        r.network.validate();
        r.train.validate();
    } catch (const std::exception& e) {
        throw ValidationError(e.what());
    }
    return r;
}

int run_train(const TrainArgs& a) {
    ResolvedTrain r = resolve_train_config(a);
    mdba::DatasetManifest manifest = mdba::load_manifest(r.manifest_path);
    if (manifest.with_split(mdba::Split::train).empty())
        throw ValidationError("train: manifest has no train split");

    ensure_dir(r.out_dir);
    json resolved;
    resolved["network"] = r.network;
    resolved["train"] = r.train;
    resolved["manifest"] = r.manifest_path;
    resolved["out_dir"] = r.out_dir;
    resolved["method"] = r.network.method_name();
    write_snapshot(r.out_dir, "train", resolved);

    mdba::nn::Network net(r.network, mdba::Rng::derive_seed(r.train.seed, 0x1417));
    mdba::TrainResult tr = mdba::train(net, manifest, r.train, r.out_dir);
    std::printf("trained %s for %zu steps; last checkpoint: %s\n", r.network.method_name().c_str(),
                tr.log.size(), tr.last_checkpoint.c_str());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
    std::string checkpoint;
    std::string manifest;
    std::string out_dir;
    std::string split = "all";
    float threshold = 0.5f;
};

int run_predict(const PredictArgs& a) {
    if (!(a.threshold > 0 && a.threshold < 1)) throw ValidationError("--threshold must be in (0,1)");
    mdba::Split split = parse_split(a.split);
    mdba::DatasetManifest manifest = mdba::load_manifest(a.manifest);
    mdba::nn::Network net = mdba::nn::load_checkpoint(a.checkpoint);

    ensure_dir(a.out_dir);
    int n = 0;
    for (const auto& e : manifest.entries) {
        if (split != mdba::Split::none && e.split != split) continue;
        mdba::Volume vol = mdba::load_volume(e.image, e.case_id);
        mdba::LabelMap pred = mdba::nn::predict_case(vol, net, a.threshold);
        mdba::save_labels(a.out_dir + "/pred_" + e.case_id + ".nii.gz", pred);
        ++n;
    }
    if (n == 0) throw ValidationError("predict: no cases matched split '" + a.split + "'");

    json resolved;
    resolved["checkpoint"] = a.checkpoint;
    resolved["manifest"] = a.manifest;
    resolved["out"] = a.out_dir;
    resolved["split"] = a.split;
    resolved["threshold"] = a.threshold;
    resolved["network"] = net.config();
    write_snapshot(a.out_dir, "predict", resolved);
    std::printf("wrote %d predictions to %s\n", n, a.out_dir.c_str());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string checkpoint;
    std::string manifest;
    std::string out_dir;
    std::string split = "eval";
    float threshold = 0.5f;
    double hd_percentile = 100.0;
    bool la_label_only = false;
    std::string label_map;
};

int run_evaluate(const EvaluateArgs& a) {
    if (!(a.threshold > 0 && a.threshold < 1)) throw ValidationError("--threshold must be in (0,1)");
    if (a.hd_percentile <= 0 || a.hd_percentile > 100) throw ValidationError("--hd-percentile must be in (0,100]");
    mdba::Split split = parse_split(a.split);
    mdba::DatasetManifest manifest = mdba::load_manifest(a.manifest);
    mdba::nn::Network net = mdba::nn::load_checkpoint(a.checkpoint);

    ensure_dir(a.out_dir);
    mdba::EvalOptions opts;
    opts.eval_la = net.config().la_branch;
    opts.la_target_includes_scar = !a.la_label_only;
    opts.hd_percentile = a.hd_percentile;
    opts.label_map = parse_label_map(a.label_map);
    mdba::EvalResult result = mdba::evaluate(net, manifest, split, opts, a.threshold);
    mdba::write_eval_csv(a.out_dir + "/eval.csv", result);
    mdba::write_eval_json(a.out_dir + "/eval.json", result);

    json resolved;
    resolved["checkpoint"] = a.checkpoint;
    resolved["manifest"] = a.manifest;
    resolved["out"] = a.out_dir;
    resolved["split"] = a.split;
    resolved["threshold"] = a.threshold;
    resolved["hd_percentile"] = a.hd_percentile;
    resolved["network"] = net.config();
    write_snapshot(a.out_dir, "evaluate", resolved);
    std::printf("%s: scar DS %.3f(%.3f), scar HD %s over %zu cases\n", result.method.c_str(), result.ds_scar.mean,
                result.ds_scar.stddev,
                result.hd_scar_mm.n ? (std::to_string(result.hd_scar_mm.mean) + " mm").c_str() : "undefined",
                result.per_case.size());
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct ReportArgs {
    std::string pred_dir;
    std::string manifest;
    std::string out_dir;
    std::vector<std::string> slices;  // case_id:z
    int64_t zoom = 2;
};

int run_report(const ReportArgs& a) {
    if (a.zoom < 1) throw ValidationError("--zoom must be >= 1");
    mdba::DatasetManifest manifest = mdba::load_manifest(a.manifest);

    std::map<std::string, int64_t> requested;
    for (const std::string& s : a.slices) {
        auto pos = s.find(':');
        if (pos == std::string::npos) throw ValidationError("--slice must be case_id:z, got '" + s + "'");
        requested[s.substr(0, pos)] = std::stoll(s.substr(pos + 1));
    }

    ensure_dir(a.out_dir);
    int n = 0;
    for (const auto& e : manifest.entries) {
        if (!e.labeled()) continue;
        if (!requested.empty() && !requested.count(e.case_id)) continue;
        auto [vol, lab] = mdba::load_case(e.image, e.label, e.case_id);

        std::string pred_path = a.pred_dir + "/pred_" + e.case_id + ".nii.gz";
        std::optional<mdba::LabelMap> pred;
        if (fs::exists(pred_path)) {
            auto raw = mdba::nifti::read(pred_path);
            mdba::LabelMap p;
            p.spacing = raw.spacing;
            p.labels = mdba::NdArray<uint8_t>(raw.data.shape());
            for (int64_t i = 0; i < raw.data.size(); ++i)
                p.labels[i] = uint8_t(std::lround(double(raw.data[i])));
            if (p.labels.shape() != lab->labels.shape())
                throw std::runtime_error("report: prediction/reference shape mismatch for " + e.case_id);
            pred = std::move(p);
        }
        int64_t z = requested.count(e.case_id) ? requested[e.case_id] : mdba::pick_overlay_slice(*lab);
        if (z < 0 || z >= vol.nz()) throw ValidationError("slice index out of range for case " + e.case_id);
        mdba::RgbImage img = mdba::render_overlay(vol, *lab, pred ? &*pred : nullptr, z, a.zoom);
        char name[128];
        std::snprintf(name, sizeof(name), "overlay_%s_z%03lld.png", e.case_id.c_str(), (long long)z);
        mdba::write_png(a.out_dir + "/" + name, img);
        ++n;
    }
    if (n == 0) throw ValidationError("report: no labeled cases matched");

    json resolved;
    resolved["pred"] = a.pred_dir;
    resolved["manifest"] = a.manifest;
    resolved["out"] = a.out_dir;
    resolved["zoom"] = a.zoom;
    resolved["slices"] = a.slices;
    write_snapshot(a.out_dir, "report", resolved);
    std::printf("wrote %d overlay images to %s\n", n, a.out_dir.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-depth boundary-aware LA/scar segmentation toolkit"};
    app.require_subcommand(1);

    PhantomArgs pa;
    auto* cmd_phantom = app.add_subcommand("phantom", "Generate synthetic labeled volumes plus a manifest");
    cmd_phantom->add_option("--out", pa.out_dir, "Output directory")->required();
    cmd_phantom->add_option("--count", pa.count, "Number of cases");
    cmd_phantom->add_option("--seed", pa.seed, "Master seed");
    cmd_phantom->add_option("--shape", pa.shape, "Volume shape nx,ny,nz (or one value)");
    cmd_phantom->add_option("--spacing", pa.spacing, "Voxel spacing sx,sy,sz in mm");
    cmd_phantom->add_option("--scars", pa.n_scars, "Scars per case");
    cmd_phantom->add_option("--radius-lo", pa.radius_lo, "Min scar radius (mm)");
    cmd_phantom->add_option("--radius-hi", pa.radius_hi, "Max scar radius (mm)");
    cmd_phantom->add_option("--shell", pa.shell, "Boundary shell thickness (mm)");
    cmd_phantom->add_option("--noise", pa.noise, "Gaussian noise sigma");
    cmd_phantom->add_option("--split", pa.split, "Split tag for all cases (train/eval/none)");

    StatsArgs sa;
    auto* cmd_stats = app.add_subcommand("stats", "Scar-size statistics table and bar chart");
    cmd_stats->add_option("--manifest", sa.manifest, "Dataset manifest")->required();
    cmd_stats->add_option("--out", sa.out_dir, "Output directory")->required();
    cmd_stats->add_option("--connectivity", sa.connectivity, "Component connectivity (6/18/26)")
        ->check(CLI::IsMember({6, 18, 26}));
    cmd_stats->add_option("--label-map", sa.label_map, "Raw label remapping, e.g. 420:1,421:2");

    TrainArgs ta;
    auto* cmd_train = app.add_subcommand("train", "Train a network from a JSON config");
    cmd_train->add_option("--config", ta.config, "JSON config file");
    cmd_train->add_option("--manifest", ta.manifest, "Dataset manifest (overrides config)");
    cmd_train->add_option("--out", ta.out_dir, "Output directory (overrides config)");
    cmd_train->add_option("--fusion", ta.fusion, "Fusion mode: sobel, multiply or none");
    cmd_train->add_option("--attention", ta.attention, "Attention mode: sigmoid or raw");
    cmd_train->add_option("--epochs", ta.epochs, "Override max_epochs");
    cmd_train->add_option("--steps-per-epoch", ta.steps_per_epoch, "Override steps_per_epoch");
    cmd_train->add_option("--seed", ta.seed, "Override seed");
    cmd_train->add_flag("--la-branch", ta.la_on, "Force the LA branch on");
    cmd_train->add_flag("--no-la-branch", ta.la_off, "Disable the LA branch");

    PredictArgs pra;
    auto* cmd_predict = app.add_subcommand("predict", "Write predicted label maps for a split");
    cmd_predict->add_option("--checkpoint", pra.checkpoint, "Checkpoint file")->required();
    cmd_predict->add_option("--manifest", pra.manifest, "Dataset manifest")->required();
    cmd_predict->add_option("--out", pra.out_dir, "Output directory")->required();
    cmd_predict->add_option("--split", pra.split, "train, eval or all");
    cmd_predict->add_option("--threshold", pra.threshold, "Binarization threshold");

    EvaluateArgs ea;
    auto* cmd_evaluate = app.add_subcommand("evaluate", "Dice / Hausdorff evaluation of a checkpoint");
    cmd_evaluate->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    cmd_evaluate->add_option("--manifest", ea.manifest, "Dataset manifest")->required();
    cmd_evaluate->add_option("--out", ea.out_dir, "Output directory")->required();
    cmd_evaluate->add_option("--split", ea.split, "train, eval or all");
    cmd_evaluate->add_option("--threshold", ea.threshold, "Binarization threshold");
    cmd_evaluate->add_option("--hd-percentile", ea.hd_percentile, "Hausdorff percentile (100 = max)");
    cmd_evaluate->add_flag("--la-label-only", ea.la_label_only, "LA mask = label 1 only (exclude scar)");
    cmd_evaluate->add_option("--label-map", ea.label_map, "Raw label remapping, e.g. 420:1,421:2");

    ReportArgs ra;
    auto* cmd_report = app.add_subcommand("report", "Qualitative slice overlays");
    cmd_report->add_option("--pred", ra.pred_dir, "Directory with pred_<case>.nii.gz files")->required();
    cmd_report->add_option("--manifest", ra.manifest, "Dataset manifest")->required();
    cmd_report->add_option("--out", ra.out_dir, "Output directory")->required();
    cmd_report->add_option("--slice", ra.slices, "case_id:z (repeatable; default: densest scar slice)");
    cmd_report->add_option("--zoom", ra.zoom, "Integer zoom factor");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (app.got_subcommand(cmd_phantom)) return run_phantom(pa);
        if (app.got_subcommand(cmd_stats)) return run_stats(sa);
        if (app.got_subcommand(cmd_train)) return run_train(ta);
        if (app.got_subcommand(cmd_predict)) return run_predict(pra);
        if (app.got_subcommand(cmd_evaluate)) return run_evaluate(ea);
        if (app.got_subcommand(cmd_report)) return run_report(ra);
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitValidation;
}
