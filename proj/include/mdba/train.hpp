#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdba/augment.hpp"
#include "mdba/losses.hpp"
#include "mdba/manifest.hpp"
#include "mdba/metrics.hpp"
#include "mdba/nn/checkpoint.hpp"
#include "mdba/nn/network.hpp"
#include "mdba/preprocess.hpp"

namespace mdba {

/// Optimization recipe: SGD with momentum and coupled L2 weight decay,
/// exponential per-epoch learning-rate decay, patch-based sampling with a
/// scar-forcing quota, on-the-fly augmentation.
struct TrainConfig {
    int batch_size = 2;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    double lr0 = 0.01;
    double lr_gamma = 0.95;  // per-epoch exponential decay factor
    int max_epochs = 10;
    int steps_per_epoch = 50;
    std::array<int64_t, 3> patch_size{32, 32, 32};  // (z,y,x)
    AugmentOptions augment;
    uint64_t seed = 1234;
    int checkpoint_every_epochs = 0;  // 0 = only final
    int eval_every_epochs = 0;        // 0 = no mid-training eval
    float threshold = 0.5f;
    bool deep_supervision = false;
    bool la_target_includes_scar = true;
    double force_scar_fraction = 0.5;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (lr0 <= 0) throw std::invalid_argument("TrainConfig: lr0 must be > 0");
        if (lr_gamma <= 0 || lr_gamma > 1) throw std::invalid_argument("TrainConfig: lr_gamma must be in (0,1]");
        if (max_epochs < 1 || steps_per_epoch < 1)
            throw std::invalid_argument("TrainConfig: max_epochs and steps_per_epoch must be >= 1");
        for (int64_t p : patch_size)
            if (p < 4) throw std::invalid_argument("TrainConfig: patch_size components must be >= 4");
        if (force_scar_fraction < 0 || force_scar_fraction > 1)
            throw std::invalid_argument("TrainConfig: force_scar_fraction must be in [0,1]");
        if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("TrainConfig: threshold must be in (0,1)");
    }
};

inline void to_json(nlohmann::json& j, const AugmentOptions& a) {
    j = nlohmann::json{{"rotation", a.rotation},       {"scaling", a.scaling},
                       {"elastic", a.elastic},         {"gamma", a.gamma},
                       {"mirror", a.mirror},           {"rot_max_deg", a.rot_max_deg},
                       {"scale_lo", a.scale_lo},       {"scale_hi", a.scale_hi},
                       {"gamma_lo", a.gamma_lo},       {"gamma_hi", a.gamma_hi},
                       {"elastic_max_disp_voxels", a.elastic_max_disp_voxels},
                       {"elastic_grid_voxels", a.elastic_grid_voxels}};
}
inline void from_json(const nlohmann::json& j, AugmentOptions& a) {
    a.rotation = j.value("rotation", a.rotation);
    a.scaling = j.value("scaling", a.scaling);
    a.elastic = j.value("elastic", a.elastic);
    a.gamma = j.value("gamma", a.gamma);
    a.mirror = j.value("mirror", a.mirror);
    a.rot_max_deg = j.value("rot_max_deg", a.rot_max_deg);
    a.scale_lo = j.value("scale_lo", a.scale_lo);
    a.scale_hi = j.value("scale_hi", a.scale_hi);
    a.gamma_lo = j.value("gamma_lo", a.gamma_lo);
    a.gamma_hi = j.value("gamma_hi", a.gamma_hi);
    a.elastic_max_disp_voxels = j.value("elastic_max_disp_voxels", a.elastic_max_disp_voxels);
    a.elastic_grid_voxels = j.value("elastic_grid_voxels", a.elastic_grid_voxels);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"batch_size", c.batch_size},
                       {"momentum", c.momentum},
                       {"weight_decay", c.weight_decay},
                       {"lr0", c.lr0},
                       {"lr_gamma", c.lr_gamma},
                       {"max_epochs", c.max_epochs},
                       {"steps_per_epoch", c.steps_per_epoch},
                       {"patch_size", c.patch_size},
                       {"augment", c.augment},
                       {"seed", c.seed},
                       {"checkpoint_every_epochs", c.checkpoint_every_epochs},
                       {"eval_every_epochs", c.eval_every_epochs},
                       {"threshold", c.threshold},
                       {"deep_supervision", c.deep_supervision},
                       {"la_target_includes_scar", c.la_target_includes_scar},
                       {"force_scar_fraction", c.force_scar_fraction}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr0 = j.value("lr0", c.lr0);
    c.lr_gamma = j.value("lr_gamma", c.lr_gamma);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    if (j.contains("patch_size")) c.patch_size = j["patch_size"].get<std::array<int64_t, 3>>();
    if (j.contains("augment")) c.augment = j["augment"].get<AugmentOptions>();
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every_epochs = j.value("checkpoint_every_epochs", c.checkpoint_every_epochs);
    c.eval_every_epochs = j.value("eval_every_epochs", c.eval_every_epochs);
    c.threshold = j.value("threshold", c.threshold);
    c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
    c.la_target_includes_scar = j.value("la_target_includes_scar", c.la_target_includes_scar);
    c.force_scar_fraction = j.value("force_scar_fraction", c.force_scar_fraction);
}

/// lr = lr0 * gamma^epoch.
inline double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
    return cfg.lr0 * std::pow(cfg.lr_gamma, epoch);
}

/// Classic heavy-ball SGD with coupled weight decay:
/// v <- m*v + (g + wd*p); p <- p - lr*v.
struct SgdOptimizer {
    double momentum = 0.99;
    double weight_decay = 3e-5;

    void step(const std::vector<nn::Parameter*>& params, double lr) const {
        for (nn::Parameter* p : params) {
            if (p->grad.size() == 0) continue;
            if (p->velocity.size() == 0) p->velocity = Tensor(p->value.shape());
            for (int64_t i = 0; i < p->value.size(); ++i) {
                const float g = p->grad[i] + float(weight_decay) * p->value[i];
                p->velocity[i] = float(momentum) * p->velocity[i] + g;
                p->value[i] -= float(lr) * p->velocity[i];
            }
        }
    }

    static void zero_grad(const std::vector<nn::Parameter*>& params) {
        for (nn::Parameter* p : params)
            if (p->grad.size() != 0) p->grad.fill(0.0f);
    }
};

/// Anything that can turn a Volume into a LabelMap; lets evaluation run
/// against the network or against a stub.
struct Predictor {
    virtual ~Predictor() = default;
    virtual LabelMap predict(const Volume& v) const = 0;
};

class NetworkPredictor : public Predictor {
public:
    NetworkPredictor(nn::Network& net, float threshold) : net_(&net), threshold_(threshold) {}
    LabelMap predict(const Volume& v) const override { return nn::predict_case(v, *net_, threshold_); }

private:
    nn::Network* net_;
    float threshold_;
};

struct EvalOptions {
    bool eval_la = true;
    bool la_target_includes_scar = true;
    double hd_percentile = 100.0;
    LabelValueMap label_map;  // applied when loading reference labels
};

/// Full-volume evaluation over the cases of one split: predict, then Dice
/// and Hausdorff per structure. Undefined HDs (empty masks) are excluded
/// from aggregates with a warning.
inline EvalResult evaluate(const Predictor& predictor, const DatasetManifest& manifest, Split split,
                           const EvalOptions& opts = {}, const std::string& method = "") {
    std::vector<CaseMetrics> records;
    for (const ManifestEntry& e : manifest.entries) {
        if (split != Split::none && e.split != split) continue;
        if (!e.labeled()) {
            if (split != Split::none) throw std::runtime_error("evaluate: case '" + e.case_id + "' has no label");
            continue;
        }
        auto [vol, lab] = load_case(e.image, e.label, e.case_id, opts.label_map);
        LabelMap pred = predictor.predict(vol);

        auto mask_of = [](const LabelMap& m, bool scar, bool la_with_scar) {
            NdArray<uint8_t> out(m.labels.shape());
            for (int64_t i = 0; i < out.size(); ++i) {
                if (scar)
                    out[i] = m.labels[i] == kScarLabel;
                else
                    out[i] = la_with_scar ? m.labels[i] >= kLaLabel : m.labels[i] == kLaLabel;
            }
            return out;
        };

        CaseMetrics cm;
        cm.case_id = e.case_id;
        NdArray<uint8_t> ps = mask_of(pred, true, false), gs = mask_of(*lab, true, false);
        cm.ds_scar = dice_binary(ps, gs);
        cm.hd_scar_mm = hausdorff_mm(ps, gs, lab->spacing, opts.hd_percentile);
        if (!cm.hd_scar_mm)
            std::fprintf(stderr, "[evaluate] %s: scar HD undefined (empty mask), excluded\n", e.case_id.c_str());
        if (opts.eval_la) {
            NdArray<uint8_t> pl = mask_of(pred, false, opts.la_target_includes_scar);
            NdArray<uint8_t> gl = mask_of(*lab, false, opts.la_target_includes_scar);
            cm.ds_la = dice_binary(pl, gl);
            cm.hd_la_mm = hausdorff_mm(pl, gl, lab->spacing, opts.hd_percentile);
            if (!cm.hd_la_mm)
                std::fprintf(stderr, "[evaluate] %s: LA HD undefined (empty mask), excluded\n", e.case_id.c_str());
        }
        records.push_back(std::move(cm));
    }
    return aggregate_eval(std::move(records), method);
}

inline EvalResult evaluate(nn::Network& net, const DatasetManifest& manifest, Split split,
                           const EvalOptions& opts = {}, float threshold = 0.5f) {
    EvalOptions o = opts;
    o.eval_la = opts.eval_la && net.config().la_branch;
    NetworkPredictor p(net, threshold);
    return evaluate(p, manifest, split, o, net.config().method_name());
}

/// One training step's log record.
struct TrainLogRow {
    int64_t step = 0;
    int epoch = 0;
    double lr = 0.0;
    LossBreakdown loss;
    double aux = 0.0;  // deep-supervision extra term (0 when disabled)
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    std::string last_checkpoint;
    std::string best_checkpoint;
    double best_eval_ds_scar = -1.0;
};

namespace detail {

struct PreparedCase {
    Volume vol;  // normalized, padded to at least patch size
    LabelMap lab;
    std::vector<std::vector<int64_t>> scar_components;  // flat voxel indices per component
};

inline PreparedCase prepare_case(Volume vol, LabelMap lab, const std::array<int64_t, 3>& patch) {
    PreparedCase pc;
    Volume norm = normalize_intensity(vol);
    // grow to at least the patch size
    const int64_t tz = std::max(norm.nz(), patch[0]), ty = std::max(norm.ny(), patch[1]),
                  tx = std::max(norm.nx(), patch[2]);
    if (tz != norm.nz() || ty != norm.ny() || tx != norm.nx()) {
        float fill = norm.voxels[0];
        for (int64_t i = 1; i < norm.voxels.size(); ++i) fill = std::min(fill, norm.voxels[i]);
        Volume grown;
        grown.spacing = norm.spacing;
        grown.case_id = norm.case_id;
        grown.voxels = NdArray<float>({tz, ty, tx}, fill);
        LabelMap glab;
        glab.spacing = lab.spacing;
        glab.labels = NdArray<uint8_t>({tz, ty, tx}, kBackgroundLabel);
        for (int64_t z = 0; z < norm.nz(); ++z)
            for (int64_t y = 0; y < norm.ny(); ++y)
                for (int64_t x = 0; x < norm.nx(); ++x) {
                    grown.voxels.at(z, y, x) = norm.voxels.at(z, y, x);
                    glab.labels.at(z, y, x) = lab.labels.at(z, y, x);
                }
        pc.vol = std::move(grown);
        pc.lab = std::move(glab);
    } else {
        pc.vol = std::move(norm);
        pc.lab = std::move(lab);
    }
    // scar components, so forced patches sample small scars as often as
    // large ones
    const int64_t nz = pc.lab.nz(), ny = pc.lab.ny(), nx = pc.lab.nx();
    NdArray<int32_t> comp({nz, ny, nx}, -1);
    std::vector<int64_t> stack;
    for (int64_t s = 0; s < comp.size(); ++s) {
        if (pc.lab.labels[s] != kScarLabel || comp[s] >= 0) continue;
        int32_t id = int32_t(pc.scar_components.size());
        pc.scar_components.emplace_back();
        comp[s] = id;
        stack.push_back(s);
        while (!stack.empty()) {
            int64_t v = stack.back();
            stack.pop_back();
            pc.scar_components[size_t(id)].push_back(v);
            int64_t z = v / (ny * nx), y = (v / nx) % ny, x = v % nx;
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int64_t pz = z + dz, py = y + dy, px = x + dx;
                        if (pz < 0 || pz >= nz || py < 0 || py >= ny || px < 0 || px >= nx) continue;
                        int64_t u = (pz * ny + py) * nx + px;
                        if (pc.lab.labels[u] == kScarLabel && comp[u] < 0) {
                            comp[u] = id;
                            stack.push_back(u);
                        }
                    }
        }
    }
    return pc;
}

inline std::pair<Volume, LabelMap> extract_patch(const PreparedCase& pc, const std::array<int64_t, 3>& patch,
                                                 std::array<int64_t, 3> center) {
    const int64_t nz = pc.vol.nz(), ny = pc.vol.ny(), nx = pc.vol.nx();
    auto lo = [&](int64_t c, int64_t p, int64_t n) { return std::max<int64_t>(0, std::min(c - p / 2, n - p)); };
    const int64_t z0 = lo(center[0], patch[0], nz), y0 = lo(center[1], patch[1], ny),
                  x0 = lo(center[2], patch[2], nx);
    Volume v;
    v.spacing = pc.vol.spacing;
    v.case_id = pc.vol.case_id;
    v.voxels = NdArray<float>({patch[0], patch[1], patch[2]});
    LabelMap l;
    l.spacing = pc.lab.spacing;
    l.labels = NdArray<uint8_t>({patch[0], patch[1], patch[2]});
    for (int64_t z = 0; z < patch[0]; ++z)
        for (int64_t y = 0; y < patch[1]; ++y) {
            const float* src = &pc.vol.voxels.at(z0 + z, y0 + y, x0);
            std::copy(src, src + patch[2], &v.voxels.at(z, y, 0));
            const uint8_t* lsrc = &pc.lab.labels.at(z0 + z, y0 + y, x0);
            std::copy(lsrc, lsrc + patch[2], &l.labels.at(z, y, 0));
        }
    return {std::move(v), std::move(l)};
}

}  // namespace detail

/// Patch-based training loop. Deterministic for a fixed seed: every random
/// draw flows through one generator in a fixed order. Aborts with a
/// diagnostic on a non-finite loss. When `out_dir` is non-empty, writes
/// metrics.csv and checkpoints there.
inline TrainResult train(nn::Network& net, const DatasetManifest& manifest, const TrainConfig& cfg,
                         const std::string& out_dir = "") {
    cfg.validate();
    const nn::NetworkConfig& ncfg = net.config();
    for (int64_t p : cfg.patch_size)
        if (p % ncfg.grid_divisor() != 0)
            throw std::invalid_argument("train: patch size must be divisible by " +
                                        std::to_string(ncfg.grid_divisor()));

    std::vector<const ManifestEntry*> train_entries = manifest.with_split(Split::train);
    if (train_entries.empty()) throw std::invalid_argument("train: manifest has no train split");
    for (const auto* e : train_entries)
        if (!e->labeled()) throw std::invalid_argument("train: case '" + e->case_id + "' has no label");

    std::vector<detail::PreparedCase> cases;
    for (const auto* e : train_entries) {
        auto [vol, lab] = load_case(e->image, e->label, e->case_id);
        cases.push_back(detail::prepare_case(std::move(vol), std::move(*lab), cfg.patch_size));
    }

    Rng rng(Rng::derive_seed(cfg.seed, 0x7c41));
    SgdOptimizer opt{cfg.momentum, cfg.weight_decay};
    std::vector<nn::Parameter*> params = net.parameters();

    std::ofstream metrics;
    if (!out_dir.empty()) {
        metrics.open(out_dir + "/metrics.csv");
        if (!metrics) throw std::runtime_error("train: cannot write metrics.csv in " + out_dir);
        metrics << "step,epoch,lr,dcs_scar,ce_scar,dcs_la,ce_la,total,aux\n";
    }

    TrainResult result;
    const int64_t pz = cfg.patch_size[0], py = cfg.patch_size[1], px = cfg.patch_size[2];
    const int64_t patch_n = pz * py * px;
    double force_acc = 0.0;
    const int64_t total_steps = int64_t(cfg.max_epochs) * cfg.steps_per_epoch;

    for (int64_t step = 0; step < total_steps; ++step) {
        const int epoch = int(step / cfg.steps_per_epoch);
        const double lr = lr_schedule(epoch, cfg);

        Tensor x({cfg.batch_size, 1, pz, py, px});
        auto scar_t = std::make_shared<Tensor>(x.shape());
        auto la_t = ncfg.la_branch ? std::make_shared<Tensor>(x.shape()) : nullptr;

        for (int b = 0; b < cfg.batch_size; ++b) {
            const detail::PreparedCase& pc = cases[size_t(rng.uniform_int(0, int64_t(cases.size()) - 1))];
            force_acc += cfg.force_scar_fraction;
            bool force = force_acc >= 1.0;
            if (force) force_acc -= 1.0;

            std::array<int64_t, 3> center;
            if (force && !pc.scar_components.empty()) {
                const auto& component =
                    pc.scar_components[size_t(rng.uniform_int(0, int64_t(pc.scar_components.size()) - 1))];
                int64_t flat = component[size_t(rng.uniform_int(0, int64_t(component.size()) - 1))];
                center = {flat / (pc.vol.ny() * pc.vol.nx()), (flat / pc.vol.nx()) % pc.vol.ny(),
                          flat % pc.vol.nx()};
            } else {
                center = {rng.uniform_int(0, pc.vol.nz() - 1), rng.uniform_int(0, pc.vol.ny() - 1),
                          rng.uniform_int(0, pc.vol.nx() - 1)};
            }
            auto [pvol, plab] = detail::extract_patch(pc, cfg.patch_size, center);
            if (cfg.augment.any()) {
                auto aug = augment(pvol, plab, cfg.augment, rng);
                pvol = std::move(aug.first);
                plab = std::move(aug.second);
            }
            float* xd = x.data() + b * patch_n;
            std::copy(pvol.voxels.data(), pvol.voxels.data() + patch_n, xd);
            float* sd = scar_t->data() + b * patch_n;
            float* ld = la_t ? la_t->data() + b * patch_n : nullptr;
            for (int64_t i = 0; i < patch_n; ++i) {
                const uint8_t lv = plab.labels[i];
                sd[i] = lv == kScarLabel ? 1.0f : 0.0f;
                if (ld) ld[i] = (cfg.la_target_includes_scar ? lv >= kLaLabel : lv == kLaLabel) ? 1.0f : 0.0f;
            }
        }

        nn::Tape<float> tape;
        auto xv = tape.leaf(x, false);
        nn::Network::ForwardVars fv = net.forward(tape, xv);

        auto d_s = nn::dice_score_op(tape, fv.scar.fused, scar_t);
        auto c_s = nn::cross_entropy_op(tape, fv.scar.fused, scar_t);
        std::vector<nn::VarPtr<float>> terms{d_s, c_s};
        std::vector<float> coeffs{-1.0f, 1.0f};
        nn::VarPtr<float> d_la, c_la;
        if (fv.la) {
            d_la = nn::dice_score_op(tape, fv.la->fused, la_t);
            c_la = nn::cross_entropy_op(tape, fv.la->fused, la_t);
            terms.push_back(d_la);
            terms.push_back(c_la);
            coeffs.push_back(-1.0f);
            coeffs.push_back(1.0f);
        }
        double aux = 0.0;
        if (cfg.deep_supervision) {
            const float w = 1.0f / float(fv.scar.per_depth.size());
            auto add_branch = [&](const nn::Network::BranchVars& bv, const std::shared_ptr<Tensor>& tgt) {
                for (const auto& m : bv.per_depth) {
                    auto d = nn::dice_score_op(tape, m, tgt);
                    auto c = nn::cross_entropy_op(tape, m, tgt);
                    terms.push_back(d);
                    coeffs.push_back(-w);
                    terms.push_back(c);
                    coeffs.push_back(w);
                    aux += double(w) * (-double(d->value[0]) + double(c->value[0]));
                }
            };
            add_branch(fv.scar, scar_t);
            if (fv.la) add_branch(*fv.la, la_t);
        }
        auto objective = nn::affine_combine(tape, terms, coeffs);

        TrainLogRow row;
        row.step = step;
        row.epoch = epoch;
        row.lr = lr;
        row.loss.dcs_scar = double(d_s->value[0]);
        row.loss.ce_scar = double(c_s->value[0]);
        row.loss.dcs_la = d_la ? double(d_la->value[0]) : 0.0;
        row.loss.ce_la = c_la ? double(c_la->value[0]) : 0.0;
        row.loss.total = -row.loss.dcs_scar + row.loss.ce_scar - row.loss.dcs_la + row.loss.ce_la;
        row.aux = aux;
        if (!std::isfinite(row.loss.total) || !std::isfinite(aux))
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + " (lr=" +
                                     std::to_string(lr) + ", dcs_scar=" + std::to_string(row.loss.dcs_scar) +
                                     ", ce_scar=" + std::to_string(row.loss.ce_scar) + ")");

        SgdOptimizer::zero_grad(params);
        tape.backward(objective);
        net.collect_gradients();
        opt.step(params, lr);
        net.set_training_step(step + 1);

        if (metrics.is_open()) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "%lld,%d,%.8f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                          (long long)step, epoch, lr, row.loss.dcs_scar, row.loss.ce_scar, row.loss.dcs_la,
                          row.loss.ce_la, row.loss.total, aux);
            metrics << buf;
        }
        result.log.push_back(row);

        const bool epoch_end = (step + 1) % cfg.steps_per_epoch == 0;
        if (epoch_end && !out_dir.empty()) {
            if (cfg.checkpoint_every_epochs > 0 && (epoch + 1) % cfg.checkpoint_every_epochs == 0)
                nn::save_checkpoint(out_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt", net);
            if (cfg.eval_every_epochs > 0 && (epoch + 1) % cfg.eval_every_epochs == 0 &&
                !manifest.with_split(Split::eval).empty()) {
                EvalResult er = evaluate(net, manifest, Split::eval,
                                         EvalOptions{true, cfg.la_target_includes_scar, 100.0}, cfg.threshold);
                if (er.ds_scar.mean > result.best_eval_ds_scar) {
                    result.best_eval_ds_scar = er.ds_scar.mean;
                    result.best_checkpoint = out_dir + "/best.ckpt";
                    nn::save_checkpoint(result.best_checkpoint, net);
                }
            }
        }
    }

    if (!out_dir.empty()) {
        result.last_checkpoint = out_dir + "/last.ckpt";
        nn::save_checkpoint(result.last_checkpoint, net);
    }
    return result;
}

}  // namespace mdba
