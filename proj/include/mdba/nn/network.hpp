#pragma once

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdba/core/rng.hpp"
#include "mdba/nn/autograd.hpp"
#include "mdba/preprocess.hpp"
#include "mdba/sobel.hpp"
#include "mdba/volume.hpp"

namespace mdba::nn {

enum class Branch { scar, la };

/// Architecture hyperparameters for the two-branch multi-depth network.
struct NetworkConfig {
    int encoder_depth = 3;   // D: resolution levels 0..D-1
    int sub_decoders = 2;    // N: sub-decoder n starts at encoder level n
    int base_channels = 8;   // channels double per level
    int in_channels = 1;
    FusionMode fusion_mode = FusionMode::sobel;
    AttentionMode attention_mode = AttentionMode::sigmoid;
    bool la_branch = true;
    bool share_encoder = false;  // one encoder backbone for both branches

    bool operator==(const NetworkConfig&) const = default;

    int64_t grid_divisor() const { return int64_t(1) << (encoder_depth - 1); }
    int64_t channels_at(int level) const { return int64_t(base_channels) << level; }

    void validate() const {
        if (encoder_depth < 2) throw std::invalid_argument("NetworkConfig: encoder_depth must be >= 2");
        if (sub_decoders < 1 || sub_decoders > encoder_depth - 1)
            throw std::invalid_argument("NetworkConfig: need 1 <= sub_decoders <= encoder_depth-1");
        if (base_channels < 1) throw std::invalid_argument("NetworkConfig: base_channels must be >= 1");
        if (in_channels < 1) throw std::invalid_argument("NetworkConfig: in_channels must be >= 1");
        if (fusion_mode != FusionMode::none && !la_branch)
            throw std::invalid_argument("NetworkConfig: fusion requires the LA branch");
    }

    /// Conventional method tag for reports.
    std::string method_name() const {
        if (!la_branch) return "MDnet";
        switch (fusion_mode) {
            case FusionMode::sobel: return "MDBAnet";
            case FusionMode::multiply: return "MDBAnet_mul";
            default: return "MDnet+LA";
        }
    }
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = nlohmann::json{{"encoder_depth", c.encoder_depth},
                       {"sub_decoders", c.sub_decoders},
                       {"base_channels", c.base_channels},
                       {"in_channels", c.in_channels},
                       {"fusion_mode", to_string(c.fusion_mode)},
                       {"attention_mode", to_string(c.attention_mode)},
                       {"la_branch", c.la_branch},
                       {"share_encoder", c.share_encoder}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
    c.sub_decoders = j.value("sub_decoders", c.sub_decoders);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    if (j.contains("fusion_mode")) c.fusion_mode = fusion_mode_from_string(j["fusion_mode"].get<std::string>());
    if (j.contains("attention_mode"))
        c.attention_mode = attention_mode_from_string(j["attention_mode"].get<std::string>());
    c.la_branch = j.value("la_branch", c.la_branch);
    c.share_encoder = j.value("share_encoder", c.share_encoder);
}

/// Trainable tensor with its gradient and momentum buffer.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor velocity;
};

/// Per-depth probability maps plus their arithmetic-mean fusion.
struct BranchOutput {
    std::vector<Tensor> per_depth;
    Tensor fused;
};

/// Joint loss on a pair of branch outputs; attaches to the fused maps, so
/// it is invariant to any permutation of the per-depth maps.
inline LossBreakdown total_loss(const BranchOutput& scar_out, const Tensor& scar_gt, const BranchOutput* la_out,
                                const Tensor* la_gt) {
    return mdba::total_loss<float>(scar_out.fused, scar_gt, la_out ? &la_out->fused : nullptr, la_gt);
}

/// Elementwise arithmetic mean of the per-depth probability maps.
inline Tensor fuse_outputs(const std::vector<Tensor>& per_depth) {
    if (per_depth.empty()) throw std::invalid_argument("fuse_outputs: empty list");
    for (const auto& m : per_depth)
        if (!m.same_shape(per_depth[0])) throw std::invalid_argument("fuse_outputs: shape mismatch");
    Tensor out(per_depth[0].shape());
    const double inv_n = 1.0 / double(per_depth.size());
    for (int64_t i = 0; i < out.size(); ++i) {
        double acc = 0.0;
        for (const auto& m : per_depth) acc += double(m[i]);
        out[i] = float(acc * inv_n);
    }
    return out;
}

class Network {
public:
    struct BranchVars {
        std::vector<VarPtr<float>> per_depth;
        VarPtr<float> fused;
    };
    struct ForwardVars {
        BranchVars scar;
        std::optional<BranchVars> la;
    };

    explicit Network(NetworkConfig cfg, uint64_t init_seed = 0x711a6b2d) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(init_seed);
        scar_ = build_branch("scar", /*with_encoder=*/true, rng);
        if (cfg_.la_branch) la_ = build_branch("la", /*with_encoder=*/!cfg_.share_encoder, rng);
    }

    const NetworkConfig& config() const { return cfg_; }
    int64_t training_step() const { return step_; }
    void set_training_step(int64_t s) { step_ = s; }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(&p);
        return out;
    }
    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(&p);
        return out;
    }
    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }
    Parameter* find_parameter(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    /// Encoder features, levels 0..D-1. Spatial dims must be divisible by
    /// 2^(D-1).
    std::vector<VarPtr<float>> encode(Tape<float>& tape, const VarPtr<float>& x, Branch branch) {
        check_input(x->value);
        const BranchNet& br = branch_net(branch);
        std::vector<VarPtr<float>> levels;
        VarPtr<float> h = x;
        for (int l = 0; l < cfg_.encoder_depth; ++l) {
            h = conv_block(tape, h, encoder_of(br)[size_t(l)], l == 0 ? 1 : 2);
            levels.push_back(h);
        }
        return levels;
    }

    /// Full two-branch forward pass. The LA branch runs first so its
    /// deepest decoder features can gate the scar decoder.
    ForwardVars forward(Tape<float>& tape, const VarPtr<float>& x) {
        bindings_.clear();
        bound_.clear();
        ForwardVars out;
        std::vector<VarPtr<float>> la_feats;
        if (cfg_.la_branch) {
            auto e = encode(tape, x, Branch::la);
            out.la = decode_branch(tape, e, *la_, /*is_scar=*/false, nullptr, &la_feats);
        }
        auto e = encode(tape, x, Branch::scar);
        out.scar = decode_branch(tape, e, scar_, /*is_scar=*/true,
                                 cfg_.la_branch && cfg_.fusion_mode != FusionMode::none ? &la_feats : nullptr,
                                 nullptr);
        return out;
    }

    /// Copy gradients accumulated in the forward bindings back into the
    /// parameters (call after Tape::backward).
    void collect_gradients() {
        for (auto& [param, var] : bound_) {
            if (var->has_grad()) {
                param->grad = var->grad;
            } else {
                if (param->grad.size() == 0) param->grad = Tensor(param->value.shape());
                param->grad.fill(0.0f);
            }
        }
    }

    /// Inference on a plain tensor; deterministic, no gradients.
    std::pair<BranchOutput, std::optional<BranchOutput>> infer(const Tensor& x) {
        Tape<float> tape(false);
        auto xv = tape.leaf(x, false);
        ForwardVars fv = forward(tape, xv);
        auto strip = [](const BranchVars& bv) {
            BranchOutput o;
            for (const auto& m : bv.per_depth) o.per_depth.push_back(m->value);
            o.fused = bv.fused->value;
            return o;
        };
        std::optional<BranchOutput> la;
        if (fv.la) la = strip(*fv.la);
        return {strip(fv.scar), la};
    }

private:
    struct Conv {
        Parameter* w = nullptr;
        Parameter* b = nullptr;
    };
    struct NormP {
        Parameter* gamma = nullptr;
        Parameter* beta = nullptr;
    };
    struct ConvBlock {
        Conv c1;
        NormP n1;
        Conv c2;
        NormP n2;
    };
    struct UpStage {
        Conv up;
        ConvBlock block;
    };
    struct SubDecoder {
        std::vector<UpStage> stages;  // from start level down to level 0
        Conv head;
    };
    struct BranchNet {
        std::vector<ConvBlock> encoder;  // empty when sharing the scar encoder
        std::vector<SubDecoder> decoders;
    };

    NetworkConfig cfg_;
    std::deque<Parameter> params_;
    BranchNet scar_;
    std::optional<BranchNet> la_;
    int64_t step_ = 0;

    std::vector<std::pair<Parameter*, VarPtr<float>>> bound_;
    std::map<Parameter*, VarPtr<float>> bindings_;

    const BranchNet& branch_net(Branch b) const {
        if (b == Branch::la) {
            if (!la_) throw std::invalid_argument("Network: LA branch is disabled");
            return *la_;
        }
        return scar_;
    }
    const std::vector<ConvBlock>& encoder_of(const BranchNet& br) const {
        return br.encoder.empty() ? scar_.encoder : br.encoder;
    }

    Parameter* add_param(const std::string& name, std::vector<int64_t> shape, Rng& rng, double he_fan_in) {
        Parameter p;
        p.name = name;
        p.value = Tensor(std::move(shape));
        if (he_fan_in > 0) {
            const double stddev = std::sqrt(2.0 / he_fan_in);
            for (int64_t i = 0; i < p.value.size(); ++i) p.value[i] = float(rng.normal(0.0, stddev));
        }
        params_.push_back(std::move(p));
        return &params_.back();
    }
    Parameter* add_const_param(const std::string& name, std::vector<int64_t> shape, float v) {
        Parameter p;
        p.name = name;
        p.value = Tensor(std::move(shape), v);
        params_.push_back(std::move(p));
        return &params_.back();
    }

    Conv make_conv(const std::string& name, int64_t cin, int64_t cout, int64_t k, Rng& rng) {
        Conv c;
        c.w = add_param(name + ".w", {cout, cin, k, k, k}, rng, double(cin * k * k * k));
        c.b = add_const_param(name + ".b", {cout}, 0.0f);
        return c;
    }
    Conv make_deconv(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
        Conv c;
        c.w = add_param(name + ".w", {cin, cout, 2, 2, 2}, rng, double(cin * 8));
        c.b = add_const_param(name + ".b", {cout}, 0.0f);
        return c;
    }
    NormP make_norm(const std::string& name, int64_t ch) {
        NormP n;
        n.gamma = add_const_param(name + ".gamma", {ch}, 1.0f);
        n.beta = add_const_param(name + ".beta", {ch}, 0.0f);
        return n;
    }
    ConvBlock make_block(const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
        ConvBlock b;
        b.c1 = make_conv(name + ".conv1", cin, cout, 3, rng);
        b.n1 = make_norm(name + ".norm1", cout);
        b.c2 = make_conv(name + ".conv2", cout, cout, 3, rng);
        b.n2 = make_norm(name + ".norm2", cout);
        return b;
    }

    BranchNet build_branch(const std::string& prefix, bool with_encoder, Rng& rng) {
        BranchNet br;
        if (with_encoder) {
            for (int l = 0; l < cfg_.encoder_depth; ++l) {
                int64_t cin = l == 0 ? cfg_.in_channels : cfg_.channels_at(l - 1);
                br.encoder.push_back(make_block(prefix + ".enc" + std::to_string(l), cin, cfg_.channels_at(l), rng));
            }
        }
        for (int n = 1; n <= cfg_.sub_decoders; ++n) {
            SubDecoder dec;
            std::string dname = prefix + ".dec" + std::to_string(n);
            for (int level = n; level >= 1; --level) {
                UpStage st;
                std::string sname = dname + ".up" + std::to_string(level);
                st.up = make_deconv(sname + ".deconv", cfg_.channels_at(level), cfg_.channels_at(level - 1), rng);
                st.block = make_block(sname + ".block", 2 * cfg_.channels_at(level - 1), cfg_.channels_at(level - 1),
                                      rng);
                dec.stages.push_back(st);
            }
            dec.head = make_conv(dname + ".head", cfg_.channels_at(0), 1, 1, rng);
            br.decoders.push_back(std::move(dec));
        }
        return br;
    }

    void check_input(const Tensor& x) const {
        if (x.rank() != 5) throw std::invalid_argument("Network: input must be (N,C,Z,Y,X)");
        if (x.dim(1) != cfg_.in_channels)
            throw std::invalid_argument("Network: expected " + std::to_string(cfg_.in_channels) + " channels, got " +
                                        std::to_string(x.dim(1)));
        const int64_t div = cfg_.grid_divisor();
        for (int d = 2; d < 5; ++d)
            if (x.dim(d) % div != 0)
                throw std::invalid_argument("Network: spatial shape " + x.shape_string() +
                                            " not divisible by " + std::to_string(div));
    }

    VarPtr<float> bind(Tape<float>& tape, Parameter* p) {
        auto it = bindings_.find(p);
        if (it != bindings_.end()) return it->second;
        auto var = tape.leaf(p->value, true);
        bindings_.emplace(p, var);
        bound_.emplace_back(p, var);
        return var;
    }

    VarPtr<float> conv_block(Tape<float>& tape, const VarPtr<float>& x, const ConvBlock& blk, int64_t stride_first) {
        auto h = nn::conv3d(tape, x, bind(tape, blk.c1.w), bind(tape, blk.c1.b), stride_first, 1);
        h = nn::instance_norm(tape, h, bind(tape, blk.n1.gamma), bind(tape, blk.n1.beta));
        h = nn::leaky_relu(tape, h);
        h = nn::conv3d(tape, h, bind(tape, blk.c2.w), bind(tape, blk.c2.b), 1, 1);
        h = nn::instance_norm(tape, h, bind(tape, blk.n2.gamma), bind(tape, blk.n2.beta));
        return nn::leaky_relu(tape, h);
    }

    /// One branch's sub-decoders. For the scar branch the deepest
    /// sub-decoder applies the fusion gate at every level, fed by the
    /// same-level features of the deepest LA sub-decoder (recorded into
    /// `out_la_feats` when decoding the LA branch).
    BranchVars decode_branch(Tape<float>& tape, const std::vector<VarPtr<float>>& enc, const BranchNet& br,
                             bool is_scar, const std::vector<VarPtr<float>>* la_feats,
                             std::vector<VarPtr<float>>* out_la_feats) {
        BranchVars out;
        if (out_la_feats) out_la_feats->assign(size_t(cfg_.sub_decoders), nullptr);
        for (int n = 1; n <= cfg_.sub_decoders; ++n) {
            const SubDecoder& dec = br.decoders[size_t(n - 1)];
            const bool deepest = n == cfg_.sub_decoders;
            VarPtr<float> h = enc[size_t(n)];
            for (int si = 0; si < n; ++si) {
                const UpStage& st = dec.stages[size_t(si)];
                const int to_level = n - si - 1;
                auto u = nn::conv_transpose3d(tape, h, bind(tape, st.up.w), bind(tape, st.up.b));
                if (is_scar && deepest && la_feats) {
                    VarPtr<float> gate = (*la_feats)[size_t(to_level)];
                    if (cfg_.fusion_mode == FusionMode::sobel) {
                        gate = nn::sobel_magnitude(tape, gate);
                        if (cfg_.attention_mode == AttentionMode::sigmoid) gate = nn::sigmoid(tape, gate);
                    }
                    u = nn::multiply(tape, u, gate);
                }
                h = nn::concat_channels(tape, u, enc[size_t(to_level)]);
                h = conv_block(tape, h, st.block, 1);
                if (!is_scar && deepest && out_la_feats) (*out_la_feats)[size_t(to_level)] = h;
            }
            auto logits = nn::conv3d(tape, h, bind(tape, dec.head.w), bind(tape, dec.head.b), 1, 0);
            out.per_depth.push_back(nn::sigmoid(tape, logits));
        }
        std::vector<float> coeffs(out.per_depth.size(), 1.0f / float(out.per_depth.size()));
        out.fused = nn::affine_combine(tape, out.per_depth, coeffs);
        return out;
    }
};

/// Full-volume inference: normalize, pad to the network grid, run the
/// network, crop back and binarize. Scar (label 2) wins over LA (label 1)
/// where masks overlap; the threshold compares with >=.
inline LabelMap predict_case(const Volume& v, Network& net, float threshold = 0.5f) {
    if (!(threshold > 0.0f && threshold < 1.0f))
        throw std::invalid_argument("predict_case: threshold must lie in (0,1)");
    Volume norm = normalize_intensity(v);
    PadInfo pad;
    Volume padded = pad_to_grid(norm, net.config().grid_divisor(), &pad);

    Tensor x({1, 1, padded.nz(), padded.ny(), padded.nx()});
    std::copy(padded.voxels.data(), padded.voxels.data() + padded.voxels.size(), x.data());

    auto [scar, la] = net.infer(x);

    auto to_grid = [&](const Tensor& t) {
        NdArray<float> g({t.dim(2), t.dim(3), t.dim(4)});
        std::copy(t.data(), t.data() + t.size(), g.data());
        return crop_to_original(g, pad);
    };
    NdArray<float> scar_prob = to_grid(scar.fused);

    LabelMap out;
    out.spacing = v.spacing;
    out.labels = NdArray<uint8_t>({v.nz(), v.ny(), v.nx()}, kBackgroundLabel);
    if (la) {
        NdArray<float> la_prob = to_grid(la->fused);
        for (int64_t i = 0; i < out.labels.size(); ++i)
            if (la_prob[i] >= threshold) out.labels[i] = kLaLabel;
    }
    for (int64_t i = 0; i < out.labels.size(); ++i)
        if (scar_prob[i] >= threshold) out.labels[i] = kScarLabel;
    return out;
}

}  // namespace mdba::nn
