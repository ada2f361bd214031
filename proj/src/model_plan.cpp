#include "refine3d/model.hpp"

namespace refine3d {

namespace {

void add_bn(std::vector<ParamDef>& plan, const std::string& prefix, int64_t channels,
            Partition part) {
    plan.push_back({prefix + "bn.gamma", {channels}, part, true, InitKind::ones, 0});
    plan.push_back({prefix + "bn.beta", {channels}, part, true, InitKind::zeros, 0});
    plan.push_back({prefix + "bn.rmean", {channels}, part, false, InitKind::zeros, 0});
    plan.push_back({prefix + "bn.rvar", {channels}, part, false, InitKind::ones, 0});
}

}  // namespace

std::vector<ParamDef> build_param_plan(const ModelConfig& cfg) {
    std::vector<ParamDef> plan;
    const Partition base = Partition::theta_base;
    const Partition att = Partition::phi_att;
    const Partition ref = Partition::phi_ref;

    // Encoder: residual conv blocks, 1x1 skip everywhere except block 4.
    int64_t in_ch = 3;
    for (size_t b = 1; b <= cfg.encoder_channels.size(); ++b) {
        const int64_t out_ch = cfg.encoder_channels[b - 1];
        const std::string pfx = "enc.b" + std::to_string(b) + ".";
        plan.push_back({pfx + "conv1.w", {out_ch, in_ch, 3, 3}, base, true, InitKind::he,
                        in_ch * 9});
        plan.push_back({pfx + "conv1.b", {out_ch}, base, true, InitKind::zeros, 0});
        plan.push_back({pfx + "conv2.w", {out_ch, out_ch, 3, 3}, base, true, InitKind::he,
                        out_ch * 9});
        plan.push_back({pfx + "conv2.b", {out_ch}, base, true, InitKind::zeros, 0});
        if (b != 4) {
            plan.push_back({pfx + "skip.w", {out_ch, in_ch, 1, 1}, base, true, InitKind::he,
                            in_ch});
            plan.push_back({pfx + "skip.b", {out_ch}, base, true, InitKind::zeros, 0});
        }
        in_ch = out_ch;
    }
    if (!cfg.encoder_channels.empty() && cfg.latent_dim > 0) {
        const int64_t flat = cfg.encoder_flat_dim();
        plan.push_back({"enc.fc.w", {flat, cfg.latent_dim}, base, true, InitKind::he, flat});
        plan.push_back({"enc.fc.b", {cfg.latent_dim}, base, true, InitKind::zeros, 0});
    }

    // Attention: per-head projections, zero-initialized output matrix so the
    // module starts out as the identity on every token.
    if (cfg.heads > 0 && cfg.latent_dim > 0) {
        const int64_t dk = cfg.latent_dim / cfg.heads;
        for (int64_t h = 1; h <= cfg.heads; ++h) {
            const std::string pfx = "att.h" + std::to_string(h) + ".";
            plan.push_back({pfx + "wq", {cfg.latent_dim, dk}, att, true,
                            InitKind::attention_proj, cfg.latent_dim});
            plan.push_back({pfx + "wk", {cfg.latent_dim, dk}, att, true,
                            InitKind::attention_proj, cfg.latent_dim});
            plan.push_back({pfx + "wv", {cfg.latent_dim, dk}, att, true,
                            InitKind::attention_proj, cfg.latent_dim});
        }
        plan.push_back({"att.wo", {cfg.latent_dim, cfg.latent_dim}, att, true, InitKind::zeros,
                        0});
    }

    // Decoder: residual transposed-conv stages plus a 1-channel head.
    if (!cfg.decoder_channels.empty() && cfg.latent_dim > 0) {
        in_ch = cfg.seed_channels();
        for (size_t b = 1; b <= cfg.decoder_channels.size(); ++b) {
            const int64_t out_ch = cfg.decoder_channels[b - 1];
            const std::string pfx = "dec.b" + std::to_string(b) + ".";
            plan.push_back({pfx + "tconv.w", {in_ch, out_ch, 3, 3, 3}, base, true, InitKind::he,
                            in_ch * 27});
            plan.push_back({pfx + "tconv.b", {out_ch}, base, true, InitKind::zeros, 0});
            plan.push_back({pfx + "skip.w", {out_ch, in_ch, 1, 1, 1}, base, true, InitKind::he,
                            in_ch});
            plan.push_back({pfx + "skip.b", {out_ch}, base, true, InitKind::zeros, 0});
            in_ch = out_ch;
        }
        plan.push_back({"dec.out.w", {1, in_ch, 1, 1, 1}, base, true, InitKind::he, in_ch});
        plan.push_back({"dec.out.b", {1}, base, true, InitKind::zeros, 0});
    }

    // Refiner U-Net: conv/bn encoder stages, transposed-conv decoder stages
    // with skip concatenations, input volume appended before the head.
    const auto& rc = cfg.refiner_channels;
    if (!rc.empty()) {
        const size_t R = rc.size();
        in_ch = 1;
        // the batchnorm that follows each (t)conv absorbs any constant
        // offset, so those layers carry no bias
        for (size_t i = 1; i <= R; ++i) {
            const int64_t out_ch = rc[i - 1];
            const std::string pfx = "ref.enc" + std::to_string(i) + ".";
            plan.push_back({pfx + "conv.w", {out_ch, in_ch, 4, 4, 4}, ref, true, InitKind::he,
                            in_ch * 64});
            add_bn(plan, pfx, out_ch, ref);
            in_ch = out_ch;
        }
        for (size_t i = 1; i <= R; ++i) {
            const int64_t out_ch = (i < R) ? rc[R - 1 - i] : rc[0];
            const std::string pfx = "ref.dec" + std::to_string(i) + ".";
            plan.push_back({pfx + "tconv.w", {in_ch, out_ch, 4, 4, 4}, ref, true, InitKind::he,
                            in_ch * 64});
            add_bn(plan, pfx, out_ch, ref);
            in_ch = (i < R) ? out_ch + rc[R - 1 - i] : out_ch;
        }
        plan.push_back({"ref.out.w", {1, rc[0] + 1, 1, 1, 1}, ref, true, InitKind::he,
                        rc[0] + 1});
        plan.push_back({"ref.out.b", {1}, ref, true, InitKind::zeros, 0});
    }
    return plan;
}

int64_t param_count(const ModelConfig& cfg, Partition p) {
    int64_t n = 0;
    for (const ParamDef& def : build_param_plan(cfg))
        if (def.partition == p && def.trainable) n += shape_numel(def.shape);
    return n;
}

int64_t param_count(const ModelConfig& cfg) {
    return param_count(cfg, Partition::theta_base) + param_count(cfg, Partition::phi_att) +
           param_count(cfg, Partition::phi_ref);
}

}  // namespace refine3d
