#include "splatgen/diffusion.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <json.hpp>

namespace splatgen {

using nlohmann::json;

NoiseSchedule build_schedule(int steps, double beta_lo, double beta_hi) {
    if (steps < 1) fail(ErrorCode::argument, "build_schedule: steps must be >= 1");
    NoiseSchedule s;
    s.steps = steps;
    s.alpha.resize(static_cast<size_t>(steps) + 1);
    s.sigma.resize(static_cast<size_t>(steps) + 1);
    s.alpha[0] = 1.0;
    s.sigma[0] = 0.0;
    double alpha_bar = 1.0;
    for (int t = 1; t <= steps; ++t) {
        const double beta =
            steps == 1 ? beta_lo : beta_lo + (beta_hi - beta_lo) * static_cast<double>(t - 1) / (steps - 1);
        alpha_bar *= 1.0 - beta;
        s.alpha[static_cast<size_t>(t)] = std::sqrt(alpha_bar);
        s.sigma[static_cast<size_t>(t)] = std::sqrt(1.0 - alpha_bar);
    }
    return s;
}

Tensor<float> forward_diffuse(const Tensor<float>& z, int t, const Tensor<float>& eps,
                              const NoiseSchedule& sched) {
    if (!z.same_shape(eps)) fail(ErrorCode::argument, "forward_diffuse: shape mismatch");
    const float a = static_cast<float>(sched.alpha_at(t));
    const float s = static_cast<float>(sched.sigma_at(t));
    Tensor<float> out(z.shape);
    for (int64_t i = 0; i < z.numel(); ++i) out[i] = a * z[i] + s * eps[i];
    return out;
}

Tensor<float> v_target(const Tensor<float>& z, const Tensor<float>& eps, int t, const NoiseSchedule& sched) {
    if (!z.same_shape(eps)) fail(ErrorCode::argument, "v_target: shape mismatch");
    const float a = static_cast<float>(sched.alpha_at(t));
    const float s = static_cast<float>(sched.sigma_at(t));
    Tensor<float> out(z.shape);
    for (int64_t i = 0; i < z.numel(); ++i) out[i] = a * eps[i] - s * z[i];
    return out;
}

double ddm_loss(const Tensor<float>& v_hat, const Tensor<float>& v) {
    if (!v_hat.same_shape(v)) fail(ErrorCode::argument, "ddm_loss: shape mismatch");
    double acc = 0;
    for (int64_t i = 0; i < v.numel(); ++i) {
        const double d = static_cast<double>(v_hat[i]) - static_cast<double>(v[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(v.numel());
}

LatentStats fit_latent_stats(const std::vector<Tensor<float>>& latents) {
    if (latents.empty()) fail(ErrorCode::argument, "fit_latent_stats: empty batch");
    const int64_t c = latents[0].dim(1);
    LatentStats st;
    st.mean.assign(static_cast<size_t>(c), 0.0);
    st.std_dev.assign(static_cast<size_t>(c), 0.0);
    std::vector<int64_t> counts(static_cast<size_t>(c), 0);
    for (const auto& z : latents) {
        if (z.ndim() != 4 || z.dim(1) != c) fail(ErrorCode::argument, "fit_latent_stats: shape mismatch");
        const int64_t v = z.dim(0), plane = z.dim(2) * z.dim(3);
        for (int64_t vi = 0; vi < v; ++vi)
            for (int64_t ci = 0; ci < c; ++ci) {
                const float* p = z.ptr() + (vi * c + ci) * plane;
                for (int64_t i = 0; i < plane; ++i) st.mean[static_cast<size_t>(ci)] += p[i];
                counts[static_cast<size_t>(ci)] += plane;
            }
    }
    for (int64_t ci = 0; ci < c; ++ci) st.mean[static_cast<size_t>(ci)] /= static_cast<double>(counts[static_cast<size_t>(ci)]);
    for (const auto& z : latents) {
        const int64_t v = z.dim(0), plane = z.dim(2) * z.dim(3);
        for (int64_t vi = 0; vi < v; ++vi)
            for (int64_t ci = 0; ci < c; ++ci) {
                const float* p = z.ptr() + (vi * c + ci) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = p[i] - st.mean[static_cast<size_t>(ci)];
                    st.std_dev[static_cast<size_t>(ci)] += d * d;
                }
            }
    }
    for (int64_t ci = 0; ci < c; ++ci) {
        double var = st.std_dev[static_cast<size_t>(ci)] / static_cast<double>(counts[static_cast<size_t>(ci)]);
        double sd = std::sqrt(var);
        if (sd < 1e-6) {
            std::cerr << "warning: latent channel " << ci << " has degenerate variance; using floor\n";
            sd = 1e-6;
        }
        st.std_dev[static_cast<size_t>(ci)] = sd;
    }
    return st;
}

namespace {

Tensor<float> apply_stats(const Tensor<float>& z, const LatentStats& st, bool forward) {
    if (z.ndim() != 4 || z.dim(1) != static_cast<int64_t>(st.mean.size()))
        fail(ErrorCode::argument, "latent stats: channel mismatch");
    Tensor<float> out(z.shape);
    const int64_t v = z.dim(0), c = z.dim(1), plane = z.dim(2) * z.dim(3);
    for (int64_t vi = 0; vi < v; ++vi)
        for (int64_t ci = 0; ci < c; ++ci) {
            const float* p = z.ptr() + (vi * c + ci) * plane;
            float* o = out.ptr() + (vi * c + ci) * plane;
            const double mu = st.mean[static_cast<size_t>(ci)], sd = st.std_dev[static_cast<size_t>(ci)];
            for (int64_t i = 0; i < plane; ++i)
                o[i] = forward ? static_cast<float>((p[i] - mu) / sd) : static_cast<float>(p[i] * sd + mu);
        }
    return out;
}

}  // namespace

Tensor<float> normalize_latents(const Tensor<float>& z, const LatentStats& st) {
    return apply_stats(z, st, true);
}
Tensor<float> denormalize_latents(const Tensor<float>& z, const LatentStats& st) {
    return apply_stats(z, st, false);
}

Conditioning::Mode draw_conditioning_mode(Rng& rng, double frac_class, double frac_image, int num_classes) {
    const double u = rng.uniform();
    if (u < frac_class && num_classes > 0) return Conditioning::Mode::class_label;
    if (u < frac_class + frac_image) return Conditioning::Mode::image;
    return Conditioning::Mode::none;
}

Tensor<float> cfg_combine(const Tensor<float>& v_cond, const Tensor<float>& v_uncond, double w) {
    if (!v_cond.same_shape(v_uncond)) fail(ErrorCode::argument, "cfg_combine: shape mismatch");
    if (w == 1.0) return v_cond;
    Tensor<float> out(v_cond.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<float>(v_uncond[i] + w * (v_cond[i] - v_uncond[i]));
    return out;
}

Tensor<float> ddim_step(const Tensor<float>& z_t, const Tensor<float>& v_hat, int t, int t_prev,
                        const NoiseSchedule& sched) {
    if (!z_t.same_shape(v_hat)) fail(ErrorCode::argument, "ddim_step: shape mismatch");
    if (t_prev >= t) fail(ErrorCode::argument, "ddim_step: t_prev must be < t");
    const double at = sched.alpha_at(t), st = sched.sigma_at(t);
    const double ap = sched.alpha_at(t_prev), sp = sched.sigma_at(t_prev);
    Tensor<float> out(z_t.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double z0 = at * z_t[i] - st * v_hat[i];
        const double eps = st * z_t[i] + at * v_hat[i];
        out[i] = static_cast<float>(ap * z0 + sp * eps);
    }
    return out;
}

std::vector<int> ddim_timesteps(int total, int steps) {
    if (steps < 1 || steps > total) fail(ErrorCode::argument, "ddim_timesteps: bad step count");
    std::vector<int> ts;
    for (int k = steps; k >= 1; --k) {
        const int t = static_cast<int>(std::lround(static_cast<double>(total) * k / steps));
        if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    ts.push_back(0);
    return ts;
}

nn::NetSpec DenoiserConfig::spec() const {
    nn::NetSpec s;
    s.in_channels = 2 * latent_channels + 1 + 3;  // noisy + conditioning + mask + pose hints
    s.out_channels = latent_channels;
    s.base_width = unet_width;
    s.stem_mults = {1, 1, 1};
    s.unet = true;
    s.unet_width = unet_width;
    s.unet_mults = unet_mults;
    s.blocks_per_level = blocks_per_level;
    s.attn_levels = attn_levels;
    s.heads = heads;
    s.dropout = dropout;
    s.emb_dim = emb_dim;
    s.num_classes = num_classes;
    s.groups = groups;
    return s;
}

uint64_t DenoiserConfig::hash() const {
    uint64_t h = spec().hash();
    h ^= static_cast<uint64_t>(timesteps) * 2654435761ULL;
    h ^= static_cast<uint64_t>(latent_size) * 97531ULL;
    return h;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, 0xDD));
    params_ = nn::init_params<float>(cfg.spec(), rng);
    sched_ = build_schedule(cfg.timesteps);
}

const LatentStats& Denoiser::stats() const {
    if (!has_stats()) fail(ErrorCode::checkpoint, "denoiser: latent stats not fitted");
    return stats_;
}

namespace {

json dn_config_json(const DenoiserConfig& c) {
    json j;
    j["latent_channels"] = c.latent_channels;
    j["latent_size"] = c.latent_size;
    j["unet_width"] = c.unet_width;
    j["unet_mults"] = c.unet_mults;
    j["blocks_per_level"] = c.blocks_per_level;
    j["attn_levels"] = c.attn_levels;
    j["heads"] = c.heads;
    j["dropout"] = c.dropout;
    j["emb_dim"] = c.emb_dim;
    j["num_classes"] = c.num_classes;
    j["groups"] = c.groups;
    j["timesteps"] = c.timesteps;
    j["hint_splats"] = c.hint_splats;
    j["frac_class"] = c.frac_class;
    j["frac_image"] = c.frac_image;
    return j;
}

DenoiserConfig dn_config_from_json(const json& j) {
    DenoiserConfig c;
    c.latent_channels = j.at("latent_channels");
    c.latent_size = j.at("latent_size");
    c.unet_width = j.at("unet_width");
    c.unet_mults = j.at("unet_mults").get<std::vector<int>>();
    c.blocks_per_level = j.at("blocks_per_level");
    c.attn_levels = j.at("attn_levels").get<std::vector<int>>();
    c.heads = j.at("heads");
    c.dropout = j.at("dropout");
    c.emb_dim = j.at("emb_dim");
    c.num_classes = j.at("num_classes");
    c.groups = j.at("groups");
    c.timesteps = j.at("timesteps");
    c.hint_splats = j.at("hint_splats");
    c.frac_class = j.at("frac_class");
    c.frac_image = j.at("frac_image");
    return c;
}

constexpr const char* kStatsMean = "__latent_stats.mean";
constexpr const char* kStatsStd = "__latent_stats.std";

}  // namespace

void Denoiser::save(const std::string& path) const {
    nn::ParamStore<float> full;
    for (const auto& n : params_.names) full.add(n, params_.at(n));
    if (has_stats()) {
        Tensor<float> m({static_cast<int64_t>(stats_.mean.size())});
        Tensor<float> s({static_cast<int64_t>(stats_.std_dev.size())});
        for (size_t i = 0; i < stats_.mean.size(); ++i) {
            m[static_cast<int64_t>(i)] = static_cast<float>(stats_.mean[i]);
            s[static_cast<int64_t>(i)] = static_cast<float>(stats_.std_dev[i]);
        }
        full.add(kStatsMean, std::move(m));
        full.add(kStatsStd, std::move(s));
    }
    save_checkpoint(path, full, cfg_.hash());
    std::ofstream(path + ".json") << dn_config_json(cfg_).dump(2) << "\n";
}

Denoiser Denoiser::load(const std::string& path) {
    std::ifstream cf(path + ".json");
    if (!cf) fail(ErrorCode::checkpoint, "denoiser load: missing config sidecar " + path + ".json");
    json j;
    cf >> j;
    DenoiserConfig cfg = dn_config_from_json(j);
    Denoiser dn(cfg, 0);
    LoadedCheckpoint ck = load_checkpoint_checked(path, cfg.hash());
    for (const auto& n : dn.params_.names) {
        if (!ck.params.has(n)) fail(ErrorCode::checkpoint, "denoiser load: missing parameter " + n);
        dn.params_.at(n) = ck.params.at(n);
    }
    if (ck.params.has(kStatsMean)) {
        const Tensor<float>& m = ck.params.at(kStatsMean);
        const Tensor<float>& s = ck.params.at(kStatsStd);
        dn.stats_.mean.assign(m.data.begin(), m.data.end());
        dn.stats_.std_dev.assign(s.data.begin(), s.data.end());
    }
    return dn;
}

namespace {

Camera scale_camera(const Camera& cam, int factor) {
    Camera out = cam;
    out.intrinsics.fx /= factor;
    out.intrinsics.fy /= factor;
    out.intrinsics.cx /= factor;
    out.intrinsics.cy /= factor;
    out.intrinsics.width /= factor;
    out.intrinsics.height /= factor;
    return out;
}

// [V, 2C+4, h, w]: normalized noisy latents, conditioning slots, mask, hints.
Tensor<float> build_denoiser_input(const Tensor<float>& z_t_norm, const std::vector<Camera>& cams,
                                   const Conditioning& cond, const LatentStats& stats, int hint_splats) {
    const int64_t v = z_t_norm.dim(0), c = z_t_norm.dim(1), h = z_t_norm.dim(2), w = z_t_norm.dim(3);
    Tensor<float> x({v, 2 * c + 4, h, w});
    const int64_t plane = h * w;

    Tensor<float> cond_norm;
    if (cond.mode == Conditioning::Mode::image) {
        if (cond.image_latents.shape != z_t_norm.shape || cond.view_mask.size() != static_cast<size_t>(v))
            fail(ErrorCode::argument, "denoise: image conditioning shape mismatch");
        cond_norm = normalize_latents(cond.image_latents, stats);
    }

    std::vector<Camera> hint_cams;
    hint_cams.reserve(cams.size());
    for (const Camera& cam : cams) hint_cams.push_back(scale_camera(cam, 8));
    std::vector<Image> hints = render_pose_hints(hint_cams, default_view_palette(static_cast<int>(v)),
                                                 static_cast<int>(w), static_cast<int>(h), hint_splats);

    for (int64_t vi = 0; vi < v; ++vi) {
        float* base = x.ptr() + vi * (2 * c + 4) * plane;
        const float* zt = z_t_norm.ptr() + vi * c * plane;
        std::copy(zt, zt + c * plane, base);
        const bool filled = cond.mode == Conditioning::Mode::image && cond.view_mask[static_cast<size_t>(vi)];
        if (filled) {
            const float* cl = cond_norm.ptr() + vi * c * plane;
            std::copy(cl, cl + c * plane, base + c * plane);
        }
        float* mask = base + 2 * c * plane;
        std::fill(mask, mask + plane, filled ? 1.0f : 0.0f);
        float* hint = base + (2 * c + 1) * plane;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
                for (int64_t ch = 0; ch < 3; ++ch)
                    hint[ch * plane + y * w + xx] =
                        static_cast<float>(hints[static_cast<size_t>(vi)].at(static_cast<int>(y),
                                                                             static_cast<int>(xx),
                                                                             static_cast<int>(ch)));
    }
    return x;
}

}  // namespace

Tensor<float> Denoiser::denoise(const Tensor<float>& z_t, int t, const std::vector<Camera>& cams,
                                const Conditioning& cond) const {
    if (t < 1 || t > cfg_.timesteps) fail(ErrorCode::argument, "denoise: t out of range");
    if (z_t.ndim() != 4 || z_t.dim(0) != static_cast<int64_t>(cams.size()))
        fail(ErrorCode::argument, "denoise: latent/camera mismatch");
    Tensor<float> x = build_denoiser_input(z_t, cams, cond, stats(), cfg_.hint_splats);

    ad::Tape<float> tape;
    nn::NetSpec spec = cfg_.spec();
    nn::ForwardCtx<float> ctx;
    ctx.tape = &tape;
    ctx.spec = &spec;
    ctx.params = const_cast<nn::ParamStore<float>*>(&params_);
    ctx.trainable = false;
    const int class_id = cond.mode == Conditioning::Mode::class_label ? cond.class_id : -1;
    ad::Val<float> emb = nn::time_class_embedding(ctx, static_cast<double>(t), class_id);
    return nn::net_forward(ctx, tape.constant(std::move(x)), emb).value();
}

std::vector<CachedGroup> build_latent_cache(const Autoencoder& ae,
                                            const std::vector<dataio::TrainGroup>& groups,
                                            const std::string& cache_path) {
    const uint64_t key = ae.weights_hash();
    if (!cache_path.empty()) {
        std::ifstream f(cache_path, std::ios::binary);
        if (f) {
            uint64_t stored = 0;
            uint64_t count = 0;
            f.read(reinterpret_cast<char*>(&stored), 8);
            f.read(reinterpret_cast<char*>(&count), 8);
            if (f && stored == key && count == groups.size()) {
                std::vector<CachedGroup> cached(count);
                bool ok = true;
                auto read_tensor = [&](Tensor<float>& t) {
                    uint32_t nd = 0;
                    f.read(reinterpret_cast<char*>(&nd), 4);
                    std::vector<int64_t> shape(nd);
                    f.read(reinterpret_cast<char*>(shape.data()), static_cast<std::streamsize>(nd * 8));
                    if (!f) {
                        ok = false;
                        return;
                    }
                    t = Tensor<float>(shape);
                    f.read(reinterpret_cast<char*>(t.data.data()),
                           static_cast<std::streamsize>(t.data.size() * 4));
                };
                for (auto& g : cached) {
                    uint32_t ncams = 0;
                    f.read(reinterpret_cast<char*>(&ncams), 4);
                    g.cams.resize(ncams);
                    for (auto& cam : g.cams) f.read(reinterpret_cast<char*>(&cam), sizeof(Camera));
                    read_tensor(g.post_mean);
                    read_tensor(g.post_logvar);
                    read_tensor(g.cond_means);
                    f.read(reinterpret_cast<char*>(&g.class_id), 4);
                    if (!f) {
                        ok = false;
                        break;
                    }
                }
                if (ok) return cached;
            }
        }
    }

    std::vector<CachedGroup> out;
    out.reserve(groups.size());
    for (const auto& g : groups) {
        CachedGroup cg;
        cg.class_id = g.class_id;
        cg.cams = canonicalize_cameras(g.input_cams);
        LatentPosterior post = ae.encode(g.inputs, g.input_cams);
        cg.post_mean = post.mean;
        cg.post_logvar = post.logvar;
        cg.cond_means = Tensor<float>(post.mean.shape);
        const int64_t per_view = post.mean.numel() / static_cast<int64_t>(g.inputs.size());
        for (size_t v = 0; v < g.inputs.size(); ++v) {
            LatentPosterior single = ae.encode({g.inputs[v]}, {g.input_cams[v]});
            std::copy(single.mean.data.begin(), single.mean.data.end(),
                      cg.cond_means.ptr() + static_cast<int64_t>(v) * per_view);
        }
        out.push_back(std::move(cg));
    }

    if (!cache_path.empty()) {
        std::ofstream f(cache_path, std::ios::binary | std::ios::trunc);
        const uint64_t count = out.size();
        f.write(reinterpret_cast<const char*>(&key), 8);
        f.write(reinterpret_cast<const char*>(&count), 8);
        auto write_tensor = [&](const Tensor<float>& t) {
            const uint32_t nd = static_cast<uint32_t>(t.shape.size());
            f.write(reinterpret_cast<const char*>(&nd), 4);
            f.write(reinterpret_cast<const char*>(t.shape.data()), static_cast<std::streamsize>(nd * 8));
            f.write(reinterpret_cast<const char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * 4));
        };
        for (const auto& g : out) {
            const uint32_t ncams = static_cast<uint32_t>(g.cams.size());
            f.write(reinterpret_cast<const char*>(&ncams), 4);
            for (const auto& cam : g.cams) f.write(reinterpret_cast<const char*>(&cam), sizeof(Camera));
            write_tensor(g.post_mean);
            write_tensor(g.post_logvar);
            write_tensor(g.cond_means);
            f.write(reinterpret_cast<const char*>(&g.class_id), 4);
        }
    }
    return out;
}

Denoiser::StepMetrics Denoiser::train_step(const std::vector<const CachedGroup*>& batch,
                                           nn::AdamW<float>& opt, double lr, uint64_t step_seed) {
    if (batch.empty()) fail(ErrorCode::argument, "ddm train_step: empty batch");
    Rng rng(derive_seed(step_seed, 0xD1));

    if (!has_stats()) {
        std::vector<Tensor<float>> firsts;
        for (const auto* g : batch) {
            Tensor<float> noise(g->post_mean.shape);
            for (auto& v : noise.data) v = static_cast<float>(rng.normal());
            firsts.push_back(sample_posterior({g->post_mean, g->post_logvar}, noise));
        }
        stats_ = fit_latent_stats(firsts);
    }

    // conditioning mode for the whole minibatch
    const Conditioning::Mode mode =
        draw_conditioning_mode(rng, cfg_.frac_class, cfg_.frac_image, cfg_.num_classes);

    StepMetrics metrics;
    metrics.mode = mode;
    std::map<std::string, Tensor<float>> grad_acc;
    nn::NetSpec spec = cfg_.spec();

    for (size_t bi = 0; bi < batch.size(); ++bi) {
        const CachedGroup& g = *batch[bi];
        Rng srng = rng.child(bi + 1);

        Tensor<float> noise(g.post_mean.shape);
        for (auto& v : noise.data) v = static_cast<float>(srng.normal());
        Tensor<float> z = normalize_latents(sample_posterior({g.post_mean, g.post_logvar}, noise), stats_);

        const int t = static_cast<int>(srng.uniform_int(1, cfg_.timesteps));
        Tensor<float> eps(z.shape);
        for (auto& v : eps.data) v = static_cast<float>(srng.normal());
        Tensor<float> z_t = forward_diffuse(z, t, eps, sched_);
        Tensor<float> v = v_target(z, eps, t, sched_);

        Conditioning cond;
        if (mode == Conditioning::Mode::class_label && g.class_id >= 0) {
            cond = Conditioning::class_cond(g.class_id);
        } else if (mode == Conditioning::Mode::image) {
            const int64_t vcount = g.post_mean.dim(0);
            const int64_t pick = srng.uniform_int(0, vcount - 1);
            Tensor<float> latents(g.post_mean.shape);
            const int64_t per_view = latents.numel() / vcount;
            std::copy(g.cond_means.ptr() + pick * per_view, g.cond_means.ptr() + (pick + 1) * per_view,
                      latents.ptr() + pick * per_view);
            std::vector<char> mask(static_cast<size_t>(vcount), 0);
            mask[static_cast<size_t>(pick)] = 1;
            cond = Conditioning::image_cond(std::move(latents), std::move(mask));
        }

        Tensor<float> x = build_denoiser_input(z_t, g.cams, cond, stats_, cfg_.hint_splats);

        ad::Tape<float> tape;
        nn::ForwardCtx<float> ctx;
        ctx.tape = &tape;
        ctx.spec = &spec;
        ctx.params = &params_;
        ctx.trainable = true;
        ctx.training = true;
        Rng drop = srng.child(77);
        ctx.dropout_rng = &drop;
        const int class_id = cond.mode == Conditioning::Mode::class_label ? cond.class_id : -1;
        ad::Val<float> emb = nn::time_class_embedding(ctx, static_cast<double>(t), class_id);
        ad::Val<float> v_hat = nn::net_forward(ctx, tape.constant(std::move(x)), emb);
        ad::Val<float> loss = ad::mse(v_hat, tape.constant(v));
        const double lv = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(lv)) fail(ErrorCode::numeric, "ddm train_step: non-finite loss");
        metrics.loss += lv;

        tape.backward(loss);
        auto grads = nn::collect_param_grads(ctx);
        const float inv = 1.0f / static_cast<float>(batch.size());
        for (auto& [name, gr] : grads) {
            auto it = grad_acc.find(name);
            if (it == grad_acc.end()) it = grad_acc.emplace(name, Tensor<float>::zeros(gr.shape)).first;
            for (int64_t i = 0; i < gr.numel(); ++i) it->second[i] += gr[i] * inv;
        }
    }

    opt.step(params_, grad_acc, lr);
    metrics.loss /= static_cast<double>(batch.size());
    return metrics;
}

SampleResult sample_scene(const Autoencoder& ae, const Denoiser& dn, const std::vector<Camera>& cams,
                          const Conditioning& cond, int steps, double cfg_weight, uint64_t seed,
                          SampleTimings* timings) {
    if (!dn.has_stats()) fail(ErrorCode::checkpoint, "sample_scene: denoiser has no latent stats");
    const auto canonical = canonicalize_cameras(cams);
    const DenoiserConfig& cfg = dn.config();
    const int64_t v = static_cast<int64_t>(cams.size());
    const int64_t h = cfg.latent_size;

    Rng rng(derive_seed(seed, 0x5A));
    Tensor<float> z({v, cfg.latent_channels, h, h});
    for (auto& x : z.data) x = static_cast<float>(rng.normal());

    const bool use_cfg = cond.mode != Conditioning::Mode::none && cfg_weight != 1.0;
    const std::vector<int> ts = ddim_timesteps(cfg.timesteps, steps);

    using clock = std::chrono::steady_clock;
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        const int t = ts[i], t_prev = ts[i + 1];
        auto t0 = clock::now();
        Tensor<float> v_hat = dn.denoise(z, t, canonical, cond);
        if (use_cfg) {
            Tensor<float> v_unc = dn.denoise(z, t, canonical, Conditioning::none_cond());
            v_hat = cfg_combine(v_hat, v_unc, cfg_weight);
        }
        if (timings) timings->denoise_seconds += std::chrono::duration<double>(clock::now() - t0).count();
        z = ddim_step(z, v_hat, t, t_prev, dn.schedule());
    }

    SampleResult out;
    auto t0 = clock::now();
    out.z0 = denormalize_latents(z, dn.stats());
    Tensor<float> raw = ae.decode_raw(out.z0);
    if (timings) timings->decode_seconds += std::chrono::duration<double>(clock::now() - t0).count();

    t0 = clock::now();
    Tensor<double> raw_d = raw.cast<double>();
    DecodedSplats d = decode_splatter_raw(raw_d, canonical);
    out.scene = splats_from_decoded(d, static_cast<int>(v), ae.config().image_size, ae.config().image_size);
    out.cams = canonical;
    if (timings) timings->render_seconds += std::chrono::duration<double>(clock::now() - t0).count();
    return out;
}

}  // namespace splatgen
