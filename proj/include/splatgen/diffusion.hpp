#pragma once

#include "splatgen/autoencoder.hpp"

namespace splatgen {

// Variance-preserving schedule: beta linear in t, alpha_t = sqrt(prod(1-beta)),
// sigma_t = sqrt(1 - alpha_t^2). Index 0 is the terminal convention (1, 0).
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> alpha;  // size steps + 1
    std::vector<double> sigma;

    double alpha_at(int t) const { return alpha[check(t)]; }
    double sigma_at(int t) const { return sigma[check(t)]; }
    size_t check(int t) const {
        if (t < 0 || t > steps) fail(ErrorCode::argument, "schedule: t out of range");
        return static_cast<size_t>(t);
    }
};

NoiseSchedule build_schedule(int steps = 1000, double beta_lo = 1e-4, double beta_hi = 0.02);

// z_t = alpha_t z + sigma_t eps
Tensor<float> forward_diffuse(const Tensor<float>& z, int t, const Tensor<float>& eps,
                              const NoiseSchedule& sched);
// v = alpha_t eps - sigma_t z
Tensor<float> v_target(const Tensor<float>& z, const Tensor<float>& eps, int t, const NoiseSchedule& sched);
// mean squared error over all elements
double ddm_loss(const Tensor<float>& v_hat, const Tensor<float>& v);

struct LatentStats {
    std::vector<double> mean;  // per channel
    std::vector<double> std_dev;
};

// Per-channel statistics of the fitting batch (std floored at 1e-6; a warning
// line on stderr marks degenerate channels).
LatentStats fit_latent_stats(const std::vector<Tensor<float>>& latents);
Tensor<float> normalize_latents(const Tensor<float>& z, const LatentStats& stats);
Tensor<float> denormalize_latents(const Tensor<float>& z, const LatentStats& stats);

// v = v_uncond + w (v_cond - v_uncond)
Tensor<float> cfg_combine(const Tensor<float>& v_cond, const Tensor<float>& v_uncond, double w);

// Deterministic (eta = 0) step: z0^ = a_t z_t - s_t v, eps^ = s_t z_t + a_t v,
// z_{t'} = a_{t'} z0^ + s_{t'} eps^.
Tensor<float> ddim_step(const Tensor<float>& z_t, const Tensor<float>& v_hat, int t, int t_prev,
                        const NoiseSchedule& sched);

// Evenly spaced descending subsequence ending at 0: {T, ..., 0}.
std::vector<int> ddim_timesteps(int total, int steps);

struct Conditioning {
    enum class Mode { none, class_label, image };
    Mode mode = Mode::none;
    int class_id = -1;
    Tensor<float> image_latents;  // [V,C,h,w] raw (unnormalized) encoder latents
    std::vector<char> view_mask;  // size V, 1 where a slot holds conditioning

    static Conditioning none_cond() { return {}; }
    static Conditioning class_cond(int id) {
        Conditioning c;
        c.mode = Mode::class_label;
        c.class_id = id;
        return c;
    }
    static Conditioning image_cond(Tensor<float> latents, std::vector<char> mask) {
        Conditioning c;
        c.mode = Mode::image;
        c.image_latents = std::move(latents);
        c.view_mask = std::move(mask);
        return c;
    }
};

// Minibatch conditioning mode: class w.p. frac_class, image w.p. frac_image,
// unconditional otherwise. Class falls back to none when no vocabulary exists.
Conditioning::Mode draw_conditioning_mode(Rng& rng, double frac_class, double frac_image, int num_classes);

struct DenoiserConfig {
    int latent_channels = 6;
    int latent_size = 12;  // image_size / 8
    int unet_width = 64;
    std::vector<int> unet_mults = {1, 2};
    int blocks_per_level = 1;
    std::vector<int> attn_levels = {1};
    int heads = 4;
    double dropout = 0.28;
    int emb_dim = 128;
    int num_classes = 0;
    int groups = 8;
    int timesteps = 1000;
    int hint_splats = 32;
    double frac_class = 0.4, frac_image = 0.4;  // remainder unconditional

    nn::NetSpec spec() const;
    uint64_t hash() const;
};

// Cached encoder outputs for one training view group.
struct CachedGroup {
    std::vector<Camera> cams;     // canonicalized input cameras
    Tensor<float> post_mean;      // [V,C,h,w]
    Tensor<float> post_logvar;
    Tensor<float> cond_means;     // [V,C,h,w]: slot v = E(view v alone)
    int class_id = -1;
};

// Joint + single-view encodings for every group; persisted to `cache_path`
// (when non-empty) keyed by the autoencoder weights hash.
std::vector<CachedGroup> build_latent_cache(const Autoencoder& ae,
                                            const std::vector<dataio::TrainGroup>& groups,
                                            const std::string& cache_path = "");

class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, uint64_t seed);
    static Denoiser load(const std::string& path);
    void save(const std::string& path) const;

    const DenoiserConfig& config() const { return cfg_; }
    nn::ParamStore<float>& params() { return params_; }
    const NoiseSchedule& schedule() const { return sched_; }
    bool has_stats() const { return !stats_.mean.empty(); }
    const LatentStats& stats() const;
    void set_stats(const LatentStats& s) { stats_ = s; }

    // v prediction for normalized noisy latents. Image-conditioning latents
    // come in raw and are normalized internally.
    Tensor<float> denoise(const Tensor<float>& z_t, int t, const std::vector<Camera>& cams,
                          const Conditioning& cond) const;

    struct StepMetrics {
        double loss = 0;
        Conditioning::Mode mode = Conditioning::Mode::none;
    };
    // Fits latent stats from the first batch. Conditioning mode is drawn per
    // minibatch (class/image/none at frac_class/frac_image/remainder).
    StepMetrics train_step(const std::vector<const CachedGroup*>& batch, nn::AdamW<float>& opt, double lr,
                           uint64_t step_seed);

private:
    DenoiserConfig cfg_;
    nn::ParamStore<float> params_;
    NoiseSchedule sched_;
    LatentStats stats_;
};

struct SampleTimings {
    double denoise_seconds = 0;
    double decode_seconds = 0;
    double render_seconds = 0;
};

struct SampleResult {
    SplatSet scene;
    Tensor<float> z0;  // raw latents after denormalization
    std::vector<Camera> cams;  // canonicalized
};

// DDIM sampling: z_T ~ N(0,I) under `seed`, CFG applied when conditioning is
// present, final latents denormalized and decoded through the autoencoder.
SampleResult sample_scene(const Autoencoder& ae, const Denoiser& dn, const std::vector<Camera>& cams,
                          const Conditioning& cond, int steps, double cfg_weight, uint64_t seed,
                          SampleTimings* timings = nullptr);

}  // namespace splatgen
