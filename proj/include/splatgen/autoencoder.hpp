#pragma once

#include "splatgen/checkpoint.hpp"
#include "splatgen/dataio.hpp"
#include "splatgen/graph_render.hpp"
#include "splatgen/optim.hpp"
#include "splatgen/pose_hints.hpp"

namespace splatgen {

struct AEConfig {
    int image_size = 96;
    int latent_channels = 6;
    int base_width = 32;
    std::vector<int> stem_mults = {1, 2, 4};
    int unet_width = 0;  // 0: base_width * stem_mults.back()
    std::vector<int> unet_mults = {1, 2};
    int blocks_per_level = 1;
    std::vector<int> attn_levels = {1};
    int heads = 4;
    double dropout = 0.28;
    int groups = 8;
    int hint_splats = 32;
    double beta = 0.1;
    bool perceptual = true;

    int latent_size() const { return image_size / 8; }
    nn::NetSpec encoder_spec() const;
    nn::NetSpec decoder_spec() const;
    uint64_t hash() const;
};

struct LatentPosterior {
    Tensor<float> mean;    // [V, C, h, w]
    Tensor<float> logvar;  // clamped to [-30, 20]
};

// z = mean + exp(0.5 logvar) * noise
Tensor<float> sample_posterior(const LatentPosterior& p, const Tensor<float>& noise);

// Eq.-style loss on tape values: sum of squared reconstruction error plus the
// multi-scale gradient proxy (when enabled) over target views, plus
// beta * ||z||^2. Breakdown terms are plain numbers from the same graph.
template <typename T>
struct AELossTerms {
    ad::Val<T> total;
    double l2 = 0, perceptual = 0, kl = 0;
};

template <typename T>
AELossTerms<T> ae_loss(ad::Val<T> rendered, const Tensor<T>& gt_targets, ad::Val<T> z, double beta,
                       bool use_perceptual);

class Autoencoder {
public:
    Autoencoder(const AEConfig& cfg, uint64_t seed);

    static Autoencoder load(const std::string& path);
    void save(const std::string& path) const;

    const AEConfig& config() const { return cfg_; }
    nn::ParamStore<float>& params() { return params_; }
    const nn::ParamStore<float>& params() const { return params_; }
    uint64_t spec_hash() const;
    uint64_t weights_hash() const;  // content hash, keys the latent cache

    // Cameras are canonicalized internally (first view becomes identity).
    LatentPosterior encode(const std::vector<Image>& views, const std::vector<Camera>& cams) const;

    // z [V,C,h,w] -> raw splatter channels [V,12,H,W] (deterministic).
    Tensor<float> decode_raw(const Tensor<float>& z) const;

    // Full decode to world splats supported on the (canonicalized) cameras.
    SplatSet decode_scene(const Tensor<float>& z, const std::vector<Camera>& cams) const;

    struct StepMetrics {
        double loss = 0, l2 = 0, perceptual = 0, kl = 0;
    };
    // One optimizer step over a batch of scene groups; gradients averaged
    // over scenes. Deterministic in (params, batch, step_seed).
    StepMetrics train_step(const std::vector<dataio::TrainGroup>& batch, nn::AdamW<float>& opt, double lr,
                           uint64_t step_seed);

private:
    AEConfig cfg_;
    nn::ParamStore<float> params_;  // "enc." / "dec." prefixed
};

// Images [V] + hint renders -> [V, 6, H, W] encoder input tensor.
Tensor<float> build_encoder_input(const std::vector<Image>& views, const std::vector<Camera>& canonical_cams,
                                  int hint_splats);

}  // namespace splatgen
