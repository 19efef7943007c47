#pragma once

#include "splatgen/diffusion.hpp"

namespace splatgen {
namespace metrics {

// 10 log10(1 / MSE), capped at 99 dB for identical images.
double psnr(const Image& a, const Image& b);

// Evaluation-side mirror of the training perceptual proxy: summed squared
// gradient differences at scales {1, 2, 4}.
double perceptual_proxy(const Image& a, const Image& b);

struct MetricRow {
    std::string scene;
    std::string metric;
    double value = 0;
};

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

struct SceneEvalData {
    std::string id;
    std::vector<Image> images;    // the 12 selected eval frames, preprocessed
    std::vector<Camera> cameras;
    std::vector<int> input_positions;    // indices into images
    std::vector<int> holdout_positions;
};

// Loads + preprocesses the select_eval_views frames of a scene.
SceneEvalData prepare_eval_scene(const dataio::SceneRecord& scene, dataio::EvalTask task,
                                 dataio::InputConvention convention, int image_size);

struct SingleViewResult {
    std::vector<MetricRow> rows;
    double mean_best_psnr = 0;
    double mean_best_perceptual = 0;
};

// Best-of-N image-conditioned reconstruction; metrics on the 11 non-input
// views, best sample per scene, mean over scenes.
SingleViewResult eval_single_view(const Autoencoder& ae, const Denoiser& dn,
                                  const std::vector<dataio::SceneRecord>& scenes, int num_samples,
                                  int ddim_steps, double cfg_weight, uint64_t seed,
                                  dataio::InputConvention convention = dataio::InputConvention::middle);

struct SparseViewResult {
    std::vector<MetricRow> rows;
    double mean_psnr = 0;
    double mean_perceptual = 0;
};

// Autoencoder-only: encode the 6 alternating inputs, render at the 6 held-out
// poses, score.
SparseViewResult eval_sparse_view(const Autoencoder& ae, const std::vector<dataio::SceneRecord>& scenes);

struct DenoisedHeldoutResult {
    std::vector<MetricRow> rows;
    double psnr_denoised = 0;   // views supporting splats + latents
    double psnr_heldout = 0;    // views between them
};

// Image-conditioned reconstruction support on 6 alternating views; rendered
// and scored at both the supported and the in-between views.
DenoisedHeldoutResult eval_denoised_vs_heldout(const Autoencoder& ae, const Denoiser& dn,
                                               const std::vector<dataio::SceneRecord>& scenes,
                                               int ddim_steps, double cfg_weight, uint64_t seed);

// Renders-over-depths grid: one column per view, top row renders, bottom row
// depth visualizations normalized to [near, far].
Image contact_sheet(const std::vector<Image>& renders, const std::vector<Image>& depths, double near,
                    double far);

}  // namespace metrics
}  // namespace splatgen
