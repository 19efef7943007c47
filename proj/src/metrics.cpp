#include "splatgen/metrics.hpp"

#include <fstream>
#include <iomanip>

namespace splatgen {
namespace metrics {

double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels || a.size() == 0)
        fail(ErrorCode::argument, "psnr: shape mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

Image pool_img(const Image& a, int f) { return f == 1 ? a : avg_pool(a, f); }

double grad_sse(const Image& a, const Image& b) {
    double acc = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x + 1 < a.width; ++x)
            for (int c = 0; c < a.channels; ++c) {
                const double da = a.at(y, x + 1, c) - a.at(y, x, c);
                const double db = b.at(y, x + 1, c) - b.at(y, x, c);
                acc += (da - db) * (da - db);
            }
    for (int y = 0; y + 1 < a.height; ++y)
        for (int x = 0; x < a.width; ++x)
            for (int c = 0; c < a.channels; ++c) {
                const double da = a.at(y + 1, x, c) - a.at(y, x, c);
                const double db = b.at(y + 1, x, c) - b.at(y, x, c);
                acc += (da - db) * (da - db);
            }
    return acc;
}

}  // namespace

double perceptual_proxy(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height) fail(ErrorCode::argument, "perceptual_proxy: shape mismatch");
    double acc = 0;
    for (int f : {1, 2, 4}) {
        if (a.width % f || a.height % f) continue;
        acc += grad_sse(pool_img(a, f), pool_img(b, f));
    }
    return acc;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(ErrorCode::io, "write_metrics_csv: cannot open " + path);
    f << "scene,metric,value\n";
    f << std::setprecision(10);
    for (const auto& r : rows) f << r.scene << "," << r.metric << "," << r.value << "\n";
}

SceneEvalData prepare_eval_scene(const dataio::SceneRecord& scene, dataio::EvalTask task,
                                 dataio::InputConvention convention, int image_size) {
    dataio::EvalViews views = dataio::select_eval_views(scene, task, convention);
    SceneEvalData out;
    out.id = scene.id;
    for (size_t i = 0; i < views.selected.size(); ++i) {
        const auto& frame = scene.frames[static_cast<size_t>(views.selected[i])];
        Image img = read_png(frame.image_path);
        auto [proc, intr] = dataio::preprocess_frame(img, frame.camera.intrinsics, image_size);
        Camera cam = frame.camera;
        cam.intrinsics = intr;
        out.images.push_back(std::move(proc));
        out.cameras.push_back(cam);
        const int fidx = views.selected[i];
        if (std::find(views.inputs.begin(), views.inputs.end(), fidx) != views.inputs.end())
            out.input_positions.push_back(static_cast<int>(i));
        else
            out.holdout_positions.push_back(static_cast<int>(i));
    }
    return out;
}

namespace {

// Renders the decoded splats at the given positions and scores against gt.
std::pair<double, double> score_views(const SplatSet& splats, const SceneEvalData& data,
                                      const std::vector<int>& positions, int image_size) {
    double psnr_sum = 0, perc_sum = 0;
    for (int pos : positions) {
        // render in the same canonical frame the splats live in
        RenderOutput r = render(splats, data.cameras[static_cast<size_t>(pos)], image_size, image_size);
        psnr_sum += psnr(r.rgb, data.images[static_cast<size_t>(pos)]);
        perc_sum += perceptual_proxy(r.rgb, data.images[static_cast<size_t>(pos)]);
    }
    const double n = static_cast<double>(positions.size());
    return {psnr_sum / n, perc_sum / n};
}

}  // namespace

SingleViewResult eval_single_view(const Autoencoder& ae, const Denoiser& dn,
                                  const std::vector<dataio::SceneRecord>& scenes, int num_samples,
                                  int ddim_steps, double cfg_weight, uint64_t seed,
                                  dataio::InputConvention convention) {
    SingleViewResult out;
    const int image_size = ae.config().image_size;
    double best_psnr_acc = 0, best_perc_acc = 0;
    for (size_t si = 0; si < scenes.size(); ++si) {
        SceneEvalData data =
            prepare_eval_scene(scenes[si], dataio::EvalTask::single_view, convention, image_size);

        // the denoiser supports splats/latents on 6 of the 12 views (the even
        // positions, which contain the input under both conventions); the
        // decoded splats render at all 12
        std::vector<Camera> support_cams;
        int cond_slot = -1;
        const int input_pos = data.input_positions.at(0);
        for (int pos = 0; pos < static_cast<int>(data.cameras.size()); pos += 2) {
            if (pos == input_pos) cond_slot = static_cast<int>(support_cams.size());
            support_cams.push_back(data.cameras[static_cast<size_t>(pos)]);
        }
        if (cond_slot < 0) fail(ErrorCode::argument, "eval_single_view: input view not on a support position");

        // canonical frame: support view 0 == selected view 0
        SceneEvalData cdata = data;
        cdata.cameras = canonicalize_cameras(data.cameras);

        LatentPosterior cond_post =
            ae.encode({data.images[static_cast<size_t>(input_pos)]}, {data.cameras[static_cast<size_t>(input_pos)]});
        const int64_t v = static_cast<int64_t>(support_cams.size());
        Tensor<float> cond_latents({v, cond_post.mean.dim(1), cond_post.mean.dim(2), cond_post.mean.dim(3)});
        std::copy(cond_post.mean.data.begin(), cond_post.mean.data.end(),
                  cond_latents.ptr() + cond_slot * cond_post.mean.numel());
        std::vector<char> mask(static_cast<size_t>(v), 0);
        mask[static_cast<size_t>(cond_slot)] = 1;
        Conditioning cond = Conditioning::image_cond(std::move(cond_latents), std::move(mask));

        double best_psnr = -1, best_perc = 0;
        for (int s = 0; s < num_samples; ++s) {
            SampleResult sample = sample_scene(ae, dn, support_cams, cond, ddim_steps, cfg_weight,
                                               derive_seed(seed, si * 1000 + static_cast<uint64_t>(s)));
            auto [p, perc] = score_views(sample.scene, cdata, data.holdout_positions, image_size);
            if (p > best_psnr) {
                best_psnr = p;
                best_perc = perc;
            }
        }
        out.rows.push_back({data.id, "best_psnr", best_psnr});
        out.rows.push_back({data.id, "best_perceptual", best_perc});
        best_psnr_acc += best_psnr;
        best_perc_acc += best_perc;
    }
    out.mean_best_psnr = best_psnr_acc / static_cast<double>(scenes.size());
    out.mean_best_perceptual = best_perc_acc / static_cast<double>(scenes.size());
    return out;
}

SparseViewResult eval_sparse_view(const Autoencoder& ae, const std::vector<dataio::SceneRecord>& scenes) {
    SparseViewResult out;
    const int image_size = ae.config().image_size;
    double psnr_acc = 0, perc_acc = 0;
    for (const auto& scene : scenes) {
        SceneEvalData data = prepare_eval_scene(scene, dataio::EvalTask::sparse_view,
                                                dataio::InputConvention::middle, image_size);
        std::vector<Image> in_imgs;
        std::vector<Camera> in_cams;
        for (int pos : data.input_positions) {
            in_imgs.push_back(data.images[static_cast<size_t>(pos)]);
            in_cams.push_back(data.cameras[static_cast<size_t>(pos)]);
        }
        LatentPosterior post = ae.encode(in_imgs, in_cams);
        SplatSet splats = ae.decode_scene(post.mean, in_cams);

        // express the held-out cameras in the same canonical frame (input
        // view 0 is the identity there)
        SceneEvalData cdata = data;
        cdata.cameras.clear();
        const Pose ref = in_cams[0].pose;
        for (const Camera& cam : data.cameras) {
            Camera c = cam;
            c.pose = relative_pose(ref, cam.pose);
            cdata.cameras.push_back(c);
        }
        auto [p, perc] = score_views(splats, cdata, data.holdout_positions, image_size);
        out.rows.push_back({scene.id, "psnr", p});
        out.rows.push_back({scene.id, "perceptual", perc});
        psnr_acc += p;
        perc_acc += perc;
    }
    out.mean_psnr = psnr_acc / static_cast<double>(scenes.size());
    out.mean_perceptual = perc_acc / static_cast<double>(scenes.size());
    return out;
}

DenoisedHeldoutResult eval_denoised_vs_heldout(const Autoencoder& ae, const Denoiser& dn,
                                               const std::vector<dataio::SceneRecord>& scenes,
                                               int ddim_steps, double cfg_weight, uint64_t seed) {
    DenoisedHeldoutResult out;
    const int image_size = ae.config().image_size;
    double den_acc = 0, held_acc = 0;
    for (size_t si = 0; si < scenes.size(); ++si) {
        // denoised views = the 6 alternating "input" positions; held-out
        // views sit evenly between them
        SceneEvalData data = prepare_eval_scene(scenes[si], dataio::EvalTask::sparse_view,
                                                dataio::InputConvention::middle, image_size);
        std::vector<Camera> denoised_cams;
        std::vector<Image> denoised_imgs;
        for (int pos : data.input_positions) {
            denoised_cams.push_back(data.cameras[static_cast<size_t>(pos)]);
            denoised_imgs.push_back(data.images[static_cast<size_t>(pos)]);
        }
        // image conditioning: middle denoised view
        const size_t cond_slot = denoised_cams.size() / 2;
        LatentPosterior cond_post = ae.encode({denoised_imgs[cond_slot]}, {denoised_cams[cond_slot]});
        const int64_t v = static_cast<int64_t>(denoised_cams.size());
        Tensor<float> cond_latents({v, cond_post.mean.dim(1), cond_post.mean.dim(2), cond_post.mean.dim(3)});
        std::copy(cond_post.mean.data.begin(), cond_post.mean.data.end(),
                  cond_latents.ptr() + static_cast<int64_t>(cond_slot) * cond_post.mean.numel());
        std::vector<char> mask(static_cast<size_t>(v), 0);
        mask[cond_slot] = 1;
        Conditioning cond = Conditioning::image_cond(std::move(cond_latents), std::move(mask));

        SampleResult sample =
            sample_scene(ae, dn, denoised_cams, cond, ddim_steps, cfg_weight, derive_seed(seed, si));

        // score both sets in the canonical frame of denoised view 0
        SceneEvalData cdata = data;
        cdata.cameras.clear();
        const Pose ref = denoised_cams[0].pose;
        for (const Camera& cam : data.cameras) {
            Camera c = cam;
            c.pose = relative_pose(ref, cam.pose);
            cdata.cameras.push_back(c);
        }
        auto [dp, dperc] = score_views(sample.scene, cdata, data.input_positions, image_size);
        auto [hp, hperc] = score_views(sample.scene, cdata, data.holdout_positions, image_size);
        (void)dperc;
        (void)hperc;
        out.rows.push_back({scenes[si].id, "psnr_denoised", dp});
        out.rows.push_back({scenes[si].id, "psnr_heldout", hp});
        den_acc += dp;
        held_acc += hp;
    }
    out.psnr_denoised = den_acc / static_cast<double>(scenes.size());
    out.psnr_heldout = held_acc / static_cast<double>(scenes.size());
    return out;
}

Image contact_sheet(const std::vector<Image>& renders, const std::vector<Image>& depths, double near,
                    double far) {
    if (renders.empty() || renders.size() != depths.size())
        fail(ErrorCode::argument, "contact_sheet: need matching renders and depths");
    const int h = renders[0].height, w = renders[0].width;
    const int pad = 2;
    Image sheet(2 * h + 3 * pad, static_cast<int>(renders.size()) * (w + pad) + pad, 3);
    for (auto& v : sheet.data) v = 1.0;
    for (size_t i = 0; i < renders.size(); ++i) {
        const int x0 = pad + static_cast<int>(i) * (w + pad);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) sheet.at(pad + y, x0 + x, c) = renders[i].at(y, x, c);
                const double d = depths[i].channels == 1 ? depths[i].at(y, x, 0) : depths[i].at(y, x, 0);
                const double vis = std::clamp((d - near) / (far - near), 0.0, 1.0);
                for (int c = 0; c < 3; ++c) sheet.at(2 * pad + h + y, x0 + x, c) = vis;
            }
    }
    return sheet;
}

}  // namespace metrics
}  // namespace splatgen
