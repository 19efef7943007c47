#include "splatgen/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "splatgen/metrics.hpp"

namespace splatgen {
namespace cli {

int run_gradcheck_suites(uint64_t seed);

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void echo_config(CLI::App& app, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "effective_config.ini");
    f << app.config_to_str(true, true);
}

struct CommonOpts {
    uint64_t seed = 0;
    int threads = 1;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--seed", c.seed, "global random seed; all randomness derives from it");
    cmd->add_option("--threads", c.threads, "worker threads (results are identical for any value)");
}

struct AeTrainOpts {
    std::string data, out;
    int64_t steps = 2000;
    int batch = 1;
    double lr = 6e-5;
    int warmup = 500;
    int image_size = 96;
    int latent_channels = 6;
    int base_width = 32;
    int unet_width = 0;
    double beta = 0.1;
    double dropout = 0.28;
    bool no_perceptual = false;
    int checkpoint_every = 0;
};

AEConfig ae_config_from(const AeTrainOpts& o) {
    AEConfig cfg;
    cfg.image_size = o.image_size;
    cfg.latent_channels = o.latent_channels;
    cfg.base_width = o.base_width;
    cfg.unet_width = o.unet_width;
    cfg.beta = o.beta;
    cfg.dropout = o.dropout;
    cfg.perceptual = !o.no_perceptual;
    return cfg;
}

std::vector<Camera> cameras_from_dir(const std::string& dir, int views, int image_size) {
    dataio::SceneRecord rec = dataio::read_scene_dir(dir);
    const int n = static_cast<int>(rec.frames.size());
    if (n < views) fail(ErrorCode::argument, "cameras-from: scene has fewer frames than requested views");
    std::vector<Camera> cams;
    for (int i = 0; i < views; ++i) {
        Camera cam = rec.frames[static_cast<size_t>(i * n / views)].camera;
        cam.intrinsics = dataio::preprocess_intrinsics(cam.intrinsics, image_size);
        cams.push_back(cam);
    }
    return cams;
}

void write_render_outputs(const std::string& out_dir, const std::string& stem, const SplatSet& scene,
                          const std::vector<Camera>& cams, int size) {
    fs::create_directories(out_dir);
    std::vector<Image> renders, depths;
    for (size_t i = 0; i < cams.size(); ++i) {
        RenderOutput r = render(scene, cams[i], size, size);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s_view%02zu.png", stem.c_str(), i);
        write_png((fs::path(out_dir) / buf).string(), r.rgb);
        Image depth_vis(size, size, 1);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                depth_vis.at(y, x, 0) =
                    std::clamp((r.depth.at(y, x, 0) - cams[i].near) / (cams[i].far - cams[i].near), 0.0, 1.0);
        std::snprintf(buf, sizeof(buf), "%s_view%02zu_depth.png", stem.c_str(), i);
        write_png((fs::path(out_dir) / buf).string(), depth_vis);
        renders.push_back(r.rgb);
        depths.push_back(r.depth);
    }
    Image sheet = metrics::contact_sheet(renders, depths, cams[0].near, cams[0].far);
    write_png((fs::path(out_dir) / (stem + "_sheet.png")).string(), sheet);
}

int cmd_synth_data(const std::string& out, int scenes, uint64_t seed, dataio::SynthConfig cfg) {
    for (int i = 0; i < scenes; ++i) {
        dataio::SynthScene s = dataio::synth_scene_generate(seed + static_cast<uint64_t>(i), cfg);
        dataio::write_scene(out, s);
        std::cout << "wrote " << s.record.id << " (" << s.record.frames.size() << " frames, class "
                  << s.record.class_id << ")\n";
    }
    return 0;
}

int cmd_train_ae(const AeTrainOpts& o, const CommonOpts& common) {
    auto scenes = dataio::load_manifest(o.data);
    if (scenes.empty()) fail(ErrorCode::manifest, "train-ae: no scenes in " + o.data);
    fs::create_directories(o.out);

    Autoencoder ae(ae_config_from(o), common.seed);
    nn::AdamW<float> opt;
    std::ofstream log(fs::path(o.out) / "train_ae_metrics.jsonl", std::ios::trunc);
    dataio::ImageCache cache;

    Rng pick_rng(derive_seed(common.seed, 0x51));
    for (int64_t step = 0; step < o.steps; ++step) {
        std::vector<dataio::TrainGroup> batch;
        Rng step_rng = pick_rng.child(static_cast<uint64_t>(step));
        for (int b = 0; b < o.batch; ++b) {
            const auto& scene = scenes[static_cast<size_t>(step_rng.uniform_int(0, static_cast<int64_t>(scenes.size()) - 1))];
            dataio::ViewGroup g = dataio::select_training_views(scene, step_rng);
            batch.push_back(dataio::load_group(scene, g.input_frames, g.target_frames, o.image_size, &cache));
        }
        const double lr = nn::cosine_warmup_lr(step, o.warmup, o.lr, o.steps);
        auto m = ae.train_step(batch, opt, lr, derive_seed(common.seed, 0xAE00 + static_cast<uint64_t>(step)));
        json j{{"step", step}, {"loss", m.loss}, {"l2", m.l2}, {"perceptual", m.perceptual},
               {"kl", m.kl},   {"lr", lr}};
        log << j.dump() << "\n";
        if (step % 50 == 0) {
            std::cout << "step " << step << " loss " << m.loss << " l2 " << m.l2 << " kl " << m.kl << "\n";
            log.flush();
        }
        if (o.checkpoint_every > 0 && step > 0 && step % o.checkpoint_every == 0)
            ae.save((fs::path(o.out) / "ae.ckpt").string());
    }
    ae.save((fs::path(o.out) / "ae.ckpt").string());
    std::cout << "saved " << (fs::path(o.out) / "ae.ckpt").string() << "\n";
    return 0;
}

struct DdmTrainOpts {
    std::string data, ae_path, out;
    int64_t steps = 2000;
    int batch = 1;
    double lr = 6e-5;
    int warmup = 500;
    int unet_width = 64;
    double dropout = 0.28;
    int groups_per_scene = 4;
    int num_classes = -1;  // -1: from data
    double frac_class = 0.4, frac_image = 0.4;
};

int cmd_train_ddm(const DdmTrainOpts& o, const CommonOpts& common) {
    auto scenes = dataio::load_manifest(o.data);
    if (scenes.empty()) fail(ErrorCode::manifest, "train-ddm: no scenes in " + o.data);
    Autoencoder ae = Autoencoder::load(o.ae_path);
    fs::create_directories(o.out);

    // deterministic view groups for the latent cache
    std::vector<dataio::TrainGroup> groups;
    dataio::ImageCache cache;
    Rng grp_rng(derive_seed(common.seed, 0x9009));
    for (const auto& scene : scenes)
        for (int g = 0; g < o.groups_per_scene; ++g) {
            dataio::ViewGroup vg = dataio::select_training_views(scene, grp_rng);
            groups.push_back(
                dataio::load_group(scene, vg.input_frames, vg.target_frames, ae.config().image_size, &cache));
        }

    int num_classes = o.num_classes;
    if (num_classes < 0) {
        num_classes = 0;
        for (const auto& s : scenes) num_classes = std::max(num_classes, s.class_id + 1);
    }

    DenoiserConfig cfg;
    cfg.latent_channels = ae.config().latent_channels;
    cfg.latent_size = ae.config().latent_size();
    cfg.unet_width = o.unet_width;
    cfg.dropout = o.dropout;
    cfg.num_classes = num_classes;
    cfg.frac_class = num_classes > 0 ? o.frac_class : 0.0;
    cfg.frac_image = o.frac_image;
    Denoiser dn(cfg, common.seed);

    auto cached = build_latent_cache(ae, groups, (fs::path(o.out) / "latent_cache.bin").string());
    std::cout << "latent cache: " << cached.size() << " groups\n";

    nn::AdamW<float> opt;
    std::ofstream log(fs::path(o.out) / "train_ddm_metrics.jsonl", std::ios::trunc);
    Rng pick_rng(derive_seed(common.seed, 0x52));
    for (int64_t step = 0; step < o.steps; ++step) {
        Rng step_rng = pick_rng.child(static_cast<uint64_t>(step));
        std::vector<const CachedGroup*> batch;
        for (int b = 0; b < o.batch; ++b)
            batch.push_back(&cached[static_cast<size_t>(step_rng.uniform_int(0, static_cast<int64_t>(cached.size()) - 1))]);
        const double lr = nn::cosine_warmup_lr(step, o.warmup, o.lr, o.steps);
        auto m = dn.train_step(batch, opt, lr, derive_seed(common.seed, 0xDD00 + static_cast<uint64_t>(step)));
        json j{{"step", step}, {"loss", m.loss}, {"lr", lr}, {"mode", static_cast<int>(m.mode)}};
        log << j.dump() << "\n";
        if (step % 100 == 0) {
            std::cout << "step " << step << " loss " << m.loss << "\n";
            log.flush();
        }
    }
    dn.save((fs::path(o.out) / "ddm.ckpt").string());
    std::cout << "saved " << (fs::path(o.out) / "ddm.ckpt").string() << "\n";
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"latent splat diffusion toolkit"};
    app.require_subcommand(1);
    app.set_config("--config", "", "INI config file; flags override file values, file overrides defaults");

    CommonOpts common;

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate procedural posed multi-view scenes");
    std::string synth_out = "data";
    int synth_scenes = 4;
    dataio::SynthConfig synth_cfg;
    add_common(synth, common);
    synth->add_option("--out", synth_out, "output dataset root")->required();
    synth->add_option("--scenes", synth_scenes, "number of scenes");
    synth->add_option("--frames", synth_cfg.num_frames, "frames per scene");
    synth->add_option("--size", synth_cfg.image_size, "image size");
    synth->add_option("--arc", synth_cfg.arc_degrees, "orbit arc in degrees");
    synth->add_option("--arc-start", synth_cfg.arc_start_degrees, "orbit start angle");
    synth->add_option("--min-objects", synth_cfg.min_objects, "min objects per scene");
    synth->add_option("--max-objects", synth_cfg.max_objects, "max objects per scene");
    synth->add_option("--classes", synth_cfg.num_classes, "class vocabulary size");

    // train-ae
    auto* tae = app.add_subcommand("train-ae", "train the multi-view splat autoencoder");
    AeTrainOpts aeo;
    add_common(tae, common);
    tae->add_option("--data", aeo.data, "dataset root")->required();
    tae->add_option("--out", aeo.out, "output dir")->required();
    tae->add_option("--steps", aeo.steps, "training steps");
    tae->add_option("--batch", aeo.batch, "scenes per step");
    tae->add_option("--lr", aeo.lr, "max learning rate");
    tae->add_option("--warmup", aeo.warmup, "warmup steps");
    tae->add_option("--image-size", aeo.image_size, "model image size");
    tae->add_option("--latent-channels", aeo.latent_channels, "latent channels C");
    tae->add_option("--base-width", aeo.base_width, "stem base width");
    tae->add_option("--unet-width", aeo.unet_width, "U-Net width (0 = base * last mult)");
    tae->add_option("--beta", aeo.beta, "KL weight");
    tae->add_option("--dropout", aeo.dropout, "dropout rate");
    tae->add_flag("--no-perceptual", aeo.no_perceptual, "disable the perceptual term");
    tae->add_option("--checkpoint-every", aeo.checkpoint_every, "intermediate checkpoint interval");

    // train-ddm
    auto* tdd = app.add_subcommand("train-ddm", "train the latent denoiser (stage two)");
    DdmTrainOpts ddo;
    add_common(tdd, common);
    tdd->add_option("--data", ddo.data, "dataset root")->required();
    tdd->add_option("--ae", ddo.ae_path, "autoencoder checkpoint")->required();
    tdd->add_option("--out", ddo.out, "output dir")->required();
    tdd->add_option("--steps", ddo.steps, "training steps");
    tdd->add_option("--batch", ddo.batch, "groups per step");
    tdd->add_option("--lr", ddo.lr, "max learning rate");
    tdd->add_option("--warmup", ddo.warmup, "warmup steps");
    tdd->add_option("--unet-width", ddo.unet_width, "denoiser U-Net width");
    tdd->add_option("--dropout", ddo.dropout, "dropout rate");
    tdd->add_option("--groups-per-scene", ddo.groups_per_scene, "cached view groups per scene");
    tdd->add_option("--classes", ddo.num_classes, "class vocabulary (-1: infer from data)");
    tdd->add_option("--frac-class", ddo.frac_class, "class-conditioning fraction");
    tdd->add_option("--frac-image", ddo.frac_image, "image-conditioning fraction");

    // sample
    auto* smp = app.add_subcommand("sample", "unconditional / class-conditional generation");
    std::string smp_ae, smp_ddm, smp_out = "samples", smp_cams;
    int smp_class = -1, smp_steps = 50, smp_views = 6;
    double smp_cfg = 2.0;
    bool smp_render = false;
    add_common(smp, common);
    smp->add_option("--ae", smp_ae, "autoencoder checkpoint")->required();
    smp->add_option("--ddm", smp_ddm, "denoiser checkpoint")->required();
    smp->add_option("--out", smp_out, "output dir");
    smp->add_option("--class", smp_class, "class label (-1: unconditional)");
    smp->add_option("--steps", smp_steps, "DDIM steps");
    smp->add_option("--cfg", smp_cfg, "classifier-free guidance weight");
    smp->add_option("--cameras-from", smp_cams, "scene dir supplying camera poses")->required();
    smp->add_option("--views", smp_views, "number of views");
    smp->add_flag("--render", smp_render, "write renders and depth maps");

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "image-conditioned 3D reconstruction");
    std::string rec_ae, rec_ddm, rec_out = "recon", rec_scene, rec_image, rec_cams;
    int rec_views = 1, rec_samples = 1, rec_steps = 50;
    double rec_cfg = 2.0;
    std::string rec_convention = "middle";
    add_common(rec, common);
    rec->add_option("--ae", rec_ae)->required();
    rec->add_option("--ddm", rec_ddm)->required();
    rec->add_option("--out", rec_out);
    rec->add_option("--scene", rec_scene, "scene dir (poses + ground truth frames)");
    rec->add_option("--image", rec_image, "bare conditioning image (with --cameras-from)");
    rec->add_option("--cameras-from", rec_cams, "camera source for --image mode");
    rec->add_option("--views", rec_views, "1 (single view) or 6 (sparse, autoencoder only)");
    rec->add_option("--num-samples", rec_samples, "best-of-N samples");
    rec->add_option("--steps", rec_steps, "DDIM steps");
    rec->add_option("--cfg", rec_cfg, "guidance weight");
    rec->add_option("--convention", rec_convention, "input view convention: middle|first");

    // render
    auto* rnd = app.add_subcommand("render", "render a splat file along a camera path");
    std::string rnd_splats, rnd_cams, rnd_out = "renders";
    int rnd_views = 6, rnd_size = 96;
    add_common(rnd, common);
    rnd->add_option("--splats", rnd_splats, "SPLT splat file")->required();
    rnd->add_option("--cameras-from", rnd_cams, "scene dir supplying camera poses")->required();
    rnd->add_option("--out", rnd_out, "output dir");
    rnd->add_option("--views", rnd_views, "number of views along the path");
    rnd->add_option("--size", rnd_size, "render resolution");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "run the finite-difference gradient suites");
    add_common(gc, common);

    // eval
    auto* ev = app.add_subcommand("eval", "run an evaluation protocol");
    std::string ev_task = "sparse", ev_data, ev_ae, ev_ddm, ev_out = "metrics";
    int ev_samples = 20, ev_steps = 50;
    double ev_cfg = 2.0;
    std::string ev_convention = "middle";
    add_common(ev, common);
    ev->add_option("--task", ev_task, "single | sparse | denoised-heldout")->required();
    ev->add_option("--data", ev_data, "dataset root")->required();
    ev->add_option("--ae", ev_ae, "autoencoder checkpoint")->required();
    ev->add_option("--ddm", ev_ddm, "denoiser checkpoint (single/denoised-heldout)");
    ev->add_option("--out", ev_out, "output dir");
    ev->add_option("--num-samples", ev_samples, "best-of-N samples");
    ev->add_option("--steps", ev_steps, "DDIM steps");
    ev->add_option("--cfg", ev_cfg, "guidance weight");
    ev->add_option("--convention", ev_convention, "input view convention: middle|first");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << json{{"error", e.what()}, {"code", 2}}.dump() << "\n";
        return 2;
    }

    try {
        set_num_threads(common.threads);

        if (synth->parsed()) {
            echo_config(app, synth_out);
            return cmd_synth_data(synth_out, synth_scenes, common.seed, synth_cfg);
        }
        if (tae->parsed()) {
            echo_config(app, aeo.out);
            return cmd_train_ae(aeo, common);
        }
        if (tdd->parsed()) {
            echo_config(app, ddo.out);
            return cmd_train_ddm(ddo, common);
        }
        if (smp->parsed()) {
            echo_config(app, smp_out);
            Autoencoder ae = Autoencoder::load(smp_ae);
            Denoiser dn = Denoiser::load(smp_ddm);
            auto cams = cameras_from_dir(smp_cams, smp_views, ae.config().image_size);
            Conditioning cond =
                smp_class >= 0 ? Conditioning::class_cond(smp_class) : Conditioning::none_cond();
            SampleTimings timings;
            auto t0 = std::chrono::steady_clock::now();
            SampleResult res = sample_scene(ae, dn, cams, cond, smp_steps, smp_cfg, common.seed, &timings);
            const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char buf[64];
            std::snprintf(buf, sizeof(buf), "sample_seed%llu.splt",
                          static_cast<unsigned long long>(common.seed));
            write_splats((fs::path(smp_out) / buf).string(), res.scene);
            std::cout << "sample: total " << total << "s (denoise " << timings.denoise_seconds << "s, decode "
                      << timings.decode_seconds << "s, splat " << timings.render_seconds << "s)\n";
            if (smp_render)
                write_render_outputs(smp_out, std::string("sample_seed") + std::to_string(common.seed),
                                     res.scene, res.cams, ae.config().image_size);
            return 0;
        }
        if (rec->parsed()) {
            echo_config(app, rec_out);
            Autoencoder ae = Autoencoder::load(rec_ae);
            const int size = ae.config().image_size;
            if (!rec_image.empty()) {
                if (rec_cams.empty())
                    fail(ErrorCode::argument, "reconstruct --image needs --cameras-from for target poses");
                Denoiser dn = Denoiser::load(rec_ddm);
                auto cams = cameras_from_dir(rec_cams, 6, size);
                Image raw = read_png(rec_image);
                auto [img, intr] = dataio::preprocess_frame(raw, cams[0].intrinsics, size);
                LatentPosterior post = ae.encode({img}, {cams[0]});
                Tensor<float> lat({6, post.mean.dim(1), post.mean.dim(2), post.mean.dim(3)});
                std::copy(post.mean.data.begin(), post.mean.data.end(), lat.ptr());
                std::vector<char> mask(6, 0);
                mask[0] = 1;
                SampleResult res = sample_scene(ae, dn, cams, Conditioning::image_cond(std::move(lat), std::move(mask)),
                                                rec_steps, rec_cfg, common.seed);
                write_splats((fs::path(rec_out) / "reconstruction.splt").string(), res.scene);
                write_render_outputs(rec_out, "reconstruction", res.scene, res.cams, size);
                return 0;
            }
            if (rec_scene.empty()) fail(ErrorCode::argument, "reconstruct needs --scene or --image");
            dataio::SceneRecord scene = dataio::read_scene_dir(rec_scene);
            const auto convention = rec_convention == "first" ? dataio::InputConvention::first
                                                              : dataio::InputConvention::middle;
            if (rec_views == 6) {
                auto result = metrics::eval_sparse_view(ae, {scene});
                metrics::write_metrics_csv((fs::path(rec_out) / "metrics.csv").string(), result.rows);
                std::cout << "sparse 6-view reconstruction psnr " << result.mean_psnr << " dB\n";
                // render the reconstruction for inspection
                auto data = metrics::prepare_eval_scene(scene, dataio::EvalTask::sparse_view, convention, size);
                std::vector<Image> in_imgs;
                std::vector<Camera> in_cams;
                for (int pos : data.input_positions) {
                    in_imgs.push_back(data.images[static_cast<size_t>(pos)]);
                    in_cams.push_back(data.cameras[static_cast<size_t>(pos)]);
                }
                LatentPosterior post = ae.encode(in_imgs, in_cams);
                SplatSet splats = ae.decode_scene(post.mean, in_cams);
                write_splats((fs::path(rec_out) / "reconstruction.splt").string(), splats);
                write_render_outputs(rec_out, "reconstruction", splats, canonicalize_cameras(in_cams), size);
            } else {
                Denoiser dn = Denoiser::load(rec_ddm);
                auto result = metrics::eval_single_view(ae, dn, {scene}, rec_samples, rec_steps, rec_cfg,
                                                        common.seed, convention);
                metrics::write_metrics_csv((fs::path(rec_out) / "metrics.csv").string(), result.rows);
                std::cout << "1-view best-of-" << rec_samples << " psnr " << result.mean_best_psnr << " dB\n";
            }
            return 0;
        }
        if (rnd->parsed()) {
            SplatSet scene = read_splats(rnd_splats);
            auto cams = cameras_from_dir(rnd_cams, rnd_views, rnd_size);
            echo_config(app, rnd_out);
            write_render_outputs(rnd_out, "render", scene, canonicalize_cameras(cams), rnd_size);
            return 0;
        }
        if (gc->parsed()) {
            return run_gradcheck_suites(common.seed);
        }
        if (ev->parsed()) {
            echo_config(app, ev_out);
            Autoencoder ae = Autoencoder::load(ev_ae);
            auto scenes = dataio::load_manifest(ev_data);
            const auto convention = ev_convention == "first" ? dataio::InputConvention::first
                                                             : dataio::InputConvention::middle;
            json summary;
            std::vector<metrics::MetricRow> rows;
            if (ev_task == "sparse") {
                auto r = metrics::eval_sparse_view(ae, scenes);
                rows = r.rows;
                summary = {{"task", "sparse"}, {"mean_psnr", r.mean_psnr}, {"mean_perceptual", r.mean_perceptual}};
            } else if (ev_task == "single") {
                Denoiser dn = Denoiser::load(ev_ddm);
                auto r = metrics::eval_single_view(ae, dn, scenes, ev_samples, ev_steps, ev_cfg, common.seed,
                                                   convention);
                rows = r.rows;
                summary = {{"task", "single"},
                           {"mean_best_psnr", r.mean_best_psnr},
                           {"mean_best_perceptual", r.mean_best_perceptual},
                           {"num_samples", ev_samples}};
            } else if (ev_task == "denoised-heldout") {
                Denoiser dn = Denoiser::load(ev_ddm);
                auto r = metrics::eval_denoised_vs_heldout(ae, dn, scenes, ev_steps, ev_cfg, common.seed);
                rows = r.rows;
                summary = {{"task", "denoised-heldout"},
                           {"psnr_denoised", r.psnr_denoised},
                           {"psnr_heldout", r.psnr_heldout}};
            } else {
                fail(ErrorCode::argument, "eval: unknown task " + ev_task);
            }
            metrics::write_metrics_csv((fs::path(ev_out) / "metrics.csv").string(), rows);
            std::ofstream(fs::path(ev_out) / "summary.json") << summary.dump(2) << "\n";
            std::cout << summary.dump(2) << "\n";
            return 0;
        }
        fail(ErrorCode::argument, "no subcommand given");
    } catch (const Error& e) {
        std::cerr << json{{"error", e.what()}, {"code", e.exit_code()}}.dump() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"code", 1}}.dump() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cli
}  // namespace splatgen
