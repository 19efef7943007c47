#include "splatgen/autoencoder.hpp"

#include <fstream>
#include <json.hpp>

namespace splatgen {

using nlohmann::json;

nn::NetSpec AEConfig::encoder_spec() const {
    nn::NetSpec s;
    s.in_channels = 6;  // rgb + pose hints
    s.out_channels = 2 * latent_channels;
    s.base_width = base_width;
    s.stem_mults = stem_mults;
    s.stem = true;
    s.unet = true;
    s.unet_width = unet_width;
    s.unet_mults = unet_mults;
    s.blocks_per_level = blocks_per_level;
    s.attn_levels = attn_levels;
    s.heads = heads;
    s.dropout = dropout;
    s.groups = groups;
    return s;
}

nn::NetSpec AEConfig::decoder_spec() const {
    nn::NetSpec s;
    s.in_channels = latent_channels;
    s.out_channels = 12;
    s.base_width = base_width;
    s.stem_mults = stem_mults;
    s.tail = true;
    s.dropout = dropout;
    s.groups = groups;
    return s;
}

uint64_t AEConfig::hash() const {
    uint64_t h = encoder_spec().hash();
    h ^= decoder_spec().hash() + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h ^= static_cast<uint64_t>(image_size) * 1000003ULL;
    h ^= static_cast<uint64_t>(hint_splats) * 10007ULL;
    return h;
}

Tensor<float> sample_posterior(const LatentPosterior& p, const Tensor<float>& noise) {
    if (!p.mean.same_shape(noise)) fail(ErrorCode::argument, "sample_posterior: noise shape mismatch");
    Tensor<float> z = p.mean;
    for (int64_t i = 0; i < z.numel(); ++i)
        z[i] += std::exp(0.5f * p.logvar[i]) * noise[i];
    return z;
}

template <typename T>
AELossTerms<T> ae_loss(ad::Val<T> rendered, const Tensor<T>& gt_targets, ad::Val<T> z, double beta,
                       bool use_perceptual) {
    if (rendered.value().shape != gt_targets.shape)
        fail(ErrorCode::argument, "ae_loss: rendered/target shape mismatch");
    ad::Tape<T>* tp = rendered.tape;
    ad::Val<T> gt = tp->constant(gt_targets);
    AELossTerms<T> out;

    ad::Val<T> l2 = ad::sum_sq(ad::sub(rendered, gt));
    out.l2 = static_cast<double>(l2.value()[0]);
    ad::Val<T> total = l2;

    if (use_perceptual) {
        ad::Val<T> perc{};
        for (int scale_f : {1, 2, 4}) {
            ad::Val<T> a = rendered, b = gt;
            if (scale_f > 1) {
                a = ad::avg_pool2d(a, scale_f);
                b = ad::avg_pool2d(b, scale_f);
            }
            ad::Val<T> dx = ad::sum_sq(ad::sub(ad::finite_diff_x(a), ad::finite_diff_x(b)));
            ad::Val<T> dy = ad::sum_sq(ad::sub(ad::finite_diff_y(a), ad::finite_diff_y(b)));
            ad::Val<T> term = ad::add(dx, dy);
            perc = perc.valid() ? ad::add(perc, term) : term;
        }
        out.perceptual = static_cast<double>(perc.value()[0]);
        total = ad::add(total, perc);
    }

    ad::Val<T> kl = ad::scale(ad::sum_sq(z), beta);
    out.kl = static_cast<double>(kl.value()[0]);
    out.total = ad::add(total, kl);
    return out;
}

template AELossTerms<float> ae_loss<float>(ad::Val<float>, const Tensor<float>&, ad::Val<float>, double, bool);
template AELossTerms<double> ae_loss<double>(ad::Val<double>, const Tensor<double>&, ad::Val<double>, double,
                                             bool);

Tensor<float> build_encoder_input(const std::vector<Image>& views, const std::vector<Camera>& cams,
                                  int hint_splats) {
    if (views.empty() || views.size() != cams.size())
        fail(ErrorCode::argument, "build_encoder_input: need one camera per view");
    const int v = static_cast<int>(views.size());
    const int h = views[0].height, w = views[0].width;
    std::vector<Image> hints = render_pose_hints(cams, default_view_palette(v), w, h, hint_splats);

    Tensor<float> x({v, 6, h, w});
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int vi = 0; vi < v; ++vi) {
        if (views[static_cast<size_t>(vi)].width != w || views[static_cast<size_t>(vi)].height != h ||
            views[static_cast<size_t>(vi)].channels != 3)
            fail(ErrorCode::argument, "build_encoder_input: view size mismatch");
        float* base = x.ptr() + static_cast<int64_t>(vi) * 6 * plane;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int c = 0; c < 3; ++c) {
                    base[c * plane + y * w + xx] =
                        static_cast<float>(views[static_cast<size_t>(vi)].at(y, xx, c));
                    base[(3 + c) * plane + y * w + xx] =
                        static_cast<float>(hints[static_cast<size_t>(vi)].at(y, xx, c));
                }
    }
    return x;
}

Autoencoder::Autoencoder(const AEConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, 0xAE));
    auto enc = nn::init_params<float>(cfg.encoder_spec(), rng);
    auto dec = nn::init_params<float>(cfg.decoder_spec(), rng);
    for (const auto& n : enc.names) params_.add("enc." + n, std::move(enc.tensors.at(n)));
    for (const auto& n : dec.names) params_.add("dec." + n, std::move(dec.tensors.at(n)));

    // start with a tight posterior (sigma ~ e^-3) so the decoder sees signal
    // rather than reparameterization noise from step one
    Tensor<float>& enc_bias = params_.at("enc.head.conv.b");
    for (int64_t i = cfg.latent_channels; i < 2 * cfg.latent_channels; ++i) enc_bias[i] = -6.0f;
    // bias raw depth toward a quarter of the frustum: mid-frustum walls start
    // far behind typical content and converge slowly
    params_.at("dec.head.conv.b")[0] = -1.1f;
}

uint64_t Autoencoder::spec_hash() const { return cfg_.hash(); }

uint64_t Autoencoder::weights_hash() const {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](uint8_t b) {
        h ^= b;
        h *= 1099511628211ULL;
    };
    for (const auto& name : params_.names) {
        for (char c : name) mix(static_cast<uint8_t>(c));
        const Tensor<float>& t = params_.at(name);
        const uint8_t* bytes = reinterpret_cast<const uint8_t*>(t.data.data());
        for (size_t i = 0; i < t.data.size() * sizeof(float); ++i) mix(bytes[i]);
    }
    return h;
}

namespace {

json ae_config_json(const AEConfig& c) {
    json j;
    j["image_size"] = c.image_size;
    j["latent_channels"] = c.latent_channels;
    j["base_width"] = c.base_width;
    j["stem_mults"] = c.stem_mults;
    j["unet_width"] = c.unet_width;
    j["unet_mults"] = c.unet_mults;
    j["blocks_per_level"] = c.blocks_per_level;
    j["attn_levels"] = c.attn_levels;
    j["heads"] = c.heads;
    j["dropout"] = c.dropout;
    j["groups"] = c.groups;
    j["hint_splats"] = c.hint_splats;
    j["beta"] = c.beta;
    j["perceptual"] = c.perceptual;
    return j;
}

AEConfig ae_config_from_json(const json& j) {
    AEConfig c;
    c.image_size = j.at("image_size");
    c.latent_channels = j.at("latent_channels");
    c.base_width = j.at("base_width");
    c.stem_mults = j.at("stem_mults").get<std::vector<int>>();
    c.unet_width = j.at("unet_width");
    c.unet_mults = j.at("unet_mults").get<std::vector<int>>();
    c.blocks_per_level = j.at("blocks_per_level");
    c.attn_levels = j.at("attn_levels").get<std::vector<int>>();
    c.heads = j.at("heads");
    c.dropout = j.at("dropout");
    c.groups = j.at("groups");
    c.hint_splats = j.at("hint_splats");
    c.beta = j.at("beta");
    c.perceptual = j.at("perceptual");
    return c;
}

}  // namespace

void Autoencoder::save(const std::string& path) const {
    save_checkpoint(path, params_, spec_hash());
    std::ofstream(path + ".json") << ae_config_json(cfg_).dump(2) << "\n";
}

Autoencoder Autoencoder::load(const std::string& path) {
    std::ifstream cf(path + ".json");
    if (!cf) fail(ErrorCode::checkpoint, "autoencoder load: missing config sidecar " + path + ".json");
    json j;
    cf >> j;
    AEConfig cfg = ae_config_from_json(j);
    Autoencoder ae(cfg, 0);
    LoadedCheckpoint ck = load_checkpoint_checked(path, cfg.hash());
    if (ck.params.names != ae.params_.names)
        fail(ErrorCode::checkpoint, "autoencoder load: parameter set mismatch in " + path);
    ae.params_ = std::move(ck.params);
    return ae;
}

LatentPosterior Autoencoder::encode(const std::vector<Image>& views, const std::vector<Camera>& cams) const {
    if (views.size() != cams.size() || views.empty())
        fail(ErrorCode::argument, "encode: need one camera per view");
    const auto canonical = canonicalize_cameras(cams);
    Tensor<float> x = build_encoder_input(views, canonical, cfg_.hint_splats);

    ad::Tape<float> tape;
    nn::NetSpec spec = cfg_.encoder_spec();
    nn::ForwardCtx<float> ctx;
    ctx.tape = &tape;
    ctx.spec = &spec;
    ctx.params = const_cast<nn::ParamStore<float>*>(&params_);
    ctx.trainable = false;
    ctx.prefix = "enc.";
    ad::Val<float> out = nn::net_forward(ctx, tape.constant(std::move(x)));

    const int c = cfg_.latent_channels;
    ad::Val<float> mean = ad::slice_channels(out, 0, c);
    ad::Val<float> logvar = ad::clamp_op(ad::slice_channels(out, c, 2 * c), -30.0, 20.0);
    return LatentPosterior{mean.value(), logvar.value()};
}

Tensor<float> Autoencoder::decode_raw(const Tensor<float>& z) const {
    ad::Tape<float> tape;
    nn::NetSpec spec = cfg_.decoder_spec();
    nn::ForwardCtx<float> ctx;
    ctx.tape = &tape;
    ctx.spec = &spec;
    ctx.params = const_cast<nn::ParamStore<float>*>(&params_);
    ctx.trainable = false;
    ctx.prefix = "dec.";
    return nn::net_forward(ctx, tape.constant(z)).value();
}

SplatSet Autoencoder::decode_scene(const Tensor<float>& z, const std::vector<Camera>& cams) const {
    const auto canonical = canonicalize_cameras(cams);
    Tensor<float> raw = decode_raw(z);
    Tensor<double> raw_d = raw.cast<double>();
    DecodedSplats d = decode_splatter_raw(raw_d, canonical);
    return splats_from_decoded(d, static_cast<int>(canonical.size()), cfg_.image_size, cfg_.image_size);
}

Autoencoder::StepMetrics Autoencoder::train_step(const std::vector<dataio::TrainGroup>& batch,
                                                 nn::AdamW<float>& opt, double lr, uint64_t step_seed) {
    if (batch.empty()) fail(ErrorCode::argument, "ae train_step: empty batch");
    StepMetrics metrics;
    std::map<std::string, Tensor<float>> grad_acc;
    const nn::NetSpec enc_spec = cfg_.encoder_spec();
    const nn::NetSpec dec_spec = cfg_.decoder_spec();

    for (size_t scene_i = 0; scene_i < batch.size(); ++scene_i) {
        const dataio::TrainGroup& g = batch[scene_i];
        if (g.inputs.empty() || g.targets.empty())
            fail(ErrorCode::argument, "ae train_step: group needs inputs and targets");
        Rng rng(derive_seed(step_seed, scene_i));

        // one canonical frame for inputs and targets jointly
        std::vector<Camera> all_cams = g.input_cams;
        all_cams.insert(all_cams.end(), g.target_cams.begin(), g.target_cams.end());
        const auto canonical = canonicalize_cameras(all_cams);
        const std::vector<Camera> in_cams(canonical.begin(), canonical.begin() + static_cast<long>(g.inputs.size()));
        const std::vector<Camera> tgt_cams(canonical.begin() + static_cast<long>(g.inputs.size()), canonical.end());

        ad::Tape<float> tape;
        nn::ForwardCtx<float> enc_ctx{&tape, &enc_spec, &params_, true, true, nullptr, true, "enc."};
        nn::ForwardCtx<float> dec_ctx{&tape, &dec_spec, &params_, true, true, nullptr, true, "dec."};
        Rng enc_drop = rng.child(1), dec_drop = rng.child(2);
        enc_ctx.dropout_rng = &enc_drop;
        dec_ctx.dropout_rng = &dec_drop;

        ad::Val<float> x = tape.constant(build_encoder_input(g.inputs, in_cams, cfg_.hint_splats));
        ad::Val<float> enc_out = nn::net_forward(enc_ctx, x);
        const int c = cfg_.latent_channels;
        ad::Val<float> mean = ad::slice_channels(enc_out, 0, c);
        ad::Val<float> logvar = ad::clamp_op(ad::slice_channels(enc_out, c, 2 * c), -30.0, 20.0);

        Tensor<float> noise(mean.value().shape);
        Rng nrng = rng.child(3);
        for (auto& v : noise.data) v = static_cast<float>(nrng.normal());
        ad::Val<float> z =
            ad::add(mean, ad::mul(ad::exp_op(ad::scale(logvar, 0.5)), tape.constant(std::move(noise))));

        ad::Val<float> raw = nn::net_forward(dec_ctx, z);
        ad::Val<float> rendered = ad::render_splatter_op(raw, in_cams, tgt_cams, cfg_.image_size, cfg_.image_size);

        Tensor<float> gt({static_cast<int64_t>(g.targets.size()), 3, cfg_.image_size, cfg_.image_size});
        const int64_t plane = static_cast<int64_t>(cfg_.image_size) * cfg_.image_size;
        for (size_t vi = 0; vi < g.targets.size(); ++vi)
            for (int y = 0; y < cfg_.image_size; ++y)
                for (int xx = 0; xx < cfg_.image_size; ++xx)
                    for (int ch = 0; ch < 3; ++ch)
                        gt[(static_cast<int64_t>(vi) * 3 + ch) * plane + y * cfg_.image_size + xx] =
                            static_cast<float>(g.targets[vi].at(y, xx, ch));

        AELossTerms<float> terms = ae_loss(rendered, gt, z, cfg_.beta, cfg_.perceptual);
        const double total = static_cast<double>(terms.total.value()[0]);
        if (!std::isfinite(total))
            fail(ErrorCode::numeric, "ae train_step: non-finite loss at scene " + std::to_string(scene_i));
        metrics.loss += total;
        metrics.l2 += terms.l2;
        metrics.perceptual += terms.perceptual;
        metrics.kl += terms.kl;

        tape.backward(terms.total);
        auto grads = nn::collect_param_grads(enc_ctx);
        auto dec_grads = nn::collect_param_grads(dec_ctx);
        grads.merge(dec_grads);
        const float inv = 1.0f / static_cast<float>(batch.size());
        for (auto& [name, gr] : grads) {
            auto it = grad_acc.find(name);
            if (it == grad_acc.end()) it = grad_acc.emplace(name, Tensor<float>::zeros(gr.shape)).first;
            for (int64_t i = 0; i < gr.numel(); ++i) it->second[i] += gr[i] * inv;
        }
    }

    opt.step(params_, grad_acc, lr);
    const double inv = 1.0 / static_cast<double>(batch.size());
    metrics.loss *= inv;
    metrics.l2 *= inv;
    metrics.perceptual *= inv;
    metrics.kl *= inv;
    return metrics;
}

}  // namespace splatgen
