#include <cstdio>

#include "splatgen/graph_render.hpp"
#include "splatgen/optim.hpp"

namespace splatgen {
namespace cli {

namespace {

Tensor<double> randn(Rng& rng, std::vector<int64_t> shape, double s = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * s;
    return t;
}

struct Suite {
    const char* name;
    double max_rel;
    double threshold;
};

bool report(const Suite& s) {
    const bool pass = s.max_rel < s.threshold;
    std::printf("[%s] %-34s max rel err %.3e (tol %.0e)\n", pass ? "PASS" : "FAIL", s.name, s.max_rel,
                s.threshold);
    return pass;
}

double raster_fd(Rng& rng) {
    // full splat-parameter finite differences through render()
    const int w = 10, h = 10;
    Camera cam;
    cam.intrinsics = {0.6 * w, 0.6 * h, 0.5 * w, 0.5 * h, w, h};
    SplatSet scene;
    for (int i = 0; i < 6; ++i) {
        Splat s;
        s.position = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.5, 4.0));
        Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        s.rotation = q.normalized();
        for (int k = 0; k < 3; ++k) s.scale[k] = std::exp(rng.uniform(-2.5, -0.8));
        s.opacity = rng.uniform(0.3, 0.9);
        s.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
        scene.splats.push_back(s);
    }
    RenderCotangent cot;
    cot.rgb = Image(h, w, 3);
    cot.depth = Image(h, w, 1);
    cot.alpha = Image(h, w, 1);
    for (auto& v : cot.rgb.data) v = rng.uniform(-1, 1);
    for (auto& v : cot.depth.data) v = rng.uniform(-0.2, 0.2);
    for (auto& v : cot.alpha.data) v = rng.uniform(-0.5, 0.5);

    auto objective = [&](const SplatSet& sc) {
        RenderOutput r = render(sc, cam, w, h);
        double acc = 0;
        for (size_t i = 0; i < r.rgb.data.size(); ++i) acc += r.rgb.data[i] * cot.rgb.data[i];
        for (size_t i = 0; i < r.depth.data.size(); ++i) acc += r.depth.data[i] * cot.depth.data[i];
        for (size_t i = 0; i < r.alpha.data.size(); ++i) acc += r.alpha.data[i] * cot.alpha.data[i];
        return acc;
    };
    DecodedSplatsGrad g = render_vjp(scene, cam, w, h, cot);

    double worst = 0;
    const double step = 1e-4;
    auto check = [&](auto&& ref_of, double analytic) {
        SplatSet s2 = scene;
        double& ref = ref_of(s2);
        const double orig = ref;
        ref = orig + step;
        const double fp = objective(s2);
        ref = orig - step;
        const double fm = objective(s2);
        const double fd = (fp - fm) / (2 * step);
        worst = std::max(worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-6}));
    };
    for (size_t i = 0; i < scene.splats.size(); ++i) {
        for (int k = 0; k < 3; ++k)
            check([&, i, k](SplatSet& s) -> double& { return s.splats[i].position[k]; }, g.position[i * 3 + static_cast<size_t>(k)]);
        for (int k = 0; k < 4; ++k)
            check([&, i, k](SplatSet& s) -> double& { return s.splats[i].rotation[k]; }, g.rotation[i * 4 + static_cast<size_t>(k)]);
        for (int k = 0; k < 3; ++k)
            check([&, i, k](SplatSet& s) -> double& { return s.splats[i].scale[k]; }, g.scale[i * 3 + static_cast<size_t>(k)]);
        check([&, i](SplatSet& s) -> double& { return s.splats[i].opacity; }, g.opacity[i]);
        for (int k = 0; k < 3; ++k)
            check([&, i, k](SplatSet& s) -> double& { return s.splats[i].color[k]; }, g.color[i * 3 + static_cast<size_t>(k)]);
    }
    return worst;
}

double decode_fd(Rng& rng) {
    Camera cam;
    cam.intrinsics = {24, 24, 12, 12, 24, 24};
    Tensor<double> raw = randn(rng, {1, 12, 2, 2}, 2.0);
    DecodedSplats base = decode_splatter_raw(raw, {cam});
    DecodedSplatsGrad cot = DecodedSplatsGrad::zeros(base.count);
    for (auto& v : cot.position) v = rng.uniform(-1, 1);
    for (auto& v : cot.rotation) v = rng.uniform(-1, 1);
    for (auto& v : cot.scale) v = rng.uniform(-1, 1);
    for (auto& v : cot.opacity) v = rng.uniform(-1, 1);
    for (auto& v : cot.color) v = rng.uniform(-1, 1);
    Tensor<double> analytic = decode_splatter_raw_vjp(raw, {cam}, cot);
    auto objective = [&](const Tensor<double>& r) {
        DecodedSplats d = decode_splatter_raw(r, {cam});
        double acc = 0;
        for (size_t i = 0; i < d.position.size(); ++i) acc += d.position[i] * cot.position[i];
        for (size_t i = 0; i < d.rotation.size(); ++i) acc += d.rotation[i] * cot.rotation[i];
        for (size_t i = 0; i < d.scale.size(); ++i) acc += d.scale[i] * cot.scale[i];
        for (size_t i = 0; i < d.opacity.size(); ++i) acc += d.opacity[i] * cot.opacity[i];
        for (size_t i = 0; i < d.color.size(); ++i) acc += d.color[i] * cot.color[i];
        return acc;
    };
    double worst = 0;
    for (int64_t i = 0; i < raw.numel(); ++i) {
        Tensor<double> r = raw;
        const double step = 1e-4;
        r[i] += step;
        const double fp = objective(r);
        r[i] -= 2 * step;
        const double fm = objective(r);
        const double fd = (fp - fm) / (2 * step);
        worst = std::max(worst, std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-6}));
    }
    return worst;
}

}  // namespace

int run_gradcheck_suites(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x6C));
    bool all_pass = true;

    all_pass &= report({"linear",
                        nn::grad_check(
                            [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                                return ad::sum_sq(ad::linear(in[0], in[1], in[2]));
                            },
                            {randn(rng, {3, 5}), randn(rng, {4, 5}), randn(rng, {4})}),
                        1e-6});

    all_pass &= report({"conv2d",
                        nn::grad_check(
                            [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                                return ad::sum_sq(ad::conv2d(in[0], in[1], in[2], 2, 1));
                            },
                            {randn(rng, {1, 3, 6, 6}), randn(rng, {4, 3, 3, 3}), randn(rng, {4})}),
                        1e-4});

    all_pass &= report({"group_norm",
                        nn::grad_check(
                            [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                                return ad::sum_sq(ad::group_norm(in[0], in[1], in[2], 2));
                            },
                            {randn(rng, {2, 4, 3, 3}), randn(rng, {4}, 0.5), randn(rng, {4}, 0.5)}),
                        1e-4});

    all_pass &= report({"residual_block",
                        nn::grad_check(
                            [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                                auto h = ad::conv2d(ad::silu(ad::group_norm(in[0], in[1], in[2], 2)), in[3],
                                                    in[4], 1, 1);
                                return ad::sum_sq(ad::add(in[0], h));
                            },
                            {randn(rng, {1, 4, 3, 3}), randn(rng, {4}, 0.4), randn(rng, {4}, 0.4),
                             randn(rng, {4, 4, 3, 3}, 0.4), randn(rng, {4}, 0.2)}),
                        1e-4});

    all_pass &= report(
        {"cross_view_attention",
         nn::grad_check(
             [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                 auto tok = ad::nchw_to_tokens(in[0]);
                 auto q = ad::split_heads(ad::linear(tok, in[1], in[2]), 2);
                 auto k = ad::split_heads(ad::linear(tok, in[3], in[4]), 2);
                 auto v = ad::split_heads(ad::linear(tok, in[5], in[6]), 2);
                 auto scores = ad::scale(ad::bmm(q, ad::transpose_last2(k)), 1.0 / std::sqrt(2.0));
                 auto out = ad::merge_heads(ad::bmm(ad::softmax_lastdim(scores), v));
                 return ad::sum_sq(ad::tokens_to_nchw(out, 2, 4, 2, 2));
             },
             {randn(rng, {2, 4, 2, 2}), randn(rng, {4, 4}, 0.5), randn(rng, {4}, 0.1),
              randn(rng, {4, 4}, 0.5), randn(rng, {4}, 0.1), randn(rng, {4, 4}, 0.5), randn(rng, {4}, 0.1)}),
         1e-4});

    all_pass &= report({"splatter_decode", decode_fd(rng), 1e-4});
    all_pass &= report({"rasterizer_vjp", raster_fd(rng), 1e-3});

    all_pass &= report(
        {"decode_render_chain",
         nn::grad_check(
             [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                 Camera cam;
                 cam.intrinsics = {10, 10, 5, 5, 10, 10};
                 return ad::sum_sq(ad::render_splatter_op(in[0], {cam}, {cam}, 10, 10));
             },
             {randn(rng, {1, 12, 2, 2})},
             1e-4),
         1e-3});

    std::printf(all_pass ? "gradcheck: all suites passed\n" : "gradcheck: FAILURES\n");
    return all_pass ? 0 : 1;
}

}  // namespace cli
}  // namespace splatgen
