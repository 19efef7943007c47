#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "splatgen/checkpoint.hpp"
#include "splatgen/optim.hpp"
#include "test_util.hpp"

using namespace splatgen;
namespace ad = splatgen::ad;

namespace {

Tensor<double> randn(Rng& rng, std::vector<int64_t> shape, double s = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * s;
    return t;
}

nn::NetSpec tiny_unet_spec(int in_ch = 4, int out_ch = 3) {
    nn::NetSpec s;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.base_width = 8;
    s.stem_mults = {1, 1, 1};
    s.unet = true;
    s.unet_width = 8;
    s.unet_mults = {1, 2};
    s.attn_levels = {1};
    s.heads = 2;
    s.dropout = 0.3;
    s.emb_dim = 0;
    return s;
}

}  // namespace

TEST_SUITE_BEGIN("nn");

TEST_CASE("grad_check: linear layer is exact") {
    Rng rng(41);
    double err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            return ad::sum_sq(ad::linear(in[0], in[1], in[2]));
        },
        {randn(rng, {3, 5}), randn(rng, {4, 5}), randn(rng, {4})});
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check: conv2d stride 1 and stride 2") {
    Rng rng(42);
    for (int stride : {1, 2}) {
        double err = nn::grad_check(
            [stride](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
                return ad::sum_sq(ad::conv2d(in[0], in[1], in[2], stride, 1));
            },
            {randn(rng, {2, 3, 6, 6}), randn(rng, {4, 3, 3, 3}), randn(rng, {4})});
        CHECK(err < 1e-5);
    }
}

TEST_CASE("grad_check: group_norm, softmax, silu, clamp, avg_pool, upsample") {
    Rng rng(43);
    double err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            return ad::sum_sq(ad::group_norm(in[0], in[1], in[2], 2));
        },
        {randn(rng, {2, 4, 3, 3}), randn(rng, {4}, 0.5), randn(rng, {4}, 0.5)});
    CHECK(err < 1e-4);

    err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            return ad::sum_sq(ad::softmax_lastdim(in[0]));
        },
        {randn(rng, {2, 3, 5})});
    CHECK(err < 1e-5);

    err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            auto a = ad::silu(in[0]);
            auto b = ad::clamp_op(a, -0.5, 0.5);
            auto c = ad::avg_pool2d(ad::upsample_nearest2(b), 2);
            return ad::mean_all(ad::mul(c, c));
        },
        {randn(rng, {1, 2, 4, 4})});
    CHECK(err < 1e-5);
}

TEST_CASE("grad_check: residual block with norm and SiLU") {
    Rng rng(44);
    double err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            auto h = ad::conv2d(ad::silu(ad::group_norm(in[0], in[1], in[2], 2)), in[3], in[4], 1, 1);
            auto h2 = ad::conv2d(ad::silu(ad::group_norm(h, in[5], in[6], 2)), in[7], in[8], 1, 1);
            return ad::sum_sq(ad::add(in[0], h2));
        },
        {randn(rng, {1, 4, 3, 3}), randn(rng, {4}, 0.3), randn(rng, {4}, 0.3), randn(rng, {4, 4, 3, 3}, 0.4),
         randn(rng, {4}, 0.2), randn(rng, {4}, 0.3), randn(rng, {4}, 0.3), randn(rng, {4, 4, 3, 3}, 0.4),
         randn(rng, {4}, 0.2)});
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check: cross-view attention block") {
    Rng rng(45);
    const int64_t v = 2, c = 4, h = 2, w = 2, heads = 2;
    double err = nn::grad_check(
        [=](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            auto tok = ad::nchw_to_tokens(in[0]);
            auto q = ad::split_heads(ad::linear(tok, in[1], in[2]), heads);
            auto k = ad::split_heads(ad::linear(tok, in[3], in[4]), heads);
            auto vv = ad::split_heads(ad::linear(tok, in[5], in[6]), heads);
            auto scores = ad::scale(ad::bmm(q, ad::transpose_last2(k)), 1.0 / std::sqrt(2.0));
            auto out = ad::merge_heads(ad::bmm(ad::softmax_lastdim(scores), vv));
            out = ad::tokens_to_nchw(ad::linear(out, in[7], in[8]), v, c, h, w);
            return ad::sum_sq(ad::add(in[0], out));
        },
        {randn(rng, {v, c, h, w}), randn(rng, {c, c}, 0.5), randn(rng, {c}, 0.1), randn(rng, {c, c}, 0.5),
         randn(rng, {c}, 0.1), randn(rng, {c, c}, 0.5), randn(rng, {c}, 0.1), randn(rng, {c, c}, 0.5),
         randn(rng, {c}, 0.1)});
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check: elementwise and reduction ops") {
    Rng rng(46);
    double err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            auto a = ad::mul(ad::sigmoid_op(in[0]), ad::exp_op(ad::scale(in[1], 0.3)));
            auto b = ad::sub(a, ad::add_scalar(in[0], 0.1));
            auto c = ad::concat_channels<double>({b, a});
            auto d = ad::slice_channels(c, 1, 3);
            auto e = ad::add(ad::finite_diff_x(d), ad::finite_diff_x(d));
            auto f = ad::finite_diff_y(d);
            return ad::add(ad::sum_sq(e), ad::mse(f, ad::scale(f, 0.5)));
        },
        {randn(rng, {1, 2, 3, 4}), randn(rng, {1, 2, 3, 4})});
    CHECK(err < 1e-5);

    err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            auto m = ad::mean_over_views(in[0]);
            auto b = ad::broadcast_views(m, 3);
            auto r = ad::reshape(ad::add_bias_nchw(b, in[1]), {3, 2 * 2 * 2});
            return ad::sum_sq(ad::matmul(r, in[2]));
        },
        {randn(rng, {3, 2, 2, 2}), randn(rng, {2}), randn(rng, {8, 3})});
    CHECK(err < 1e-5);

    err = nn::grad_check(
        [](ad::Tape<double>& t, const std::vector<ad::Val<double>>& in) {
            return ad::sum_all(ad::embedding_row(in[0], 1));
        },
        {randn(rng, {3, 4})});
    CHECK(err < 1e-6);
}

TEST_CASE("net_forward gradients match finite differences on sampled coordinates") {
    Rng rng(47);
    nn::NetSpec spec = tiny_unet_spec();
    spec.dropout = 0.0;
    auto params = nn::init_params<double>(spec, rng);
    Tensor<double> input = randn(rng, {2, 4, 4, 4});

    auto loss_of = [&](nn::ParamStore<double>& p, bool trainable) {
        ad::Tape<double> tape;
        nn::ForwardCtx<double> ctx;
        ctx.tape = &tape;
        ctx.spec = &spec;
        ctx.params = &p;
        ctx.trainable = trainable;
        auto out = nn::net_forward(ctx, tape.constant(input));
        auto loss = ad::sum_sq(out);
        return std::tuple{loss.value()[0], std::move(tape), std::move(ctx), loss};
    };

    ad::Tape<double> tape;
    nn::ForwardCtx<double> ctx;
    ctx.tape = &tape;
    ctx.spec = &spec;
    ctx.params = &params;
    auto loss = ad::sum_sq(nn::net_forward(ctx, tape.constant(input)));
    tape.backward(loss);
    auto grads = nn::collect_param_grads(ctx);

    // sample coordinates across all parameters
    double worst = 0;
    const double step = 1e-5;
    int checked = 0;
    for (const auto& name : params.names) {
        Tensor<double>& t = params.at(name);
        const int64_t idx = rng.uniform_int(0, t.numel() - 1);
        const double orig = t[idx];
        auto eval = [&](double x) {
            t[idx] = x;
            ad::Tape<double> t2;
            nn::ForwardCtx<double> c2;
            c2.tape = &t2;
            c2.spec = &spec;
            c2.params = &params;
            c2.trainable = false;
            return ad::sum_sq(nn::net_forward(c2, t2.constant(input))).value()[0];
        };
        const double fd = (eval(orig + step) - eval(orig - step)) / (2 * step);
        t[idx] = orig;
        const double a = grads.at(name)[idx];
        worst = std::max(worst, std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 1e-4}));
        ++checked;
    }
    CHECK(checked > 20);
    CHECK(worst < 1e-4);

    // every parameter receives a nonzero gradient on a generic input
    for (const auto& [name, g] : grads) {
        double mx = 0;
        for (double v : g.data) mx = std::max(mx, std::abs(v));
        INFO("param ", name);
        CHECK(mx > 0.0);
    }
}

TEST_CASE("net_forward: identical inputs across view slots give identical outputs") {
    Rng rng(48);
    nn::NetSpec spec = tiny_unet_spec();
    auto params = nn::init_params<double>(spec, rng);

    Tensor<double> one = randn(rng, {1, 4, 4, 4});
    Tensor<double> tiled({4, 4, 4, 4});
    for (int v = 0; v < 4; ++v)
        std::copy(one.data.begin(), one.data.end(), tiled.ptr() + v * one.numel());

    ad::Tape<double> tape;
    nn::ForwardCtx<double> ctx;
    ctx.tape = &tape;
    ctx.spec = &spec;
    ctx.params = &params;
    ctx.trainable = false;
    auto out = nn::net_forward(ctx, tape.constant(tiled));
    const Tensor<double>& o = out.value();
    const int64_t per_view = o.numel() / 4;
    for (int v = 1; v < 4; ++v)
        for (int64_t i = 0; i < per_view; ++i) CHECK(o[v * per_view + i] == o[i]);
}

TEST_CASE("net_forward: evaluation mode is deterministic, dropout only in training") {
    Rng rng(49);
    nn::NetSpec spec = tiny_unet_spec();
    auto params = nn::init_params<double>(spec, rng);
    Tensor<double> input = randn(rng, {2, 4, 4, 4});

    auto run = [&](bool training, uint64_t seed) {
        ad::Tape<double> tape;
        nn::ForwardCtx<double> ctx;
        ctx.tape = &tape;
        ctx.spec = &spec;
        ctx.params = &params;
        ctx.trainable = false;
        ctx.training = training;
        Rng drng(seed);
        ctx.dropout_rng = &drng;
        return nn::net_forward(ctx, tape.constant(input)).value();
    };

    auto a = run(false, 1), b = run(false, 2);
    CHECK(a.data == b.data);  // eval mode ignores the rng entirely

    auto c = run(true, 1), d = run(true, 1), e = run(true, 2);
    CHECK(c.data == d.data);      // same dropout stream
    CHECK(!(c.data == e.data));   // different dropout stream
    CHECK(!(a.data == c.data));   // dropout active in training
}

TEST_CASE("cross-view ablation: masking and zeroed mixing kill inter-view flow") {
    Rng rng(50);
    nn::NetSpec spec = tiny_unet_spec();
    spec.dropout = 0;
    auto params = nn::init_params<double>(spec, rng);
    Tensor<double> input = randn(rng, {3, 4, 4, 4});
    Tensor<double> perturbed = input;
    for (int64_t i = 0; i < input.numel() / 3; ++i) perturbed[2 * (input.numel() / 3) + i] += rng.normal();

    auto run = [&](const Tensor<double>& in, bool cross_view) {
        ad::Tape<double> tape;
        nn::ForwardCtx<double> ctx;
        ctx.tape = &tape;
        ctx.spec = &spec;
        ctx.params = &params;
        ctx.trainable = false;
        ctx.cross_view = cross_view;
        return nn::net_forward(ctx, tape.constant(in)).value();
    };

    SUBCASE("with cross-view paths, views interact") {
        auto base = run(input, true);
        auto pert = run(perturbed, true);
        const int64_t pv = base.numel() / 3;
        double delta = 0;
        for (int64_t i = 0; i < pv; ++i) delta = std::max(delta, std::abs(base[i] - pert[i]));
        CHECK(delta > 0.0);
    }

    SUBCASE("cross_view=false isolates views bit-exactly") {
        auto base = run(input, false);
        auto pert = run(perturbed, false);
        const int64_t pv = base.numel() / 3;
        for (int64_t i = 0; i < 2 * pv; ++i) CHECK(base[i] == pert[i]);
    }

    SUBCASE("zeroing mixing weights with attention disabled isolates views") {
        nn::NetSpec no_attn = spec;
        no_attn.attn_levels = {};
        auto p2 = nn::init_params<double>(no_attn, rng);
        for (const auto& name : p2.names)
            if (name.find(".cv.") != std::string::npos) p2.at(name).fill(0.0);
        ad::Tape<double> t1, t2;
        nn::ForwardCtx<double> c1{&t1, &no_attn, &p2, false};
        nn::ForwardCtx<double> c2{&t2, &no_attn, &p2, false};
        auto base = nn::net_forward(c1, t1.constant(input)).value();
        auto pert = nn::net_forward(c2, t2.constant(perturbed)).value();
        const int64_t pv = base.numel() / 3;
        for (int64_t i = 0; i < 2 * pv; ++i) CHECK(base[i] == pert[i]);
    }
}

TEST_CASE("parameter_count is a pure function of the spec and matches init") {
    Rng rng(51);
    nn::NetSpec spec = tiny_unet_spec();
    const int64_t n1 = nn::parameter_count(spec);
    const int64_t n2 = nn::parameter_count(spec);
    CHECK(n1 == n2);
    auto params = nn::init_params<float>(spec, rng);
    CHECK(params.total_parameters() == n1);

    nn::NetSpec bigger = spec;
    bigger.unet_width = 16;
    CHECK(nn::parameter_count(bigger) > n1);
}

TEST_CASE("adamw: zero gradients") {
    nn::ParamStore<double> params;
    params.add("w", Tensor<double>({2}, {1.0, -2.0}));
    std::map<std::string, Tensor<double>> grads;
    grads.emplace("w", Tensor<double>::zeros({2}));

    SUBCASE("no weight decay leaves parameters unchanged") {
        nn::AdamW<double> opt;
        opt.weight_decay = 0.0;
        opt.step(params, grads, 0.1);
        CHECK(params.at("w")[0] == 1.0);
        CHECK(params.at("w")[1] == -2.0);
    }
    SUBCASE("decoupled decay scales by (1 - lr*wd)") {
        nn::AdamW<double> opt;
        opt.weight_decay = 0.04;
        opt.step(params, grads, 0.5);
        CHECK(params.at("w")[0] == doctest::Approx(1.0 * (1 - 0.5 * 0.04)).epsilon(1e-12));
        CHECK(params.at("w")[1] == doctest::Approx(-2.0 * (1 - 0.5 * 0.04)).epsilon(1e-12));
    }
}

TEST_CASE("adamw: 3-step trajectory on a scalar quadratic matches the hand-executed reference") {
    // f(x) = 0.5 x^2, grad = x
    nn::ParamStore<double> params;
    params.add("x", Tensor<double>({1}, {2.0}));
    nn::AdamW<double> opt;
    opt.weight_decay = 0.01;
    const double lr = 0.1;

    // independent scalar re-execution of the update rule
    double x_ref = 2.0, m = 0, v = 0;
    for (int step = 1; step <= 3; ++step) {
        const double g = x_ref;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, step));
        const double vh = v / (1 - std::pow(0.999, step));
        x_ref -= lr * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * x_ref);

        std::map<std::string, Tensor<double>> grads;
        grads.emplace("x", Tensor<double>({1}, {params.at("x")[0]}));
        opt.step(params, grads, lr);
    }
    CHECK(params.at("x")[0] == doctest::Approx(x_ref).epsilon(1e-12));
}

TEST_CASE("adamw: NaN gradient raises a numeric error naming the parameter") {
    nn::ParamStore<double> params;
    params.add("layer.w", Tensor<double>({1}, {1.0}));
    std::map<std::string, Tensor<double>> grads;
    grads.emplace("layer.w", Tensor<double>({1}, {std::nan("")}));
    nn::AdamW<double> opt;
    try {
        opt.step(params, grads, 0.1);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::numeric);
        CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
    }
}

TEST_CASE("cosine_warmup_lr hits the pinned schedule points") {
    CHECK(nn::cosine_warmup_lr(0, 500, 6e-5, 10000) == 0.0);
    CHECK(nn::cosine_warmup_lr(500, 500, 6e-5, 10000) == doctest::Approx(6e-5));
    CHECK(nn::cosine_warmup_lr(250, 500, 6e-5, 10000) == doctest::Approx(3e-5));
    // cosine midpoint
    CHECK(nn::cosine_warmup_lr(500 + (10000 - 500) / 2, 500, 6e-5, 10000) == doctest::Approx(3e-5).epsilon(1e-3));
    CHECK(nn::cosine_warmup_lr(10000, 500, 6e-5, 10000) == 0.0);
}

TEST_CASE("sinusoidal_embedding basics, norm, and injectivity over [0,1000]") {
    auto e0 = nn::sinusoidal_embedding(0, 16);
    for (int i = 0; i < 8; ++i) {
        CHECK(e0[i] == 0.0);
        CHECK(e0[8 + i] == 1.0);
    }
    for (double t : {1.0, 37.0, 999.0}) {
        auto e = nn::sinusoidal_embedding(t, 16);
        double norm = 0;
        for (double v : e.data) norm += v * v;
        CHECK(std::sqrt(norm) == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(nn::sinusoidal_embedding(1, 7), Error);

    std::set<std::vector<double>> seen;
    for (int t = 0; t < 1000; ++t) seen.insert(nn::sinusoidal_embedding(t, 16).data);
    CHECK(seen.size() == 1000);
}

TEST_CASE("checkpoint round-trips byte-exactly and validates the spec hash") {
    Rng rng(52);
    nn::NetSpec spec = tiny_unet_spec();
    auto params = nn::init_params<float>(spec, rng);

    auto dir = std::filesystem::temp_directory_path();
    auto p1 = (dir / "sg_ck1.ckpt").string();
    auto p2 = (dir / "sg_ck2.ckpt").string();
    save_checkpoint(p1, params, spec.hash());
    auto loaded = load_checkpoint_checked(p1, spec.hash());
    CHECK(loaded.params.names == params.names);
    for (const auto& name : params.names) CHECK(loaded.params.at(name).data == params.at(name).data);

    save_checkpoint(p2, loaded.params, loaded.spec_hash);
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    CHECK(!sa.empty());

    CHECK_THROWS_AS(load_checkpoint_checked(p1, spec.hash() + 1), Error);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), Error);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("time_class_embedding: class label changes the embedding, null row for unconditional") {
    Rng rng(53);
    nn::NetSpec spec = tiny_unet_spec();
    spec.emb_dim = 8;
    spec.num_classes = 3;
    auto params = nn::init_params<double>(spec, rng);

    ad::Tape<double> tape;
    nn::ForwardCtx<double> ctx{&tape, &spec, &params, false};
    auto e0 = nn::time_class_embedding(ctx, 10.0, 0).value();
    auto e1 = nn::time_class_embedding(ctx, 10.0, 1).value();
    auto en = nn::time_class_embedding(ctx, 10.0, -1).value();
    CHECK(!(e0.data == e1.data));
    CHECK(!(e0.data == en.data));
    CHECK_THROWS_AS(nn::time_class_embedding(ctx, 10.0, 7), Error);
}

TEST_SUITE_END();
