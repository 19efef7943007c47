#include <doctest.h>

#include "splatgen/parallel.hpp"
#include "splatgen/raster.hpp"
#include "test_util.hpp"

using namespace splatgen;

namespace {

// Independent per-pixel evaluation: every splat, no tiles, no bounding boxes.
PixelComposite brute_force_pixel(const SplatSet& scene, const Camera& cam, int width, int height,
                                 double px, double py) {
    struct Entry {
        PixelContribution c;
        int source;
    };
    std::vector<Entry> entries;
    for (size_t i = 0; i < scene.splats.size(); ++i) {
        auto p = project_splat(scene.splats[i], cam, width, height, static_cast<int>(i));
        if (!p) continue;
        const double a = p->cov2d(0, 0), b = p->cov2d(0, 1), c = p->cov2d(1, 1);
        const double det = a * c - b * b;
        const double dx = px - p->mean2d.x(), dy = py - p->mean2d.y();
        const double q = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det;
        if (q > kQCut) continue;
        entries.push_back({{std::exp(-0.5 * q), p->opacity, p->depth, p->color}, p->source});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) {
        if (x.c.depth != y.c.depth) return x.c.depth < y.c.depth;
        return x.source < y.source;
    });
    std::vector<PixelContribution> list;
    for (const auto& e : entries) list.push_back(e.c);
    return composite_pixel(list);
}

SplatSet random_scene(Rng& rng, int count) {
    SplatSet set;
    for (int i = 0; i < count; ++i) set.splats.push_back(random_splat(rng));
    return set;
}

}  // namespace

TEST_SUITE_BEGIN("raster");

TEST_CASE("project_splat: axis-aligned isotropic splat has the closed-form footprint") {
    Camera cam = test_camera(64, 64);
    Splat s;
    s.position = Vec3(0, 0, 3.0);
    s.scale = Vec3::Constant(0.2);
    auto p = project_splat(s, cam, 64, 64, 0);
    REQUIRE(p.has_value());
    const double expect = std::pow(cam.intrinsics.fx * 0.2 / 3.0, 2) + kCovBlur;
    CHECK(p->cov2d(0, 0) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(p->cov2d(1, 1) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(std::abs(p->cov2d(0, 1)) < 1e-9);
    CHECK(p->mean2d.x() == doctest::Approx(32.0));
    CHECK(p->depth == doctest::Approx(3.0));
}

TEST_CASE("project_splat culls behind-camera and off-screen splats") {
    Camera cam = test_camera(64, 64);
    Splat behind;
    behind.position = Vec3(0, 0, -2);
    behind.scale = Vec3::Constant(0.1);
    CHECK(!project_splat(behind, cam, 64, 64, 0));

    Splat off;
    off.position = Vec3(500, 0, 1.0);  // far off the side
    off.scale = Vec3::Constant(0.01);
    CHECK(!project_splat(off, cam, 64, 64, 0));
}

TEST_CASE("project_splat cov2d matches a numerical-Jacobian oracle") {
    Rng rng(31);
    Camera cam = test_camera(64, 64);
    cam.pose = random_pose(rng, 0.4);
    for (int trial = 0; trial < 40; ++trial) {
        Splat s = random_splat(rng);
        auto p = project_splat(s, cam, 64, 64, 0);
        if (!p) continue;

        // numerical Jacobian of project_point around the splat centre
        Eigen::Matrix<double, 2, 3> jac;
        const double h = 1e-6;
        for (int k = 0; k < 3; ++k) {
            Vec3 dp = Vec3::Zero();
            dp[k] = h;
            Vec3 up = project_point(s.position + dp, cam);
            Vec3 dn = project_point(s.position - dp, cam);
            jac(0, k) = (up.x() - dn.x()) / (2 * h);
            jac(1, k) = (up.y() - dn.y()) / (2 * h);
        }
        Mat3 cov_world = splat_world_covariance(s);
        Mat2 oracle = jac * cov_world * jac.transpose() + kCovBlur * Mat2::Identity();
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 2; ++c) {
                double rel = std::abs(p->cov2d(r, c) - oracle(r, c)) /
                             std::max({std::abs(oracle(r, c)), std::abs(p->cov2d(r, c)), 1e-6});
                CHECK(rel < 1e-3);
            }
    }
}

TEST_CASE("composite_pixel trivial cases") {
    // single opaque contribution at the pixel centre
    PixelContribution one{1.0, 1.0, 2.0, Vec3(0.2, 0.4, 0.8)};
    auto out = composite_pixel(std::vector<PixelContribution>{one});
    CHECK((out.rgb - Vec3(0.2, 0.4, 0.8) * 0.999).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(out.alpha == doctest::Approx(0.999));

    // empty list is background
    auto empty = composite_pixel(std::vector<PixelContribution>{});
    CHECK(empty.rgb.cwiseAbs().maxCoeff() == 0.0);
    CHECK(empty.alpha == 0.0);
    CHECK(empty.depth == 0.0);
}

TEST_CASE("composite_pixel matches a direct summation oracle") {
    Rng rng(32);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<PixelContribution> list;
        double d = 0.5;
        for (int i = 0; i < 3; ++i) {
            d += rng.uniform(0.1, 2.0);
            list.push_back({rng.uniform(0.05, 1.0), rng.uniform(0.1, 1.0), d,
                            Vec3(rng.uniform(), rng.uniform(), rng.uniform())});
        }
        auto got = composite_pixel(list);

        Vec3 rgb = Vec3::Zero();
        double dep = 0, t = 1;
        for (const auto& c : list) {
            if (t < kMinTransmittance) break;
            double alpha = std::min(c.opacity * c.weight, kAlphaMax);
            rgb += c.color * alpha * t;
            dep += c.depth * alpha * t;
            t *= 1 - alpha;
        }
        CHECK((got.rgb - rgb).cwiseAbs().maxCoeff() < 1e-12);
        CHECK(got.depth == doctest::Approx(dep).epsilon(1e-12));
        CHECK(got.alpha == doctest::Approx(1 - t).epsilon(1e-12));
    }
}

#ifndef NDEBUG
TEST_CASE("composite_pixel rejects unsorted input in debug builds") {
    std::vector<PixelContribution> list = {{1.0, 0.5, 3.0, Vec3::Zero()}, {1.0, 0.5, 1.0, Vec3::Zero()}};
    CHECK_THROWS_AS(composite_pixel(list), Error);
}
#endif

TEST_CASE("render: empty scene is black with zero alpha") {
    auto out = render(SplatSet{}, test_camera(16, 16), 16, 16);
    for (double v : out.rgb.data) CHECK(v == 0.0);
    for (double v : out.alpha.data) CHECK(v == 0.0);
    for (double v : out.depth.data) CHECK(v == 0.0);
}

TEST_CASE("render rejects zero resolution") {
    CHECK_THROWS_AS(render(SplatSet{}, test_camera(16, 16), 0, 16), Error);
}

TEST_CASE("render: one large opaque splat dominates the centre pixel") {
    Camera cam = test_camera(33, 33);
    Splat s;
    s.position = Vec3(0, 0, 2.0);
    s.scale = Vec3::Constant(1.5);
    s.opacity = 1.0;
    s.color = Vec3(0.9, 0.1, 0.3);
    SplatSet set;
    set.splats.push_back(s);
    auto out = render(set, cam, 33, 33);
    for (int c = 0; c < 3; ++c)
        CHECK(std::abs(out.rgb.at(16, 16, c) - 0.999 * s.color[c]) < 1e-3);
    CHECK(out.alpha.at(16, 16, 0) == doctest::Approx(0.999).epsilon(1e-3));
}

TEST_CASE("render equals the brute-force per-pixel oracle on random scenes") {
    Rng rng(33);
    for (int trial = 0; trial < 4; ++trial) {
        Camera cam = test_camera(16, 16);
        cam.pose = random_pose(rng, 0.3);
        SplatSet scene = random_scene(rng, 50);
        auto out = render(scene, cam, 16, 16);
        double worst = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                auto oracle = brute_force_pixel(scene, cam, 16, 16, x + 0.5, y + 0.5);
                worst = std::max(worst, std::abs(out.rgb.at(y, x, 0) - oracle.rgb.x()));
                worst = std::max(worst, std::abs(out.rgb.at(y, x, 1) - oracle.rgb.y()));
                worst = std::max(worst, std::abs(out.rgb.at(y, x, 2) - oracle.rgb.z()));
                worst = std::max(worst, std::abs(out.depth.at(y, x, 0) - oracle.depth));
                worst = std::max(worst, std::abs(out.alpha.at(y, x, 0) - oracle.alpha));
            }
        CHECK(worst < 1e-9);
    }
}

TEST_CASE("render: alpha stays in [0,1], occlusion ordering, permutation invariance") {
    Rng rng(34);
    Camera cam = test_camera(24, 24);
    SplatSet scene = random_scene(rng, 40);
    auto out = render(scene, cam, 24, 24);
    for (double a : out.alpha.data) {
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }

    // permuted splat order (distinct depths) renders bit-identically
    SplatSet shuffled = scene;
    for (size_t i = shuffled.splats.size(); i > 1; --i)
        std::swap(shuffled.splats[i - 1], shuffled.splats[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    auto out2 = render(shuffled, cam, 24, 24);
    CHECK(out.rgb.data == out2.rgb.data);
    CHECK(out.depth.data == out2.depth.data);
    CHECK(out.alpha.data == out2.alpha.data);

    // two opaque splats on the same ray: the nearer one wins
    SplatSet pair;
    Splat nearer, farther;
    nearer.position = Vec3(0, 0, 2.0);
    nearer.scale = Vec3::Constant(0.5);
    nearer.opacity = 1.0;
    nearer.color = Vec3(1, 0, 0);
    farther = nearer;
    farther.position = Vec3(0, 0, 4.0);
    farther.color = Vec3(0, 1, 0);
    pair.splats = {farther, nearer};  // stored far-first on purpose
    auto po = render(pair, cam, 24, 24);
    CHECK(po.rgb.at(12, 12, 0) > 0.9);
    CHECK(po.rgb.at(12, 12, 1) < 0.05);
    CHECK(po.rgb.at(12, 12, 0) > 10 * po.rgb.at(12, 12, 1));
}

TEST_CASE("render is bit-identical across 1/2/8 worker threads") {
    Rng rng(35);
    Camera cam = test_camera(48, 48);
    cam.pose = random_pose(rng, 0.2);
    SplatSet scene = random_scene(rng, 300);

    set_num_threads(1);
    auto r1 = render(scene, cam, 48, 48);
    set_num_threads(2);
    auto r2 = render(scene, cam, 48, 48);
    set_num_threads(8);
    auto r8 = render(scene, cam, 48, 48);
    set_num_threads(1);

    CHECK(r1.rgb.data == r2.rgb.data);
    CHECK(r1.rgb.data == r8.rgb.data);
    CHECK(r1.depth.data == r2.depth.data);
    CHECK(r1.alpha.data == r8.alpha.data);
}

namespace {

double vjp_objective(const SplatSet& scene, const Camera& cam, int w, int h, const RenderCotangent& cot) {
    auto out = render(scene, cam, w, h);
    double acc = 0;
    for (size_t i = 0; i < out.rgb.data.size(); ++i) acc += out.rgb.data[i] * cot.rgb.data[i];
    for (size_t i = 0; i < out.depth.data.size(); ++i) acc += out.depth.data[i] * cot.depth.data[i];
    for (size_t i = 0; i < out.alpha.data.size(); ++i) acc += out.alpha.data[i] * cot.alpha.data[i];
    return acc;
}

RenderCotangent random_cotangent(Rng& rng, int w, int h) {
    RenderCotangent cot;
    cot.rgb = Image(h, w, 3);
    cot.depth = Image(h, w, 1);
    cot.alpha = Image(h, w, 1);
    for (auto& v : cot.rgb.data) v = rng.uniform(-1, 1);
    for (auto& v : cot.depth.data) v = rng.uniform(-0.2, 0.2);
    for (auto& v : cot.alpha.data) v = rng.uniform(-0.5, 0.5);
    return cot;
}

}  // namespace

TEST_CASE("render_vjp: zero cotangent gives zero gradients") {
    Rng rng(36);
    Camera cam = test_camera(12, 12);
    SplatSet scene = random_scene(rng, 10);
    RenderCotangent cot;
    cot.rgb = Image(12, 12, 3);
    auto g = render_vjp(scene, cam, 12, 12, cot);
    for (double v : g.position) CHECK(v == 0.0);
    for (double v : g.opacity) CHECK(v == 0.0);
    for (double v : g.color) CHECK(v == 0.0);
}

TEST_CASE("render_vjp: single-splat color gradient equals the analytic weight sum") {
    Camera cam = test_camera(16, 16);
    Splat s;
    s.position = Vec3(0.1, -0.05, 2.0);
    s.scale = Vec3::Constant(0.3);
    s.opacity = 0.7;
    s.color = Vec3(0.3, 0.5, 0.7);
    SplatSet scene;
    scene.splats.push_back(s);

    Rng rng(37);
    RenderCotangent cot;
    cot.rgb = Image(16, 16, 3);
    for (auto& v : cot.rgb.data) v = rng.uniform(-1, 1);

    auto g = render_vjp(scene, cam, 16, 16, cot);

    // with one splat, T = 1 at the front, so dL/dcolor_c = sum_px cot_c * alpha
    Vec3 expect = Vec3::Zero();
    auto p = project_splat(s, cam, 16, 16, 0);
    REQUIRE(p.has_value());
    Mat2 inv = p->cov2d.inverse();
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            Vec2 d(x + 0.5 - p->mean2d.x(), y + 0.5 - p->mean2d.y());
            double q = d.dot(inv * d);
            if (q > kQCut) continue;
            double alpha = std::min(s.opacity * std::exp(-0.5 * q), kAlphaMax);
            for (int c = 0; c < 3; ++c) expect[c] += cot.rgb.at(y, x, c) * alpha;
        }
    for (int c = 0; c < 3; ++c)
        CHECK(g.color[static_cast<size_t>(c)] == doctest::Approx(expect[c]).epsilon(1e-9));
}

TEST_CASE("render_vjp matches central finite differences on random scenes") {
    Rng rng(38);
    const int w = 12, h = 12;
    double worst = 0;
    for (int trial = 0; trial < 3; ++trial) {
        Camera cam = test_camera(w, h);
        cam.pose = random_pose(rng, 0.2);
        SplatSet scene = random_scene(rng, 8);
        RenderCotangent cot = random_cotangent(rng, w, h);
        auto g = render_vjp(scene, cam, w, h, cot);

        const double step = 1e-4;
        auto fd_check = [&](auto&& get_ref, double analytic) {
            SplatSet s2 = scene;
            double& ref = get_ref(s2);
            const double orig = ref;
            ref = orig + step;
            double fp = vjp_objective(s2, cam, w, h, cot);
            ref = orig - step;
            double fm = vjp_objective(s2, cam, w, h, cot);
            double fd = (fp - fm) / (2 * step);
            double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-6});
            worst = std::max(worst, rel);
        };

        for (size_t i = 0; i < scene.splats.size(); ++i) {
            for (int k = 0; k < 3; ++k)
                fd_check([&, i, k](SplatSet& s) -> double& { return s.splats[i].position[k]; },
                         g.position[i * 3 + static_cast<size_t>(k)]);
            for (int k = 0; k < 4; ++k)
                fd_check([&, i, k](SplatSet& s) -> double& { return s.splats[i].rotation[k]; },
                         g.rotation[i * 4 + static_cast<size_t>(k)]);
            for (int k = 0; k < 3; ++k)
                fd_check([&, i, k](SplatSet& s) -> double& { return s.splats[i].scale[k]; },
                         g.scale[i * 3 + static_cast<size_t>(k)]);
            fd_check([&, i](SplatSet& s) -> double& { return s.splats[i].opacity; }, g.opacity[i]);
            for (int k = 0; k < 3; ++k)
                fd_check([&, i, k](SplatSet& s) -> double& { return s.splats[i].color[k]; },
                         g.color[i * 3 + static_cast<size_t>(k)]);
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("render_vjp rejects mismatched cotangent shapes") {
    Camera cam = test_camera(8, 8);
    RenderCotangent cot;
    cot.rgb = Image(4, 4, 3);
    CHECK_THROWS_AS(render_vjp(SplatSet{}, cam, 8, 8, cot), Error);
}

TEST_SUITE_END();
