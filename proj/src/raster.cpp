#include "splatgen/raster.hpp"

#include <algorithm>
#include <cmath>

#include "splatgen/parallel.hpp"

namespace splatgen {

namespace {

constexpr int kTileSize = 16;

double max_eigenvalue_2x2(const Mat2& m) {
    const double mid = 0.5 * (m(0, 0) + m(1, 1));
    const double d = 0.5 * (m(0, 0) - m(1, 1));
    return mid + std::sqrt(std::max(0.0, d * d + m(0, 1) * m(0, 1)));
}

struct Prepared {
    std::vector<ProjectedSplat> splats;    // retained, sorted front to back
    std::vector<Mat2> inv_cov;             // per retained splat
    std::vector<double> radius;            // conservative support radius
    std::vector<std::vector<int>> tiles;   // per tile: indices into `splats`
    int tiles_x = 0, tiles_y = 0;
};

Prepared prepare(const SplatSet& scene, const Camera& camera, int width, int height) {
    const int64_t n = static_cast<int64_t>(scene.splats.size());
    std::vector<ProjectedSplat> proj(static_cast<size_t>(n));
    std::vector<char> keep(static_cast<size_t>(n), 0);

    const int64_t chunk = 4096;
    const int64_t n_chunks = (n + chunk - 1) / chunk;
    parallel_for(n_chunks, [&](int64_t ci) {
        const int64_t lo = ci * chunk, hi = std::min(n, lo + chunk);
        for (int64_t i = lo; i < hi; ++i) {
            auto p = project_splat(scene.splats[static_cast<size_t>(i)], camera, width, height,
                                   static_cast<int>(i));
            if (p) {
                proj[static_cast<size_t>(i)] = *p;
                keep[static_cast<size_t>(i)] = 1;
            }
        }
    });

    Prepared out;
    std::vector<int> order;
    order.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        if (keep[static_cast<size_t>(i)]) order.push_back(static_cast<int>(i));
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto& pa = proj[static_cast<size_t>(a)];
        const auto& pb = proj[static_cast<size_t>(b)];
        if (pa.depth != pb.depth) return pa.depth < pb.depth;
        return pa.source < pb.source;
    });

    out.splats.reserve(order.size());
    out.inv_cov.reserve(order.size());
    out.radius.reserve(order.size());
    for (int idx : order) {
        const auto& p = proj[static_cast<size_t>(idx)];
        out.splats.push_back(p);
        const double det = p.cov2d(0, 0) * p.cov2d(1, 1) - p.cov2d(0, 1) * p.cov2d(1, 0);
        Mat2 inv;
        inv << p.cov2d(1, 1), -p.cov2d(0, 1), -p.cov2d(1, 0), p.cov2d(0, 0);
        inv /= det;
        out.inv_cov.push_back(inv);
        out.radius.push_back(std::sqrt(kQCut * max_eigenvalue_2x2(p.cov2d)));
    }

    out.tiles_x = (width + kTileSize - 1) / kTileSize;
    out.tiles_y = (height + kTileSize - 1) / kTileSize;
    out.tiles.assign(static_cast<size_t>(out.tiles_x) * out.tiles_y, {});
    for (int i = 0; i < static_cast<int>(out.splats.size()); ++i) {
        const auto& p = out.splats[static_cast<size_t>(i)];
        const double r = out.radius[static_cast<size_t>(i)];
        int tx0 = std::max(0, static_cast<int>(std::floor((p.mean2d.x() - r) / kTileSize)));
        int tx1 = std::min(out.tiles_x - 1, static_cast<int>(std::floor((p.mean2d.x() + r) / kTileSize)));
        int ty0 = std::max(0, static_cast<int>(std::floor((p.mean2d.y() - r) / kTileSize)));
        int ty1 = std::min(out.tiles_y - 1, static_cast<int>(std::floor((p.mean2d.y() + r) / kTileSize)));
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                out.tiles[static_cast<size_t>(ty) * out.tiles_x + tx].push_back(i);
    }
    return out;
}

}  // namespace

std::optional<ProjectedSplat> project_splat(const Splat& splat, const Camera& camera, int width,
                                            int height, int source) {
    const Mat3 w = camera.pose.rotation;
    const Vec3 p_cam = camera.pose.apply(splat.position);
    const double z = p_cam.z();
    // the epsilon shell keeps the cull stable for splats sitting exactly on
    // the near plane (frustum hint edges) under canonicalization roundoff
    if (z <= camera.near * (1.0 + 1e-9)) return std::nullopt;

    const double fx = camera.intrinsics.fx, fy = camera.intrinsics.fy;
    ProjectedSplat out;
    out.mean2d = Vec2(fx * p_cam.x() / z + camera.intrinsics.cx, fy * p_cam.y() / z + camera.intrinsics.cy);
    out.depth = z;
    out.opacity = splat.opacity;
    out.color = splat.color;
    out.source = source;

    Eigen::Matrix<double, 2, 3> jac;
    jac << fx / z, 0, -fx * p_cam.x() / (z * z),
           0, fy / z, -fy * p_cam.y() / (z * z);
    const Mat3 cov_cam = w * splat_world_covariance(splat) * w.transpose();
    out.cov2d = jac * cov_cam * jac.transpose() + kCovBlur * Mat2::Identity();

    const double r = std::sqrt(kQCut * max_eigenvalue_2x2(out.cov2d));
    if (out.mean2d.x() + r < 0 || out.mean2d.x() - r > width || out.mean2d.y() + r < 0 ||
        out.mean2d.y() - r > height)
        return std::nullopt;
    return out;
}

PixelComposite composite_pixel(std::span<const PixelContribution> ordered) {
#ifndef NDEBUG
    for (size_t i = 1; i < ordered.size(); ++i)
        if (ordered[i].depth < ordered[i - 1].depth)
            fail(ErrorCode::argument, "composite_pixel: contributions not sorted by depth");
#endif
    PixelComposite out;
    double t = 1.0;
    for (const PixelContribution& c : ordered) {
        if (t < kMinTransmittance) break;
        const double alpha = std::min(c.opacity * c.weight, kAlphaMax);
        out.rgb += c.color * (alpha * t);
        out.depth += c.depth * alpha * t;
        t *= 1.0 - alpha;
    }
    out.alpha = 1.0 - t;
    return out;
}

RenderOutput render(const SplatSet& scene, const Camera& camera, int width, int height) {
    if (width <= 0 || height <= 0) fail(ErrorCode::argument, "render: zero resolution");
    Prepared prep = prepare(scene, camera, width, height);

    RenderOutput out;
    out.rgb = Image(height, width, 3);
    out.depth = Image(height, width, 1);
    out.alpha = Image(height, width, 1);

    parallel_for(static_cast<int64_t>(prep.tiles.size()), [&](int64_t tile) {
        const int tx = static_cast<int>(tile) % prep.tiles_x;
        const int ty = static_cast<int>(tile) / prep.tiles_x;
        const int x0 = tx * kTileSize, x1 = std::min(width, x0 + kTileSize);
        const int y0 = ty * kTileSize, y1 = std::min(height, y0 + kTileSize);
        const auto& list = prep.tiles[static_cast<size_t>(tile)];
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const Vec2 pix(x + 0.5, y + 0.5);
                double t = 1.0;
                Vec3 rgb = Vec3::Zero();
                double dep = 0.0;
                for (int i : list) {
                    if (t < kMinTransmittance) break;
                    const ProjectedSplat& p = prep.splats[static_cast<size_t>(i)];
                    const Mat2& m = prep.inv_cov[static_cast<size_t>(i)];
                    const Vec2 d = pix - p.mean2d;
                    const double q = d.x() * (m(0, 0) * d.x() + m(0, 1) * d.y()) +
                                     d.y() * (m(1, 0) * d.x() + m(1, 1) * d.y());
                    if (q > kQCut) continue;
                    const double g = std::exp(-0.5 * q);
                    const double alpha = std::min(p.opacity * g, kAlphaMax);
                    rgb += p.color * (alpha * t);
                    dep += p.depth * alpha * t;
                    t *= 1.0 - alpha;
                }
                out.rgb.at(y, x, 0) = rgb.x();
                out.rgb.at(y, x, 1) = rgb.y();
                out.rgb.at(y, x, 2) = rgb.z();
                out.depth.at(y, x, 0) = dep;
                out.alpha.at(y, x, 0) = 1.0 - t;
            }
        }
    });
    return out;
}

namespace {

// Per-retained-splat gradient on projected quantities.
struct ProjGrad {
    double mean_x = 0, mean_y = 0;
    double cov_a = 0, cov_b = 0, cov_c = 0;  // d/dC00, d/dC01 + d/dC10, d/dC11
    double depth = 0, opacity = 0;
    double color_r = 0, color_g = 0, color_b = 0;
};

struct PixelStep {
    int list_pos;
    double g, alpha, trans;  // transmittance in front of this contribution
    bool clamped;
};

}  // namespace

DecodedSplatsGrad render_vjp(const SplatSet& scene, const Camera& camera, int width, int height,
                             const RenderCotangent& cot) {
    if (width <= 0 || height <= 0) fail(ErrorCode::argument, "render_vjp: zero resolution");
    const bool has_rgb = !cot.rgb.data.empty();
    const bool has_depth = !cot.depth.data.empty();
    const bool has_alpha = !cot.alpha.data.empty();
    if (has_rgb && (cot.rgb.width != width || cot.rgb.height != height || cot.rgb.channels != 3))
        fail(ErrorCode::argument, "render_vjp: rgb cotangent shape mismatch");
    if (has_depth && (cot.depth.width != width || cot.depth.height != height || cot.depth.channels != 1))
        fail(ErrorCode::argument, "render_vjp: depth cotangent shape mismatch");
    if (has_alpha && (cot.alpha.width != width || cot.alpha.height != height || cot.alpha.channels != 1))
        fail(ErrorCode::argument, "render_vjp: alpha cotangent shape mismatch");

    Prepared prep = prepare(scene, camera, width, height);
    const size_t n_tiles = prep.tiles.size();
    std::vector<std::vector<ProjGrad>> tile_grads(n_tiles);

    parallel_for(static_cast<int64_t>(n_tiles), [&](int64_t tile) {
        const auto& list = prep.tiles[static_cast<size_t>(tile)];
        if (list.empty()) return;
        auto& grads = tile_grads[static_cast<size_t>(tile)];
        grads.assign(list.size(), ProjGrad{});

        const int tx = static_cast<int>(tile) % prep.tiles_x;
        const int ty = static_cast<int>(tile) / prep.tiles_x;
        const int x0 = tx * kTileSize, x1 = std::min(width, x0 + kTileSize);
        const int y0 = ty * kTileSize, y1 = std::min(height, y0 + kTileSize);

        std::vector<PixelStep> steps;
        steps.reserve(list.size());
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                const Vec3 g_rgb = has_rgb ? Vec3(cot.rgb.at(y, x, 0), cot.rgb.at(y, x, 1), cot.rgb.at(y, x, 2))
                                           : Vec3::Zero();
                const double g_dep = has_depth ? cot.depth.at(y, x, 0) : 0.0;
                const double g_alp = has_alpha ? cot.alpha.at(y, x, 0) : 0.0;
                if (g_rgb.isZero(0.0) && g_dep == 0.0 && g_alp == 0.0) continue;

                // forward replay
                steps.clear();
                const Vec2 pix(x + 0.5, y + 0.5);
                double t = 1.0;
                for (size_t li = 0; li < list.size(); ++li) {
                    if (t < kMinTransmittance) break;
                    const ProjectedSplat& p = prep.splats[static_cast<size_t>(list[li])];
                    const Mat2& m = prep.inv_cov[static_cast<size_t>(list[li])];
                    const Vec2 d = pix - p.mean2d;
                    const double q = d.x() * (m(0, 0) * d.x() + m(0, 1) * d.y()) +
                                     d.y() * (m(1, 0) * d.x() + m(1, 1) * d.y());
                    if (q > kQCut) continue;
                    const double g = std::exp(-0.5 * q);
                    const double raw_alpha = p.opacity * g;
                    const double alpha = std::min(raw_alpha, kAlphaMax);
                    steps.push_back({static_cast<int>(li), g, alpha, t, raw_alpha >= kAlphaMax});
                    t *= 1.0 - alpha;
                }
                const double t_end = t;

                // reverse sweep with suffix sums
                Vec3 suffix_rgb = Vec3::Zero();
                double suffix_dep = 0.0;
                for (size_t si = steps.size(); si-- > 0;) {
                    const PixelStep& s = steps[si];
                    const int gi = list[static_cast<size_t>(s.list_pos)];
                    const ProjectedSplat& p = prep.splats[static_cast<size_t>(gi)];
                    ProjGrad& pg = grads[static_cast<size_t>(s.list_pos)];

                    const double w = s.alpha * s.trans;
                    pg.color_r += g_rgb.x() * w;
                    pg.color_g += g_rgb.y() * w;
                    pg.color_b += g_rgb.z() * w;
                    pg.depth += g_dep * w;

                    const double one_minus = 1.0 - s.alpha;
                    double d_alpha = g_rgb.dot(p.color * s.trans - suffix_rgb / one_minus);
                    d_alpha += g_dep * (p.depth * s.trans - suffix_dep / one_minus);
                    d_alpha += g_alp * (t_end / one_minus);

                    suffix_rgb += p.color * w;
                    suffix_dep += p.depth * w;

                    if (s.clamped) continue;  // flat region of the alpha clamp
                    pg.opacity += d_alpha * s.g;
                    const double d_g = d_alpha * p.opacity;
                    const double d_q = -0.5 * s.g * d_g;

                    const Mat2& m = prep.inv_cov[static_cast<size_t>(gi)];
                    const Vec2 dvec = pix - p.mean2d;
                    const Vec2 md = m * dvec;
                    pg.mean_x += -2.0 * md.x() * d_q;
                    pg.mean_y += -2.0 * md.y() * d_q;
                    pg.cov_a += -d_q * md.x() * md.x();
                    pg.cov_b += -2.0 * d_q * md.x() * md.y();
                    pg.cov_c += -d_q * md.y() * md.y();
                }
            }
        }
    });

    // fixed-order accumulation over retained splats
    std::vector<ProjGrad> acc(prep.splats.size());
    for (size_t tile = 0; tile < n_tiles; ++tile) {
        const auto& list = prep.tiles[tile];
        const auto& grads = tile_grads[tile];
        if (grads.empty()) continue;
        for (size_t li = 0; li < list.size(); ++li) {
            const ProjGrad& g = grads[li];
            ProjGrad& a = acc[static_cast<size_t>(list[li])];
            a.mean_x += g.mean_x;
            a.mean_y += g.mean_y;
            a.cov_a += g.cov_a;
            a.cov_b += g.cov_b;
            a.cov_c += g.cov_c;
            a.depth += g.depth;
            a.opacity += g.opacity;
            a.color_r += g.color_r;
            a.color_g += g.color_g;
            a.color_b += g.color_b;
        }
    }

    // chain through the projection, per splat (disjoint writes)
    DecodedSplatsGrad out = DecodedSplatsGrad::zeros(static_cast<int64_t>(scene.splats.size()));
    const int64_t n_ret = static_cast<int64_t>(prep.splats.size());
    const int64_t chunk = 1024;
    parallel_for((n_ret + chunk - 1) / chunk, [&](int64_t ci) {
        for (int64_t ri = ci * chunk; ri < std::min(n_ret, (ci + 1) * chunk); ++ri) {
            const ProjGrad& a = acc[static_cast<size_t>(ri)];
            const int src = prep.splats[static_cast<size_t>(ri)].source;
            const Splat& s = scene.splats[static_cast<size_t>(src)];

            out.opacity[static_cast<size_t>(src)] = a.opacity;
            out.color[static_cast<size_t>(src) * 3 + 0] = a.color_r;
            out.color[static_cast<size_t>(src) * 3 + 1] = a.color_g;
            out.color[static_cast<size_t>(src) * 3 + 2] = a.color_b;

            // forward intermediates
            const Mat3 w = camera.pose.rotation;
            const Vec3 p_cam = camera.pose.apply(s.position);
            const double z = p_cam.z();
            const double fx = camera.intrinsics.fx, fy = camera.intrinsics.fy;
            Eigen::Matrix<double, 2, 3> jac;
            jac << fx / z, 0, -fx * p_cam.x() / (z * z),
                   0, fy / z, -fy * p_cam.y() / (z * z);

            Vec4 q = s.rotation;
            const double qn = q.norm();
            const Vec4 u = qn >= 1e-8 ? Vec4(q / qn) : Vec4(1, 0, 0, 0);
            const Mat3 rot = quat_to_rotation(s.rotation);
            const Vec3 s2 = s.scale.cwiseProduct(s.scale);
            const Mat3 cov_w = rot * s2.asDiagonal() * rot.transpose();
            const Mat3 cov_cam = w * cov_w * w.transpose();

            Mat2 g2;
            g2 << a.cov_a, a.cov_b * 0.5, a.cov_b * 0.5, a.cov_c;

            // cov2d = J S J^T: dL/dS = J^T G J, dL/dJ = (G + G^T) J S = 2 G J S
            const Mat3 g_cov_cam = jac.transpose() * g2 * jac;
            const Eigen::Matrix<double, 2, 3> g_jac = 2.0 * g2 * jac * cov_cam;
            const Mat3 g_cov_w = w.transpose() * g_cov_cam * w;

            // Sigma_w = R diag(s^2) R^T
            const Mat3 g_diag = rot.transpose() * g_cov_w * rot;
            for (int k = 0; k < 3; ++k)
                out.scale[static_cast<size_t>(src) * 3 + k] = 2.0 * s.scale[k] * g_diag(k, k);
            const Mat3 g_rot = 2.0 * g_cov_w * rot * s2.asDiagonal();

            // rotation matrix -> quaternion chain (through normalization)
            const double uw = u[0], ux = u[1], uy = u[2], uz = u[3];
            Mat3 dr[4];
            dr[0] << 0, -uz, uy, uz, 0, -ux, -uy, ux, 0;
            dr[1] << 0, uy, uz, uy, -2 * ux, -uw, uz, uw, -2 * ux;
            dr[2] << -2 * uy, ux, uw, ux, 0, uz, -uw, uz, -2 * uy;
            dr[3] << -2 * uz, -uw, ux, uw, -2 * uz, uy, ux, uy, 0;
            Vec4 g_unit;
            for (int k = 0; k < 4; ++k) g_unit[k] = 2.0 * (g_rot.cwiseProduct(dr[k])).sum();
            if (qn >= 1e-8) {
                const double dot = g_unit.dot(u);
                for (int k = 0; k < 4; ++k)
                    out.rotation[static_cast<size_t>(src) * 4 + k] = (g_unit[k] - dot * u[k]) / qn;
            }

            // mean2d and depth to camera point
            Vec3 g_pcam = Vec3::Zero();
            g_pcam.x() += a.mean_x * fx / z;
            g_pcam.y() += a.mean_y * fy / z;
            g_pcam.z() += -a.mean_x * fx * p_cam.x() / (z * z) - a.mean_y * fy * p_cam.y() / (z * z);
            g_pcam.z() += a.depth;

            // J's dependence on the camera point
            g_pcam.x() += g_jac(0, 2) * (-fx / (z * z));
            g_pcam.y() += g_jac(1, 2) * (-fy / (z * z));
            g_pcam.z() += g_jac(0, 0) * (-fx / (z * z)) + g_jac(0, 2) * (2.0 * fx * p_cam.x() / (z * z * z)) +
                          g_jac(1, 1) * (-fy / (z * z)) + g_jac(1, 2) * (2.0 * fy * p_cam.y() / (z * z * z));

            const Vec3 g_pos = w.transpose() * g_pcam;
            for (int k = 0; k < 3; ++k) out.position[static_cast<size_t>(src) * 3 + k] = g_pos[k];
        }
    });
    return out;
}

}  // namespace splatgen
