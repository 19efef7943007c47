#include "splatgen/pose_hints.hpp"

namespace splatgen {

SplatSet frustum_edge_splats(const Camera& camera, const Rgb& color, int splats_per_edge) {
    if (splats_per_edge < 2) fail(ErrorCode::argument, "frustum_edge_splats: need at least 2 splats per edge");
    const auto corners = frustum_corners(camera);
    // near rectangle, far rectangle, laterals
    const int edges[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                              {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
    SplatSet set;
    set.splats.reserve(static_cast<size_t>(12 * splats_per_edge));
    for (const auto& e : edges) {
        const Vec3 a = corners[static_cast<size_t>(e[0])];
        const Vec3 b = corners[static_cast<size_t>(e[1])];
        // 0.125x keeps the lines thin enough to read as edges when a lateral
        // edge passes close to a camera
        const double sigma = 0.125 * (b - a).norm() / splats_per_edge;
        for (int i = 0; i < splats_per_edge; ++i) {
            Splat s;
            s.position = a + (b - a) * (static_cast<double>(i) / (splats_per_edge - 1));
            s.scale = Vec3::Constant(sigma);
            s.opacity = 1.0;
            s.color = Vec3(color.r, color.g, color.b);
            set.splats.push_back(s);
        }
    }
    return set;
}

std::vector<Image> render_pose_hints(const std::vector<Camera>& cameras, const std::vector<Rgb>& palette,
                                     int width, int height, int splats_per_edge) {
    if (palette.size() != cameras.size())
        fail(ErrorCode::argument, "render_pose_hints: need one palette color per camera");
    for (size_t i = 0; i < palette.size(); ++i)
        for (size_t j = i + 1; j < palette.size(); ++j)
            if (palette[i].r == palette[j].r && palette[i].g == palette[j].g && palette[i].b == palette[j].b)
                fail(ErrorCode::argument, "render_pose_hints: palette colors must be pairwise distinct");

    SplatSet cloud;
    for (size_t v = 0; v < cameras.size(); ++v) {
        SplatSet edges = frustum_edge_splats(cameras[v], palette[v], splats_per_edge);
        cloud.splats.insert(cloud.splats.end(), edges.splats.begin(), edges.splats.end());
    }
    std::vector<Image> out;
    out.reserve(cameras.size());
    for (const Camera& cam : cameras) out.push_back(render(cloud, cam, width, height).rgb);
    return out;
}

}  // namespace splatgen
