#pragma once

#include "splatgen/raster.hpp"

namespace splatgen {

// Splats along the 12 view-frustum edges (4 near, 4 far, 4 lateral),
// `splats_per_edge` per edge including both endpoints, isotropic scale
// proportional to edge length / splats_per_edge, full opacity.
SplatSet frustum_edge_splats(const Camera& camera, const Rgb& color, int splats_per_edge);

// Renders the union of all cameras' frustum-edge splats (one palette color
// per camera) from every camera. The camera geometry signal fed to the
// encoder ("pose hints").
std::vector<Image> render_pose_hints(const std::vector<Camera>& cameras, const std::vector<Rgb>& palette,
                                     int width, int height, int splats_per_edge = 32);

}  // namespace splatgen
