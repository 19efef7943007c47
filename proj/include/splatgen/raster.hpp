#pragma once

#include <optional>
#include <span>
#include <vector>

#include "splatgen/image.hpp"
#include "splatgen/splats.hpp"

namespace splatgen {

using Mat2 = Eigen::Matrix2d;

// Compositing semantics (shared by render, render_vjp and the test oracles):
//   - a splat contributes to a pixel iff its Gaussian weight g >= 1/255,
//     i.e. q = d^T cov2d^-1 d <= kQCut; the conservative per-splat radius is
//     sqrt(kQCut * lambda_max(cov2d))
//   - alpha_i = min(opacity_i * g_i, kAlphaMax)
//   - front-to-back order: ascending depth, ties broken by source index
//   - compositing stops once transmittance drops below kMinTransmittance
constexpr double kAlphaMax = 0.999;
constexpr double kWeightCut = 1.0 / 255.0;
const double kQCut = 2.0 * std::log(255.0);
constexpr double kMinTransmittance = 1e-4;
constexpr double kCovBlur = 0.3;  // antialias floor added to cov2d

struct ProjectedSplat {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    double depth = 0;
    double opacity = 0;
    Vec3 color = Vec3::Zero();
    int source = -1;
};

// EWA projection: cov2d = J W Sigma W^T J^T + kCovBlur * I. Returns nullopt
// when the splat is culled (camera depth <= near, or its weight support
// misses the image).
std::optional<ProjectedSplat> project_splat(const Splat& splat, const Camera& camera, int width,
                                            int height, int source = -1);

struct PixelContribution {
    double weight = 0;   // Gaussian weight g at the pixel
    double opacity = 0;
    double depth = 0;
    Vec3 color = Vec3::Zero();
};

struct PixelComposite {
    Vec3 rgb = Vec3::Zero();
    double depth = 0;
    double alpha = 0;
};

// Front-to-back alpha compositing of a depth-sorted contribution list.
// Checks the sort order unless NDEBUG is defined.
PixelComposite composite_pixel(std::span<const PixelContribution> ordered);

struct RenderOutput {
    Image rgb;    // H x W x 3
    Image depth;  // H x W x 1, alpha-weighted expected depth
    Image alpha;  // H x W x 1
};

RenderOutput render(const SplatSet& scene, const Camera& camera, int width, int height);

struct RenderCotangent {
    Image rgb;    // any of these may be empty (treated as zero)
    Image depth;
    Image alpha;
};

// Exact vector-Jacobian product of render with respect to every splat field.
DecodedSplatsGrad render_vjp(const SplatSet& scene, const Camera& camera, int width, int height,
                             const RenderCotangent& cotangent);

}  // namespace splatgen
