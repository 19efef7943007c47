#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "splatgen/geometry.hpp"
#include "splatgen/tensor.hpp"

namespace splatgen {

struct Splat {
    Vec3 position = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);  // unit quaternion (w, x, y, z)
    Vec3 scale = Vec3::Ones();         // per-axis standard deviations
    double opacity = 1.0;              // [0, 1]
    Vec3 color = Vec3::Zero();         // rgb in [0, 1]^3
};

struct SplatProvenance {
    int view = -1;
    int pixel = -1;  // y * W + x
};

struct SplatSet {
    std::vector<Splat> splats;
    std::vector<SplatProvenance> provenance;  // optional: empty or size() == splats.size()

    size_t size() const { return splats.size(); }
};

// Per-pixel raw splat parameters for V views, NCHW layout [V, 12, H, W].
// Channels: 0 depth, 1 opacity, 2..4 rgb, 5..8 quaternion, 9..11 log-scale.
struct SplatterImage {
    Tensor<double> raw;
    std::vector<Camera> cameras;

    int views() const { return raw.ndim() == 4 ? static_cast<int>(raw.dim(0)) : 0; }
    int height() const { return raw.ndim() == 4 ? static_cast<int>(raw.dim(2)) : 0; }
    int width() const { return raw.ndim() == 4 ? static_cast<int>(raw.dim(3)) : 0; }
};

// Rotation matrix from a (not necessarily unit) quaternion; normalizes
// internally, falling back to identity when the norm is < 1e-8.
Mat3 quat_to_rotation(const Vec4& q);

// Raw channel activations:
//   depth   = near + sigmoid(raw) * (far - near)
//   opacity = sigmoid(raw), color = sigmoid(raw)
//   quat    = normalize(raw), identity fallback for near-zero norm
//   scale_k = exp(clamp(raw_k, -8, 2)) * depth / fx
//   position = unproject(pixel center, depth)
SplatSet decode_splatter_image(const SplatterImage& img);

// Structure-of-arrays decode used by the training path; same math.
struct DecodedSplats {
    int64_t count = 0;
    std::vector<double> position;  // N*3
    std::vector<double> rotation;  // N*4
    std::vector<double> scale;     // N*3
    std::vector<double> opacity;   // N
    std::vector<double> color;     // N*3
};

DecodedSplats decode_splatter_raw(const Tensor<double>& raw, const std::vector<Camera>& cameras);

struct DecodedSplatsGrad {
    std::vector<double> position;
    std::vector<double> rotation;
    std::vector<double> scale;
    std::vector<double> opacity;
    std::vector<double> color;

    static DecodedSplatsGrad zeros(int64_t count);
};

// Vector-Jacobian product of decode_splatter_raw.
Tensor<double> decode_splatter_raw_vjp(const Tensor<double>& raw, const std::vector<Camera>& cameras,
                                       const DecodedSplatsGrad& cotangent);

SplatSet splats_from_decoded(const DecodedSplats& d, int views, int height, int width);

// Sigma = R diag(s^2) R^T.
Mat3 splat_world_covariance(const Splat& s);

struct SplatValidationReport {
    int64_t total = 0;
    int64_t range_defects = 0;       // opacity/color outside [0,1], |quat| off unit
    int64_t nonfinite_defects = 0;   // any non-finite field
    int64_t degenerate_scales = 0;   // scale component <= 0

    bool clean() const { return range_defects == 0 && nonfinite_defects == 0 && degenerate_scales == 0; }
};

SplatValidationReport validate_splats(const SplatSet& set);

// Binary format: header {magic "SPLT", u32 version, u64 count}, then per splat
// 14 little-endian float32: pos3, quat4, scale3, opacity, rgb3.
void write_splats(const std::string& path, const SplatSet& set);
SplatSet read_splats(const std::string& path);

}  // namespace splatgen
