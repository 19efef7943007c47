#pragma once

#include <Eigen/Dense>
#include <vector>

#include "splatgen/error.hpp"

namespace splatgen {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct Intrinsics {
    double fx = 0, fy = 0;
    double cx = 0, cy = 0;
    int width = 0, height = 0;

    bool valid() const {
        return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height;
    }
};

// World-to-camera rigid transform: x_cam = R * x_world + t.
struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Pose identity() { return Pose{}; }
    Mat4 matrix() const;

    Vec3 apply(const Vec3& world) const { return rotation * world + translation; }
    Vec3 apply_inverse(const Vec3& cam) const { return rotation.transpose() * (cam - translation); }
};

// max |R^T R - I| entry plus |det - 1|; 0 for an exact rotation.
double pose_orthonormality_error(const Pose& p);
bool pose_valid(const Pose& p, double tol = 1e-6);
// Throws Error(argument) if the rotation fails the orthonormality check.
void require_valid_pose(const Pose& p, const char* who);
// Nearest rotation by SVD projection; used when ingesting external pose files.
Pose orthonormalized(const Pose& p);

struct Camera {
    Intrinsics intrinsics;
    Pose pose;
    double near = 0.1;
    double far = 20.0;
};

// Pose of `other` expressed in the frame in which `reference` is the identity.
Pose relative_pose(const Pose& reference, const Pose& other);

// Re-expresses every pose relative to the first one (which becomes identity).
std::vector<Pose> canonicalize_poses(const std::vector<Pose>& poses);
std::vector<Camera> canonicalize_cameras(const std::vector<Camera>& cams);

// Pixel (u, v) at the given camera depth, mapped to world coordinates.
// Any pixel is valid, including outside the image bounds.
Vec3 unproject_pixel(const Vec2& pixel, double depth, const Camera& camera);

// Perspective projection to (u, v, depth). Throws Error(numeric) when the
// point lies at or behind the camera plane.
Vec3 project_point(const Vec3& world, const Camera& camera);

// Non-throwing variant for hot loops: false when depth <= 0.
bool try_project_point(const Vec3& world, const Camera& camera, Vec3* uvd);

// The 8 frustum corners: near plane (0,0),(W,0),(W,H),(0,H) then far plane,
// same pixel order.
std::array<Vec3, 8> frustum_corners(const Camera& camera);

struct Rgb {
    double r = 0, g = 0, b = 0;
};

// Fixed palette indexed by view slot: evenly spaced hues, full saturation.
std::vector<Rgb> default_view_palette(int count);

}  // namespace splatgen
