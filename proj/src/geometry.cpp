#include "splatgen/geometry.hpp"

#include <array>
#include <cmath>

namespace splatgen {

Mat4 Pose::matrix() const {
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = rotation;
    m.block<3, 1>(0, 3) = translation;
    return m;
}

double pose_orthonormality_error(const Pose& p) {
    Mat3 gram = p.rotation.transpose() * p.rotation;
    double err = (gram - Mat3::Identity()).cwiseAbs().maxCoeff();
    return err + std::abs(p.rotation.determinant() - 1.0);
}

bool pose_valid(const Pose& p, double tol) { return pose_orthonormality_error(p) <= tol; }

void require_valid_pose(const Pose& p, const char* who) {
    if (!pose_valid(p))
        fail(ErrorCode::argument, std::string(who) + ": rotation is not a proper orthonormal matrix");
}

Pose orthonormalized(const Pose& p) {
    Eigen::JacobiSVD<Mat3> svd(p.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
        Mat3 flip = Mat3::Identity();
        flip(2, 2) = -1;
        r = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return Pose{r, p.translation};
}

Pose relative_pose(const Pose& reference, const Pose& other) {
    require_valid_pose(reference, "relative_pose(reference)");
    require_valid_pose(other, "relative_pose(other)");
    // New world frame = reference camera frame. x_ref = R_r x + t_r, so
    // x_other = R_o R_r^T x_ref + (t_o - R_o R_r^T t_r).
    Mat3 r = other.rotation * reference.rotation.transpose();
    Vec3 t = other.translation - r * reference.translation;
    return Pose{r, t};
}

std::vector<Pose> canonicalize_poses(const std::vector<Pose>& poses) {
    std::vector<Pose> out;
    out.reserve(poses.size());
    for (const Pose& p : poses) out.push_back(relative_pose(poses.front(), p));
    return out;
}

std::vector<Camera> canonicalize_cameras(const std::vector<Camera>& cams) {
    std::vector<Camera> out = cams;
    for (size_t i = 0; i < cams.size(); ++i)
        out[i].pose = relative_pose(cams.front().pose, cams[i].pose);
    return out;
}

Vec3 unproject_pixel(const Vec2& pixel, double depth, const Camera& camera) {
    if (!(depth > 0)) fail(ErrorCode::argument, "unproject_pixel: depth must be positive");
    const Intrinsics& k = camera.intrinsics;
    Vec3 cam_point((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
    return camera.pose.apply_inverse(cam_point);
}

bool try_project_point(const Vec3& world, const Camera& camera, Vec3* uvd) {
    Vec3 c = camera.pose.apply(world);
    if (!(c.z() > 0)) return false;
    const Intrinsics& k = camera.intrinsics;
    *uvd = Vec3(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy, c.z());
    return true;
}

Vec3 project_point(const Vec3& world, const Camera& camera) {
    Vec3 uvd;
    if (!try_project_point(world, camera, &uvd))
        fail(ErrorCode::numeric, "project_point: point at or behind the camera plane");
    return uvd;
}

std::array<Vec3, 8> frustum_corners(const Camera& camera) {
    const Intrinsics& k = camera.intrinsics;
    const double w = k.width, h = k.height;
    const std::array<Vec2, 4> px = {Vec2(0, 0), Vec2(w, 0), Vec2(w, h), Vec2(0, h)};
    std::array<Vec3, 8> out;
    for (int i = 0; i < 4; ++i) out[static_cast<size_t>(i)] = unproject_pixel(px[static_cast<size_t>(i)], camera.near, camera);
    for (int i = 0; i < 4; ++i) out[static_cast<size_t>(4 + i)] = unproject_pixel(px[static_cast<size_t>(i)], camera.far, camera);
    return out;
}

namespace {
Rgb hsv_to_rgb(double h, double s, double v) {
    double c = v * s;
    double hp = h * 6.0;
    double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c; g = x;
    } else if (hp < 2) {
        r = x; g = c;
    } else if (hp < 3) {
        g = c; b = x;
    } else if (hp < 4) {
        g = x; b = c;
    } else if (hp < 5) {
        r = x; b = c;
    } else {
        r = c; b = x;
    }
    double m = v - c;
    return Rgb{r + m, g + m, b + m};
}
}  // namespace

std::vector<Rgb> default_view_palette(int count) {
    std::vector<Rgb> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
        out.push_back(hsv_to_rgb(static_cast<double>(i) / std::max(count, 1), 0.85, 1.0));
    return out;
}

}  // namespace splatgen
