#include "splatgen/splats.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "splatgen/parallel.hpp"

namespace splatgen {

namespace {

constexpr double kQuatNormFloor = 1e-8;
constexpr double kLogScaleMin = -8.0;
constexpr double kLogScaleMax = 2.0;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Mat3 quat_to_rotation(const Vec4& q) {
    double n = q.norm();
    double w = 1, x = 0, y = 0, z = 0;
    if (n >= kQuatNormFloor) {
        w = q[0] / n;
        x = q[1] / n;
        y = q[2] / n;
        z = q[3] / n;
    }
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

DecodedSplats decode_splatter_raw(const Tensor<double>& raw, const std::vector<Camera>& cameras) {
    if (raw.ndim() != 4 || raw.dim(1) != 12)
        fail(ErrorCode::argument, "decode: raw must be [V,12,H,W], got " + shape_str(raw.shape));
    const int v_count = static_cast<int>(raw.dim(0));
    const int h = static_cast<int>(raw.dim(2));
    const int w = static_cast<int>(raw.dim(3));
    if (static_cast<int>(cameras.size()) != v_count)
        fail(ErrorCode::argument, "decode: camera count does not match view count");
    if (!raw.all_finite()) fail(ErrorCode::numeric, "decode: raw tensor has non-finite values");

    DecodedSplats out;
    out.count = static_cast<int64_t>(v_count) * h * w;
    out.position.resize(static_cast<size_t>(out.count) * 3);
    out.rotation.resize(static_cast<size_t>(out.count) * 4);
    out.scale.resize(static_cast<size_t>(out.count) * 3);
    out.opacity.resize(static_cast<size_t>(out.count));
    out.color.resize(static_cast<size_t>(out.count) * 3);

    const int64_t plane = static_cast<int64_t>(h) * w;
    parallel_for(v_count, [&](int64_t vi) {
        const Camera& cam = cameras[static_cast<size_t>(vi)];
        const Mat3 rt = cam.pose.rotation.transpose();
        const Vec3 cam_origin = -(rt * cam.pose.translation);
        const double span = cam.far - cam.near;
        const double* base = raw.ptr() + vi * 12 * plane;
        for (int py = 0; py < h; ++py) {
            for (int px = 0; px < w; ++px) {
                const int64_t pix = static_cast<int64_t>(py) * w + px;
                const int64_t n = vi * plane + pix;
                auto ch = [&](int c) { return base[c * plane + pix]; };

                const double depth = cam.near + sigmoid(ch(0)) * span;
                const double opac = sigmoid(ch(1));
                const Vec3 rgb(sigmoid(ch(2)), sigmoid(ch(3)), sigmoid(ch(4)));

                Vec4 q(ch(5), ch(6), ch(7), ch(8));
                const double qn = q.norm();
                if (qn < kQuatNormFloor)
                    q = Vec4(1, 0, 0, 0);
                else
                    q /= qn;

                const double footprint = depth / cam.intrinsics.fx;
                Vec3 scale;
                for (int k = 0; k < 3; ++k)
                    scale[k] = std::exp(std::clamp(ch(9 + k), kLogScaleMin, kLogScaleMax)) * footprint;

                const Vec3 dir((px + 0.5 - cam.intrinsics.cx) / cam.intrinsics.fx,
                               (py + 0.5 - cam.intrinsics.cy) / cam.intrinsics.fy, 1.0);
                const Vec3 pos = cam_origin + rt * (dir * depth);

                for (int k = 0; k < 3; ++k) out.position[static_cast<size_t>(n * 3 + k)] = pos[k];
                for (int k = 0; k < 4; ++k) out.rotation[static_cast<size_t>(n * 4 + k)] = q[k];
                for (int k = 0; k < 3; ++k) out.scale[static_cast<size_t>(n * 3 + k)] = scale[k];
                out.opacity[static_cast<size_t>(n)] = opac;
                for (int k = 0; k < 3; ++k) out.color[static_cast<size_t>(n * 3 + k)] = rgb[k];
            }
        }
    });
    return out;
}

DecodedSplatsGrad DecodedSplatsGrad::zeros(int64_t count) {
    DecodedSplatsGrad g;
    g.position.assign(static_cast<size_t>(count) * 3, 0.0);
    g.rotation.assign(static_cast<size_t>(count) * 4, 0.0);
    g.scale.assign(static_cast<size_t>(count) * 3, 0.0);
    g.opacity.assign(static_cast<size_t>(count), 0.0);
    g.color.assign(static_cast<size_t>(count) * 3, 0.0);
    return g;
}

Tensor<double> decode_splatter_raw_vjp(const Tensor<double>& raw, const std::vector<Camera>& cameras,
                                       const DecodedSplatsGrad& cotangent) {
    const int v_count = static_cast<int>(raw.dim(0));
    const int h = static_cast<int>(raw.dim(2));
    const int w = static_cast<int>(raw.dim(3));
    Tensor<double> grad(raw.shape);

    const int64_t plane = static_cast<int64_t>(h) * w;
    parallel_for(v_count, [&](int64_t vi) {
        const Camera& cam = cameras[static_cast<size_t>(vi)];
        const Mat3 rt = cam.pose.rotation.transpose();
        const double span = cam.far - cam.near;
        const double* base = raw.ptr() + vi * 12 * plane;
        double* gbase = grad.ptr() + vi * 12 * plane;
        for (int py = 0; py < h; ++py) {
            for (int px = 0; px < w; ++px) {
                const int64_t pix = static_cast<int64_t>(py) * w + px;
                const int64_t n = vi * plane + pix;
                auto ch = [&](int c) { return base[c * plane + pix]; };
                auto gch = [&](int c) -> double& { return gbase[c * plane + pix]; };

                const double sd = sigmoid(ch(0));
                const double depth = cam.near + sd * span;
                const double footprint = depth / cam.intrinsics.fx;
                const Vec3 dir((px + 0.5 - cam.intrinsics.cx) / cam.intrinsics.fx,
                               (py + 0.5 - cam.intrinsics.cy) / cam.intrinsics.fy, 1.0);
                const Vec3 dpos_ddepth = rt * dir;

                const double* gp = &cotangent.position[static_cast<size_t>(n * 3)];
                const double* gs = &cotangent.scale[static_cast<size_t>(n * 3)];
                const double* gq = &cotangent.rotation[static_cast<size_t>(n * 4)];
                const double* gc = &cotangent.color[static_cast<size_t>(n * 3)];
                const double go = cotangent.opacity[static_cast<size_t>(n)];

                // depth feeds position and the scale footprint
                double ddepth = gp[0] * dpos_ddepth[0] + gp[1] * dpos_ddepth[1] + gp[2] * dpos_ddepth[2];
                for (int k = 0; k < 3; ++k) {
                    const double e = std::exp(std::clamp(ch(9 + k), kLogScaleMin, kLogScaleMax));
                    ddepth += gs[k] * e / cam.intrinsics.fx;
                    const bool inside = ch(9 + k) > kLogScaleMin && ch(9 + k) < kLogScaleMax;
                    gch(9 + k) = inside ? gs[k] * e * footprint : 0.0;
                }
                gch(0) = ddepth * sd * (1.0 - sd) * span;

                const double so = sigmoid(ch(1));
                gch(1) = go * so * (1.0 - so);
                for (int k = 0; k < 3; ++k) {
                    const double sc = sigmoid(ch(2 + k));
                    gch(2 + k) = gc[k] * sc * (1.0 - sc);
                }

                Vec4 q(ch(5), ch(6), ch(7), ch(8));
                const double qn = q.norm();
                if (qn < kQuatNormFloor) {
                    for (int k = 0; k < 4; ++k) gch(5 + k) = 0.0;
                } else {
                    const Vec4 u = q / qn;
                    const double dot = gq[0] * u[0] + gq[1] * u[1] + gq[2] * u[2] + gq[3] * u[3];
                    for (int k = 0; k < 4; ++k) gch(5 + k) = (gq[k] - dot * u[k]) / qn;
                }
            }
        }
    });
    return grad;
}

SplatSet splats_from_decoded(const DecodedSplats& d, int views, int height, int width) {
    SplatSet set;
    set.splats.resize(static_cast<size_t>(d.count));
    set.provenance.resize(static_cast<size_t>(d.count));
    const int64_t plane = static_cast<int64_t>(height) * width;
    for (int64_t n = 0; n < d.count; ++n) {
        Splat& s = set.splats[static_cast<size_t>(n)];
        s.position = Vec3(d.position[static_cast<size_t>(n * 3)], d.position[static_cast<size_t>(n * 3 + 1)],
                          d.position[static_cast<size_t>(n * 3 + 2)]);
        s.rotation = Vec4(d.rotation[static_cast<size_t>(n * 4)], d.rotation[static_cast<size_t>(n * 4 + 1)],
                          d.rotation[static_cast<size_t>(n * 4 + 2)], d.rotation[static_cast<size_t>(n * 4 + 3)]);
        s.scale = Vec3(d.scale[static_cast<size_t>(n * 3)], d.scale[static_cast<size_t>(n * 3 + 1)],
                       d.scale[static_cast<size_t>(n * 3 + 2)]);
        s.opacity = d.opacity[static_cast<size_t>(n)];
        s.color = Vec3(d.color[static_cast<size_t>(n * 3)], d.color[static_cast<size_t>(n * 3 + 1)],
                       d.color[static_cast<size_t>(n * 3 + 2)]);
        set.provenance[static_cast<size_t>(n)] = SplatProvenance{static_cast<int>(n / plane),
                                                                 static_cast<int>(n % plane)};
    }
    (void)views;
    return set;
}

SplatSet decode_splatter_image(const SplatterImage& img) {
    DecodedSplats d = decode_splatter_raw(img.raw, img.cameras);
    return splats_from_decoded(d, img.views(), img.height(), img.width());
}

Mat3 splat_world_covariance(const Splat& s) {
    Mat3 r = quat_to_rotation(s.rotation);
    Vec3 s2 = s.scale.cwiseProduct(s.scale);
    return r * s2.asDiagonal() * r.transpose();
}

SplatValidationReport validate_splats(const SplatSet& set) {
    SplatValidationReport rep;
    rep.total = static_cast<int64_t>(set.splats.size());
    for (const Splat& s : set.splats) {
        bool finite = s.position.allFinite() && s.rotation.allFinite() && s.scale.allFinite() &&
                      std::isfinite(s.opacity) && s.color.allFinite();
        if (!finite) {
            ++rep.nonfinite_defects;
            continue;
        }
        bool range_ok = s.opacity >= 0.0 && s.opacity <= 1.0 && s.color.minCoeff() >= 0.0 &&
                        s.color.maxCoeff() <= 1.0 && std::abs(s.rotation.norm() - 1.0) <= 1e-6;
        if (!range_ok) ++rep.range_defects;
        if (s.scale.minCoeff() <= 0.0) ++rep.degenerate_scales;
    }
    return rep;
}

namespace {

constexpr char kMagic[4] = {'S', 'P', 'L', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void write_splats(const std::string& path, const SplatSet& set) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::io, "write_splats: cannot open " + path);
    f.write(kMagic, 4);
    write_pod(f, kVersion);
    write_pod(f, static_cast<uint64_t>(set.splats.size()));
    for (const Splat& s : set.splats) {
        float rec[14] = {
            static_cast<float>(s.position[0]), static_cast<float>(s.position[1]), static_cast<float>(s.position[2]),
            static_cast<float>(s.rotation[0]), static_cast<float>(s.rotation[1]), static_cast<float>(s.rotation[2]),
            static_cast<float>(s.rotation[3]),
            static_cast<float>(s.scale[0]), static_cast<float>(s.scale[1]), static_cast<float>(s.scale[2]),
            static_cast<float>(s.opacity),
            static_cast<float>(s.color[0]), static_cast<float>(s.color[1]), static_cast<float>(s.color[2])};
        f.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
    if (!f) fail(ErrorCode::io, "write_splats: write failed for " + path);
}

SplatSet read_splats(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::io, "read_splats: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        fail(ErrorCode::io, "read_splats: bad magic in " + path);
    uint32_t version = read_pod<uint32_t>(f);
    if (version != kVersion) fail(ErrorCode::io, "read_splats: unsupported version in " + path);
    uint64_t count = read_pod<uint64_t>(f);
    SplatSet set;
    set.splats.resize(count);
    for (uint64_t i = 0; i < count; ++i) {
        float rec[14];
        f.read(reinterpret_cast<char*>(rec), sizeof(rec));
        if (!f) fail(ErrorCode::io, "read_splats: truncated file " + path);
        Splat& s = set.splats[i];
        s.position = Vec3(rec[0], rec[1], rec[2]);
        s.rotation = Vec4(rec[3], rec[4], rec[5], rec[6]);
        s.scale = Vec3(rec[7], rec[8], rec[9]);
        s.opacity = rec[10];
        s.color = Vec3(rec[11], rec[12], rec[13]);
    }
    return set;
}

}  // namespace splatgen
