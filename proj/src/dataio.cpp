#include "splatgen/dataio.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>

namespace splatgen {
namespace dataio {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

SceneRecord load_scene_dir_impl(const fs::path& dir, const std::string& scene_id) {
    {
        SceneRecord rec;
        rec.id = scene_id;
        rec.dir = dir.string();
        const fs::path poses = dir / "poses.jsonl";
        if (!fs::exists(poses))
            fail(ErrorCode::manifest, "load_manifest: scene " + rec.id + ": missing poses.jsonl");

        std::ifstream pf(poses);
        std::string line;
        int line_no = 0;
        while (std::getline(pf, line)) {
            ++line_no;
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const std::exception&) {
                fail(ErrorCode::manifest, "load_manifest: scene " + rec.id + ": bad pose line " +
                                              std::to_string(line_no));
            }
            SceneFrame frame;
            frame.image_path = (dir / j.at("frame").get<std::string>()).string();
            if (!fs::exists(frame.image_path))
                fail(ErrorCode::manifest,
                     "load_manifest: scene " + rec.id + ": missing image " + frame.image_path);
            auto w2c = j.at("w2c").get<std::vector<double>>();
            if (w2c.size() != 12)
                fail(ErrorCode::manifest, "load_manifest: scene " + rec.id + ": pose line " +
                                              std::to_string(line_no) + " needs 12 w2c entries");
            Pose p;
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c) p.rotation(r, c) = w2c[static_cast<size_t>(r * 4 + c)];
                p.translation[r] = w2c[static_cast<size_t>(r * 4 + 3)];
            }
            if (pose_orthonormality_error(p) > 1e-3)
                fail(ErrorCode::manifest, "load_manifest: scene " + rec.id + ": frame " +
                                              std::to_string(line_no) + " rotation is not orthonormal");
            frame.camera.pose = orthonormalized(p);
            frame.camera.intrinsics.fx = j.at("fx").get<double>();
            frame.camera.intrinsics.fy = j.at("fy").get<double>();
            frame.camera.intrinsics.cx = j.at("cx").get<double>();
            frame.camera.intrinsics.cy = j.at("cy").get<double>();
            frame.camera.intrinsics.width = j.at("width").get<int>();
            frame.camera.intrinsics.height = j.at("height").get<int>();
            rec.frames.push_back(frame);
        }

        for (size_t i = 1; i < rec.frames.size(); ++i) {
            const Intrinsics& a = rec.frames[0].camera.intrinsics;
            const Intrinsics& b = rec.frames[i].camera.intrinsics;
            if (a.fx != b.fx || a.fy != b.fy || a.cx != b.cx || a.cy != b.cy || a.width != b.width ||
                a.height != b.height)
                fail(ErrorCode::manifest, "load_manifest: scene " + rec.id + ": intrinsics mismatch at frame " +
                                              std::to_string(i));
        }

        const fs::path meta = dir / "meta.json";
        double near = 0.1, far = 20.0;
        if (fs::exists(meta)) {
            json m;
            std::ifstream mf(meta);
            mf >> m;
            rec.class_id = m.value("class_id", -1);
            near = m.value("near", near);
            far = m.value("far", far);
        }
        for (auto& frame : rec.frames) {
            frame.camera.near = near;
            frame.camera.far = far;
        }
        return rec;
    }
}

}  // namespace

std::vector<SceneRecord> load_manifest(const std::string& root) {
    const fs::path root_path(root);
    const fs::path manifest_path = root_path / "manifest.json";
    if (!fs::exists(manifest_path))
        fail(ErrorCode::manifest, "load_manifest: missing " + manifest_path.string());
    json manifest;
    try {
        std::ifstream f(manifest_path);
        f >> manifest;
    } catch (const std::exception& e) {
        fail(ErrorCode::manifest, "load_manifest: malformed manifest.json: " + std::string(e.what()));
    }
    std::vector<SceneRecord> scenes;
    for (const auto& name : manifest.value("scenes", json::array())) {
        const std::string id = name.get<std::string>();
        scenes.push_back(load_scene_dir_impl(root_path / id, id));
    }
    return scenes;
}

SceneRecord read_scene_dir(const std::string& dir) {
    const fs::path p(dir);
    if (!fs::exists(p / "poses.jsonl"))
        fail(ErrorCode::manifest, "read_scene_dir: no poses.jsonl under " + dir);
    return load_scene_dir_impl(p, p.filename().string());
}

ViewGroup select_training_views(const SceneRecord& scene, Rng& rng) {
    const int n = static_cast<int>(scene.frames.size());
    if (n < 7) fail(ErrorCode::argument, "select_training_views: scene " + scene.id + " needs >= 7 frames");
    ViewGroup g;
    std::set<int> inputs;
    for (int k = 0; k < 6; ++k) {
        const int lo = k * n / 6;
        const int hi = (k + 1) * n / 6;
        g.input_frames.push_back(static_cast<int>(rng.uniform_int(lo, hi - 1)));
        inputs.insert(g.input_frames.back());
    }
    for (int k = 0; k < 6; ++k) {
        const int idx = g.input_frames[static_cast<size_t>(k)];
        int dir = rng.uniform() < 0.5 ? -1 : 1;
        auto ok = [&](int f) { return f >= 0 && f < n && !inputs.count(f); };
        if (!ok(idx + dir)) dir = -dir;
        if (ok(idx + dir)) g.target_frames.push_back(idx + dir);
    }
    if (g.target_frames.empty())
        fail(ErrorCode::argument, "select_training_views: no valid adjacent targets in scene " + scene.id);
    g.conditioning_slot = static_cast<int>(rng.uniform_int(0, 5));
    return g;
}

EvalViews select_eval_views(const SceneRecord& scene, EvalTask task, InputConvention convention) {
    const int n = static_cast<int>(scene.frames.size());
    if (n < 12) fail(ErrorCode::argument, "select_eval_views: scene " + scene.id + " needs >= 12 frames");
    EvalViews out;
    for (int i = 0; i < 12; ++i) out.selected.push_back(i * n / 12);
    if (task == EvalTask::single_view) {
        const int input_pos = convention == InputConvention::middle ? 6 : 0;
        for (int i = 0; i < 12; ++i) {
            if (i == input_pos)
                out.inputs.push_back(out.selected[static_cast<size_t>(i)]);
            else
                out.holdouts.push_back(out.selected[static_cast<size_t>(i)]);
        }
    } else {
        for (int i = 0; i < 12; ++i) {
            if (i % 2 == 0)
                out.inputs.push_back(out.selected[static_cast<size_t>(i)]);
            else
                out.holdouts.push_back(out.selected[static_cast<size_t>(i)]);
        }
    }
    return out;
}

std::pair<Image, Intrinsics> preprocess_frame(const Image& image, const Intrinsics& intr, int target) {
    if (image.width <= 0 || image.height <= 0) fail(ErrorCode::argument, "preprocess_frame: empty image");
    const int side = std::min(image.width, image.height);
    Image cropped = center_crop(image, side);
    Intrinsics out = intr;
    out.cx -= (image.width - side) / 2;
    out.cy -= (image.height - side) / 2;
    out.width = side;
    out.height = side;

    const double s = static_cast<double>(target) / side;
    Image resized = side == target ? cropped : resize_bilinear(cropped, target, target);
    out.fx *= s;
    out.fy *= s;
    out.cx *= s;
    out.cy *= s;
    out.width = target;
    out.height = target;
    return {std::move(resized), out};
}

Intrinsics preprocess_intrinsics(const Intrinsics& intr, int target) {
    const int side = std::min(intr.width, intr.height);
    Intrinsics out = intr;
    out.cx -= (intr.width - side) / 2;
    out.cy -= (intr.height - side) / 2;
    const double s = static_cast<double>(target) / side;
    out.fx *= s;
    out.fy *= s;
    out.cx *= s;
    out.cy *= s;
    out.width = target;
    out.height = target;
    return out;
}

const Image& ImageCache::get(const std::string& path) {
    auto it = images.find(path);
    if (it == images.end()) it = images.emplace(path, read_png(path)).first;
    return it->second;
}

TrainGroup load_group(const SceneRecord& scene, const std::vector<int>& input_frames,
                      const std::vector<int>& target_frames, int target_size, ImageCache* cache) {
    TrainGroup g;
    g.class_id = scene.class_id;
    auto load_one = [&](int frame_idx, std::vector<Image>& images, std::vector<Camera>& cams) {
        const SceneFrame& f = scene.frames[static_cast<size_t>(frame_idx)];
        Image img = cache ? cache->get(f.image_path) : read_png(f.image_path);
        auto [proc, intr] = preprocess_frame(img, f.camera.intrinsics, target_size);
        Camera cam = f.camera;
        cam.intrinsics = intr;
        images.push_back(std::move(proc));
        cams.push_back(cam);
    };
    for (int i : input_frames) load_one(i, g.inputs, g.input_cams);
    for (int i : target_frames) load_one(i, g.targets, g.target_cams);
    return g;
}

namespace {

Pose look_at(const Vec3& eye, const Vec3& target) {
    // y-down camera frame: rows are [right; down; forward]
    const Vec3 forward = (target - eye).normalized();
    const Vec3 down_world(0, 1, 0);
    Vec3 right = down_world.cross(forward).normalized();
    Vec3 down = forward.cross(right);
    Pose p;
    p.rotation.row(0) = right;
    p.rotation.row(1) = down;
    p.rotation.row(2) = forward;
    p.translation = -(p.rotation * eye);
    return p;
}

}  // namespace

SynthScene synth_scene_generate(uint64_t seed, const SynthConfig& cfg) {
    Rng rng(derive_seed(seed, 0xDA7A));
    SynthScene scene;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%08llx", static_cast<unsigned long long>(seed));
    scene.record.id = buf;
    scene.record.class_id = static_cast<int>(rng.uniform_int(0, cfg.num_classes - 1));

    // ground plane: flat splats on y = 1
    const double ground_y = 1.0;
    for (int gy = 0; gy < cfg.ground_grid; ++gy)
        for (int gx = 0; gx < cfg.ground_grid; ++gx) {
            Splat s;
            const double cell = 6.0 / cfg.ground_grid;
            s.position = Vec3(-3.0 + (gx + 0.5) * cell, ground_y, -3.0 + (gy + 0.5) * cell);
            s.scale = Vec3(cell * 0.75, 0.02, cell * 0.75);
            s.opacity = 1.0;
            const double shade = 0.28 + 0.1 * rng.uniform();
            s.color = Vec3(shade * 0.8, shade, shade * 0.75);
            scene.ground_truth.splats.push_back(s);
        }

    // object clusters; the class picks the dominant elongation
    const int n_objects = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));
    for (int obj = 0; obj < n_objects; ++obj) {
        const Vec3 centre(rng.uniform(-1.6, 1.6), 0, rng.uniform(-1.6, 1.6));
        Vec3 radii;
        switch (scene.record.class_id % 4) {
            case 0: radii = Vec3(0.5, 0.5, 0.5); break;                      // round
            case 1: radii = Vec3(0.28, 0.85, 0.28); break;                   // tall
            case 2: radii = Vec3(0.8, 0.22, 0.8); break;                     // flat
            default: radii = Vec3(rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8));
        }
        const Vec3 base_color(rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95), rng.uniform(0.15, 0.95));
        const double base_y = ground_y - radii.y();
        for (int k = 0; k < cfg.splats_per_object; ++k) {
            Splat s;
            Vec3 u(rng.normal(), rng.normal(), rng.normal());
            u /= std::max(1.0, u.norm());
            s.position = Vec3(centre.x(), base_y, centre.z()) + radii.cwiseProduct(u);
            for (int d = 0; d < 3; ++d) s.scale[d] = radii[d] * rng.uniform(0.12, 0.3);
            Vec4 q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
            s.rotation = q.normalized();
            s.opacity = rng.uniform(0.75, 1.0);
            for (int d = 0; d < 3; ++d)
                s.color[d] = std::clamp(base_color[d] + rng.uniform(-0.12, 0.12), 0.0, 1.0);
            scene.ground_truth.splats.push_back(s);
        }
    }

    // orbit path
    Intrinsics intr;
    intr.width = intr.height = cfg.image_size;
    intr.fx = intr.fy = 1.2 * cfg.image_size;
    intr.cx = intr.cy = 0.5 * cfg.image_size;
    const Vec3 target(0, 0.45, 0);
    const double full = cfg.arc_degrees >= 360.0;
    for (int i = 0; i < cfg.num_frames; ++i) {
        const double denom = full ? cfg.num_frames : std::max(1, cfg.num_frames - 1);
        const double az = (cfg.arc_start_degrees + cfg.arc_degrees * i / denom) * 3.14159265358979 / 180.0;
        const Vec3 eye(cfg.orbit_radius * std::sin(az), ground_y - cfg.orbit_height,
                       cfg.orbit_radius * std::cos(az));
        SceneFrame frame;
        frame.camera.intrinsics = intr;
        frame.camera.pose = look_at(eye, target);
        frame.camera.near = cfg.near;
        frame.camera.far = cfg.far;
        std::snprintf(buf, sizeof(buf), "frame_%04d.png", i);
        frame.image_path = buf;  // relative until written
        scene.record.frames.push_back(frame);
    }

    for (const auto& frame : scene.record.frames) {
        RenderOutput r = render(scene.ground_truth, frame.camera, cfg.image_size, cfg.image_size);
        scene.images.push_back(quantize8(r.rgb));
    }
    return scene;
}

void write_scene(const std::string& root, SynthScene& scene) {
    const fs::path root_path(root);
    const fs::path dir = root_path / scene.record.id;
    fs::create_directories(dir);
    scene.record.dir = dir.string();

    std::ofstream poses(dir / "poses.jsonl", std::ios::trunc);
    for (size_t i = 0; i < scene.record.frames.size(); ++i) {
        SceneFrame& frame = scene.record.frames[i];
        const fs::path rel = fs::path(frame.image_path).filename();
        write_png((dir / rel).string(), scene.images[i]);
        frame.image_path = (dir / rel).string();

        json j;
        j["frame"] = rel.string();
        std::vector<double> w2c(12);
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) w2c[static_cast<size_t>(r * 4 + c)] = frame.camera.pose.rotation(r, c);
            w2c[static_cast<size_t>(r * 4 + 3)] = frame.camera.pose.translation[r];
        }
        j["w2c"] = w2c;
        j["fx"] = frame.camera.intrinsics.fx;
        j["fy"] = frame.camera.intrinsics.fy;
        j["cx"] = frame.camera.intrinsics.cx;
        j["cy"] = frame.camera.intrinsics.cy;
        j["width"] = frame.camera.intrinsics.width;
        j["height"] = frame.camera.intrinsics.height;
        poses << j.dump() << "\n";
    }

    json meta;
    meta["class_id"] = scene.record.class_id;
    meta["near"] = scene.record.frames.front().camera.near;
    meta["far"] = scene.record.frames.front().camera.far;
    std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";

    write_splats((dir / "gt_splats.splt").string(), scene.ground_truth);

    // refresh the manifest with every scene directory present
    std::set<std::string> names;
    const fs::path manifest_path = root_path / "manifest.json";
    if (fs::exists(manifest_path)) {
        json m;
        std::ifstream f(manifest_path);
        f >> m;
        for (const auto& n : m.value("scenes", json::array())) names.insert(n.get<std::string>());
    }
    names.insert(scene.record.id);
    json m;
    m["scenes"] = std::vector<std::string>(names.begin(), names.end());
    std::ofstream(manifest_path) << m.dump(2) << "\n";
}

}  // namespace dataio
}  // namespace splatgen
