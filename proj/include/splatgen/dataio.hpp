#pragma once

#include <map>
#include <string>
#include <vector>

#include "splatgen/image.hpp"
#include "splatgen/raster.hpp"
#include "splatgen/rng.hpp"

namespace splatgen {
namespace dataio {

struct SceneFrame {
    std::string image_path;  // absolute
    Camera camera;
};

struct SceneRecord {
    std::string id;
    std::vector<SceneFrame> frames;
    int class_id = -1;
    std::string dir;
};

// Manifest layout: <root>/manifest.json lists scene directory names; each
// scene directory holds PNG frames, poses.jsonl (one line per frame:
// {"frame", "w2c" 3x4 row-major, fx, fy, cx, cy, width, height}), optional
// meta.json {"class_id", "near", "far"} and optional gt_splats.splt.
std::vector<SceneRecord> load_manifest(const std::string& root);

struct ViewGroup {
    std::vector<int> input_frames;   // 6 frame indices
    std::vector<int> target_frames;  // adjacent, never inputs, may be < 6
    int conditioning_slot = -1;      // index into input_frames
};

// Stratified input sampling over 6 equal strata; each target is the input's
// preceding/following frame (direction random, flipped when it would collide
// with an input or run off the clip; dropped when both neighbours collide).
ViewGroup select_training_views(const SceneRecord& scene, Rng& rng);

enum class EvalTask { single_view, sparse_view };
enum class InputConvention { middle, first };

struct EvalViews {
    std::vector<int> selected;  // 12 evenly spaced frame indices
    std::vector<int> inputs;    // frame indices
    std::vector<int> holdouts;  // frame indices
};

EvalViews select_eval_views(const SceneRecord& scene, EvalTask task,
                            InputConvention convention = InputConvention::middle);

// Square center crop to the small edge, bilinear resize to target x target,
// intrinsics adjusted so reprojection is preserved.
std::pair<Image, Intrinsics> preprocess_frame(const Image& image, const Intrinsics& intrinsics, int target);

// The intrinsics half of preprocess_frame, for camera-only paths.
Intrinsics preprocess_intrinsics(const Intrinsics& intrinsics, int target);

// Loads one scene directory (poses.jsonl + frames) without a manifest.
SceneRecord read_scene_dir(const std::string& dir);

// In-memory PNG cache for training loops.
struct ImageCache {
    std::map<std::string, Image> images;
    const Image& get(const std::string& path);
};

// Loaded, preprocessed views ready for the autoencoder.
struct TrainGroup {
    std::vector<Image> inputs;
    std::vector<Camera> input_cams;
    std::vector<Image> targets;
    std::vector<Camera> target_cams;
    int conditioning_slot = -1;
    int class_id = -1;
};

TrainGroup load_group(const SceneRecord& scene, const std::vector<int>& input_frames,
                      const std::vector<int>& target_frames, int target_size,
                      ImageCache* cache = nullptr);

struct SynthConfig {
    int num_frames = 30;
    int image_size = 96;
    int min_objects = 2, max_objects = 4;
    int splats_per_object = 56;
    int ground_grid = 12;
    double orbit_radius = 5.5;
    double orbit_height = 1.1;  // above the ground plane
    double arc_degrees = 360.0;
    double arc_start_degrees = 0.0;
    int num_classes = 4;
    double near = 0.1, far = 20.0;
};

struct SynthScene {
    SceneRecord record;       // image paths unset until written
    SplatSet ground_truth;
    std::vector<Image> images;  // already 8-bit quantized
};

// Procedural splat scene (ellipsoidal clusters on a ground plane) rendered
// along an orbit path; deterministic in the seed.
SynthScene synth_scene_generate(uint64_t seed, const SynthConfig& cfg);

// Writes frames + poses.jsonl + meta.json + gt_splats.splt under
// <root>/<scene id> and refreshes <root>/manifest.json.
void write_scene(const std::string& root, SynthScene& scene);

}  // namespace dataio
}  // namespace splatgen
