#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "splatgen/cli.hpp"
#include "splatgen/diffusion.hpp"
#include "splatgen/metrics.hpp"
#include "splatgen/pose_hints.hpp"

namespace py = pybind11;
using namespace splatgen;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Camera make_camera(double fx, double fy, double cx, double cy, int width, int height, Arr w2c, double near,
                   double far) {
    if (w2c.ndim() != 2 || w2c.shape(0) != 3 || w2c.shape(1) != 4)
        throw py::value_error("w2c must be a 3x4 world-to-camera matrix");
    Camera cam;
    cam.intrinsics = {fx, fy, cx, cy, width, height};
    auto m = w2c.unchecked<2>();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) cam.pose.rotation(r, c) = m(r, c);
        cam.pose.translation[r] = m(r, 3);
    }
    cam.near = near;
    cam.far = far;
    return cam;
}

SplatSet splats_from_arrays(Arr positions, Arr quats, Arr scales, Arr opacities, Arr colors) {
    const auto n = positions.shape(0);
    if (quats.shape(0) != n || scales.shape(0) != n || opacities.shape(0) != n || colors.shape(0) != n)
        throw py::value_error("splat arrays must share the leading dimension");
    SplatSet set;
    set.splats.resize(static_cast<size_t>(n));
    auto p = positions.unchecked<2>();
    auto q = quats.unchecked<2>();
    auto s = scales.unchecked<2>();
    auto o = opacities.unchecked<1>();
    auto c = colors.unchecked<2>();
    for (py::ssize_t i = 0; i < n; ++i) {
        Splat& sp = set.splats[static_cast<size_t>(i)];
        sp.position = Vec3(p(i, 0), p(i, 1), p(i, 2));
        sp.rotation = Vec4(q(i, 0), q(i, 1), q(i, 2), q(i, 3));
        sp.scale = Vec3(s(i, 0), s(i, 1), s(i, 2));
        sp.opacity = o(i);
        sp.color = Vec3(c(i, 0), c(i, 1), c(i, 2));
    }
    return set;
}

py::dict splats_to_arrays(const SplatSet& set) {
    const py::ssize_t n = static_cast<py::ssize_t>(set.splats.size());
    py::array_t<double> pos({n, py::ssize_t(3)}), quat({n, py::ssize_t(4)}), scale({n, py::ssize_t(3)}),
        color({n, py::ssize_t(3)});
    py::array_t<double> opac(n);
    auto p = pos.mutable_unchecked<2>();
    auto q = quat.mutable_unchecked<2>();
    auto s = scale.mutable_unchecked<2>();
    auto o = opac.mutable_unchecked<1>();
    auto c = color.mutable_unchecked<2>();
    for (py::ssize_t i = 0; i < n; ++i) {
        const Splat& sp = set.splats[static_cast<size_t>(i)];
        for (int k = 0; k < 3; ++k) p(i, k) = sp.position[k];
        for (int k = 0; k < 4; ++k) q(i, k) = sp.rotation[k];
        for (int k = 0; k < 3; ++k) s(i, k) = sp.scale[k];
        o(i) = sp.opacity;
        for (int k = 0; k < 3; ++k) c(i, k) = sp.color[k];
    }
    py::dict out;
    out["positions"] = pos;
    out["rotations"] = quat;
    out["scales"] = scale;
    out["opacities"] = opac;
    out["colors"] = color;
    return out;
}

py::array_t<double> image_to_array(const Image& img) {
    py::array_t<double> out({py::ssize_t(img.height), py::ssize_t(img.width), py::ssize_t(img.channels)});
    std::copy(img.data.begin(), img.data.end(), out.mutable_data());
    return out;
}

Image array_to_image(Arr a) {
    if (a.ndim() != 3) throw py::value_error("image must be HxWxC");
    Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), img.data.begin());
    return img;
}

Tensor<float> array_to_latents(Arr a) {
    if (a.ndim() != 4) throw py::value_error("latents must be [V,C,h,w]");
    Tensor<float> t({a.shape(0), a.shape(1), a.shape(2), a.shape(3)});
    for (py::ssize_t i = 0; i < a.size(); ++i) t[i] = static_cast<float>(a.data()[i]);
    return t;
}

py::array_t<double> latents_to_array(const Tensor<float>& t) {
    py::array_t<double> out(std::vector<py::ssize_t>(t.shape.begin(), t.shape.end()));
    for (int64_t i = 0; i < t.numel(); ++i) out.mutable_data()[i] = t[i];
    return out;
}

}  // namespace

PYBIND11_MODULE(splatgen, m) {
    m.doc() = "Latent diffusion over 3D Gaussian splats: camera math, differentiable splat rendering, "
              "DDIM sampling utilities and the training CLI.";

    py::register_exception<Error>(m, "SplatgenError");

    py::class_<Camera>(m, "Camera")
        .def(py::init(&make_camera), py::arg("fx"), py::arg("fy"), py::arg("cx"), py::arg("cy"),
             py::arg("width"), py::arg("height"), py::arg("w2c"), py::arg("near") = 0.1,
             py::arg("far") = 20.0)
        .def_property_readonly("near", [](const Camera& c) { return c.near; })
        .def_property_readonly("far", [](const Camera& c) { return c.far; })
        .def_property_readonly("w2c", [](const Camera& c) {
            py::array_t<double> out({py::ssize_t(3), py::ssize_t(4)});
            auto v = out.mutable_unchecked<2>();
            for (int r = 0; r < 3; ++r) {
                for (int k = 0; k < 3; ++k) v(r, k) = c.pose.rotation(r, k);
                v(r, 3) = c.pose.translation[r];
            }
            return out;
        });

    m.def("relative_pose", [](const Camera& reference, const Camera& other) {
        Camera out = other;
        out.pose = relative_pose(reference.pose, other.pose);
        return out;
    });
    m.def("canonicalize_cameras", [](const std::vector<Camera>& cams) { return canonicalize_cameras(cams); });

    m.def("project_point", [](Arr point, const Camera& cam) {
        auto p = point.unchecked<1>();
        Vec3 uvd = project_point(Vec3(p(0), p(1), p(2)), cam);
        return py::make_tuple(uvd.x(), uvd.y(), uvd.z());
    });
    m.def("unproject_pixel", [](double u, double v, double depth, const Camera& cam) {
        Vec3 w = unproject_pixel(Vec2(u, v), depth, cam);
        return py::make_tuple(w.x(), w.y(), w.z());
    });

    m.def("frustum_edge_splats", [](const Camera& cam, py::tuple rgb, int splats_per_edge) {
        return splats_to_arrays(frustum_edge_splats(
            cam, Rgb{rgb[0].cast<double>(), rgb[1].cast<double>(), rgb[2].cast<double>()}, splats_per_edge));
    }, py::arg("camera"), py::arg("color"), py::arg("splats_per_edge") = 32);

    m.def("render_pose_hints", [](const std::vector<Camera>& cams, int width, int height, int splats_per_edge) {
        auto hints = render_pose_hints(cams, default_view_palette(static_cast<int>(cams.size())), width,
                                       height, splats_per_edge);
        py::list out;
        for (const auto& im : hints) out.append(image_to_array(im));
        return out;
    }, py::arg("cameras"), py::arg("width"), py::arg("height"), py::arg("splats_per_edge") = 32);

    m.def("render",
          [](Arr positions, Arr quats, Arr scales, Arr opacities, Arr colors, const Camera& cam, int width,
             int height) {
              SplatSet set = splats_from_arrays(positions, quats, scales, opacities, colors);
              RenderOutput r = render(set, cam, width, height);
              py::dict out;
              out["rgb"] = image_to_array(r.rgb);
              out["depth"] = image_to_array(r.depth);
              out["alpha"] = image_to_array(r.alpha);
              return out;
          },
          py::arg("positions"), py::arg("rotations"), py::arg("scales"), py::arg("opacities"),
          py::arg("colors"), py::arg("camera"), py::arg("width"), py::arg("height"));

    m.def("decode_splatter_image", [](Arr raw, const std::vector<Camera>& cams) {
        if (raw.ndim() != 4 || raw.shape(1) != 12) throw py::value_error("raw must be [V,12,H,W]");
        Tensor<double> t({raw.shape(0), raw.shape(1), raw.shape(2), raw.shape(3)});
        std::copy(raw.data(), raw.data() + raw.size(), t.data.begin());
        return splats_to_arrays(decode_splatter_image(SplatterImage{t, cams}));
    });

    m.def("read_splats", [](const std::string& path) { return splats_to_arrays(read_splats(path)); });
    m.def("write_splats", [](const std::string& path, Arr positions, Arr quats, Arr scales, Arr opacities,
                             Arr colors) {
        write_splats(path, splats_from_arrays(positions, quats, scales, opacities, colors));
    });

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_property_readonly("steps", [](const NoiseSchedule& s) { return s.steps; })
        .def("alpha", &NoiseSchedule::alpha_at)
        .def("sigma", &NoiseSchedule::sigma_at);
    m.def("build_schedule", &build_schedule, py::arg("steps") = 1000, py::arg("beta_lo") = 1e-4,
          py::arg("beta_hi") = 0.02);

    m.def("forward_diffuse", [](Arr z, int t, Arr eps, const NoiseSchedule& s) {
        return latents_to_array(forward_diffuse(array_to_latents(z), t, array_to_latents(eps), s));
    });
    m.def("v_target", [](Arr z, Arr eps, int t, const NoiseSchedule& s) {
        return latents_to_array(v_target(array_to_latents(z), array_to_latents(eps), t, s));
    });
    m.def("ddim_step", [](Arr z_t, Arr v_hat, int t, int t_prev, const NoiseSchedule& s) {
        return latents_to_array(ddim_step(array_to_latents(z_t), array_to_latents(v_hat), t, t_prev, s));
    });
    m.def("cfg_combine", [](Arr v_cond, Arr v_uncond, double w) {
        return latents_to_array(cfg_combine(array_to_latents(v_cond), array_to_latents(v_uncond), w));
    });
    m.def("ddim_timesteps", &ddim_timesteps);

    m.def("psnr", [](Arr a, Arr b) { return metrics::psnr(array_to_image(a), array_to_image(b)); });

    m.def("read_png", [](const std::string& path) { return image_to_array(read_png(path)); });
    m.def("write_png", [](const std::string& path, Arr img) { write_png(path, array_to_image(img)); });

    m.def("synth_scene", [](uint64_t seed, const std::string& out_dir, int frames, int image_size) {
        dataio::SynthConfig cfg;
        cfg.num_frames = frames;
        cfg.image_size = image_size;
        dataio::SynthScene s = dataio::synth_scene_generate(seed, cfg);
        dataio::write_scene(out_dir, s);
        return s.record.id;
    }, py::arg("seed"), py::arg("out_dir"), py::arg("frames") = 30, py::arg("image_size") = 96);

    m.def("run_cli", &cli::dispatch, "run a CLI subcommand in-process; returns the exit code");

    m.def("set_num_threads", &set_num_threads);
}
