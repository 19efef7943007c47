#include "splatgen/graph_render.hpp"

namespace splatgen {
namespace ad {

template <typename T>
Val<T> render_splatter_op(Val<T> raw, std::vector<Camera> splat_cams, std::vector<Camera> target_cams,
                          int out_w, int out_h) {
    Tape<T>* tp = raw.tape;
    const auto& s = raw.shape();
    if (s.size() != 4 || s[1] != 12) fail(ErrorCode::argument, "render_splatter_op: raw must be [V,12,H,W]");
    const int views = static_cast<int>(s[0]);
    const int h = static_cast<int>(s[2]);
    const int w = static_cast<int>(s[3]);
    if (static_cast<int>(splat_cams.size()) != views)
        fail(ErrorCode::argument, "render_splatter_op: camera count mismatch");

    Tensor<double> raw_d = raw.value().template cast<double>();
    DecodedSplats decoded = decode_splatter_raw(raw_d, splat_cams);
    SplatSet scene = splats_from_decoded(decoded, views, h, w);

    const int64_t vt = static_cast<int64_t>(target_cams.size());
    const int64_t plane = static_cast<int64_t>(out_h) * out_w;
    Tensor<T> out({vt, 3, out_h, out_w});
    for (int64_t cam_i = 0; cam_i < vt; ++cam_i) {
        RenderOutput r = render(scene, target_cams[static_cast<size_t>(cam_i)], out_w, out_h);
        T* dst = out.ptr() + cam_i * 3 * plane;
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x)
                for (int c = 0; c < 3; ++c)
                    dst[c * plane + y * out_w + x] = static_cast<T>(r.rgb.at(y, x, c));
    }

    return detail::make_op(
        tp, std::move(out), tp->requires_grad(raw.id),
        [rid = raw.id, raw_d = std::move(raw_d), scene = std::move(scene), splat_cams = std::move(splat_cams),
         target_cams = std::move(target_cams), out_w, out_h, plane](Tape<T>* t, int oid) {
            const Tensor<T>& g = t->node(oid).grad;
            DecodedSplatsGrad total = DecodedSplatsGrad::zeros(static_cast<int64_t>(scene.splats.size()));
            for (size_t cam_i = 0; cam_i < target_cams.size(); ++cam_i) {
                RenderCotangent cot;
                cot.rgb = Image(out_h, out_w, 3);
                const T* src = g.ptr() + static_cast<int64_t>(cam_i) * 3 * plane;
                bool nonzero = false;
                for (int y = 0; y < out_h; ++y)
                    for (int x = 0; x < out_w; ++x)
                        for (int c = 0; c < 3; ++c) {
                            const double v = static_cast<double>(src[c * plane + y * out_w + x]);
                            cot.rgb.at(y, x, c) = v;
                            nonzero = nonzero || v != 0.0;
                        }
                if (!nonzero) continue;
                DecodedSplatsGrad part = render_vjp(scene, target_cams[cam_i], out_w, out_h, cot);
                for (size_t i = 0; i < total.position.size(); ++i) total.position[i] += part.position[i];
                for (size_t i = 0; i < total.rotation.size(); ++i) total.rotation[i] += part.rotation[i];
                for (size_t i = 0; i < total.scale.size(); ++i) total.scale[i] += part.scale[i];
                for (size_t i = 0; i < total.opacity.size(); ++i) total.opacity[i] += part.opacity[i];
                for (size_t i = 0; i < total.color.size(); ++i) total.color[i] += part.color[i];
            }
            Tensor<double> graw = decode_splatter_raw_vjp(raw_d, splat_cams, total);
            Tensor<T>& gr = t->grad(rid);
            for (int64_t i = 0; i < graw.numel(); ++i) gr[i] += static_cast<T>(graw[i]);
        });
}

template Val<float> render_splatter_op<float>(Val<float>, std::vector<Camera>, std::vector<Camera>, int, int);
template Val<double> render_splatter_op<double>(Val<double>, std::vector<Camera>, std::vector<Camera>, int, int);

}  // namespace ad
}  // namespace splatgen
