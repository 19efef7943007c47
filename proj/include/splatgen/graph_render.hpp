#pragma once

#include "splatgen/autodiff.hpp"
#include "splatgen/raster.hpp"

namespace splatgen {
namespace ad {

// Differentiable decode+render node: raw splatter channels [V,12,H,W] are
// decoded to splats supported on `splat_cams` and rendered from each camera
// in `target_cams`, producing [V',3,out_h,out_w]. The backward pass chains
// render_vjp through decode_splatter_raw_vjp. All splat math runs in double
// regardless of T.
template <typename T>
Val<T> render_splatter_op(Val<T> raw, std::vector<Camera> splat_cams, std::vector<Camera> target_cams,
                          int out_w, int out_h);

}  // namespace ad
}  // namespace splatgen
