#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "splatgen/autodiff.hpp"

namespace splatgen {
namespace nn {

// Ordered named parameter tensors; insertion order fixes init, checkpoint and
// optimizer traversal order.
template <typename T>
struct ParamStore {
    std::vector<std::string> names;
    std::map<std::string, Tensor<T>> tensors;

    void add(const std::string& name, Tensor<T> t) {
        if (tensors.count(name)) fail(ErrorCode::argument, "param already registered: " + name);
        names.push_back(name);
        tensors.emplace(name, std::move(t));
    }
    Tensor<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) fail(ErrorCode::argument, "unknown param: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) fail(ErrorCode::argument, "unknown param: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    int64_t total_parameters() const {
        int64_t n = 0;
        for (const auto& [k, v] : tensors) n += v.numel();
        return n;
    }
    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& name : names) out.add(name, tensors.at(name).template cast<U>());
        return out;
    }
};

// Architecture description shared by the encoder, decoder and denoiser:
//   stem = down3: three stride-2 residual blocks (8x spatial reduction)
//   unet: multi-view U-Net; a cross-view mixing block follows every residual
//         block, attention layers attend jointly over all V*h*w tokens
//   tail = up3: three upsampling residual blocks
// Exactly one combination is wired per role: encoder stem+unet, decoder tail,
// denoiser unet alone.
struct NetSpec {
    int in_channels = 3;
    int out_channels = 3;
    int base_width = 32;
    std::vector<int> stem_mults = {1, 2, 4};

    bool stem = false;
    bool tail = false;
    bool unet = false;

    int unet_width = 0;  // 0: defaults to base_width * stem_mults.back()
    std::vector<int> unet_mults = {1, 2};
    int blocks_per_level = 1;
    std::vector<int> attn_levels = {1};
    int heads = 4;
    double dropout = 0.28;
    int emb_dim = 0;      // timestep embedding width; 0 disables
    int num_classes = 0;  // class vocabulary; a null row is appended for unconditional
    int groups = 8;

    int resolved_unet_width() const {
        return unet_width > 0 ? unet_width : base_width * stem_mults.back();
    }
    std::string serialize() const;
    uint64_t hash() const;
};

template <typename T>
ParamStore<T> init_params(const NetSpec& spec, Rng& rng);

// Pure function of the spec (regression-tested).
int64_t parameter_count(const NetSpec& spec);

// Per-forward context. `cross_view = false` is a test hook that removes every
// cross-view path (mixing blocks skipped, attention masked within-view).
template <typename T>
struct ForwardCtx {
    ad::Tape<T>* tape = nullptr;
    const NetSpec* spec = nullptr;
    ParamStore<T>* params = nullptr;
    bool trainable = true;
    bool training = false;  // enables dropout
    Rng* dropout_rng = nullptr;
    bool cross_view = true;
    std::string prefix;  // parameter name prefix inside a shared store

    std::map<std::string, ad::Val<T>> leaves;

    ad::Val<T> param(const std::string& name) {
        const std::string full = prefix + name;
        auto it = leaves.find(full);
        if (it != leaves.end()) return it->second;
        ad::Val<T> v = tape->leaf(params->at(full), trainable);
        leaves.emplace(full, v);
        return v;
    }
};

// inputs x: [V, in_channels, H, W]; emb: [1, emb_dim] or invalid.
template <typename T>
ad::Val<T> net_forward(ForwardCtx<T>& ctx, ad::Val<T> x, ad::Val<T> emb = {});

// Timestep/class embedding vector fed to net_forward (class_id == -1 selects
// the null/unconditional row).
template <typename T>
ad::Val<T> time_class_embedding(ForwardCtx<T>& ctx, double t, int class_id);

// Standard sin/cos positional embedding, [1, dim]; dim must be even.
Tensor<double> sinusoidal_embedding(double t, int dim);

// Collects gradients for every parameter leaf after tape.backward(); missing
// gradients come back as zero tensors (useful for coverage scans).
template <typename T>
std::map<std::string, Tensor<T>> collect_param_grads(ForwardCtx<T>& ctx);

}  // namespace nn
}  // namespace splatgen
