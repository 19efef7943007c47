#include "splatgen/nn.hpp"

#include <cmath>
#include <functional>
#include <sstream>

namespace splatgen {
namespace nn {

std::string NetSpec::serialize() const {
    std::ostringstream os;
    os << "in=" << in_channels << ";out=" << out_channels << ";base=" << base_width << ";stem_mults=";
    for (int m : stem_mults) os << m << ",";
    os << ";stem=" << stem << ";tail=" << tail << ";unet=" << unet << ";uw=" << resolved_unet_width()
       << ";um=";
    for (int m : unet_mults) os << m << ",";
    os << ";bpl=" << blocks_per_level << ";attn=";
    for (int a : attn_levels) os << a << ",";
    os << ";heads=" << heads << ";emb=" << emb_dim << ";classes=" << num_classes << ";groups=" << groups;
    return os.str();
}

uint64_t NetSpec::hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (char c : serialize()) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

Tensor<double> sinusoidal_embedding(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0) fail(ErrorCode::argument, "sinusoidal_embedding: dim must be positive and even");
    const int half = dim / 2;
    Tensor<double> out({1, dim});
    for (int i = 0; i < half; ++i) {
        const double freq = half > 1 ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

namespace {

struct ParamDecl {
    std::string name;
    std::vector<int64_t> shape;
    enum class Init { he, he_small, zero, one, table } init;
};

// Single source of truth for the parameter set; init_params and the forward
// pass must stay in lockstep with it.
void walk_spec(const NetSpec& s, const std::function<void(const ParamDecl&)>& emit) {
    auto conv = [&](const std::string& p, int64_t cout, int64_t cin, int64_t k, bool small = false) {
        emit({p + ".w", {cout, cin, k, k}, small ? ParamDecl::Init::he_small : ParamDecl::Init::he});
        emit({p + ".b", {cout}, ParamDecl::Init::zero});
    };
    auto gn = [&](const std::string& p, int64_t c) {
        emit({p + ".g", {c}, ParamDecl::Init::one});
        emit({p + ".b", {c}, ParamDecl::Init::zero});
    };
    auto lin = [&](const std::string& p, int64_t out, int64_t in, bool small = false) {
        emit({p + ".w", {out, in}, small ? ParamDecl::Init::he_small : ParamDecl::Init::he});
        emit({p + ".b", {out}, ParamDecl::Init::zero});
    };
    auto resblock = [&](const std::string& p, int64_t cin, int64_t cout, bool strided) {
        gn(p + ".gn1", cin);
        conv(p + ".conv1", cout, cin, 3);
        if (s.emb_dim > 0) lin(p + ".emb", cout, s.emb_dim);
        gn(p + ".gn2", cout);
        conv(p + ".conv2", cout, cout, 3, true);
        if (strided || cin != cout) conv(p + ".skip", cout, cin, 1);
    };
    auto cross_view = [&](const std::string& p, int64_t c) {
        conv(p + ".conv1", c, 2 * c, 1);
        conv(p + ".conv2", c, c, 1, true);
    };
    auto attn = [&](const std::string& p, int64_t c) {
        gn(p + ".gn", c);
        lin(p + ".q", c, c);
        lin(p + ".k", c, c);
        lin(p + ".v", c, c);
        lin(p + ".proj", c, c, true);
    };

    int64_t cur = s.in_channels;
    if (s.stem) {
        for (int i = 0; i < 3; ++i) {
            const int64_t w = static_cast<int64_t>(s.base_width) * s.stem_mults[static_cast<size_t>(i)];
            resblock("stem." + std::to_string(i), cur, w, true);
            cur = w;
        }
    }
    if (s.unet) {
        const int levels = static_cast<int>(s.unet_mults.size());
        auto width = [&](int l) {
            return static_cast<int64_t>(s.resolved_unet_width()) * s.unet_mults[static_cast<size_t>(l)];
        };
        auto has_attn = [&](int l) {
            for (int a : s.attn_levels)
                if (a == l) return true;
            return false;
        };
        conv("unet.in", width(0), cur, 3);
        cur = width(0);
        for (int l = 0; l < levels; ++l) {
            for (int k = 0; k < s.blocks_per_level; ++k) {
                const std::string p = "unet.down" + std::to_string(l) + "." + std::to_string(k);
                resblock(p + ".res", cur, width(l), false);
                cur = width(l);
                cross_view(p + ".cv", cur);
                if (has_attn(l)) attn(p + ".attn", cur);
            }
            if (l + 1 < levels) {
                conv("unet.downsample" + std::to_string(l), width(l + 1), cur, 3);
                cur = width(l + 1);
            }
        }
        resblock("unet.mid.res0", cur, cur, false);
        if (!s.attn_levels.empty()) attn("unet.mid.attn", cur);
        cross_view("unet.mid.cv", cur);
        resblock("unet.mid.res1", cur, cur, false);
        for (int l = levels - 1; l >= 0; --l) {
            for (int k = 0; k < s.blocks_per_level; ++k) {
                const std::string p = "unet.up" + std::to_string(l) + "." + std::to_string(k);
                resblock(p + ".res", k == 0 ? cur + width(l) : cur, width(l), false);
                cur = width(l);
                cross_view(p + ".cv", cur);
                if (has_attn(l)) attn(p + ".attn", cur);
            }
            if (l > 0) {
                conv("unet.upsample" + std::to_string(l), width(l - 1), cur, 3);
                cur = width(l - 1);
            }
        }
    }
    if (s.tail) {
        const int64_t w2 = static_cast<int64_t>(s.base_width) * s.stem_mults[2];
        const int64_t w1 = static_cast<int64_t>(s.base_width) * s.stem_mults[1];
        const int64_t w0 = static_cast<int64_t>(s.base_width) * s.stem_mults[0];
        if (!s.unet && !s.stem) {
            conv("tail.in", w2, cur, 3);
            cur = w2;
        }
        const int64_t widths[4] = {w2, w1, w0, w0};
        for (int i = 0; i < 3; ++i) {
            resblock("tail." + std::to_string(i) + ".res", cur, widths[i], false);
            cur = widths[i];
            conv("tail." + std::to_string(i) + ".conv", widths[i + 1], cur, 3);
            cur = widths[i + 1];
        }
    }
    gn("head.gn", cur);
    conv("head.conv", s.out_channels, cur, 3);

    if (s.emb_dim > 0) {
        lin("temb.l1", s.emb_dim, s.emb_dim);
        lin("temb.l2", s.emb_dim, s.emb_dim);
        if (s.num_classes > 0)
            emit({"class_table", {s.num_classes + 1, s.emb_dim}, ParamDecl::Init::table});
    }
}

}  // namespace

template <typename T>
ParamStore<T> init_params(const NetSpec& spec, Rng& rng) {
    ParamStore<T> store;
    walk_spec(spec, [&](const ParamDecl& d) {
        Tensor<T> t(d.shape);
        switch (d.init) {
            case ParamDecl::Init::zero:
                break;
            case ParamDecl::Init::one:
                t.fill(T(1));
                break;
            case ParamDecl::Init::table:
                for (auto& v : t.data) v = static_cast<T>(rng.normal() * 0.02);
                break;
            case ParamDecl::Init::he:
            case ParamDecl::Init::he_small: {
                int64_t fan_in = 1;
                for (size_t i = 1; i < d.shape.size(); ++i) fan_in *= d.shape[i];
                double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
                if (d.init == ParamDecl::Init::he_small) std_dev *= 0.1;
                for (auto& v : t.data) v = static_cast<T>(rng.normal() * std_dev);
                break;
            }
        }
        store.add(d.name, std::move(t));
    });
    return store;
}

int64_t parameter_count(const NetSpec& spec) {
    int64_t n = 0;
    walk_spec(spec, [&](const ParamDecl& d) { n += Tensor<float>::numel_of(d.shape); });
    return n;
}

namespace {

template <typename T>
struct Builder {
    ForwardCtx<T>& ctx;
    const NetSpec& s;

    ad::Val<T> P(const std::string& n) { return ctx.param(n); }

    ad::Val<T> conv(const std::string& p, ad::Val<T> x, int stride, int pad) {
        return ad::conv2d(x, P(p + ".w"), P(p + ".b"), stride, pad);
    }
    ad::Val<T> gn(const std::string& p, ad::Val<T> x) {
        int64_t c = x.shape()[1];
        int64_t g = std::min<int64_t>(s.groups, c);
        while (c % g) --g;
        return ad::group_norm(x, P(p + ".g"), P(p + ".b"), g);
    }
    ad::Val<T> lin(const std::string& p, ad::Val<T> x) { return ad::linear(x, P(p + ".w"), P(p + ".b")); }

    ad::Val<T> resblock(const std::string& p, ad::Val<T> x, ad::Val<T> emb, int64_t cout, bool strided) {
        const int64_t cin = x.shape()[1];
        const int stride = strided ? 2 : 1;
        ad::Val<T> h = conv(p + ".conv1", ad::silu(gn(p + ".gn1", x)), stride, 1);
        if (emb.valid()) {
            ad::Val<T> e = lin(p + ".emb", ad::silu(emb));  // [1, cout]
            h = ad::add_bias_nchw(h, ad::reshape(e, {cout}));
        }
        ad::Val<T> h2 = ad::silu(gn(p + ".gn2", h));
        if (ctx.training && s.dropout > 0 && ctx.dropout_rng)
            h2 = ad::dropout(h2, s.dropout, *ctx.dropout_rng, true);
        h = conv(p + ".conv2", h2, 1, 1);
        ad::Val<T> skip = (strided || cin != cout) ? conv(p + ".skip", x, stride, 0) : x;
        return ad::add(skip, h);
    }

    ad::Val<T> cross_view(const std::string& p, ad::Val<T> x) {
        if (!ctx.cross_view) return x;
        const int64_t v = x.shape()[0];
        ad::Val<T> mixed = ad::broadcast_views(ad::mean_over_views(x), v);
        ad::Val<T> h = conv(p + ".conv1", ad::concat_channels<T>({x, mixed}), 1, 0);
        h = conv(p + ".conv2", ad::silu(h), 1, 0);
        return ad::add(x, h);
    }

    ad::Val<T> attn(const std::string& p, ad::Val<T> x) {
        const int64_t v = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
        const int64_t tokens = v * h * w;
        const int64_t heads = s.heads, dh = c / heads;
        if (c % heads) fail(ErrorCode::argument, "attention: width not divisible by heads");

        ad::Val<T> tok = ad::nchw_to_tokens(gn(p + ".gn", x));
        ad::Val<T> q = ad::split_heads(lin(p + ".q", tok), heads);
        ad::Val<T> k = ad::split_heads(lin(p + ".k", tok), heads);
        ad::Val<T> vv = ad::split_heads(lin(p + ".v", tok), heads);
        ad::Val<T> scores = ad::scale(ad::bmm(q, ad::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (!ctx.cross_view) {
            // mask attention to within-view tokens
            Tensor<T> mask({tokens, tokens});
            const int64_t plane = h * w;
            for (int64_t i = 0; i < tokens; ++i)
                for (int64_t j = 0; j < tokens; ++j)
                    if (i / plane != j / plane) mask[i * tokens + j] = static_cast<T>(-1e30);
            scores = ad::add_broadcast_mat(scores, mask);
        }
        ad::Val<T> out = ad::merge_heads(ad::bmm(ad::softmax_lastdim(scores), vv));
        out = ad::tokens_to_nchw(lin(p + ".proj", out), v, c, h, w);
        return ad::add(x, out);
    }
};

}  // namespace

template <typename T>
ad::Val<T> net_forward(ForwardCtx<T>& ctx, ad::Val<T> x, ad::Val<T> emb) {
    const NetSpec& s = *ctx.spec;
    if (x.shape().size() != 4 || x.shape()[1] != s.in_channels)
        fail(ErrorCode::argument, "net_forward: input shape " + shape_str(x.shape()) + " does not match spec");
    if (s.emb_dim > 0 && !emb.valid()) fail(ErrorCode::argument, "net_forward: spec expects an embedding");
    Builder<T> b{ctx, s};
    ad::Val<T> cur = x;

    if (s.stem) {
        for (int i = 0; i < 3; ++i)
            cur = b.resblock("stem." + std::to_string(i), cur, emb,
                             static_cast<int64_t>(s.base_width) * s.stem_mults[static_cast<size_t>(i)], true);
    }
    if (s.unet) {
        const int levels = static_cast<int>(s.unet_mults.size());
        auto width = [&](int l) {
            return static_cast<int64_t>(s.resolved_unet_width()) * s.unet_mults[static_cast<size_t>(l)];
        };
        auto has_attn = [&](int l) {
            for (int a : s.attn_levels)
                if (a == l) return true;
            return false;
        };
        cur = b.conv("unet.in", cur, 1, 1);
        std::vector<ad::Val<T>> skips;
        for (int l = 0; l < levels; ++l) {
            for (int k = 0; k < s.blocks_per_level; ++k) {
                const std::string p = "unet.down" + std::to_string(l) + "." + std::to_string(k);
                cur = b.resblock(p + ".res", cur, emb, width(l), false);
                cur = b.cross_view(p + ".cv", cur);
                if (has_attn(l)) cur = b.attn(p + ".attn", cur);
            }
            skips.push_back(cur);
            if (l + 1 < levels) cur = b.conv("unet.downsample" + std::to_string(l), cur, 2, 1);
        }
        cur = b.resblock("unet.mid.res0", cur, emb, width(levels - 1), false);
        if (!s.attn_levels.empty()) cur = b.attn("unet.mid.attn", cur);
        cur = b.cross_view("unet.mid.cv", cur);
        cur = b.resblock("unet.mid.res1", cur, emb, width(levels - 1), false);
        for (int l = levels - 1; l >= 0; --l) {
            for (int k = 0; k < s.blocks_per_level; ++k) {
                const std::string p = "unet.up" + std::to_string(l) + "." + std::to_string(k);
                if (k == 0) cur = ad::concat_channels<T>({cur, skips[static_cast<size_t>(l)]});
                cur = b.resblock(p + ".res", cur, emb, width(l), false);
                cur = b.cross_view(p + ".cv", cur);
                if (has_attn(l)) cur = b.attn(p + ".attn", cur);
            }
            if (l > 0) {
                cur = ad::upsample_nearest2(cur);
                cur = b.conv("unet.upsample" + std::to_string(l), cur, 1, 1);
            }
        }
    }
    if (s.tail) {
        if (!s.unet && !s.stem) cur = b.conv("tail.in", cur, 1, 1);
        const int64_t widths[4] = {static_cast<int64_t>(s.base_width) * s.stem_mults[2],
                                   static_cast<int64_t>(s.base_width) * s.stem_mults[1],
                                   static_cast<int64_t>(s.base_width) * s.stem_mults[0],
                                   static_cast<int64_t>(s.base_width) * s.stem_mults[0]};
        for (int i = 0; i < 3; ++i) {
            cur = b.resblock("tail." + std::to_string(i) + ".res", cur, emb, widths[i], false);
            cur = ad::upsample_nearest2(cur);
            cur = b.conv("tail." + std::to_string(i) + ".conv", cur, 1, 1);
        }
    }
    cur = b.conv("head.conv", ad::silu(b.gn("head.gn", cur)), 1, 1);
    return cur;
}

template <typename T>
ad::Val<T> time_class_embedding(ForwardCtx<T>& ctx, double t, int class_id) {
    const NetSpec& s = *ctx.spec;
    if (s.emb_dim <= 0) fail(ErrorCode::argument, "time_class_embedding: spec has no embedding");
    Builder<T> b{ctx, s};
    Tensor<double> sin_emb = sinusoidal_embedding(t, s.emb_dim);
    ad::Val<T> e = ctx.tape->constant(sin_emb.template cast<T>());
    e = b.lin("temb.l2", ad::silu(b.lin("temb.l1", e)));
    if (s.num_classes > 0) {
        const int64_t row = class_id < 0 ? s.num_classes : class_id;
        if (row > s.num_classes) fail(ErrorCode::argument, "time_class_embedding: class id out of range");
        e = ad::add(e, ad::embedding_row(ctx.param("class_table"), row));
    }
    return e;
}

template <typename T>
std::map<std::string, Tensor<T>> collect_param_grads(ForwardCtx<T>& ctx) {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, val] : ctx.leaves) {
        auto& node = ctx.tape->node(val.id);
        if (!node.grad.data.empty())
            out.emplace(name, node.grad);
        else
            out.emplace(name, Tensor<T>::zeros(node.value.shape));
    }
    return out;
}

template ParamStore<float> init_params<float>(const NetSpec&, Rng&);
template ParamStore<double> init_params<double>(const NetSpec&, Rng&);
template ad::Val<float> net_forward<float>(ForwardCtx<float>&, ad::Val<float>, ad::Val<float>);
template ad::Val<double> net_forward<double>(ForwardCtx<double>&, ad::Val<double>, ad::Val<double>);
template ad::Val<float> time_class_embedding<float>(ForwardCtx<float>&, double, int);
template ad::Val<double> time_class_embedding<double>(ForwardCtx<double>&, double, int);
template std::map<std::string, Tensor<float>> collect_param_grads<float>(ForwardCtx<float>&);
template std::map<std::string, Tensor<double>> collect_param_grads<double>(ForwardCtx<double>&);

}  // namespace nn
}  // namespace splatgen
