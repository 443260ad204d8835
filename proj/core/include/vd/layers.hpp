#pragma once

#include <optional>
#include <string>

#include "vd/ops.hpp"
#include "vd/params.hpp"

namespace vd {

// Fan-in-scaled normal init, seeded by parameter name so initialization is
// independent of registration order and stage layout.
template <typename T>
Tensor<T> init_normal(const std::string& name, uint64_t seed, Shape shape, int64_t fan_in) {
    Rng rng = Rng::derive(seed, hash_str(name));
    return rng.normal_tensor<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

// y = x W + b with W stored [in, out].
template <typename T>
struct LinearLayer {
    std::string w, b;
    int64_t in = 0, out = 0;

    static LinearLayer create(ParameterStore<T>& ps, const std::string& prefix, int64_t in,
                              int64_t out, LayerGroup group, uint64_t seed,
                              bool zero_init = false) {
        LinearLayer l{prefix + ".w", prefix + ".b", in, out};
        Tensor<T> wt = zero_init ? Tensor<T>({in, out}) : init_normal<T>(l.w, seed, {in, out}, in);
        ps.add(l.w, group, std::move(wt));
        ps.add(l.b, group, Tensor<T>({out}));
        return l;
    }

    Var fwd(Pass<T>& ps, Var x) const {
        return add_rowwise(ps.g, matmul(ps.g, x, ps.p(w)), ps.p(b));
    }

    // Vector-in, vector-out convenience for 1-D features.
    Var fwd_vec(Pass<T>& ps, Var x) const {
        Var r = reshape(ps.g, x, {1, in});
        return reshape(ps.g, fwd(ps, r), {out});
    }
};

template <typename T>
struct Conv3x3Layer {
    std::string w, b;
    int64_t in = 0, out = 0;

    static Conv3x3Layer create(ParameterStore<T>& ps, const std::string& prefix, int64_t in,
                               int64_t out, LayerGroup group, uint64_t seed,
                               bool zero_init = false) {
        Conv3x3Layer l{prefix + ".w", prefix + ".b", in, out};
        Tensor<T> wt = zero_init ? Tensor<T>({out, in, 3, 3})
                                 : init_normal<T>(l.w, seed, {out, in, 3, 3}, in * 9);
        ps.add(l.w, group, std::move(wt));
        ps.add(l.b, group, Tensor<T>({out}));
        return l;
    }

    Var fwd(Pass<T>& ps, Var x) const { return conv2d_3x3(ps.g, x, ps.p(w), ps.p(b)); }
};

template <typename T>
struct Conv1x1Layer {
    std::string w, b;
    int64_t in = 0, out = 0;

    static Conv1x1Layer create(ParameterStore<T>& ps, const std::string& prefix, int64_t in,
                               int64_t out, LayerGroup group, uint64_t seed) {
        Conv1x1Layer l{prefix + ".w", prefix + ".b", in, out};
        ps.add(l.w, group, init_normal<T>(l.w, seed, {out, in}, in));
        ps.add(l.b, group, Tensor<T>({out}));
        return l;
    }

    Var fwd(Pass<T>& ps, Var x) const { return conv2d_1x1(ps.g, x, ps.p(w), ps.p(b)); }
};

template <typename T>
struct GroupNormLayer {
    std::string gamma, beta;
    int64_t channels = 0;
    int64_t groups = 0;

    static GroupNormLayer create(ParameterStore<T>& ps, const std::string& prefix,
                                 int64_t channels, int64_t groups, LayerGroup group) {
        GroupNormLayer l{prefix + ".g", prefix + ".b", channels, groups};
        ps.add(l.gamma, group, Tensor<T>::full({channels}, T(1)));
        ps.add(l.beta, group, Tensor<T>({channels}));
        return l;
    }

    Var fwd(Pass<T>& ps, Var x) const {
        return group_norm(ps.g, x, groups, ps.p(gamma), ps.p(beta));
    }
};

// Sinusoidal features of the step index pushed through a 2-layer MLP.
// All parameters are Global: this is the one block every flow shares.
template <typename T>
struct TimeEmbed {
    int64_t dim = 0;
    int max_step = 0;
    LinearLayer<T> fc1, fc2;

    static TimeEmbed create(ParameterStore<T>& ps, const std::string& prefix, int64_t dim,
                            int max_step, uint64_t seed) {
        TimeEmbed te;
        te.dim = dim;
        te.max_step = max_step;
        te.fc1 = LinearLayer<T>::create(ps, prefix + ".fc1", dim, dim, LayerGroup::Global, seed);
        te.fc2 = LinearLayer<T>::create(ps, prefix + ".fc2", dim, dim, LayerGroup::Global, seed);
        return te;
    }

    Tensor<T> features(int t) const {
        if (t < 1 || t > max_step)
            throw ShapeError("time_embed: step " + std::to_string(t) + " outside 1.." +
                             std::to_string(max_step));
        Tensor<T> f({dim});
        const int64_t half = dim / 2;
        for (int64_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                         static_cast<double>(half));
            f[i] = static_cast<T>(std::sin(t * freq));
            f[half + i] = static_cast<T>(std::cos(t * freq));
        }
        return f;
    }

    Var fwd(Pass<T>& ps, int t) const {
        Var x = ps.c(features(t));
        return fc2.fwd_vec(ps, silu(ps.g, fc1.fwd_vec(ps, x)));
    }
};

// GN -> SiLU -> conv -> +temb -> GN -> SiLU -> conv(zero-init), plus skip
// (1x1 conv when channel counts differ).
template <typename T>
struct ResBlock {
    int64_t c_in = 0, c_out = 0;
    GroupNormLayer<T> gn1, gn2;
    Conv3x3Layer<T> conv1, conv2;
    LinearLayer<T> temb_proj;
    std::optional<Conv1x1Layer<T>> skip;

    static ResBlock create(ParameterStore<T>& ps, const std::string& prefix, int64_t c_in,
                           int64_t c_out, int64_t gn_groups, int64_t time_dim, LayerGroup group,
                           uint64_t seed) {
        ResBlock r;
        r.c_in = c_in;
        r.c_out = c_out;
        r.gn1 = GroupNormLayer<T>::create(ps, prefix + ".gn1", c_in, gn_groups, group);
        r.conv1 = Conv3x3Layer<T>::create(ps, prefix + ".conv1", c_in, c_out, group, seed);
        r.temb_proj = LinearLayer<T>::create(ps, prefix + ".temb", time_dim, c_out, group, seed);
        r.gn2 = GroupNormLayer<T>::create(ps, prefix + ".gn2", c_out, gn_groups, group);
        r.conv2 = Conv3x3Layer<T>::create(ps, prefix + ".conv2", c_out, c_out, group, seed, true);
        if (c_in != c_out)
            r.skip = Conv1x1Layer<T>::create(ps, prefix + ".skip", c_in, c_out, group, seed);
        return r;
    }

    Var fwd(Pass<T>& ps, Var x, Var temb) const {
        Var h = conv1.fwd(ps, silu(ps.g, gn1.fwd(ps, x)));
        h = add_chanwise(ps.g, h, temb_proj.fwd_vec(ps, temb));
        h = conv2.fwd(ps, silu(ps.g, gn2.fwd(ps, h)));
        Var s = skip ? skip->fwd(ps, x) : x;
        return add(ps.g, h, s);
    }
};

// FC -> GN -> SiLU -> +temb -> FC(zero-init) -> GN -> SiLU, plus skip
// (projection skip on the expanding block). Operates on 1-D features.
template <typename T>
struct FcResBlock {
    int64_t d_in = 0, hidden = 0;
    LinearLayer<T> fc1, fc2, temb_proj;
    GroupNormLayer<T> gn1, gn2;
    std::optional<LinearLayer<T>> skip;

    static FcResBlock create(ParameterStore<T>& ps, const std::string& prefix, int64_t d_in,
                             int64_t hidden, int64_t gn_groups, int64_t time_dim, LayerGroup group,
                             uint64_t seed) {
        FcResBlock r;
        r.d_in = d_in;
        r.hidden = hidden;
        r.fc1 = LinearLayer<T>::create(ps, prefix + ".fc1", d_in, hidden, group, seed);
        r.gn1 = GroupNormLayer<T>::create(ps, prefix + ".gn1", hidden, gn_groups, group);
        r.temb_proj = LinearLayer<T>::create(ps, prefix + ".temb", time_dim, hidden, group, seed);
        r.fc2 = LinearLayer<T>::create(ps, prefix + ".fc2", hidden, hidden, group, seed, true);
        r.gn2 = GroupNormLayer<T>::create(ps, prefix + ".gn2", hidden, gn_groups, group);
        if (d_in != hidden)
            r.skip = LinearLayer<T>::create(ps, prefix + ".skip", d_in, hidden, group, seed);
        return r;
    }

    Var fwd(Pass<T>& ps, Var x, Var temb) const {
        Var h = silu(ps.g, gn1.fwd(ps, fc1.fwd_vec(ps, x)));
        h = add(ps.g, h, temb_proj.fwd_vec(ps, temb));
        h = silu(ps.g, gn2.fwd(ps, fc2.fwd_vec(ps, h)));
        Var s = skip ? skip->fwd_vec(ps, x) : x;
        return add(ps.g, h, s);
    }
};

// Multi-head cross-attention: query from the data path tokens, key/value
// from the context tokens, residual added. Output projection zero-init so a
// fresh site is the identity.
template <typename T>
struct CrossAttention {
    int64_t d_model = 0, d_ctx = 0, heads = 0;
    LinearLayer<T> wq, wk, wv, wo;

    static CrossAttention create(ParameterStore<T>& ps, const std::string& prefix, int64_t d_model,
                                 int64_t d_ctx, int64_t heads, LayerGroup group, uint64_t seed) {
        if (d_model % heads != 0)
            throw ConfigError("cross_attention: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
        CrossAttention a;
        a.d_model = d_model;
        a.d_ctx = d_ctx;
        a.heads = heads;
        a.wq = LinearLayer<T>::create(ps, prefix + ".wq", d_model, d_model, group, seed);
        a.wk = LinearLayer<T>::create(ps, prefix + ".wk", d_ctx, d_model, group, seed);
        a.wv = LinearLayer<T>::create(ps, prefix + ".wv", d_ctx, d_model, group, seed);
        a.wo = LinearLayer<T>::create(ps, prefix + ".wo", d_model, d_model, group, seed, true);
        return a;
    }

    // x_tokens [L, d_model], ctx_tokens [K, d_ctx] -> [L, d_model].
    Var fwd(Pass<T>& ps, Var x_tokens, Var ctx_tokens) const {
        const auto& ctx_shape = ps.g.val(ctx_tokens).shape;
        if (ctx_shape.size() != 2 || ctx_shape[1] != d_ctx)
            throw ShapeError("cross_attention: context dim mismatch, got " + shape_str(ctx_shape));
        Graph<T>& g = ps.g;
        Var q = wq.fwd(ps, x_tokens);
        Var k = wk.fwd(ps, ctx_tokens);
        Var v = wv.fwd(ps, ctx_tokens);
        const int64_t dh = d_model / heads;
        std::vector<Var> head_outs;
        head_outs.reserve(static_cast<size_t>(heads));
        for (int64_t h = 0; h < heads; ++h) {
            Var qh = slice_cols(g, q, h * dh, dh);
            Var kh = slice_cols(g, k, h * dh, dh);
            Var vh = slice_cols(g, v, h * dh, dh);
            Var scores = scale(g, matmul_nt(g, qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
            Var probs = softmax_lastdim(g, scores);
            head_outs.push_back(matmul(g, probs, vh));
        }
        Var merged = heads == 1 ? head_outs[0] : concat_cols(g, head_outs);
        return add(g, x_tokens, wo.fwd(ps, merged));
    }
};

}  // namespace vd
