#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>

#include "vd/diffusion.hpp"
#include "vd/layers.hpp"

namespace vd {

struct DiffuserConfig {
    std::vector<FlowSpec> flows = all_flows();
    int64_t image_channels = 4;   // latent channels
    int64_t image_size = 16;      // latent H = W
    int64_t base_width = 32;      // level widths base_width and 2*base_width
    int64_t text_latent_dim = 32;
    int64_t fc_hidden = 16;       // FCResBlock hidden is fc_hidden x 4
    int64_t ctx_tokens = 9;       // K (token 0 global, K-1 local)
    int64_t ctx_dim = 32;         // D_C, shared by both context encoders
    int64_t heads = 4;
    int64_t gn_groups = 8;
    int64_t time_dim = 64;
    int max_timestep = 1000;
    uint64_t init_seed = 1;

    void validate() const {
        if (flows.empty()) throw ConfigError("diffuser: flow set is empty");
        for (size_t i = 0; i < flows.size(); ++i)
            for (size_t j = i + 1; j < flows.size(); ++j)
                if (flows[i] == flows[j]) throw ConfigError("diffuser: duplicate flow");
        for (int64_t v : {image_channels, image_size, base_width, text_latent_dim, fc_hidden,
                          ctx_tokens, ctx_dim, heads, gn_groups, time_dim})
            if (v <= 0) throw ConfigError("diffuser: all dimensions must be positive");
        if (image_size % 4 != 0) throw ConfigError("diffuser: image_size must be divisible by 4");
        if (base_width % gn_groups != 0)
            throw ConfigError("diffuser: base_width must be divisible by gn_groups");
        if (4 * fc_hidden % gn_groups != 0)
            throw ConfigError("diffuser: 4*fc_hidden must be divisible by gn_groups");
        if (time_dim % 2 != 0) throw ConfigError("diffuser: time_dim must be even");
    }

    bool has_flow(const FlowSpec& f) const {
        for (const auto& x : flows)
            if (x == f) return true;
        return false;
    }
};

// Per-flow parameter accounting against a naive one-model-per-flow ensemble.
struct SharingReport {
    std::map<LayerGroup, int64_t> counts;
    int64_t total = 0;
    int64_t naive_total = 0;
    double ratio = 0.0;
};

// The multi-flow diffuser. Image path is a 2-level UNet (two res blocks and
// one cross-attention per resolution level); text path is four FCResBlocks
// with cross-attention after blocks 1 and 3. Each cross-attention site owns
// one parameter set per supported context modality, so a flow activates
// exactly Global + Data(output) + Ctx(context) parameters.
template <typename T>
class Diffuser {
public:
    // Selects what happens at cross-attention site `site` of the active data
    // path; single-flow routing plugs in plain attention, the blending module
    // plugs in schedules and weighted mixes.
    using AttnHook = std::function<Var(Pass<T>&, int site, Var x_tokens)>;

    explicit Diffuser(DiffuserConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const uint64_t seed = cfg_.init_seed;
        const int64_t w0 = cfg_.base_width, w1 = 2 * cfg_.base_width;
        const int64_t td = cfg_.time_dim, gg = cfg_.gn_groups;

        time_ = TimeEmbed<T>::create(params_, "time", td, cfg_.max_timestep, seed);

        bool want_image = false, want_text = false;
        std::array<bool, 2> img_ctx{false, false}, txt_ctx{false, false};
        for (const auto& f : cfg_.flows) {
            if (f.output == Modality::Image) {
                want_image = true;
                img_ctx[mi(f.context)] = true;
            } else {
                want_text = true;
                txt_ctx[mi(f.context)] = true;
            }
        }

        if (want_image) {
            img_ = ImagePath{};
            img_->conv_in = Conv3x3Layer<T>::create(params_, "img.in", cfg_.image_channels, w0,
                                                    LayerGroup::DataImage, seed);
            img_->down0_res = ResBlock<T>::create(params_, "img.down0.res", w0, w0, gg, td,
                                                  LayerGroup::DataImage, seed);
            make_attn_site(img_attn_[0], "img.down0.attn", w0, img_ctx, seed);
            img_->down1_conv = Conv3x3Layer<T>::create(params_, "img.down1.conv", w0, w1,
                                                       LayerGroup::DataImage, seed);
            img_->down1_res = ResBlock<T>::create(params_, "img.down1.res", w1, w1, gg, td,
                                                  LayerGroup::DataImage, seed);
            make_attn_site(img_attn_[1], "img.down1.attn", w1, img_ctx, seed);
            img_->mid_res = ResBlock<T>::create(params_, "img.mid.res", w1, w1, gg, td,
                                                LayerGroup::DataImage, seed);
            img_->up0_conv = Conv3x3Layer<T>::create(params_, "img.up0.conv", w1, w0,
                                                     LayerGroup::DataImage, seed);
            img_->up0_res = ResBlock<T>::create(params_, "img.up0.res", 2 * w0, w0, gg, td,
                                                LayerGroup::DataImage, seed);
            img_->out_gn = GroupNormLayer<T>::create(params_, "img.out.gn", w0, gg,
                                                     LayerGroup::DataImage);
            img_->out_conv = Conv3x3Layer<T>::create(params_, "img.out.conv", w0,
                                                     cfg_.image_channels, LayerGroup::DataImage,
                                                     seed, true);
        }

        if (want_text) {
            const int64_t h = 4 * cfg_.fc_hidden;
            txt_ = TextPath{};
            txt_->blocks[0] = FcResBlock<T>::create(params_, "txt.block1", cfg_.text_latent_dim, h,
                                                    gg, td, LayerGroup::DataText, seed);
            txt_->blocks[1] = FcResBlock<T>::create(params_, "txt.block2", h, h, gg, td,
                                                    LayerGroup::DataText, seed);
            txt_->blocks[2] = FcResBlock<T>::create(params_, "txt.block3", h, h, gg, td,
                                                    LayerGroup::DataText, seed);
            txt_->blocks[3] = FcResBlock<T>::create(params_, "txt.block4", h, h, gg, td,
                                                    LayerGroup::DataText, seed);
            make_attn_site(txt_attn_[0], "txt.attn0", cfg_.fc_hidden, txt_ctx, seed);
            make_attn_site(txt_attn_[1], "txt.attn1", cfg_.fc_hidden, txt_ctx, seed);
            txt_->out_fc = LinearLayer<T>::create(params_, "txt.out", h, cfg_.text_latent_dim,
                                                  LayerGroup::DataText, seed, true);
        }

        build_routing();
    }

    const DiffuserConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }

    bool supports(const FlowSpec& f) const { return cfg_.has_flow(f); }

    Shape latent_shape(Modality m) const {
        if (m == Modality::Image)
            return {cfg_.image_channels, cfg_.image_size, cfg_.image_size};
        return {cfg_.text_latent_dim};
    }

    static constexpr int attn_sites() { return 2; }

    const CrossAttention<T>& attn(Modality path, int site, Modality ctx_mod) const {
        const auto& slot =
            (path == Modality::Image ? img_attn_ : txt_attn_)[static_cast<size_t>(site)][mi(ctx_mod)];
        if (!slot)
            throw RoutingError(std::string("no ") + modality_name(ctx_mod) +
                               "-context attention at " + modality_name(path) + " site " +
                               std::to_string(site));
        return *slot;
    }

    // Routing table: flow name -> ordered layer prefixes on that flow's path.
    const std::map<std::string, std::vector<std::string>>& routing() const { return routing_; }

    // Record an eps prediction for one flow on an existing pass.
    Var predict(Pass<T>& ps, const FlowSpec& flow, const Tensor<T>& x_t, int t,
                const ContextEmbedding<T>& ctx) {
        if (!supports(flow)) throw RoutingError("flow " + flow_name(flow) + " not in this model");
        if (ctx.modality != flow.context)
            throw RoutingError("flow " + flow_name(flow) + " expects " +
                               modality_name(flow.context) + " context, got " +
                               modality_name(ctx.modality));
        if (x_t.shape != latent_shape(flow.output))
            throw ShapeError("denoise: latent shape " + shape_str(x_t.shape) + " does not match " +
                             shape_str(latent_shape(flow.output)));
        Var ctx_var = ps.c(ctx.tokens);
        AttnHook hook = single_context_hook(flow.output, flow.context, ctx_var);
        Var x = ps.c(x_t);
        return forward_path(ps, flow.output, x, t, hook);
    }

    AttnHook single_context_hook(Modality path, Modality ctx_mod, Var ctx_var) const {
        return [this, path, ctx_mod, ctx_var](Pass<T>& ps, int site, Var x_tokens) {
            return attn(path, site, ctx_mod).fwd(ps, x_tokens, ctx_var);
        };
    }

    // Data-path forward with a caller-supplied attention policy.
    Var forward_path(Pass<T>& ps, Modality out_mod, Var x, int t, const AttnHook& hook) {
        if (out_mod == Modality::Image) {
            if (!img_) throw RoutingError("model has no image data path");
            return forward_image(ps, x, t, hook);
        }
        if (!txt_) throw RoutingError("model has no text data path");
        return forward_text(ps, x, t, hook);
    }

    // Pure-value prediction for sampling; no gradients recorded.
    Tensor<T> denoise(const FlowSpec& flow, const Tensor<T>& x_t, int t,
                      const ContextEmbedding<T>& ctx) {
        Graph<T> g;
        Pass<T> ps{g, params_, false};
        Var out = predict(ps, flow, x_t, t, ctx);
        return g.val(out);
    }

    DenoiseFn<T> denoiser(const FlowSpec& flow) {
        return [this, flow](const Tensor<T>& x_t, int t, const ContextEmbedding<T>& ctx) {
            return denoise(flow, x_t, t, ctx);
        };
    }

private:
    static size_t mi(Modality m) { return m == Modality::Image ? 0 : 1; }

    struct ImagePath {
        Conv3x3Layer<T> conv_in, down1_conv, up0_conv, out_conv;
        ResBlock<T> down0_res, down1_res, mid_res, up0_res;
        GroupNormLayer<T> out_gn;
    };
    struct TextPath {
        std::array<FcResBlock<T>, 4> blocks;
        LinearLayer<T> out_fc;
    };

    using AttnSite = std::array<std::optional<CrossAttention<T>>, 2>;

    void make_attn_site(AttnSite& site, const std::string& prefix, int64_t d_model,
                        const std::array<bool, 2>& ctx_wanted, uint64_t seed) {
        const Modality mods[2] = {Modality::Image, Modality::Text};
        for (size_t i = 0; i < 2; ++i) {
            if (!ctx_wanted[i]) continue;
            const LayerGroup grp = ctx_group(mods[i]);
            site[i] = CrossAttention<T>::create(params_, prefix + "." + group_name(grp), d_model,
                                                cfg_.ctx_dim, cfg_.heads, grp, seed);
        }
    }

    Var forward_image(Pass<T>& ps, Var x, int t, const AttnHook& hook) {
        Graph<T>& g = ps.g;
        const int64_t w0 = cfg_.base_width, w1 = 2 * cfg_.base_width;
        const int64_t hs = cfg_.image_size, hs2 = hs / 2;
        Var temb = time_.fwd(ps, t);
        Var h = img_->conv_in.fwd(ps, x);
        h = img_->down0_res.fwd(ps, h, temb);
        Var h0 = tokens_to_chw(g, hook(ps, 0, chw_to_tokens(g, h)), {w0, hs, hs});
        h = avg_pool2(g, h0);
        h = img_->down1_conv.fwd(ps, h);
        h = img_->down1_res.fwd(ps, h, temb);
        h = tokens_to_chw(g, hook(ps, 1, chw_to_tokens(g, h)), {w1, hs2, hs2});
        h = img_->mid_res.fwd(ps, h, temb);
        h = upsample_nearest2(g, h);
        h = img_->up0_conv.fwd(ps, h);
        h = concat_dim0(g, {h, h0});
        h = img_->up0_res.fwd(ps, h, temb);
        h = silu(g, img_->out_gn.fwd(ps, h));
        return img_->out_conv.fwd(ps, h);
    }

    Var forward_text(Pass<T>& ps, Var z, int t, const AttnHook& hook) {
        Graph<T>& g = ps.g;
        const int64_t wh = cfg_.fc_hidden;
        Var temb = time_.fwd(ps, t);
        Var v = txt_->blocks[0].fwd(ps, z, temb);
        Var tok = hook(ps, 0, reshape(g, v, {4, wh}));
        v = reshape(g, tok, {4 * wh});
        v = txt_->blocks[1].fwd(ps, v, temb);
        v = txt_->blocks[2].fwd(ps, v, temb);
        tok = hook(ps, 1, reshape(g, v, {4, wh}));
        v = reshape(g, tok, {4 * wh});
        v = txt_->blocks[3].fwd(ps, v, temb);
        return txt_->out_fc.fwd_vec(ps, v);
    }

    void build_routing() {
        for (const auto& f : cfg_.flows) {
            std::vector<std::string> route;
            route.push_back("time");
            const std::string ctx_tag = std::string(group_name(ctx_group(f.context)));
            if (f.output == Modality::Image) {
                route.push_back("img.in");
                route.push_back("img.down0.res");
                route.push_back("img.down0.attn." + ctx_tag);
                route.push_back("img.down1.conv");
                route.push_back("img.down1.res");
                route.push_back("img.down1.attn." + ctx_tag);
                route.push_back("img.mid.res");
                route.push_back("img.up0.conv");
                route.push_back("img.up0.res");
                route.push_back("img.out.gn");
                route.push_back("img.out.conv");
            } else {
                route.push_back("txt.block1");
                route.push_back("txt.attn0." + ctx_tag);
                route.push_back("txt.block2");
                route.push_back("txt.block3");
                route.push_back("txt.attn1." + ctx_tag);
                route.push_back("txt.block4");
                route.push_back("txt.out");
            }
            routing_[flow_name(f)] = std::move(route);
        }
    }

    DiffuserConfig cfg_;
    ParameterStore<T> params_;
    TimeEmbed<T> time_;
    std::optional<ImagePath> img_;
    std::optional<TextPath> txt_;
    std::array<AttnSite, 2> img_attn_;
    std::array<AttnSite, 2> txt_attn_;
    std::map<std::string, std::vector<std::string>> routing_;
};

// counts from the assembled store; naive ensemble charges one full
// single-task model (globals + one data path + one context path) per flow.
template <typename T>
SharingReport sharing_report(const Diffuser<T>& model) {
    SharingReport r;
    r.counts = model.params().group_counts();
    r.total = model.params().total_count();
    auto count = [&](LayerGroup g) {
        auto it = r.counts.find(g);
        return it == r.counts.end() ? int64_t(0) : it->second;
    };
    for (const auto& f : model.config().flows)
        r.naive_total += count(LayerGroup::Global) + count(data_group(f.output)) +
                         count(ctx_group(f.context));
    r.ratio = static_cast<double>(r.total) / static_cast<double>(r.naive_total);
    return r;
}

}  // namespace vd
