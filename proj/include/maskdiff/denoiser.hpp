#pragma once

#include <string>
#include <utility>
#include <vector>

#include "maskdiff/autograd.hpp"
#include "maskdiff/conditioning.hpp"
#include "maskdiff/nn.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

struct DenoiserConfig {
    int image_channels = 3;
    int image_size = 64;
    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 4};
    std::vector<int> attention_resolutions{16, 8};
    int num_heads = 4;
    int cond_dim = 64;
    int time_embed_dim = 128;
    int norm_groups = 8;
    // Attention losses aggregate maps from all layers at this resolution.
    int aggregation_resolution = 16;
};

// Per-layer softmax attention probabilities, shaped [heads, Q, K] with
// Q = h * w latent positions and K conditioning positions.
template <typename T>
struct AttentionRecord {
    std::string layer_id;
    int head_count = 0;
    int h = 0, w = 0;
    Tensor<T> map;
};

// Graph-side capture used while the step is still differentiable.
template <typename T>
struct AttentionCapture {
    std::string layer_id;
    int h = 0, w = 0;
    std::vector<ag::Var<T>> head_probs;  // per head, [Q, K]

    AttentionRecord<T> to_record() const {
        AttentionRecord<T> r;
        r.layer_id = layer_id;
        r.head_count = static_cast<int>(head_probs.size());
        r.h = h;
        r.w = w;
        const int q = head_probs[0]->val.dim(0);
        const int k = head_probs[0]->val.dim(1);
        r.map = Tensor<T>({r.head_count, q, k});
        for (int hd = 0; hd < r.head_count; ++hd)
            std::copy(head_probs[static_cast<size_t>(hd)]->val.v.begin(),
                      head_probs[static_cast<size_t>(hd)]->val.v.end(),
                      r.map.v.begin() + static_cast<long long>(hd) * q * k);
        return r;
    }
};

template <typename T>
struct DenoiserOutput {
    Tensor<T> eps_pred;
    std::vector<AttentionRecord<T>> attention;
};

template <typename T>
struct DenoiserForward {
    ag::Var<T> eps;
    std::vector<AttentionCapture<T>> captures;

    std::vector<AttentionRecord<T>> records() const {
        std::vector<AttentionRecord<T>> out;
        out.reserve(captures.size());
        for (const auto& c : captures) out.push_back(c.to_record());
        return out;
    }
};

namespace unet {

template <typename T>
struct ResBlock {
    int cin = 0, cout = 0;
    Param<T> norm1_g, norm1_b, conv1_w, conv1_b;
    Param<T> time_w, time_b;
    Param<T> norm2_g, norm2_b, conv2_w, conv2_b;
    Param<T> skip_w, skip_b;
    bool has_skip = false;
    int groups = 8;

    void init(const std::string& prefix, int cin_, int cout_, int time_dim, int groups_,
              Rng& rng) {
        cin = cin_;
        cout = cout_;
        groups = groups_;
        auto name = [&](const char* s) { return prefix + "." + s; };
        norm1_g = {name("norm1.g"), Tensor<T>::full({cin}, T(1))};
        norm1_b = {name("norm1.b"), Tensor<T>::zeros({cin})};
        conv1_w = {name("conv1.w"), init_conv_weight<T>(cout, cin, 3, 3, rng)};
        conv1_b = {name("conv1.b"), Tensor<T>::zeros({cout})};
        time_w = {name("time.w"), init_linear_weight<T>(cout, time_dim, rng)};
        time_b = {name("time.b"), Tensor<T>::zeros({cout})};
        norm2_g = {name("norm2.g"), Tensor<T>::full({cout}, T(1))};
        norm2_b = {name("norm2.b"), Tensor<T>::zeros({cout})};
        // Zero-initialized output conv keeps early training stable.
        conv2_w = {name("conv2.w"), Tensor<T>::zeros({cout, cout, 3, 3})};
        conv2_b = {name("conv2.b"), Tensor<T>::zeros({cout})};
        has_skip = cin != cout;
        if (has_skip) {
            skip_w = {name("skip.w"), init_conv_weight<T>(cout, cin, 1, 1, rng)};
            skip_b = {name("skip.b"), Tensor<T>::zeros({cout})};
        }
    }

    void collect(ParamRefs<T>& out) {
        for (Param<T>* p : {&norm1_g, &norm1_b, &conv1_w, &conv1_b, &time_w, &time_b, &norm2_g,
                            &norm2_b, &conv2_w, &conv2_b})
            out.push_back(p);
        if (has_skip) {
            out.push_back(&skip_w);
            out.push_back(&skip_b);
        }
    }

    ag::Var<T> forward(const ag::Var<T>& x, const ag::Var<T>& temb_act) const {
        auto h = ag::silu(ag::group_norm(x, norm1_g.var, norm1_b.var, groups));
        h = ag::conv2d(h, conv1_w.var, conv1_b.var, 1, 1);
        auto tproj = ag::reshape(ag::linear(temb_act, time_w.var, time_b.var), {cout});
        h = ag::add_channel_vec(h, tproj);
        h = ag::silu(ag::group_norm(h, norm2_g.var, norm2_b.var, groups));
        h = ag::conv2d(h, conv2_w.var, conv2_b.var, 1, 1);
        auto s = has_skip ? ag::conv2d(x, skip_w.var, skip_b.var, 1, 0) : x;
        return ag::add(h, s);
    }
};

template <typename T>
struct CrossAttention {
    int channels = 0, cond_dim = 0, heads = 0, res = 0;
    int groups = 8;
    std::string layer_id;
    Param<T> norm_g, norm_b, wq, wk, wv, wo, wo_b;
    Tensor<T> pe;  // [Q, C] fixed spatial positional encoding

    void init(const std::string& id, int channels_, int cond_dim_, int heads_, int res_,
              int groups_, Rng& rng) {
        layer_id = id;
        channels = channels_;
        cond_dim = cond_dim_;
        heads = heads_;
        res = res_;
        groups = groups_;
        if (channels % heads != 0)
            throw config_error("denoiser: heads must divide attention channels");
        auto name = [&](const char* s) { return id + "." + s; };
        norm_g = {name("norm.g"), Tensor<T>::full({channels}, T(1))};
        norm_b = {name("norm.b"), Tensor<T>::zeros({channels})};
        wq = {name("wq"), init_linear_weight<T>(channels, channels, rng)};
        wk = {name("wk"), init_linear_weight<T>(channels, cond_dim, rng)};
        wv = {name("wv"), init_linear_weight<T>(channels, cond_dim, rng)};
        wo = {name("wo"), Tensor<T>::zeros({channels, channels})};
        wo_b = {name("wo.b"), Tensor<T>::zeros({channels})};
        pe = positional_encoding_2d<T>(channels, res, res);
    }

    void collect(ParamRefs<T>& out) {
        for (Param<T>* p : {&norm_g, &norm_b, &wq, &wk, &wv, &wo, &wo_b}) out.push_back(p);
    }

    ag::Var<T> forward(const ag::Var<T>& x, const ag::Var<T>& cond, bool capture,
                       std::vector<AttentionCapture<T>>* captures) const {
        const int q_len = res * res;
        auto xn = ag::group_norm(x, norm_g.var, norm_b.var, groups);
        auto xq = ag::transpose(ag::reshape(xn, {channels, q_len}));  // [Q, C]
        xq = ag::add(xq, ag::constant(pe));
        auto q = ag::linear_nb(xq, wq.var);    // [Q, C]
        auto k = ag::linear_nb(cond, wk.var);  // [K, C]
        auto v = ag::linear_nb(cond, wv.var);  // [K, C]
        const int dh = channels / heads;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        std::vector<ag::Var<T>> head_out;
        AttentionCapture<T> cap;
        cap.layer_id = layer_id;
        cap.h = res;
        cap.w = res;
        for (int hd = 0; hd < heads; ++hd) {
            auto qh = ag::slice_cols(q, hd * dh, dh);
            auto kh = ag::slice_cols(k, hd * dh, dh);
            auto vh = ag::slice_cols(v, hd * dh, dh);
            auto logits = ag::mul_scalar(ag::matmul(qh, ag::transpose(kh)), scale);
            auto probs = ag::softmax_rows(logits);  // [Q, K]
            if (capture) cap.head_probs.push_back(probs);
            head_out.push_back(ag::matmul(probs, vh));
        }
        if (capture && captures) captures->push_back(std::move(cap));
        auto out = ag::linear(ag::concat_cols(head_out), wo.var, wo_b.var);  // [Q, C]
        auto y = ag::reshape(ag::transpose(out), {channels, res, res});
        return ag::add(x, y);
    }
};

template <typename T>
struct Conv {
    Param<T> w, b;
    int stride = 1, pad = 1;

    void init(const std::string& prefix, int cin, int cout, int k, int stride_, int pad_,
              Rng& rng, bool zero = false) {
        w = {prefix + ".w",
             zero ? Tensor<T>::zeros({cout, cin, k, k}) : init_conv_weight<T>(cout, cin, k, k, rng)};
        b = {prefix + ".b", Tensor<T>::zeros({cout})};
        stride = stride_;
        pad = pad_;
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }

    ag::Var<T> forward(const ag::Var<T>& x) const {
        return ag::conv2d(x, w.var, b.var, stride, pad);
    }
};

}  // namespace unet

// The eps-prediction network: a small UNet whose cross-attention layers
// consume the conditioning bundle and can report their attention maps.
template <typename T>
class Denoiser {
  public:
    DenoiserConfig cfg;

    Denoiser() = default;

    Denoiser(DenoiserConfig config, Rng& rng) : cfg(std::move(config)) {
        validate_config();
        const int levels = static_cast<int>(cfg.channel_multipliers.size());
        const int td = cfg.time_embed_dim;
        time_fc1_.w = {"denoiser/time.fc1.w", init_linear_weight<T>(td, td, rng)};
        time_fc1_.b = {"denoiser/time.fc1.b", Tensor<T>::zeros({td})};
        time_fc2_.w = {"denoiser/time.fc2.w", init_linear_weight<T>(td, td, rng)};
        time_fc2_.b = {"denoiser/time.fc2.b", Tensor<T>::zeros({td})};

        const int ch0 = cfg.base_channels * cfg.channel_multipliers[0];
        conv_in_.init("denoiser/conv_in", cfg.image_channels, ch0, 3, 1, 1, rng);

        int prev = ch0;
        enc_.resize(static_cast<size_t>(levels));
        down_.resize(static_cast<size_t>(levels));
        for (int i = 0; i < levels; ++i) {
            const int ch = cfg.base_channels * cfg.channel_multipliers[static_cast<size_t>(i)];
            const int res = cfg.image_size >> i;
            auto& st = enc_[static_cast<size_t>(i)];
            st.res.init("denoiser/enc" + std::to_string(i) + ".res", prev, ch, td,
                        cfg.norm_groups, rng);
            st.has_attn = wants_attention(res);
            if (st.has_attn)
                st.attn.init("denoiser/enc" + std::to_string(i) + ".attn", ch, cfg.cond_dim,
                             cfg.num_heads, res, cfg.norm_groups, rng);
            down_[static_cast<size_t>(i)].init("denoiser/down" + std::to_string(i), ch, ch, 3, 2,
                                               1, rng);
            prev = ch;
        }
        const int mid_res = cfg.image_size >> levels;
        mid_res1_.init("denoiser/mid.res1", prev, prev, td, cfg.norm_groups, rng);
        mid_has_attn_ = wants_attention(mid_res);
        if (mid_has_attn_)
            mid_attn_.init("denoiser/mid.attn", prev, cfg.cond_dim, cfg.num_heads, mid_res,
                           cfg.norm_groups, rng);
        mid_res2_.init("denoiser/mid.res2", prev, prev, td, cfg.norm_groups, rng);

        up_.resize(static_cast<size_t>(levels));
        dec_.resize(static_cast<size_t>(levels));
        for (int i = levels - 1; i >= 0; --i) {
            const int ch = cfg.base_channels * cfg.channel_multipliers[static_cast<size_t>(i)];
            const int res = cfg.image_size >> i;
            up_[static_cast<size_t>(i)].init("denoiser/up" + std::to_string(i), prev, prev, 3, 1,
                                             1, rng);
            auto& st = dec_[static_cast<size_t>(i)];
            st.res.init("denoiser/dec" + std::to_string(i) + ".res", prev + ch, ch, td,
                        cfg.norm_groups, rng);
            st.has_attn = wants_attention(res);
            if (st.has_attn)
                st.attn.init("denoiser/dec" + std::to_string(i) + ".attn", ch, cfg.cond_dim,
                             cfg.num_heads, res, cfg.norm_groups, rng);
            prev = ch;
        }
        head_norm_g_ = {"denoiser/head.norm.g", Tensor<T>::full({prev}, T(1))};
        head_norm_b_ = {"denoiser/head.norm.b", Tensor<T>::zeros({prev})};
        head_conv_.init("denoiser/head.conv", prev, cfg.image_channels, 3, 1, 1, rng,
                        /*zero=*/true);
    }

    void collect_params(ParamRefs<T>& out) {
        time_fc1_.collect(out);
        time_fc2_.collect(out);
        conv_in_.collect(out);
        for (auto& st : enc_) {
            st.res.collect(out);
            if (st.has_attn) st.attn.collect(out);
        }
        for (auto& d : down_) d.collect(out);
        mid_res1_.collect(out);
        if (mid_has_attn_) mid_attn_.collect(out);
        mid_res2_.collect(out);
        for (auto& u : up_) u.collect(out);
        for (auto& st : dec_) {
            st.res.collect(out);
            if (st.has_attn) st.attn.collect(out);
        }
        out.push_back(&head_norm_g_);
        out.push_back(&head_norm_b_);
        head_conv_.collect(out);
    }

    void bind(bool trainable) {
        ParamRefs<T> refs;
        collect_params(refs);
        for (auto* p : refs) p->bind(trainable);
    }

    // Graph-building forward pass. Parameters must be bound.
    DenoiserForward<T> forward(const ag::Var<T>& z_t, int t, const ConditioningBundle<T>& cond,
                               bool capture_attention) const {
        if (cond.embeddings->val.dim(1) != cfg.cond_dim)
            throw config_error("denoiser: conditioning dimension " +
                               std::to_string(cond.embeddings->val.dim(1)) +
                               " does not match cond_dim " + std::to_string(cfg.cond_dim));
        if (z_t->val.rank() != 3 || z_t->val.dim(0) != cfg.image_channels ||
            z_t->val.dim(1) != cfg.image_size || z_t->val.dim(2) != cfg.image_size)
            throw argument_error("denoiser: latent shape " + shape_str(z_t->val) +
                                 " does not match configuration");
        DenoiserForward<T> out;
        auto temb = ag::constant(sinusoidal_embedding<T>(static_cast<double>(t),
                                                         cfg.time_embed_dim));
        auto ta = ag::silu(ag::linear(temb, time_fc1_.w.var, time_fc1_.b.var));
        auto temb_act = ag::silu(ag::linear(ta, time_fc2_.w.var, time_fc2_.b.var));

        const int levels = static_cast<int>(enc_.size());
        auto h = conv_in_.forward(z_t);
        std::vector<ag::Var<T>> skips(static_cast<size_t>(levels));
        for (int i = 0; i < levels; ++i) {
            auto& st = enc_[static_cast<size_t>(i)];
            h = st.res.forward(h, temb_act);
            if (st.has_attn)
                h = st.attn.forward(h, cond.embeddings, capture_attention, &out.captures);
            skips[static_cast<size_t>(i)] = h;
            h = down_[static_cast<size_t>(i)].forward(h);
        }
        h = mid_res1_.forward(h, temb_act);
        if (mid_has_attn_)
            h = mid_attn_.forward(h, cond.embeddings, capture_attention, &out.captures);
        h = mid_res2_.forward(h, temb_act);
        for (int i = levels - 1; i >= 0; --i) {
            h = up_[static_cast<size_t>(i)].forward(ag::upsample_nearest2(h));
            h = ag::concat_channels(h, skips[static_cast<size_t>(i)]);
            auto& st = dec_[static_cast<size_t>(i)];
            h = st.res.forward(h, temb_act);
            if (st.has_attn)
                h = st.attn.forward(h, cond.embeddings, capture_attention, &out.captures);
        }
        h = ag::silu(ag::group_norm(h, head_norm_g_.var, head_norm_b_.var, cfg.norm_groups));
        out.eps = head_conv_.forward(h);
        return out;
    }

    // Inference entry point: plain tensors in, plain tensors out.
    DenoiserOutput<T> denoise(const Tensor<T>& z_t, int t, const ConditioningBundle<T>& cond,
                              bool capture_attention) const {
        auto fwd = forward(ag::constant(z_t), t, cond, capture_attention);
        DenoiserOutput<T> out;
        out.eps_pred = fwd.eps->val;
        out.attention = fwd.records();
        return out;
    }

    // Resolutions of the cross-attention layers in forward order.
    std::vector<int> attention_layer_resolutions() const {
        std::vector<int> res;
        const int levels = static_cast<int>(enc_.size());
        for (int i = 0; i < levels; ++i)
            if (enc_[static_cast<size_t>(i)].has_attn) res.push_back(cfg.image_size >> i);
        if (mid_has_attn_) res.push_back(cfg.image_size >> levels);
        for (int i = levels - 1; i >= 0; --i)
            if (dec_[static_cast<size_t>(i)].has_attn) res.push_back(cfg.image_size >> i);
        return res;
    }

  private:
    struct Stage {
        unet::ResBlock<T> res;
        unet::CrossAttention<T> attn;
        bool has_attn = false;
    };

    bool wants_attention(int res) const {
        for (int r : cfg.attention_resolutions)
            if (r == res) return true;
        return false;
    }

    void validate_config() const {
        if (cfg.cond_dim <= 0) throw config_error("denoiser: cond_dim must be positive");
        if (cfg.channel_multipliers.empty())
            throw config_error("denoiser: channel_multipliers must be non-empty");
        const int levels = static_cast<int>(cfg.channel_multipliers.size());
        if (cfg.image_size % (1 << levels) != 0)
            throw config_error("denoiser: image size not divisible by the downsampling factor");
        for (int r : cfg.attention_resolutions) {
            if (r <= 0 || cfg.image_size % r != 0)
                throw config_error("denoiser: attention resolution " + std::to_string(r) +
                                   " does not divide image size");
        }
        for (int m : cfg.channel_multipliers) {
            const int ch = cfg.base_channels * m;
            if (ch % cfg.norm_groups != 0)
                throw config_error("denoiser: channels must be divisible by norm groups");
        }
        if (cfg.time_embed_dim % 2 != 0)
            throw config_error("denoiser: time_embed_dim must be even");
    }

    unet::Conv<T> conv_in_, head_conv_;
    struct {
        Param<T> w, b;
        void collect(ParamRefs<T>& out) {
            out.push_back(&w);
            out.push_back(&b);
        }
    } time_fc1_, time_fc2_;
    std::vector<Stage> enc_;
    std::vector<unet::Conv<T>> down_;
    unet::ResBlock<T> mid_res1_, mid_res2_;
    unet::CrossAttention<T> mid_attn_;
    bool mid_has_attn_ = false;
    std::vector<unet::Conv<T>> up_;
    std::vector<Stage> dec_;
    Param<T> head_norm_g_, head_norm_b_;
};

// ============================================================================
// Attention aggregation
// ============================================================================

// Graph-side: mean over heads and over every capture at the aggregation
// resolution, one conditioning column, min-max normalized. [res, res].
template <typename T>
ag::Var<T> aggregate_attention_graph(const std::vector<AttentionCapture<T>>& captures,
                                     int token_index, int aggregation_resolution) {
    std::vector<ag::Var<T>> cols;
    for (const auto& c : captures) {
        if (c.h != aggregation_resolution || c.w != aggregation_resolution) continue;
        for (const auto& p : c.head_probs) {
            if (token_index < 0 || token_index >= p->val.dim(1))
                throw argument_error("aggregate_attention: token index out of range");
            cols.push_back(ag::col(p, token_index));
        }
    }
    if (cols.empty())
        throw config_error("aggregate_attention: no attention layer at resolution " +
                           std::to_string(aggregation_resolution));
    ag::Var<T> acc = cols[0];
    for (size_t i = 1; i < cols.size(); ++i) acc = ag::add(acc, cols[i]);
    acc = ag::mul_scalar(acc, static_cast<T>(1.0 / static_cast<double>(cols.size())));
    auto norm = ag::minmax_normalize(acc);
    return ag::reshape(norm, {aggregation_resolution, aggregation_resolution});
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& map, int h2, int w2) {
    const int h = map.dim(0), w = map.dim(1);
    if (h == h2 && w == w2) return map;
    Tensor<T> out({h2, w2});
    for (int y = 0; y < h2; ++y) {
        const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / h2));
        for (int x = 0; x < w2; ++x) {
            const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / w2));
            out.at(y, x) = map.at(sy, sx);
        }
    }
    return out;
}

// Plain-tensor aggregation over recorded maps.
template <typename T>
Tensor<T> aggregate_attention(const std::vector<AttentionRecord<T>>& records, int token_index,
                              int aggregation_resolution, std::pair<int, int> target_resolution) {
    ag::NoGrad ng;
    std::vector<AttentionCapture<T>> caps;
    for (const auto& r : records) {
        AttentionCapture<T> c;
        c.layer_id = r.layer_id;
        c.h = r.h;
        c.w = r.w;
        const int q = r.map.dim(1), k = r.map.dim(2);
        for (int hd = 0; hd < r.head_count; ++hd) {
            Tensor<T> p({q, k});
            std::copy(r.map.v.begin() + static_cast<long long>(hd) * q * k,
                      r.map.v.begin() + static_cast<long long>(hd + 1) * q * k, p.v.begin());
            c.head_probs.push_back(ag::constant(std::move(p)));
        }
        caps.push_back(std::move(c));
    }
    auto agg = aggregate_attention_graph(caps, token_index, aggregation_resolution);
    return resize_nearest(agg->val, target_resolution.first, target_resolution.second);
}

}  // namespace maskdiff
