#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/model.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct GenerationRequest {
    std::string prompt;
    std::vector<BinaryMask> masks;  // subject >= 0 links a mask to that handle
    int steps = 0;                  // 0 = full schedule
    std::uint64_t seed = 0;
    double guidance_scale = 1.0;  // 1.0 = off
    int output_size = 0;          // 0 = model size
};

template <typename T>
struct GenerationResult {
    Tensor<T> image;  // [3, s, s] in [-1, 1]
    nlohmann::json metadata;
    // Attention captured at the final denoising step when requested.
    std::vector<AttentionRecord<T>> attention;
    ConditioningBundle<T> bundle;  // links describing the conditioning layout
};

inline BinaryMask blank_mask(int size) {
    if (size <= 0) throw argument_error("blank_mask: size must be positive");
    return BinaryMask::blank(size);
}

// Evenly strided timesteps from T-1 down to 0 inclusive.
inline std::vector<int> strided_timesteps(int schedule_steps, int sample_steps) {
    if (sample_steps < 1) throw argument_error("generation: steps must be at least 1");
    if (sample_steps > schedule_steps)
        throw argument_error("generation: steps exceed the schedule length");
    std::vector<int> ts;
    if (sample_steps == 1) {
        ts.push_back(schedule_steps - 1);
        return ts;
    }
    for (int k = 0; k < sample_steps; ++k) {
        const double f = static_cast<double>(k) / (sample_steps - 1);
        const int t = static_cast<int>(std::lround((schedule_steps - 1) * (1.0 - f)));
        if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    return ts;
}

namespace detail {

// Scan prompt tokens for handle-looking words that the vocabulary does not
// know, so the error can list what is available.
inline void check_prompt_handles(const Vocabulary& vocab, const std::string& prompt) {
    for (const auto& tok : split_tokens(prompt)) {
        if (tok.size() > 2 && tok.front() == '<' && tok.back() == '>' && !vocab.ids.count(tok)) {
            std::string known;
            for (int i = 0; i < vocab.handle_count; ++i) {
                if (i) known += ", ";
                known += handle_token(i);
            }
            throw argument_error("unknown handle '" + tok + "'; known handles: " +
                                 (known.empty() ? "(none)" : known));
        }
    }
}

}  // namespace detail

// Reverse-chain sampling from a seeded Gaussian. Deterministic per seed: the
// draw order is the initial latent, then one noise tensor per non-final step.
// The guidance_scale == 1 path runs exactly one conditional forward per step.
template <typename T>
GenerationResult<T> generate(const ModelState<T>& model, const GenerationRequest& req,
                             bool capture_attention = false) {
    ag::NoGrad ng;
    ModelState<T> st = model;  // local copy; safe for concurrent callers
    const int size = st.dcfg.image_size;
    const int steps = req.steps == 0 ? st.schedule.steps : req.steps;
    auto timesteps = strided_timesteps(st.schedule.steps, steps);
    if (req.guidance_scale < 1.0)
        throw argument_error("generation: guidance scale must be >= 1.0");
    detail::check_prompt_handles(st.cond.vocab, req.prompt);

    st.denoiser.bind(false);
    st.cond.bind(false, false, false);
    auto text = st.cond.encode_prompt(req.prompt);

    // Default linking: a single unlinked mask binds to the prompt's only
    // handle; anything else keeps the caller's links.
    std::vector<BinaryMask> masks = req.masks;
    int handle_count = 0, handle_subject = -1;
    for (const auto& l : text.links)
        if (l.kind == TokenKind::Handle) {
            ++handle_count;
            handle_subject = l.subject;
        }
    if (handle_count == 1 && masks.size() == 1 && masks[0].subject < 0)
        masks[0].subject = handle_subject;

    std::vector<MaskEmbedding<T>> mask_tokens;
    for (const auto& m : masks)
        mask_tokens.push_back(st.cond.encode_mask(nearest_resize(m, size, size)));
    auto bundle = st.cond.assemble_bundle(text, mask_tokens);

    ConditioningBundle<T> uncond;
    if (req.guidance_scale > 1.0)
        uncond = st.cond.assemble_bundle(st.cond.encode_prompt(""), {});

    Rng rng(req.seed);
    Tensor<T> z = Tensor<T>::randn({st.dcfg.image_channels, size, size}, rng);
    GenerationResult<T> out;
    for (size_t i = 0; i < timesteps.size(); ++i) {
        const int t = timesteps[i];
        const bool last = i + 1 == timesteps.size();
        auto pred = st.denoiser.denoise(z, t, bundle, capture_attention && last);
        Tensor<T> eps = pred.eps_pred;
        if (req.guidance_scale > 1.0) {
            auto u = st.denoiser.denoise(z, t, uncond, false);
            const T s = static_cast<T>(req.guidance_scale);
            for (long long j = 0; j < eps.numel(); ++j)
                eps[j] = u.eps_pred[j] + s * (eps[j] - u.eps_pred[j]);
        }
        if (capture_attention && last) out.attention = pred.attention;
        z = ddpm_step(z, eps, t, st.schedule, rng);
    }
    for (auto& x : z.v) x = std::min(T(1), std::max(T(-1), x));
    if (req.output_size > 0 && req.output_size != size)
        z = bilinear_resize(z, req.output_size, req.output_size);
    out.image = std::move(z);
    out.bundle = bundle;
    out.metadata["prompt"] = req.prompt;
    out.metadata["seed"] = req.seed;
    out.metadata["steps"] = steps;
    out.metadata["guidance_scale"] = req.guidance_scale;
    out.metadata["timesteps_visited"] = timesteps;
    nlohmann::json mj = nlohmann::json::array();
    for (const auto& m : masks)
        mj.push_back({{"subject", m.subject}, {"ones", m.count_ones()}});
    out.metadata["masks"] = mj;
    return out;
}

// ============================================================================
// IoU evaluation
// ============================================================================

struct SubjectColorSpec {
    std::array<double, 3> rgb{0, 0, 0};  // in [-1, 1]
    double threshold = 0.75;             // Euclidean distance in RGB space
};

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (!a.same_shape(b)) throw argument_error("iou: mask shapes differ");
    long long inter = 0, uni = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        inter += a.v[i] & b.v[i];
        uni += a.v[i] | b.v[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Threshold the image into a predicted subject mask by color distance.
template <typename T>
BinaryMask segment_subject(const Tensor<T>& image, const SubjectColorSpec& spec) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw argument_error("segment_subject: [3,h,w] image expected");
    const int h = image.dim(1), w = image.dim(2);
    BinaryMask pred(h, w);
    const double t2 = spec.threshold * spec.threshold;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(image.at(c, y, x)) -
                                 spec.rgb[static_cast<size_t>(c)];
                d2 += d * d;
            }
            if (d2 <= t2) pred.at(y, x) = 1;
        }
    return pred;
}

template <typename T>
double segment_and_iou(const Tensor<T>& image, const SubjectColorSpec& spec,
                       const BinaryMask& target) {
    return mask_iou(segment_subject(image, spec), target);
}

// Translate a mask by (dy, dx); pixels shifted off the canvas are dropped.
inline BinaryMask translate_mask(const BinaryMask& m, int dy, int dx) {
    BinaryMask out(m.h, m.w);
    out.subject = m.subject;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            const int ny = y + dy, nx = x + dx;
            if (ny >= 0 && ny < m.h && nx >= 0 && nx < m.w) out.at(ny, nx) = 1;
        }
    return out;
}

}  // namespace maskdiff
