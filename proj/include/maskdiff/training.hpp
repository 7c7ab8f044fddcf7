#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "maskdiff/dataio.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/model.hpp"
#include "maskdiff/nn.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct TrainConfig {
    // Two-phase fine-tune: handles (and mask encoder) first at a high rate
    // with frozen model weights, then everything at a low rate.
    int phase1_steps = 400;
    int phase2_steps = 400;
    double lr_phase1 = 5e-4;
    double lr_phase2 = 2e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;
    double weight_decay = 1e-8;
    int batch_size = 4;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    bool mask_attn_loss = true;  // false drops the mask-token attention term

    // Base-model stage.
    int pretrain_steps = 1500;
    double pretrain_lr = 2e-4;
    int pretrain_batch = 4;
    double pretrain_drop_mask = 0.2;   // chance of omitting a subject's mask token
    double pretrain_blank_mask = 0.1;  // chance of injecting the blank mask instead
    double pretrain_uncond = 0.1;      // chance of an unconditional example

    int progress_every = 100;
    bool quiet = false;

    void validate() const {
        if (phase1_steps < 0 || phase2_steps < 0 || pretrain_steps < 0)
            throw config_error("training: step counts must be non-negative");
        if (lr_phase1 <= 0 || lr_phase2 <= 0 || pretrain_lr <= 0)
            throw config_error("training: learning rates must be positive");
        if (batch_size < 1 || pretrain_batch < 1)
            throw config_error("training: batch size must be at least 1");
        loss_weights.validate();
    }
};

template <typename T>
struct FinetuneSource {
    Tensor<T> image;       // [3, s, s] in [-1, 1]
    SubjectMaskSet masks;  // subject id -> full-resolution mask
};

template <typename T>
struct TrainingExample {
    Tensor<T> image;  // background replaced with a solid color
    std::string prompt;
    std::vector<int> chosen_subjects;  // ascending
    BinaryMask union_mask;
    SubjectMaskSet subject_masks;  // chosen subjects only
    std::array<T, 3> background_color{};
};

inline int sample_timestep(Rng& rng, int total_steps) {
    return static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(total_steps)));
}

// Deterministic per-phase stream; phases and the pretrain stage never share
// draws.
inline Rng rng_for_phase(std::uint64_t seed, int phase_index) {
    Rng base(seed);
    return base.split(static_cast<std::uint64_t>(phase_index) + 1);
}

// Draw order: subset bits, then background r, g, b. Prompt lists the chosen
// handles in ascending id order; pixels outside the union mask become the
// sampled solid color.
template <typename T>
TrainingExample<T> sample_training_example(const FinetuneSource<T>& src, Rng& rng) {
    if (src.masks.empty()) throw config_error("training: source has no subject masks");
    for (const auto& [id, m] : src.masks)
        if (m.is_blank())
            throw config_error("training: subject " + std::to_string(id) + " has an empty mask");
    std::vector<int> ids;
    for (const auto& [id, m] : src.masks) ids.push_back(id);
    const int n = static_cast<int>(ids.size());
    const std::uint64_t subset_bits =
        1 + rng.uniform_index((1ull << n) - 1);  // uniform over non-empty subsets
    TrainingExample<T> ex;
    std::vector<BinaryMask> chosen;
    for (int i = 0; i < n; ++i) {
        if (subset_bits & (1ull << i)) {
            ex.chosen_subjects.push_back(ids[static_cast<size_t>(i)]);
            ex.subject_masks[ids[static_cast<size_t>(i)]] = src.masks.at(ids[static_cast<size_t>(i)]);
            chosen.push_back(src.masks.at(ids[static_cast<size_t>(i)]));
        }
    }
    ex.union_mask = mask_union(chosen);
    for (auto& c : ex.background_color) c = static_cast<T>(rng.uniform(-1.0, 1.0));
    ex.image = src.image;
    const int h = ex.union_mask.h, w = ex.union_mask.w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (!ex.union_mask.at(y, x))
                for (int c = 0; c < 3; ++c)
                    ex.image.at(c, y, x) = ex.background_color[static_cast<size_t>(c)];
    ex.prompt = "a photo of";
    for (size_t i = 0; i < ex.chosen_subjects.size(); ++i) {
        if (i) ex.prompt += " and";
        ex.prompt += " " + handle_token(ex.chosen_subjects[i]);
    }
    return ex;
}

template <typename T>
struct StepSample {
    TrainingExample<T> ex;
    int t = 0;
    Tensor<T> eps;
};

// Draw order per batch element: training example, timestep, noise.
template <typename T>
StepSample<T> draw_step_sample(const FinetuneSource<T>& src, const NoiseSchedule<T>& sched,
                               Rng& rng) {
    StepSample<T> s;
    s.ex = sample_training_example(src, rng);
    s.t = sample_timestep(rng, sched.steps);
    s.eps = Tensor<T>::randn(s.ex.image.shape, rng);
    return s;
}

struct LossLogRow {
    long step = 0;
    std::string phase;
    double l_rec = 0, l_attn = 0, l_mask_attn = 0, l_mattn = 0, l_total = 0;
};

inline void write_train_log_csv(const std::string& path, const std::vector<LossLogRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot create '" + path + "'");
    out << "step,phase,l_rec,l_attn,l_mask_attn,l_mattn,l_total\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%ld,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step,
                      r.phase.c_str(), r.l_rec, r.l_attn, r.l_mask_attn, r.l_mattn, r.l_total);
        out << buf;
    }
}

template <typename T>
struct BatchGraph {
    ag::Var<T> total;
    LossBreakdown<T> breakdown;
};

// Build the differentiable loss for one fine-tune batch. Parameters must be
// bound by the caller (that choice is what distinguishes the phases). Mask
// tokens always carry the chosen subjects' ground-truth masks; the ablation
// flag only removes the mask-token loss term, not the injection.
template <typename T>
BatchGraph<T> finetune_batch_graph(ModelState<T>& st, const std::vector<StepSample<T>>& batch,
                                   const TrainConfig& cfg) {
    const int agg = st.dcfg.aggregation_resolution;
    ag::Var<T> total, rec_sum, attn_sum, mask_attn_sum, mattn_sum;
    for (const auto& s : batch) {
        auto z_t = add_noise(s.ex.image, s.eps, s.t, st.schedule);
        auto text = st.cond.encode_prompt(s.ex.prompt);
        std::vector<MaskEmbedding<T>> mask_tokens;
        for (int subject : s.ex.chosen_subjects) {
            BinaryMask m = s.ex.subject_masks.at(subject);
            m.subject = subject;
            mask_tokens.push_back(st.cond.encode_mask(m));
        }
        auto bundle = st.cond.assemble_bundle(text, mask_tokens);
        auto fwd = st.denoiser.forward(ag::constant(z_t), s.t, bundle, true);
        auto l_rec = masked_diffusion_loss_graph(s.eps, fwd.eps, s.ex.union_mask);
        std::map<int, ag::Var<T>> handle_maps, mask_maps;
        SubjectMaskSet small;
        for (int subject : s.ex.chosen_subjects) {
            handle_maps[subject] =
                aggregate_attention_graph(fwd.captures, bundle.handle_position(subject), agg);
            if (cfg.mask_attn_loss)
                mask_maps[subject] =
                    aggregate_attention_graph(fwd.captures, bundle.mask_position(subject), agg);
            small[subject] = nearest_resize(s.ex.subject_masks.at(subject), agg, agg);
        }
        auto attn = mask_attention_total_graph(handle_maps, mask_maps, small, cfg.loss_weights);
        auto l_total = total_loss_graph(l_rec, attn.l_mattn, cfg.loss_weights);
        auto acc = [](ag::Var<T>& into, const ag::Var<T>& v) {
            if (v) into = into ? ag::add(into, v) : v;
        };
        acc(total, l_total);
        acc(rec_sum, l_rec);
        acc(attn_sum, attn.l_attn);
        acc(mask_attn_sum, attn.l_mask_attn);
        acc(mattn_sum, attn.l_mattn);
    }
    const T inv = static_cast<T>(1.0 / static_cast<double>(batch.size()));
    BatchGraph<T> out;
    out.total = ag::mul_scalar(total, inv);
    out.breakdown.l_rec = rec_sum->val[0] * inv;
    out.breakdown.l_attn = attn_sum->val[0] * inv;
    out.breakdown.l_mask_attn = mask_attn_sum ? mask_attn_sum->val[0] * inv : T(0);
    out.breakdown.l_mattn = mattn_sum->val[0] * inv;
    out.breakdown.l_total = out.total->val[0];
    return out;
}

namespace detail {

template <typename T>
void check_finite_or_abort(const LossBreakdown<T>& b, long step, const std::string& phase) {
    const bool ok = std::isfinite(static_cast<double>(b.l_total)) &&
                    std::isfinite(static_cast<double>(b.l_rec)) &&
                    std::isfinite(static_cast<double>(b.l_mattn));
    if (!ok)
        throw validation_error("training aborted at " + phase + " step " + std::to_string(step) +
                               ": non-finite loss (l_rec=" + std::to_string(b.l_rec) +
                               ", l_attn=" + std::to_string(b.l_attn) +
                               ", l_mask_attn=" + std::to_string(b.l_mask_attn) + ")");
}

template <typename T>
void check_breakdown(const LossBreakdown<T>& b, const LossWeights& w, long step,
                     const std::string& phase) {
    if (!b.arithmetic_holds(w, 1e-6))
        throw validation_error("loss breakdown arithmetic violated at " + phase + " step " +
                               std::to_string(step));
}

inline void progress(const TrainConfig& cfg, const char* phase, long step, long total,
                     double loss) {
    if (cfg.quiet || cfg.progress_every <= 0) return;
    if (step % cfg.progress_every == 0 || step == total)
        std::printf("[%s] step %ld/%ld l_total=%.6f\n", phase, step, total, loss);
}

}  // namespace detail

// Phase 1: frozen model weights, optimize handle embeddings and the mask
// encoder at the high learning rate.
template <typename T>
Checkpoint run_phase1(ModelState<T>& st, const FinetuneSource<T>& source, const TrainConfig& cfg,
                      std::vector<LossLogRow>* log = nullptr) {
    cfg.validate();
    Rng rng = rng_for_phase(cfg.seed, 1);
    ParamRefs<T> trained;
    for (auto& h : st.cond.handles) trained.push_back(&h);
    trained.push_back(&st.cond.maskenc_w);
    trained.push_back(&st.cond.maskenc_b);
    Adam<T> opt(cfg.lr_phase1, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps);
    for (long step = 1; step <= cfg.phase1_steps; ++step) {
        st.denoiser.bind(false);
        st.cond.bind(/*words=*/false, /*handles=*/true, /*maskenc=*/true);
        std::vector<StepSample<T>> batch;
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(draw_step_sample(source, st.schedule, rng));
        auto g = finetune_batch_graph(st, batch, cfg);
        detail::check_finite_or_abort(g.breakdown, step, "phase1");
        detail::check_breakdown(g.breakdown, cfg.loss_weights, step, "phase1");
        ag::backward(g.total);
        opt.step(trained);
        if (log)
            log->push_back({step, "phase1", static_cast<double>(g.breakdown.l_rec),
                            static_cast<double>(g.breakdown.l_attn),
                            static_cast<double>(g.breakdown.l_mask_attn),
                            static_cast<double>(g.breakdown.l_mattn),
                            static_cast<double>(g.breakdown.l_total)});
        detail::progress(cfg, "phase1", step, cfg.phase1_steps, g.breakdown.l_total);
    }
    return st.to_checkpoint("phase1", cfg.phase1_steps, "");
}

// Phase 2: everything unfrozen at the low learning rate.
template <typename T>
Checkpoint run_phase2(ModelState<T>& st, const FinetuneSource<T>& source, const TrainConfig& cfg,
                      std::vector<LossLogRow>* log = nullptr) {
    cfg.validate();
    Rng rng = rng_for_phase(cfg.seed, 2);
    ParamRefs<T> trained = st.all_params();
    Adam<T> opt(cfg.lr_phase2, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps);
    for (long step = 1; step <= cfg.phase2_steps; ++step) {
        st.denoiser.bind(true);
        st.cond.bind(true, true, true);
        std::vector<StepSample<T>> batch;
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(draw_step_sample(source, st.schedule, rng));
        auto g = finetune_batch_graph(st, batch, cfg);
        detail::check_finite_or_abort(g.breakdown, step, "phase2");
        detail::check_breakdown(g.breakdown, cfg.loss_weights, step, "phase2");
        ag::backward(g.total);
        opt.step(trained);
        if (log)
            log->push_back({cfg.phase1_steps + step, "phase2",
                            static_cast<double>(g.breakdown.l_rec),
                            static_cast<double>(g.breakdown.l_attn),
                            static_cast<double>(g.breakdown.l_mask_attn),
                            static_cast<double>(g.breakdown.l_mattn),
                            static_cast<double>(g.breakdown.l_total)});
        detail::progress(cfg, "phase2", step, cfg.phase2_steps, g.breakdown.l_total);
    }
    return st.to_checkpoint("final", cfg.phase1_steps + cfg.phase2_steps, "");
}

// Handle initialization: per-subject class word when provided, otherwise the
// mean word embedding.
template <typename T>
void init_handles(ModelState<T>& st, const std::vector<std::string>& class_words) {
    for (int i = 0; i < st.ccfg.num_handles; ++i) {
        if (i < static_cast<int>(class_words.size()) && !class_words[static_cast<size_t>(i)].empty())
            st.cond.init_handle_from_word(i, class_words[static_cast<size_t>(i)]);
        else
            st.cond.init_handle_from_mean(i);
    }
}

// ============================================================================
// Pretraining (base-model stage)
// ============================================================================

// One pretrain example: caption conditioning with per-subject mask tokens.
// Draw order: scene index, uncond draw, per-subject (drop, blank) draws,
// timestep, noise. The loss is the plain unmasked DDPM MSE.
template <typename T>
struct PretrainSample {
    int scene_index = 0;
    std::string prompt;
    std::vector<int> mask_subject;     // aligned with mask_blank
    std::vector<bool> mask_blank;
    int t = 0;
    Tensor<T> eps;
};

template <typename T>
PretrainSample<T> draw_pretrain_sample(const std::vector<ToyScene<T>>& corpus,
                                       const NoiseSchedule<T>& sched, const TrainConfig& cfg,
                                       Rng& rng) {
    PretrainSample<T> s;
    s.scene_index = static_cast<int>(rng.uniform_index(corpus.size()));
    const auto& scene = corpus[static_cast<size_t>(s.scene_index)];
    const bool uncond = rng.uniform() < cfg.pretrain_uncond;
    if (!uncond) {
        s.prompt = scene.caption;
        for (const auto& [subject, m] : scene.masks) {
            const double drop = rng.uniform();
            const double blank = rng.uniform();
            if (drop < cfg.pretrain_drop_mask) continue;
            s.mask_subject.push_back(subject);
            s.mask_blank.push_back(blank < cfg.pretrain_blank_mask);
        }
    }
    s.t = sample_timestep(rng, sched.steps);
    s.eps = Tensor<T>::randn(scene.image.shape, rng);
    return s;
}

template <typename T>
ag::Var<T> pretrain_example_graph(ModelState<T>& st, const std::vector<ToyScene<T>>& corpus,
                                  const PretrainSample<T>& s) {
    const auto& scene = corpus[static_cast<size_t>(s.scene_index)];
    auto z_t = add_noise(scene.image, s.eps, s.t, st.schedule);
    auto text = st.cond.encode_prompt(s.prompt);
    std::vector<MaskEmbedding<T>> mask_tokens;
    for (size_t i = 0; i < s.mask_subject.size(); ++i) {
        BinaryMask m = s.mask_blank[i] ? BinaryMask::blank(st.dcfg.image_size)
                                       : scene.masks.at(s.mask_subject[i]);
        m.subject = -1;  // captions carry no handles; tokens are unlinked
        mask_tokens.push_back(st.cond.encode_mask(m));
    }
    auto bundle = st.cond.assemble_bundle(text, mask_tokens);
    auto fwd = st.denoiser.forward(ag::constant(z_t), s.t, bundle, false);
    BinaryMask ones(st.dcfg.image_size, st.dcfg.image_size);
    std::fill(ones.v.begin(), ones.v.end(), 1);
    return masked_diffusion_loss_graph(s.eps, fwd.eps, ones);
}

// Standard unmasked DDPM training on captioned toy scenes. Stands in for the
// pretrained backbone the fine-tune starts from; mask tokens are included so
// the base model learns to read pose from them.
template <typename T>
Checkpoint pretrain(ModelState<T>& st, const std::vector<ToyScene<T>>& corpus,
                    const TrainConfig& cfg, std::vector<LossLogRow>* log = nullptr) {
    cfg.validate();
    if (corpus.empty() && cfg.pretrain_steps > 0)
        throw config_error("pretrain: empty corpus");
    Rng rng = rng_for_phase(cfg.seed, 0);
    ParamRefs<T> trained;
    st.denoiser.collect_params(trained);
    trained.push_back(&st.cond.word_table);
    trained.push_back(&st.cond.maskenc_w);
    trained.push_back(&st.cond.maskenc_b);
    Adam<T> opt(cfg.pretrain_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps);
    for (long step = 1; step <= cfg.pretrain_steps; ++step) {
        st.denoiser.bind(true);
        st.cond.bind(true, false, true);
        ag::Var<T> total;
        for (int b = 0; b < cfg.pretrain_batch; ++b) {
            auto sample = draw_pretrain_sample(corpus, st.schedule, cfg, rng);
            auto l = pretrain_example_graph(st, corpus, sample);
            total = total ? ag::add(total, l) : l;
        }
        total = ag::mul_scalar(total, static_cast<T>(1.0 / cfg.pretrain_batch));
        LossBreakdown<T> b;
        b.l_rec = total->val[0];
        b.l_total = total->val[0];
        detail::check_finite_or_abort(b, step, "pretrain");
        ag::backward(total);
        opt.step(trained);
        if (log)
            log->push_back({step, "pretrain", static_cast<double>(b.l_rec), 0, 0, 0,
                            static_cast<double>(b.l_total)});
        detail::progress(cfg, "pretrain", step, cfg.pretrain_steps, b.l_total);
    }
    return st.to_checkpoint("pretrain", cfg.pretrain_steps, "");
}

// Localization of handle attention on the training image: the fraction of
// each handle's aggregated attention mass that falls inside its own mask,
// averaged over subjects and a fixed timestep grid with seed-fixed noise.
template <typename T>
double attention_inside_fraction(ModelState<T>& st, const FinetuneSource<T>& source,
                                 std::uint64_t seed) {
    ag::NoGrad ng;
    st.denoiser.bind(false);
    st.cond.bind(false, false, false);
    Rng rng(seed);
    const int agg = st.dcfg.aggregation_resolution;
    const std::vector<int> ts = {st.schedule.steps / 4, st.schedule.steps / 2,
                                 3 * st.schedule.steps / 4};
    // Conditioning mirrors a full-subset training example.
    std::string prompt = "a photo of";
    bool first = true;
    for (const auto& [subject, m] : source.masks) {
        if (!first) prompt += " and";
        prompt += " " + handle_token(subject);
        first = false;
    }
    double acc = 0;
    long n = 0;
    for (int t : ts) {
        auto eps = Tensor<T>::randn(source.image.shape, rng);
        auto z_t = add_noise(source.image, eps, t, st.schedule);
        auto text = st.cond.encode_prompt(prompt);
        std::vector<MaskEmbedding<T>> mask_tokens;
        for (const auto& [subject, m] : source.masks) {
            BinaryMask mm = m;
            mm.subject = subject;
            mask_tokens.push_back(st.cond.encode_mask(mm));
        }
        auto bundle = st.cond.assemble_bundle(text, mask_tokens);
        auto fwd = st.denoiser.forward(ag::constant(z_t), t, bundle, true);
        for (const auto& [subject, m] : source.masks) {
            auto map = aggregate_attention_graph(fwd.captures, bundle.handle_position(subject),
                                                 agg);
            auto small = nearest_resize(m, agg, agg);
            double inside = 0, total = 0;
            for (int i = 0; i < agg * agg; ++i) {
                const double v = static_cast<double>(map->val[i]);
                total += v;
                if (small.v[static_cast<size_t>(i)]) inside += v;
            }
            acc += total > 0 ? inside / total : 0.0;
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

// Deterministic held-out evaluation: plain MSE at a fixed timestep grid with
// seed-fixed noise, conditioning as in pretraining (no augmentation).
template <typename T>
double eval_corpus_mse(ModelState<T>& st, const std::vector<ToyScene<T>>& scenes,
                       std::uint64_t seed) {
    if (scenes.empty()) throw argument_error("eval: no scenes");
    ag::NoGrad ng;
    st.denoiser.bind(false);
    st.cond.bind(false, false, false);
    Rng rng(seed);
    const std::vector<int> ts = {st.schedule.steps / 5, st.schedule.steps / 2,
                                 4 * st.schedule.steps / 5};
    double acc = 0;
    long n = 0;
    for (const auto& scene : scenes) {
        for (int t : ts) {
            auto eps = Tensor<T>::randn(scene.image.shape, rng);
            auto z_t = add_noise(scene.image, eps, t, st.schedule);
            auto text = st.cond.encode_prompt(scene.caption);
            std::vector<MaskEmbedding<T>> mask_tokens;
            for (const auto& [subject, m] : scene.masks) {
                BinaryMask mm = m;
                mm.subject = -1;
                mask_tokens.push_back(st.cond.encode_mask(mm));
            }
            auto bundle = st.cond.assemble_bundle(text, mask_tokens);
            auto fwd = st.denoiser.forward(ag::constant(z_t), t, bundle, false);
            double mse = 0;
            for (long long i = 0; i < eps.numel(); ++i) {
                const double d = static_cast<double>(eps[i]) -
                                 static_cast<double>(fwd.eps->val[i]);
                mse += d * d;
            }
            acc += mse / static_cast<double>(eps.numel());
            ++n;
        }
    }
    return acc / static_cast<double>(n);
}

}  // namespace maskdiff
