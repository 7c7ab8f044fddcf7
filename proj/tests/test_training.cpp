#include <gtest/gtest.h>

#include "maskdiff/training.hpp"
#include "support/testutil.hpp"

using namespace maskdiff;

namespace {

// 16x16 two-subject fixture small enough for unit-test budgets.
template <typename T>
struct Fixture {
    ModelState<T> state;
    FinetuneSource<T> source;
    TrainConfig cfg;
};

template <typename T>
Fixture<T> make_fixture(unsigned seed) {
    DenoiserConfig dc;
    dc.image_size = 16;
    dc.base_channels = 8;
    dc.channel_multipliers = {1, 2};
    dc.attention_resolutions = {8, 4};
    dc.num_heads = 2;
    dc.cond_dim = 16;
    dc.time_embed_dim = 16;
    dc.aggregation_resolution = 8;
    ConditioningConfig cc;
    cc.dim = 16;
    cc.mask_grid = 4;
    cc.plain_words = toy_vocabulary_words();
    cc.num_handles = 2;
    ScheduleParams sp;
    sp.steps = 50;
    sp.beta_start = 1e-3;
    sp.beta_end = 0.05;
    Rng rng(seed);
    Fixture<T> f;
    f.state = ModelState<T>(dc, cc, sp, rng);

    SceneSpec spec;
    spec.canvas = 16;
    SubjectSpec s0, s1;
    s0.shape = ShapeKind::Square;
    s0.color_name = "red";
    s0.color = {230, 40, 40};
    s0.min_scale = s0.max_scale = 5;
    s1.shape = ShapeKind::Circle;
    s1.color_name = "blue";
    s1.color = {50, 80, 235};
    s1.min_scale = s1.max_scale = 6;
    spec.subjects = {s0, s1};
    Rng srng(seed + 100);
    auto scene = make_toy_scene<T>(spec, srng);
    f.source.image = scene.image;
    f.source.masks = scene.masks;

    f.cfg.phase1_steps = 4;
    f.cfg.phase2_steps = 4;
    f.cfg.batch_size = 2;
    f.cfg.seed = seed;
    f.cfg.quiet = true;
    return f;
}

template <typename T>
std::vector<ToyScene<T>> tiny_corpus(int n, unsigned seed) {
    CorpusOptions opt;
    opt.canvas = 16;
    opt.min_scale = 5;
    opt.max_scale = 8;
    Rng rng(seed);
    std::vector<ToyScene<T>> corpus;
    for (int i = 0; i < n; ++i)
        corpus.push_back(make_toy_scene<T>(random_scene_spec(opt, rng), rng));
    return corpus;
}

TEST(SampleTrainingExample, SingletonSubset) {
    auto f = make_fixture<double>(1);
    FinetuneSource<double> single;
    single.image = f.source.image;
    single.masks[0] = f.source.masks[0];
    Rng rng(2);
    for (int i = 0; i < 5; ++i) {
        auto ex = sample_training_example(single, rng);
        ASSERT_EQ(ex.chosen_subjects, (std::vector<int>{0}));
        EXPECT_EQ(ex.prompt, "a photo of <asset0>");
    }
}

TEST(SampleTrainingExample, SubsetDistributionUniform) {
    auto f = make_fixture<double>(3);
    Rng rng(4);
    int counts[3] = {0, 0, 0};  // {0}, {1}, {0,1}
    const int n = 3000;
    for (int i = 0; i < n; ++i) {
        auto ex = sample_training_example(f.source, rng);
        if (ex.chosen_subjects == std::vector<int>{0})
            ++counts[0];
        else if (ex.chosen_subjects == std::vector<int>{1})
            ++counts[1];
        else
            ++counts[2];
    }
    // Uniform over three subsets within 3 sigma.
    const double expect = n / 3.0;
    const double sigma = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(counts[k], expect, 3 * sigma) << "subset " << k;
}

TEST(SampleTrainingExample, BackgroundReplacementExact) {
    auto f = make_fixture<double>(5);
    Rng rng(6);
    auto ex = sample_training_example(f.source, rng);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            if (ex.union_mask.at(y, x)) {
                for (int c = 0; c < 3; ++c)
                    ASSERT_DOUBLE_EQ(ex.image.at(c, y, x), f.source.image.at(c, y, x));
            } else {
                for (int c = 0; c < 3; ++c)
                    ASSERT_DOUBLE_EQ(ex.image.at(c, y, x),
                                     ex.background_color[static_cast<size_t>(c)]);
            }
        }
    // Union is the OR of the chosen masks, and the prompt lists them in order.
    if (ex.chosen_subjects.size() == 2) EXPECT_EQ(ex.prompt, "a photo of <asset0> and <asset1>");
    EXPECT_THROW(sample_training_example(FinetuneSource<double>{}, rng), config_error);
}

TEST(Timesteps, ChiSquareUniform) {
    Rng rng(7);
    const int T = 20, n = 10000;
    std::vector<int> counts(T, 0);
    for (int i = 0; i < n; ++i) ++counts[static_cast<size_t>(sample_timestep(rng, T))];
    double chi2 = 0;
    const double expect = static_cast<double>(n) / T;
    for (int k = 0; k < T; ++k) {
        const double d = counts[static_cast<size_t>(k)] - expect;
        chi2 += d * d / expect;
    }
    EXPECT_LT(chi2, 43.82);  // df=19, alpha=0.001
}

TEST(Phase1, ZeroStepsIsIdentity) {
    auto f = make_fixture<float>(8);
    auto before = f.state.to_checkpoint("init", 0, "");
    f.cfg.phase1_steps = 0;
    run_phase1(f.state, f.source, f.cfg);
    auto after = f.state.to_checkpoint("init", 0, "");
    for (const auto& [name, t] : before.arrays)
        ASSERT_TRUE(after.arrays.at(name).bit_equal(t)) << name;
}

TEST(Phase1, FreezeContractAndHandleMovement) {
    auto f = make_fixture<float>(9);
    auto before = f.state.to_checkpoint("init", 0, "");
    std::vector<LossLogRow> log;
    run_phase1(f.state, f.source, f.cfg, &log);
    auto after = f.state.to_checkpoint("phase1", 0, "");
    int changed_handles = 0;
    for (const auto& [name, t] : before.arrays) {
        if (name.rfind("denoiser/", 0) == 0 || name == "text/word_table") {
            ASSERT_TRUE(after.arrays.at(name).bit_equal(t)) << name << " must stay frozen";
        } else if (name.rfind("text/handles/", 0) == 0) {
            if (!after.arrays.at(name).bit_equal(t)) ++changed_handles;
        }
    }
    EXPECT_GE(changed_handles, 1);
    ASSERT_EQ(log.size(), 4u);
    for (const auto& r : log) EXPECT_EQ(r.phase, "phase1");
}

TEST(Phase1, OneStepMatchesIndependentAdamReference) {
    auto f = make_fixture<double>(10);
    f.cfg.phase1_steps = 1;
    auto initial = f.state;  // value copy

    // Replay the same draws and compute the expected first Adam step from the
    // gradient using the closed-form first-step update.
    ModelState<double> replay = initial;
    Rng rng = rng_for_phase(f.cfg.seed, 1);
    replay.denoiser.bind(false);
    replay.cond.bind(false, true, true);
    std::vector<StepSample<double>> batch;
    for (int b = 0; b < f.cfg.batch_size; ++b)
        batch.push_back(draw_step_sample(f.source, replay.schedule, rng));
    auto g = finetune_batch_graph(replay, batch, f.cfg);
    ag::backward(g.total);

    run_phase1(f.state, f.source, f.cfg);

    auto check_param = [&](Param<double>& trained, Param<double>& replayed,
                           Param<double>& start) {
        ASSERT_TRUE(replayed.has_grad()) << replayed.name;
        for (long long i = 0; i < start.value.numel(); ++i) {
            const double grad = replayed.var->grad[i];
            const double mhat = grad;                       // m / (1 - b1)
            const double vhat = grad * grad;                // v / (1 - b2)
            const double upd = mhat / (std::sqrt(vhat) + f.cfg.adam_eps);
            const double want = start.value[i] -
                                f.cfg.lr_phase1 * (upd + f.cfg.weight_decay * start.value[i]);
            ASSERT_NEAR(trained.value[i], want, 1e-8) << replayed.name << "[" << i << "]";
        }
    };
    check_param(f.state.cond.handles[0], replay.cond.handles[0], initial.cond.handles[0]);
    check_param(f.state.cond.handles[1], replay.cond.handles[1], initial.cond.handles[1]);
    check_param(f.state.cond.maskenc_b, replay.cond.maskenc_b, initial.cond.maskenc_b);
}

TEST(Phase2, ZeroStepsIsIdentity) {
    auto f = make_fixture<float>(11);
    auto before = f.state.to_checkpoint("x", 0, "");
    f.cfg.phase2_steps = 0;
    run_phase2(f.state, f.source, f.cfg);
    auto after = f.state.to_checkpoint("x", 0, "");
    for (const auto& [name, t] : before.arrays) ASSERT_TRUE(after.arrays.at(name).bit_equal(t));
}

TEST(Phase2, ZeroGradParameterShrinksByDecoupledDecay) {
    auto f = make_fixture<double>(12);
    f.cfg.phase2_steps = 6;
    // The <pad> token never appears in any prompt, so its embedding row only
    // feels the decay term.
    const int pad = f.state.cond.vocab.pad_id;
    std::vector<double> start(16);
    for (int j = 0; j < 16; ++j) start[static_cast<size_t>(j)] = f.state.cond.word_table.value.at(pad, j);
    run_phase2(f.state, f.source, f.cfg);
    const double factor = std::pow(1.0 - f.cfg.lr_phase2 * f.cfg.weight_decay, 6);
    for (int j = 0; j < 16; ++j) {
        const double want = start[static_cast<size_t>(j)] * factor;
        const double got = f.state.cond.word_table.value.at(pad, j);
        ASSERT_NEAR(got, want, std::abs(want) * 1e-13 + 1e-300);
        if (start[static_cast<size_t>(j)] != 0.0)
            ASSERT_NE(got, start[static_cast<size_t>(j)]);  // decay is measurable in double
    }
}

TEST(Training, DeterministicCheckpointsUnderFixedSeed) {
    auto run = [&]() {
        auto f = make_fixture<float>(13);
        std::vector<LossLogRow> log;
        run_phase1(f.state, f.source, f.cfg, &log);
        run_phase2(f.state, f.source, f.cfg, &log);
        return f.state.to_checkpoint("final", 8, "");
    };
    auto a = run();
    auto b = run();
    ASSERT_EQ(a.arrays.size(), b.arrays.size());
    for (const auto& [name, t] : a.arrays) ASSERT_TRUE(b.arrays.at(name).bit_equal(t)) << name;
}

TEST(Training, BreakdownInvariantsHoldPerStep) {
    auto f = make_fixture<float>(14);
    f.cfg.phase1_steps = 3;
    f.cfg.phase2_steps = 3;
    std::vector<LossLogRow> log;
    run_phase1(f.state, f.source, f.cfg, &log);
    run_phase2(f.state, f.source, f.cfg, &log);
    ASSERT_EQ(log.size(), 6u);
    for (const auto& r : log) {
        EXPECT_NEAR(r.l_mattn, r.l_attn + f.cfg.loss_weights.lambda_m * r.l_mask_attn, 1e-6);
        EXPECT_NEAR(r.l_total, r.l_rec + f.cfg.loss_weights.lambda_attn * r.l_mattn, 1e-6);
        EXPECT_GE(r.l_rec, 0.0);
    }
    // Steps are numbered consecutively across phases.
    for (size_t i = 0; i < log.size(); ++i) EXPECT_EQ(log[i].step, static_cast<long>(i + 1));
}

TEST(Training, AblationModeDropsMaskAttnTermOnly) {
    auto f = make_fixture<float>(15);
    f.cfg.mask_attn_loss = false;
    f.cfg.phase1_steps = 2;
    std::vector<LossLogRow> log;
    run_phase1(f.state, f.source, f.cfg, &log);
    for (const auto& r : log) {
        EXPECT_EQ(r.l_mask_attn, 0.0);
        EXPECT_EQ(r.l_mattn, r.l_attn);
        EXPECT_GT(r.l_attn, 0.0);  // Eq. 2 still active
    }
}

TEST(Pretrain, ZeroStepsProducesSchemaValidCheckpoint) {
    testutil::TempDir tmp("pre0");
    auto f = make_fixture<float>(16);
    f.cfg.pretrain_steps = 0;
    auto ck = pretrain(f.state, {}, f.cfg);
    const std::string p = tmp.str() + "/base.mckpt";
    save_checkpoint(ck, p);
    auto st = ModelState<float>::from_checkpoint(load_checkpoint(p));
    EXPECT_EQ(st.dcfg.image_size, 16);
}

TEST(Pretrain, ImprovesHeldOutLoss) {
    auto f = make_fixture<float>(17);
    auto corpus = tiny_corpus<float>(24, 18);
    auto heldout = tiny_corpus<float>(6, 19);
    const double before = eval_corpus_mse(f.state, heldout, 99);
    f.cfg.pretrain_steps = 300;
    f.cfg.pretrain_batch = 2;
    f.cfg.pretrain_lr = 6e-4;
    pretrain(f.state, corpus, f.cfg);
    const double after = eval_corpus_mse(f.state, heldout, 99);
    EXPECT_LT(after, before * 0.7) << "before=" << before << " after=" << after;
}

TEST(Pretrain, SingleImageOverfitCurve) {
    auto f = make_fixture<float>(20);
    auto corpus = tiny_corpus<float>(1, 21);
    f.cfg.pretrain_steps = 360;
    f.cfg.pretrain_batch = 2;
    f.cfg.pretrain_lr = 6e-4;
    f.cfg.pretrain_uncond = 0.0;
    std::vector<LossLogRow> log;
    pretrain(f.state, corpus, f.cfg, &log);
    // Smoothed curve: window means must not rise (small tolerance) and the
    // last window must sit well below the first.
    const int window = 60;
    std::vector<double> means;
    for (size_t i = 0; i + window <= log.size(); i += window) {
        double m = 0;
        for (int j = 0; j < window; ++j) m += log[i + static_cast<size_t>(j)].l_total;
        means.push_back(m / window);
    }
    ASSERT_GE(means.size(), 3u);
    for (size_t i = 1; i < means.size(); ++i) EXPECT_LT(means[i], means[i - 1] * 1.15);
    EXPECT_LT(means.back(), means.front() * 0.7);
}

TEST(Training, LossDecreasesOnToyFixture) {
    auto f = make_fixture<float>(22);
    init_handles(f.state, {"square", "circle"});
    f.cfg.phase1_steps = 40;
    f.cfg.phase2_steps = 400;
    f.cfg.lr_phase1 = 1e-3;
    f.cfg.lr_phase2 = 6e-4;  // tiny-fixture rates, not the protocol defaults
    std::vector<LossLogRow> log;
    run_phase1(f.state, f.source, f.cfg, &log);
    run_phase2(f.state, f.source, f.cfg, &log);
    std::vector<double> first;
    for (int i = 0; i < 10; ++i) first.push_back(log[static_cast<size_t>(i)].l_total);
    std::sort(first.begin(), first.end());
    const double median = 0.5 * (first[4] + first[5]);
    double tail = 0;  // mean of the last 20 steps steadies the comparison
    for (size_t i = log.size() - 20; i < log.size(); ++i) tail += log[i].l_total;
    tail /= 20;
    EXPECT_LT(tail, median);
}

TEST(TrainLog, CsvRowCount) {
    testutil::TempDir tmp("csv");
    std::vector<LossLogRow> rows;
    for (int i = 1; i <= 7; ++i) rows.push_back({i, i <= 3 ? "phase1" : "phase2", 0.1, 0.2, 0.3,
                                                 0.5, 0.105});
    const std::string p = tmp.str() + "/train_log.csv";
    write_train_log_csv(p, rows);
    std::ifstream in(p);
    std::string line;
    int count = 0;
    std::getline(in, line);
    EXPECT_EQ(line, "step,phase,l_rec,l_attn,l_mask_attn,l_mattn,l_total");
    while (std::getline(in, line))
        if (!line.empty()) ++count;
    EXPECT_EQ(count, 7);
}

}  // namespace
