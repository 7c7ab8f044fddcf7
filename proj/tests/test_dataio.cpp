#include <gtest/gtest.h>

#include <fstream>

#include "maskdiff/dataio.hpp"
#include "maskdiff/model.hpp"
#include "support/testutil.hpp"

using namespace maskdiff;

namespace {

TEST(Png, RoundTripRgbAndGray) {
    testutil::TempDir tmp("png");
    Rng rng(1);
    ImageU8 img;
    img.w = 17;
    img.h = 9;
    img.channels = 3;
    img.v.resize(17 * 9 * 3);
    for (auto& x : img.v) x = static_cast<std::uint8_t>(rng.uniform_index(256));
    const std::string p = tmp.str() + "/a.png";
    write_png(p, img);
    ImageU8 back = read_png(p);
    EXPECT_EQ(back.w, 17);
    EXPECT_EQ(back.h, 9);
    EXPECT_EQ(back.channels, 3);
    EXPECT_EQ(back.v, img.v);

    ImageU8 gray;
    gray.w = 5;
    gray.h = 4;
    gray.channels = 1;
    gray.v = {0, 255, 10, 200, 0, 0, 255, 255, 3, 9, 27, 81, 1, 2, 4, 8, 16, 32, 64, 128};
    const std::string g = tmp.str() + "/g.png";
    write_png(g, gray);
    ImageU8 gback = read_png(g);
    EXPECT_EQ(gback.channels, 1);
    EXPECT_EQ(gback.v, gray.v);

    EXPECT_THROW(read_png(tmp.str() + "/missing.png"), io_error);
}

TEST(ToyScene, SquareFootprintIsExact) {
    SceneSpec spec;
    spec.canvas = 32;
    SubjectSpec sub;
    sub.shape = ShapeKind::Square;
    sub.color_name = "red";
    sub.color = {230, 40, 40};
    sub.min_scale = sub.max_scale = 7;
    spec.subjects = {sub};
    Rng rng(2);
    auto scene = make_toy_scene<double>(spec, rng);
    EXPECT_EQ(scene.masks[0].count_ones(), 49);
    EXPECT_EQ(scene.caption, "a photo of red square");
}

TEST(ToyScene, PixelsUnderMaskEqualSubjectColorExactly) {
    Rng rng(3);
    CorpusOptions opt;
    opt.canvas = 48;
    for (int trial = 0; trial < 5; ++trial) {
        auto spec = random_scene_spec(opt, rng);
        auto scene = make_toy_scene<double>(spec, rng);
        for (size_t si = 0; si < spec.subjects.size(); ++si) {
            const auto& color = spec.subjects[si].color;
            const auto& mask = scene.masks[static_cast<int>(si)];
            ASSERT_GT(mask.count_ones(), 0);
            for (int y = 0; y < 48; ++y)
                for (int x = 0; x < 48; ++x)
                    if (mask.at(y, x))
                        for (int c = 0; c < 3; ++c)
                            ASSERT_DOUBLE_EQ(
                                scene.image.at(c, y, x),
                                color[static_cast<size_t>(c)] / 255.0 * 2.0 - 1.0);
        }
    }
}

TEST(ToyScene, DisjointSubjectsWhenOverlapForbidden) {
    Rng rng(4);
    CorpusOptions opt;
    opt.min_subjects = opt.max_subjects = 2;
    for (int trial = 0; trial < 10; ++trial) {
        auto scene = make_toy_scene<double>(random_scene_spec(opt, rng), rng);
        for (size_t p = 0; p < scene.masks[0].v.size(); ++p)
            ASSERT_FALSE(scene.masks[0].v[p] && scene.masks[1].v[p]);
    }
}

TEST(ToyScene, RejectsImpossiblePlacement) {
    SceneSpec spec;
    spec.canvas = 16;
    for (int i = 0; i < 2; ++i) {
        SubjectSpec sub;
        sub.shape = ShapeKind::Square;
        sub.color_name = i ? "green" : "red";
        sub.color = i ? std::array<std::uint8_t, 3>{0, 200, 0}
                      : std::array<std::uint8_t, 3>{200, 0, 0};
        sub.min_scale = sub.max_scale = 14;  // two 14x14 squares cannot avoid overlap on 16x16
        spec.subjects.push_back(sub);
    }
    Rng rng(5);
    EXPECT_THROW(make_toy_scene<double>(spec, rng), validation_error);
    // Duplicate colors are rejected up front.
    spec.subjects[1].color = spec.subjects[0].color;
    EXPECT_THROW(make_toy_scene<double>(spec, rng), config_error);
}

TEST(ToyScene, PositionsUniformKsTest) {
    // Fixed shape size so the placement range is constant, then KS against
    // the discrete uniform CDF.
    SceneSpec spec;
    spec.canvas = 64;
    SubjectSpec sub;
    sub.shape = ShapeKind::Square;
    sub.color_name = "blue";
    sub.color = {50, 80, 235};
    sub.min_scale = sub.max_scale = 16;
    spec.subjects = {sub};
    Rng rng(6);
    const int n = 1000;
    const int range = 64 - 16 + 1;  // x0 in [0, 48]
    std::vector<int> xs, ys;
    for (int i = 0; i < n; ++i) {
        auto scene = make_toy_scene<double>(spec, rng);
        int min_x = 64, min_y = 64;
        const auto& m = scene.masks[0];
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (m.at(y, x)) {
                    min_x = std::min(min_x, x);
                    min_y = std::min(min_y, y);
                }
        xs.push_back(min_x);
        ys.push_back(min_y);
    }
    auto ks = [&](std::vector<int>& v) {
        std::sort(v.begin(), v.end());
        double d = 0;
        for (int i = 0; i < n; ++i) {
            const double emp = (i + 1.0) / n;
            const double cdf = (v[static_cast<size_t>(i)] + 1.0) / range;
            d = std::max(d, std::abs(emp - cdf));
        }
        return d;
    };
    EXPECT_LT(ks(xs), 0.065);  // ~1.63/sqrt(1000) at alpha = 0.01
    EXPECT_LT(ks(ys), 0.065);
}

TEST(LoadPair, ThresholdAndIdentity) {
    testutil::TempDir tmp("loadpair");
    Rng rng(7);
    // 64x64 RGB image and a {0,255} mask.
    ImageU8 img;
    img.w = img.h = 64;
    img.channels = 3;
    img.v.resize(64 * 64 * 3);
    for (auto& x : img.v) x = static_cast<std::uint8_t>(rng.uniform_index(256));
    const std::string ip = tmp.str() + "/img.png";
    write_png(ip, img);
    ImageU8 mask;
    mask.w = mask.h = 64;
    mask.channels = 1;
    mask.v.resize(64 * 64, 0);
    for (int i = 0; i < 64 * 64; ++i) mask.v[static_cast<size_t>(i)] = i % 3 == 0 ? 255 : 0;
    const std::string mp = tmp.str() + "/mask.png";
    write_png(mp, mask);

    auto [latent, masks] = load_pair<double>(ip, {mp}, 64);
    EXPECT_EQ(latent.shape, (std::vector<int>{3, 64, 64}));
    // Identity resize: pixel values map exactly.
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            for (int c = 0; c < 3; ++c)
                ASSERT_DOUBLE_EQ(latent.at(c, y, x),
                                 img.v[(static_cast<size_t>(y) * 64 + x) * 3 + c] / 255.0 * 2.0 -
                                     1.0);
    for (size_t i = 0; i < masks[0].v.size(); ++i)
        ASSERT_EQ(masks[0].v[i], mask.v[i] == 255 ? 1 : 0);
    EXPECT_EQ(masks[0].subject, 0);
}

TEST(LoadPair, CheckerboardStaysBinaryAfterDownsize) {
    testutil::TempDir tmp("checker");
    ImageU8 img;
    img.w = img.h = 512;
    img.channels = 3;
    img.v.assign(512 * 512 * 3, 128);
    const std::string ip = tmp.str() + "/img.png";
    write_png(ip, img);
    ImageU8 mask;
    mask.w = mask.h = 512;
    mask.channels = 1;
    mask.v.resize(512 * 512);
    for (int y = 0; y < 512; ++y)
        for (int x = 0; x < 512; ++x)
            mask.v[static_cast<size_t>(y) * 512 + x] = (y / 8 + x / 8) % 2 ? 255 : 0;
    const std::string mp = tmp.str() + "/mask.png";
    write_png(mp, mask);
    auto [latent, masks] = load_pair<double>(ip, {mp}, 64);
    for (auto v : masks[0].v) ASSERT_LE(v, 1);
    EXPECT_GT(masks[0].count_ones(), 0);
    EXPECT_LT(masks[0].count_ones(), 64 * 64);
}

TEST(LoadPair, Errors) {
    testutil::TempDir tmp("lperr");
    try {
        load_pair<double>(tmp.str() + "/nope.png", {}, 64);
        FAIL();
    } catch (const io_error& e) {
        EXPECT_NE(std::string(e.what()).find("nope.png"), std::string::npos);
    }
    ImageU8 img;
    img.w = img.h = 32;
    img.channels = 3;
    img.v.assign(32 * 32 * 3, 100);
    const std::string ip = tmp.str() + "/i.png";
    write_png(ip, img);
    // Mask that dies at the threshold.
    ImageU8 dark;
    dark.w = dark.h = 32;
    dark.channels = 1;
    dark.v.assign(32 * 32, 100);  // all below 128
    const std::string mp = tmp.str() + "/dark.png";
    write_png(mp, dark);
    try {
        load_pair<double>(ip, {mp}, 32);
        FAIL();
    } catch (const validation_error& e) {
        EXPECT_NE(std::string(e.what()).find("dark.png"), std::string::npos);
    }
}

TEST(Checkpoint, RoundTripBitExact) {
    testutil::TempDir tmp("ckpt");
    Rng rng(8);
    Checkpoint ck;
    ck.arrays["denoiser/a.w"] = Tensor<float>::randn({3, 4}, rng);
    ck.arrays["text/word_table"] = Tensor<float>::randn({7, 5}, rng);
    ck.arrays["maskenc/weight"] = Tensor<float>::randn({5, 16}, rng);
    ck.metadata["phase"] = "pretrain";
    ck.metadata["step_count"] = 42;
    ck.metadata["schedule"] = {{"steps", 10}, {"beta_start", 1e-4}, {"beta_end", 0.02}};
    const std::string p = tmp.str() + "/m.mckpt";
    save_checkpoint(ck, p);
    auto back = load_checkpoint(p);
    ASSERT_EQ(back.arrays.size(), 3u);
    for (const auto& [name, t] : ck.arrays) EXPECT_TRUE(back.arrays.at(name).bit_equal(t));
    EXPECT_EQ(back.metadata["phase"], "pretrain");
    EXPECT_EQ(back.metadata["step_count"], 42);
    // Saving again produces an identical file.
    const std::string p2 = tmp.str() + "/m2.mckpt";
    save_checkpoint(back, p2);
    std::ifstream f1(p, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
}

TEST(Checkpoint, TruncatedFileIsSchemaError) {
    testutil::TempDir tmp("trunc");
    Rng rng(9);
    Checkpoint ck;
    ck.arrays["w"] = Tensor<float>::randn({64}, rng);
    const std::string p = tmp.str() + "/m.mckpt";
    save_checkpoint(ck, p);
    // Chop off part of the data section.
    std::ifstream in(p, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
    out.close();
    EXPECT_THROW(load_checkpoint(p), schema_error);
    // Garbage magic.
    const std::string q = tmp.str() + "/g.mckpt";
    std::ofstream g(q, std::ios::binary);
    g << "not a checkpoint at all";
    g.close();
    EXPECT_THROW(load_checkpoint(q), schema_error);
}

TEST(Checkpoint, ModelRoundTripAndShapeMismatch) {
    testutil::TempDir tmp("model");
    DenoiserConfig dc;
    dc.image_size = 8;
    dc.base_channels = 8;
    dc.channel_multipliers = {1, 2};
    dc.attention_resolutions = {4, 2};
    dc.num_heads = 2;
    dc.cond_dim = 8;
    dc.time_embed_dim = 16;
    dc.aggregation_resolution = 4;
    ConditioningConfig cc;
    cc.dim = 8;
    cc.mask_grid = 4;
    cc.plain_words = {"a", "photo", "of"};
    cc.num_handles = 2;
    ScheduleParams sp;
    sp.steps = 10;
    Rng rng(10);
    ModelState<float> st(dc, cc, sp, rng);
    auto ck = st.to_checkpoint("phase1", 7, "digest123");
    const std::string p = tmp.str() + "/model.mckpt";
    save_checkpoint(ck, p);
    auto st2 = ModelState<float>::from_checkpoint(load_checkpoint(p));
    auto a = st.all_params();
    auto b = st2.all_params();
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i]->name, b[i]->name);
        ASSERT_TRUE(a[i]->value.bit_equal(b[i]->value)) << a[i]->name;
    }
    EXPECT_EQ(st2.schedule.steps, 10);
    EXPECT_EQ(st2.cond.vocab.handle_count, 2);

    // A checkpoint built for a different config reports the first offending
    // key by name.
    DenoiserConfig other = dc;
    other.base_channels = 16;
    Rng rng2(11);
    ModelState<float> wrong(other, cc, sp, rng2);
    try {
        wrong.load_arrays(ck);
        FAIL() << "expected schema_error";
    } catch (const schema_error& e) {
        EXPECT_NE(std::string(e.what()).find("denoiser/"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos);
    }
}

}  // namespace
