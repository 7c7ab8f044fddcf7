#include <gtest/gtest.h>

#include <fstream>

#include "maskdiff/cli.hpp"
#include "support/testutil.hpp"

using maskdiff::cli::run_command;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int count_data_rows(const std::string& csv) {
    int n = -1;  // skip header
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t nl = csv.find('\n', pos);
        if (nl == std::string::npos) nl = csv.size();
        if (nl > pos) ++n;
        pos = nl + 1;
    }
    return n;
}

void write_tiny_config(const std::string& path, const std::string& extra = "") {
    std::ofstream out(path, std::ios::trunc);
    out << "image_size = 16\n"
           "base_channels = 8\n"
           "channel_multipliers = 1,2\n"
           "attention_resolutions = 8,4\n"
           "num_heads = 2\n"
           "cond_dim = 16\n"
           "time_embed_dim = 16\n"
           "aggregation_resolution = 8\n"
           "mask_grid = 4\n"
           "num_handles = 2\n"
           "schedule_steps = 12\n"
           "corpus_scenes = 6\n"
           "corpus_min_scale = 5\n"
           "corpus_max_scale = 8\n"
           "pretrain_steps = 6\n"
           "pretrain_batch = 2\n"
           "phase1_steps = 3\n"
           "phase2_steps = 4\n"
           "batch_size = 2\n"
           "progress_every = 0\n"
        << extra;
}

TEST(Cli, UnknownSubcommandIsUsageError) {
    EXPECT_EQ(run_command({"frobnicate"}), 2);
    EXPECT_EQ(run_command({}), 2);
}

TEST(Cli, UnknownConfigKeyRejected) {
    testutil::TempDir tmp("clikey");
    const std::string cfg = tmp.str() + "/bad.cfg";
    std::ofstream(cfg) << "image_size = 16\nnot_a_real_key = 3\n";
    EXPECT_EQ(run_command({"make-data", "--config", cfg, "--out", tmp.str() + "/o"}), 2);
}

TEST(Cli, MissingConfigFileRejected) {
    testutil::TempDir tmp("climiss");
    EXPECT_EQ(run_command({"make-data", "--config", tmp.str() + "/nope.cfg"}), 2);
}

TEST(Cli, MalformedConfigLineRejected) {
    testutil::TempDir tmp("climal");
    const std::string cfg = tmp.str() + "/bad.cfg";
    std::ofstream(cfg) << "image_size 16\n";
    EXPECT_EQ(run_command({"pretrain", "--config", cfg}), 2);
}

TEST(Cli, FullPipelineOnTinyFixture) {
    testutil::TempDir tmp("clipipe");
    const std::string dir = tmp.str();
    const std::string cfg = dir + "/run.cfg";
    write_tiny_config(cfg);

    // make-data
    ASSERT_EQ(run_command({"make-data", "--config", cfg, "--out", dir + "/data", "--seed", "3"}),
              0);
    ASSERT_TRUE(std::filesystem::exists(dir + "/data/corpus.json"));
    ASSERT_TRUE(std::filesystem::exists(dir + "/data/scenes/scene_00000.png"));
    ASSERT_TRUE(std::filesystem::exists(dir + "/data/resolved_config"));

    // pretrain
    write_tiny_config(cfg, "corpus_dir = " + dir + "/data\n");
    ASSERT_EQ(run_command({"pretrain", "--config", cfg, "--out", dir + "/pre", "--seed", "3"}), 0);
    ASSERT_TRUE(std::filesystem::exists(dir + "/pre/base.mckpt"));
    ASSERT_TRUE(std::filesystem::exists(dir + "/pre/pretrain_log.csv"));

    // finetune on the first corpus scene
    std::string masks = dir + "/data/scenes/scene_00000_mask_0.png";
    const std::string mask1 = dir + "/data/scenes/scene_00000_mask_1.png";
    if (std::filesystem::exists(mask1)) masks += "," + mask1;
    write_tiny_config(cfg, "corpus_dir = " + dir + "/data\n" +
                               "init_checkpoint = " + dir + "/pre/base.mckpt\n" +
                               "image = " + dir + "/data/scenes/scene_00000.png\n" +
                               "masks = " + masks + "\n");
    ASSERT_EQ(run_command({"finetune", "--config", cfg, "--out", dir + "/ft", "--seed", "4"}), 0);
    ASSERT_TRUE(std::filesystem::exists(dir + "/ft/phase1.mckpt"));
    ASSERT_TRUE(std::filesystem::exists(dir + "/ft/final.mckpt"));
    const std::string log = read_file(dir + "/ft/train_log.csv");
    EXPECT_EQ(count_data_rows(log), 3 + 4);
    EXPECT_NE(log.find("phase1"), std::string::npos);
    EXPECT_NE(log.find("phase2"), std::string::npos);

    // generate twice with the same seed: bit-identical output files
    write_tiny_config(cfg, "checkpoint = " + dir + "/ft/final.mckpt\n");
    ASSERT_EQ(run_command({"generate", "--config", cfg, "--out", dir + "/g1", "--seed", "9",
                           "--prompt", "a photo of <asset0>", "--mask", "blank"}),
              0);
    ASSERT_EQ(run_command({"generate", "--config", cfg, "--out", dir + "/g2", "--seed", "9",
                           "--prompt", "a photo of <asset0>", "--mask", "blank"}),
              0);
    EXPECT_EQ(read_file(dir + "/g1/generated.png"), read_file(dir + "/g2/generated.png"));
    EXPECT_FALSE(read_file(dir + "/g1/generated.png").empty());

    // generate with a shaped mask file exercises the non-blank path
    ASSERT_EQ(run_command({"generate", "--config", cfg, "--out", dir + "/g3", "--seed", "9",
                           "--prompt", "a photo of <asset0>", "--mask",
                           dir + "/data/scenes/scene_00000_mask_0.png"}),
              0);
    ASSERT_TRUE(std::filesystem::exists(dir + "/g3/generated.png"));
    // The conditioning layout recorded in the metadata shows the mask token.
    const std::string meta = read_file(dir + "/g3/generation.json");
    EXPECT_NE(meta.find("\"masks\""), std::string::npos);

    // inspect-attention dumps one map per conditioning token
    ASSERT_EQ(run_command({"inspect-attention", "--config", cfg, "--out", dir + "/insp",
                           "--seed", "4", "--prompt", "a photo of <asset0>", "--mask", "blank"}),
              0);
    EXPECT_TRUE(std::filesystem::exists(dir + "/insp/attn_00_text.png"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/insp/attn_03_handle.png"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/insp/attn_04_mask.png"));

    // eval-iou prints a parsable line
    testing::internal::CaptureStdout();
    write_tiny_config(cfg, "image = " + dir + "/g1/generated.png\n");
    ASSERT_EQ(run_command({"eval-iou", "--config", cfg, "--out", dir + "/ev", "--mask",
                           dir + "/data/scenes/scene_00000_mask_0.png"}),
              0);
    const std::string out = testing::internal::GetCapturedStdout();
    EXPECT_EQ(out.rfind("iou=", 0), 0u);
    const double iou = std::stod(out.substr(4));
    EXPECT_GE(iou, 0.0);
    EXPECT_LE(iou, 1.0);
}

TEST(Cli, ResolvedConfigRecordsSources) {
    testutil::TempDir tmp("clisrc");
    const std::string dir = tmp.str();
    const std::string cfg = dir + "/run.cfg";
    write_tiny_config(cfg, "lambda_m = 0.5\n");
    ASSERT_EQ(run_command({"make-data", "--config", cfg, "--out", dir + "/d", "--seed", "1",
                           "--lambda-m", "0.25"}),
              0);
    const std::string resolved = read_file(dir + "/d/resolved_config");
    // flag > file > default, each recorded with its source.
    EXPECT_NE(resolved.find("lambda_m = 0.25  # from flag"), std::string::npos);
    EXPECT_NE(resolved.find("image_size = 16  # from file"), std::string::npos);
    EXPECT_NE(resolved.find("lambda_attn = 0.01  # from default"), std::string::npos);

    // The resolved config is itself loadable and reproduces the same digest.
    maskdiff::RunConfig reload;
    reload.load_file(dir + "/d/resolved_config");
    EXPECT_EQ(reload.get("lambda_m"), "0.25");
    EXPECT_EQ(reload.get("image_size"), "16");
}

TEST(Cli, AblateWritesBothRunsAndSummary) {
    testutil::TempDir tmp("cliabl");
    const std::string dir = tmp.str();
    const std::string cfg = dir + "/run.cfg";
    write_tiny_config(cfg);
    ASSERT_EQ(run_command({"make-data", "--config", cfg, "--out", dir + "/data", "--seed", "8"}),
              0);
    std::string masks = dir + "/data/scenes/scene_00001_mask_0.png";
    write_tiny_config(cfg, "image = " + dir + "/data/scenes/scene_00001.png\nmasks = " + masks +
                               "\n");
    ASSERT_EQ(run_command({"ablate", "--config", cfg, "--out", dir + "/ab", "--seed", "2"}), 0);
    EXPECT_TRUE(std::filesystem::exists(dir + "/ab/with_maskattn/final.mckpt"));
    EXPECT_TRUE(std::filesystem::exists(dir + "/ab/without_maskattn/final.mckpt"));
    const std::string summary = read_file(dir + "/ab/ablation_summary.json");
    EXPECT_NE(summary.find("attention_inside_fraction"), std::string::npos);
    EXPECT_NE(summary.find("margin"), std::string::npos);
    // The without-run's log must show a zero mask-attention column.
    const std::string wlog = read_file(dir + "/ab/without_maskattn/train_log.csv");
    EXPECT_NE(wlog.find(",0,"), std::string::npos);
}

TEST(Cli, GenerateRequiresCheckpoint) {
    testutil::TempDir tmp("clickpt");
    const std::string cfg = tmp.str() + "/c.cfg";
    write_tiny_config(cfg);
    EXPECT_EQ(run_command({"generate", "--config", cfg, "--out", tmp.str() + "/g", "--prompt",
                           "a photo of <asset0>"}),
              2);
}

}  // namespace
