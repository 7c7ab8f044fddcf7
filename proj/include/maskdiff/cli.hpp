#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "maskdiff/config.hpp"
#include "maskdiff/generation.hpp"
#include "maskdiff/model.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff::cli {

using real_t = float;

namespace detail {

inline std::string one_line(std::string s) {
    for (auto& c : s)
        if (c == '\n' || c == '\r') c = ';';
    return s;
}

inline void report_error(const std::string& kind, const std::string& msg) {
    std::cerr << "error: " << kind << ": " << one_line(msg) << std::endl;
}

struct CommonFlags {
    std::string config_path;
    std::string seed, out, steps, prompt, lambda_m, guidance;
    bool no_mask_attn = false;
    std::vector<std::string> masks;
};

inline void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "configuration file (key = value lines)");
    cmd->add_option("--seed", f.seed, "random seed");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--steps", f.steps, "sampling steps (generation)");
    cmd->add_option("--mask", f.masks, "mask PNG path or 'blank' (repeatable)");
    cmd->add_option("--prompt", f.prompt, "text prompt");
    cmd->add_option("--lambda-m", f.lambda_m, "mask cross-attention loss weight");
    cmd->add_flag("--no-mask-attn-loss", f.no_mask_attn,
                  "drop the mask cross-attention loss term");
    cmd->add_option("--guidance", f.guidance, "classifier-free guidance scale");
}

inline RunConfig build_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg.load_file(f.config_path);
    if (!f.seed.empty()) cfg.set_flag("seed", f.seed);
    if (!f.out.empty()) cfg.set_flag("out", f.out);
    if (!f.steps.empty()) cfg.set_flag("gen_steps", f.steps);
    if (!f.prompt.empty()) cfg.set_flag("prompt", f.prompt);
    if (!f.lambda_m.empty()) cfg.set_flag("lambda_m", f.lambda_m);
    if (f.no_mask_attn) cfg.set_flag("mask_attn_loss", "false");
    if (!f.guidance.empty()) cfg.set_flag("guidance", f.guidance);
    if (!f.masks.empty()) {
        std::string joined;
        for (size_t i = 0; i < f.masks.size(); ++i) {
            if (i) joined += ",";
            joined += f.masks[i];
        }
        cfg.set_flag("gen_mask", joined);
    }
    return cfg;
}

inline std::string prepare_out_dir(const RunConfig& cfg) {
    const std::string out = cfg.get("out");
    std::filesystem::create_directories(out);
    cfg.write_resolved(out + "/resolved_config");
    return out;
}

inline ModelState<real_t> model_from_config(const RunConfig& cfg) {
    Rng rng(cfg.get_u64("seed"));
    return ModelState<real_t>(cfg.denoiser_config(), cfg.conditioning_config(),
                              cfg.schedule_params(), rng);
}

inline ModelState<real_t> model_from_checkpoint_path(const std::string& path) {
    if (path.empty()) throw config_error("key 'checkpoint' must name a checkpoint file");
    return ModelState<real_t>::from_checkpoint(load_checkpoint(path));
}

inline std::vector<ToyScene<real_t>> load_corpus(const std::string& dir) {
    const std::string manifest_path = dir + "/corpus.json";
    std::ifstream in(manifest_path);
    if (!in) throw io_error("cannot open corpus manifest '" + manifest_path + "'");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception&) {
        throw schema_error("corpus manifest '" + manifest_path + "' is not valid JSON");
    }
    std::vector<ToyScene<real_t>> corpus;
    for (const auto& entry : manifest["scenes"]) {
        ToyScene<real_t> scene;
        const std::string img_path = dir + "/" + entry["image"].get<std::string>();
        ImageU8 img = read_png(img_path);
        if (img.channels != 3) throw validation_error("'" + img_path + "' is not RGB");
        scene.image = image_to_tensor<real_t>(img);
        scene.caption = entry["caption"].get<std::string>();
        int subject = 0;
        for (const auto& mp : entry["masks"]) {
            BinaryMask m = load_mask_png(dir + "/" + mp.get<std::string>(), img.h);
            m.subject = subject;
            scene.masks[subject] = m;
            ++subject;
        }
        corpus.push_back(std::move(scene));
    }
    if (corpus.empty()) throw validation_error("corpus '" + dir + "' has no scenes");
    return corpus;
}

inline std::vector<BinaryMask> masks_from_config(const RunConfig& cfg, int model_size) {
    std::vector<BinaryMask> masks;
    for (const auto& spec : cfg.get_str_list("gen_mask")) {
        if (spec == "blank")
            masks.push_back(blank_mask(model_size));
        else
            masks.push_back(load_mask_png(spec, model_size));
    }
    return masks;
}

inline FinetuneSource<real_t> source_from_config(const RunConfig& cfg, int image_size) {
    const std::string image = cfg.get("image");
    const auto mask_paths = cfg.get_str_list("masks");
    if (image.empty()) throw config_error("key 'image' must name the source image PNG");
    if (mask_paths.empty())
        throw config_error("key 'masks' must list at least one subject mask PNG");
    auto [latent, masks] = load_pair<real_t>(image, mask_paths, image_size);
    return FinetuneSource<real_t>{std::move(latent), std::move(masks)};
}

// ------------------------------------------------------------------
// Commands
// ------------------------------------------------------------------

inline int cmd_make_data(const RunConfig& cfg) {
    const std::string out = prepare_out_dir(cfg);
    std::filesystem::create_directories(out + "/scenes");
    const auto opt = cfg.corpus_options();
    const int n = cfg.get_int("corpus_scenes");
    Rng rng(cfg.get_u64("seed"));
    nlohmann::json scenes = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        auto scene = make_toy_scene<real_t>(random_scene_spec(opt, rng), rng);
        char name[64];
        std::snprintf(name, sizeof(name), "scenes/scene_%05d.png", i);
        write_png(out + "/" + name, tensor_to_image(scene.image));
        nlohmann::json entry;
        entry["image"] = name;
        entry["caption"] = scene.caption;
        nlohmann::json mask_list = nlohmann::json::array();
        for (const auto& [subject, m] : scene.masks) {
            char mname[64];
            std::snprintf(mname, sizeof(mname), "scenes/scene_%05d_mask_%d.png", i, subject);
            ImageU8 mi;
            mi.w = m.w;
            mi.h = m.h;
            mi.channels = 1;
            mi.v.resize(m.v.size());
            for (size_t j = 0; j < m.v.size(); ++j) mi.v[j] = m.v[j] ? 255 : 0;
            write_png(out + "/" + mname, mi);
            mask_list.push_back(mname);
        }
        entry["masks"] = mask_list;
        scenes.push_back(entry);
    }
    nlohmann::json manifest;
    manifest["scenes"] = scenes;
    std::ofstream mf(out + "/corpus.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    std::printf("wrote %d scenes to %s\n", n, out.c_str());
    return 0;
}

inline int cmd_pretrain(const RunConfig& cfg) {
    const std::string out = prepare_out_dir(cfg);
    const std::string corpus_dir = cfg.get("corpus_dir");
    if (corpus_dir.empty())
        throw config_error("key 'corpus_dir' must point at a make-data output directory");
    auto corpus = load_corpus(corpus_dir);
    auto st = model_from_config(cfg);
    if (corpus[0].image.dim(1) != st.dcfg.image_size)
        throw config_error("corpus image size " + std::to_string(corpus[0].image.dim(1)) +
                           " does not match image_size " + std::to_string(st.dcfg.image_size));
    auto tc = cfg.train_config();
    std::vector<LossLogRow> log;
    auto ck = pretrain(st, corpus, tc, &log);
    ck.metadata["config_digest"] = cfg.digest();
    save_checkpoint(ck, out + "/base.mckpt");
    write_train_log_csv(out + "/pretrain_log.csv", log);
    std::printf("pretrained %d steps; checkpoint at %s/base.mckpt\n", tc.pretrain_steps,
                out.c_str());
    return 0;
}

inline int cmd_finetune(const RunConfig& cfg) {
    const std::string out = prepare_out_dir(cfg);
    const std::string init = cfg.get("init_checkpoint");
    ModelState<real_t> st = init.empty() ? model_from_config(cfg)
                                         : ModelState<real_t>::from_checkpoint(
                                               load_checkpoint(init));
    auto source = source_from_config(cfg, st.dcfg.image_size);
    if (static_cast<int>(source.masks.size()) > st.ccfg.num_handles)
        throw config_error("source has " + std::to_string(source.masks.size()) +
                           " subjects but the model only has " +
                           std::to_string(st.ccfg.num_handles) + " handles");
    init_handles(st, cfg.get_str_list("class_words"));
    auto tc = cfg.train_config();
    std::vector<LossLogRow> log;
    auto ck1 = run_phase1(st, source, tc, &log);
    ck1.metadata["config_digest"] = cfg.digest();
    save_checkpoint(ck1, out + "/phase1.mckpt");
    auto ck2 = run_phase2(st, source, tc, &log);
    ck2.metadata["config_digest"] = cfg.digest();
    save_checkpoint(ck2, out + "/final.mckpt");
    write_train_log_csv(out + "/train_log.csv", log);
    std::printf("finetuned %d+%d steps; final checkpoint at %s/final.mckpt\n", tc.phase1_steps,
                tc.phase2_steps, out.c_str());
    return 0;
}

inline int cmd_generate(const RunConfig& cfg) {
    const std::string out = prepare_out_dir(cfg);
    auto st = model_from_checkpoint_path(cfg.get("checkpoint"));
    GenerationRequest req;
    req.prompt = cfg.get("prompt");
    req.steps = cfg.get_int("gen_steps");
    req.seed = cfg.get_u64("seed");
    req.guidance_scale = cfg.get_double("guidance");
    req.output_size = cfg.get_int("output_size");
    req.masks = masks_from_config(cfg, st.dcfg.image_size);
    auto result = generate(st, req);
    write_png(out + "/generated.png", tensor_to_image(result.image));
    std::ofstream meta(out + "/generation.json", std::ios::trunc);
    meta << result.metadata.dump(2) << "\n";
    std::printf("wrote %s/generated.png\n", out.c_str());
    return 0;
}

inline int cmd_inspect_attention(const RunConfig& cfg) {
    const std::string out = prepare_out_dir(cfg);
    auto st = model_from_checkpoint_path(cfg.get("checkpoint"));
    const int size = st.dcfg.image_size;
    std::vector<AttentionRecord<real_t>> records;
    ConditioningBundle<real_t> bundle;
    if (!cfg.get("image").empty()) {
        // Inspect on a provided image at a chosen timestep.
        ImageU8 img = read_png(cfg.get("image"));
        if (img.channels != 3) throw validation_error("inspect image must be RGB");
        auto latent = bilinear_resize(image_to_tensor<real_t>(img), size, size);
        int t = cfg.get_int("inspect_t");
        if (t < 0) t = st.schedule.steps / 2;
        if (t >= st.schedule.steps) throw argument_error("inspect_t beyond schedule");
        ag::NoGrad ng;
        st.denoiser.bind(false);
        st.cond.bind(false, false, false);
        Rng rng(cfg.get_u64("seed"));
        auto eps = Tensor<real_t>::randn(latent.shape, rng);
        auto z_t = add_noise(latent, eps, t, st.schedule);
        auto text = st.cond.encode_prompt(cfg.get("prompt"));
        std::vector<MaskEmbedding<real_t>> mask_tokens;
        for (const auto& m : masks_from_config(cfg, size))
            mask_tokens.push_back(st.cond.encode_mask(m));
        bundle = st.cond.assemble_bundle(text, mask_tokens);
        auto pred = st.denoiser.denoise(z_t, t, bundle, true);
        records = pred.attention;
    } else {
        GenerationRequest req;
        req.prompt = cfg.get("prompt");
        req.steps = cfg.get_int("gen_steps");
        req.seed = cfg.get_u64("seed");
        req.guidance_scale = cfg.get_double("guidance");
        req.masks = masks_from_config(cfg, size);
        auto result = generate(st, req, /*capture_attention=*/true);
        records = result.attention;
        bundle = result.bundle;
        write_png(out + "/generated.png", tensor_to_image(result.image));
    }
    const int agg = st.dcfg.aggregation_resolution;
    for (int pos = 0; pos < bundle.length(); ++pos) {
        auto map = aggregate_attention(records, pos, agg, {size, size});
        const char* kind = bundle.links[static_cast<size_t>(pos)].kind == TokenKind::Handle
                               ? "handle"
                               : bundle.links[static_cast<size_t>(pos)].kind == TokenKind::MaskToken
                                     ? "mask"
                                     : "text";
        char name[64];
        std::snprintf(name, sizeof(name), "attn_%02d_%s.png", pos, kind);
        write_png(out + "/" + name, map_to_gray_image(map));
    }
    std::printf("wrote %d attention maps to %s\n", bundle.length(), out.c_str());
    return 0;
}

inline int cmd_eval_iou(const RunConfig& cfg) {
    const std::string out = prepare_out_dir(cfg);
    const std::string image_path = cfg.get("image");
    if (image_path.empty()) throw config_error("key 'image' must name the generated PNG");
    const auto mask_specs = cfg.get_str_list("gen_mask");
    if (mask_specs.size() != 1 || mask_specs[0] == "blank")
        throw config_error("eval-iou needs exactly one --mask PNG path as the target");
    ImageU8 img = read_png(image_path);
    if (img.channels != 3) throw validation_error("'" + image_path + "' is not RGB");
    auto tensor = image_to_tensor<real_t>(img);
    BinaryMask target = load_mask_png(mask_specs[0], img.h);
    const auto rgb255 = cfg.get_int_list("eval_color");
    if (rgb255.size() != 3) throw config_error("eval_color must be 'r,g,b' with 0-255 values");
    SubjectColorSpec spec;
    for (int c = 0; c < 3; ++c)
        spec.rgb[static_cast<size_t>(c)] = rgb255[static_cast<size_t>(c)] / 255.0 * 2.0 - 1.0;
    spec.threshold = cfg.get_double("eval_threshold");
    const double iou = segment_and_iou(tensor, spec, target);
    std::printf("iou=%.6f\n", iou);
    return 0;
}

inline int cmd_ablate(const RunConfig& cfg) {
    // The paper's comparison: one fine-tune with the mask cross-attention
    // term, one without, same seed and budget.
    const std::string out = prepare_out_dir(cfg);
    const std::string init = cfg.get("init_checkpoint");
    auto build_state = [&]() {
        return init.empty() ? model_from_config(cfg)
                            : ModelState<real_t>::from_checkpoint(load_checkpoint(init));
    };
    auto source_probe = build_state();
    auto source = source_from_config(cfg, source_probe.dcfg.image_size);

    nlohmann::json summary;
    double fractions[2] = {0, 0};
    const char* names[2] = {"with_maskattn", "without_maskattn"};
    for (int mode = 0; mode < 2; ++mode) {
        auto st = build_state();
        init_handles(st, cfg.get_str_list("class_words"));
        auto tc = cfg.train_config();
        tc.mask_attn_loss = mode == 0 && tc.mask_attn_loss;
        const std::string sub = out + "/" + names[mode];
        std::filesystem::create_directories(sub);
        std::vector<LossLogRow> log;
        auto ck1 = run_phase1(st, source, tc, &log);
        save_checkpoint(ck1, sub + "/phase1.mckpt");
        auto ck2 = run_phase2(st, source, tc, &log);
        save_checkpoint(ck2, sub + "/final.mckpt");
        write_train_log_csv(sub + "/train_log.csv", log);
        fractions[mode] = attention_inside_fraction(st, source, cfg.get_u64("seed") + 777);
        summary[names[mode]] = {{"attention_inside_fraction", fractions[mode]}};
        std::printf("%s: attention_inside_fraction=%.4f\n", names[mode], fractions[mode]);
    }
    summary["margin"] = fractions[0] - fractions[1];
    std::ofstream sf(out + "/ablation_summary.json", std::ios::trunc);
    sf << summary.dump(2) << "\n";
    std::printf("margin=%.4f (with minus without)\n", fractions[0] - fractions[1]);
    return 0;
}

}  // namespace detail

// Entry point shared by the binary and the tests. Exit codes: 0 success,
// 2 configuration/usage problems, 1 runtime failures.
inline int run_command(const std::vector<std::string>& args) {
    CLI::App app{"mask-conditional toy diffusion pipeline"};
    app.require_subcommand(1);
    detail::CommonFlags flags;
    const char* names[] = {"make-data", "pretrain",  "finetune", "generate",
                           "inspect-attention", "eval-iou", "ablate"};
    for (const char* n : names) detail::add_common(app.add_subcommand(n), flags);

    // CLI11 wants argv-style reversed tokens.
    std::vector<std::string> tokens(args.rbegin(), args.rend());
    try {
        app.parse(tokens);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help() << std::endl;
        return 0;
    } catch (const CLI::ParseError& e) {
        detail::report_error("usage", e.what());
        std::cerr << detail::one_line(app.help()) << std::endl;
        return 2;
    }

    try {
        RunConfig cfg = detail::build_config(flags);
        if (app.got_subcommand("make-data")) return detail::cmd_make_data(cfg);
        if (app.got_subcommand("pretrain")) return detail::cmd_pretrain(cfg);
        if (app.got_subcommand("finetune")) return detail::cmd_finetune(cfg);
        if (app.got_subcommand("generate")) return detail::cmd_generate(cfg);
        if (app.got_subcommand("inspect-attention")) return detail::cmd_inspect_attention(cfg);
        if (app.got_subcommand("eval-iou")) return detail::cmd_eval_iou(cfg);
        if (app.got_subcommand("ablate")) return detail::cmd_ablate(cfg);
        detail::report_error("usage", "no subcommand given");
        return 2;
    } catch (const config_error& e) {
        detail::report_error("config", e.what());
        return 2;
    } catch (const std::exception& e) {
        detail::report_error("runtime", e.what());
        return 1;
    }
}

}  // namespace maskdiff::cli
