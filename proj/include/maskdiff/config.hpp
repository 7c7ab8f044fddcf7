#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "maskdiff/dataio.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/model.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff {

// Run configuration: built-in defaults, overlaid by a key=value file, then by
// command-line flags. Every effective value remembers its source and lands in
// resolved_config, which is itself a loadable config file.
class RunConfig {
  public:
    RunConfig() {
        for (const auto& [k, v] : defaults()) values_[k] = {v, "default"};
    }

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"seed", "0"},
            {"out", "out"},
            // model
            {"image_size", "64"},
            {"image_channels", "3"},
            {"base_channels", "32"},
            {"channel_multipliers", "1,2,4"},
            {"attention_resolutions", "16,8"},
            {"num_heads", "4"},
            {"cond_dim", "64"},
            {"time_embed_dim", "128"},
            {"norm_groups", "8"},
            {"aggregation_resolution", "16"},
            {"mask_grid", "16"},
            {"max_prompt_len", "16"},
            {"num_handles", "4"},
            // schedule
            {"schedule_steps", "400"},
            {"beta_start", "1e-4"},
            {"beta_end", "0.02"},
            // losses
            {"lambda_attn", "0.01"},
            {"lambda_m", "1.0"},
            {"mask_attn_loss", "true"},
            // two-phase fine-tune
            {"phase1_steps", "400"},
            {"phase2_steps", "400"},
            {"lr_phase1", "5e-4"},
            {"lr_phase2", "2e-6"},
            {"adam_beta1", "0.9"},
            {"adam_beta2", "0.99"},
            {"adam_eps", "1e-8"},
            {"weight_decay", "1e-8"},
            {"batch_size", "4"},
            // pretraining
            {"pretrain_steps", "1500"},
            {"pretrain_lr", "2e-4"},
            {"pretrain_batch", "4"},
            {"pretrain_drop_mask", "0.2"},
            {"pretrain_blank_mask", "0.1"},
            {"pretrain_uncond", "0.1"},
            // corpus
            {"corpus_scenes", "600"},
            {"corpus_min_subjects", "1"},
            {"corpus_max_subjects", "2"},
            {"corpus_min_scale", "12"},
            {"corpus_max_scale", "24"},
            {"corpus_dir", ""},
            // paths and per-command inputs
            {"init_checkpoint", ""},
            {"checkpoint", ""},
            {"image", ""},
            {"masks", ""},
            {"class_words", ""},
            {"prompt", ""},
            {"gen_steps", "0"},
            {"guidance", "1.0"},
            {"gen_mask", ""},
            {"output_size", "0"},
            {"inspect_t", "-1"},
            {"eval_color", "230,40,40"},
            {"eval_threshold", "0.75"},
            {"progress_every", "100"},
        };
        return d;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw config_error("cannot open config file '" + path + "'");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                if (trim(line).empty()) continue;
                throw config_error(path + ":" + std::to_string(lineno) +
                                   ": expected 'key = value'");
            }
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), "file");
        }
    }

    void set(const std::string& key, const std::string& value, const std::string& source) {
        if (!values_.count(key)) throw config_error("unknown configuration key '" + key + "'");
        values_[key] = {value, source};
    }

    void set_flag(const std::string& key, const std::string& value) { set(key, value, "flag"); }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw config_error("unknown configuration key '" + key + "'");
        return it->second.value;
    }

    int get_int(const std::string& key) const {
        try {
            size_t pos = 0;
            const int v = std::stoi(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("configuration key '" + key + "' is not an integer: '" +
                               get(key) + "'");
        }
    }

    std::uint64_t get_u64(const std::string& key) const {
        try {
            return std::stoull(get(key));
        } catch (const std::exception&) {
            throw config_error("configuration key '" + key + "' is not an unsigned integer");
        }
    }

    double get_double(const std::string& key) const {
        try {
            size_t pos = 0;
            const double v = std::stod(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("");
            return v;
        } catch (const std::exception&) {
            throw config_error("configuration key '" + key + "' is not a number: '" + get(key) +
                               "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw config_error("configuration key '" + key + "' is not a boolean: '" + v + "'");
    }

    std::vector<int> get_int_list(const std::string& key) const {
        std::vector<int> out;
        for (const auto& part : split_list(get(key))) {
            try {
                out.push_back(std::stoi(part));
            } catch (const std::exception&) {
                throw config_error("configuration key '" + key + "' has a non-integer entry '" +
                                   part + "'");
            }
        }
        return out;
    }

    std::vector<std::string> get_str_list(const std::string& key) const {
        return split_list(get(key));
    }

    // FNV-1a over the sorted effective key=value pairs.
    std::string digest() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& [k, v] : values_) {
            for (char c : k + "=" + v.value + "\n") {
                h ^= static_cast<unsigned char>(c);
                h *= 1099511628211ull;
            }
        }
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    void write_resolved(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw io_error("cannot create '" + path + "'");
        out << "# resolved configuration (digest " << digest() << ")\n";
        for (const auto& [k, v] : values_)
            out << k << " = " << v.value << "  # from " << v.source << "\n";
    }

    // ------------------------------------------------------------------
    // Materialized views
    // ------------------------------------------------------------------

    DenoiserConfig denoiser_config() const {
        DenoiserConfig c;
        c.image_channels = get_int("image_channels");
        c.image_size = get_int("image_size");
        c.base_channels = get_int("base_channels");
        c.channel_multipliers = get_int_list("channel_multipliers");
        c.attention_resolutions = get_int_list("attention_resolutions");
        c.num_heads = get_int("num_heads");
        c.cond_dim = get_int("cond_dim");
        c.time_embed_dim = get_int("time_embed_dim");
        c.norm_groups = get_int("norm_groups");
        c.aggregation_resolution = get_int("aggregation_resolution");
        return c;
    }

    ConditioningConfig conditioning_config() const {
        ConditioningConfig c;
        c.dim = get_int("cond_dim");
        c.mask_grid = get_int("mask_grid");
        c.max_prompt_len = get_int("max_prompt_len");
        c.plain_words = toy_vocabulary_words();
        c.num_handles = get_int("num_handles");
        return c;
    }

    ScheduleParams schedule_params() const {
        ScheduleParams p;
        p.steps = get_int("schedule_steps");
        p.beta_start = get_double("beta_start");
        p.beta_end = get_double("beta_end");
        return p;
    }

    TrainConfig train_config() const {
        TrainConfig c;
        c.phase1_steps = get_int("phase1_steps");
        c.phase2_steps = get_int("phase2_steps");
        c.lr_phase1 = get_double("lr_phase1");
        c.lr_phase2 = get_double("lr_phase2");
        c.adam_beta1 = get_double("adam_beta1");
        c.adam_beta2 = get_double("adam_beta2");
        c.adam_eps = get_double("adam_eps");
        c.weight_decay = get_double("weight_decay");
        c.batch_size = get_int("batch_size");
        c.seed = get_u64("seed");
        c.loss_weights.lambda_attn = get_double("lambda_attn");
        c.loss_weights.lambda_m = get_double("lambda_m");
        c.mask_attn_loss = get_bool("mask_attn_loss");
        c.pretrain_steps = get_int("pretrain_steps");
        c.pretrain_lr = get_double("pretrain_lr");
        c.pretrain_batch = get_int("pretrain_batch");
        c.pretrain_drop_mask = get_double("pretrain_drop_mask");
        c.pretrain_blank_mask = get_double("pretrain_blank_mask");
        c.pretrain_uncond = get_double("pretrain_uncond");
        c.progress_every = get_int("progress_every");
        c.validate();
        return c;
    }

    CorpusOptions corpus_options() const {
        CorpusOptions o;
        o.canvas = get_int("image_size");
        o.min_subjects = get_int("corpus_min_subjects");
        o.max_subjects = get_int("corpus_max_subjects");
        o.min_scale = get_int("corpus_min_scale");
        o.max_scale = get_int("corpus_max_scale");
        if (o.min_subjects < 1 || o.max_subjects < o.min_subjects)
            throw config_error("corpus subject range is invalid");
        if (o.min_scale < 3 || o.max_scale < o.min_scale || o.max_scale > o.canvas)
            throw config_error("corpus scale range is invalid");
        return o;
    }

  private:
    struct Entry {
        std::string value;
        std::string source;
    };

    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream is(s);
        while (std::getline(is, cur, ',')) {
            cur = trim(cur);
            if (!cur.empty()) out.push_back(cur);
        }
        return out;
    }

    std::map<std::string, Entry> values_;
};

}  // namespace maskdiff
