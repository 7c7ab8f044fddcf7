#pragma once

#include <string>
#include <vector>

#include "maskdiff/conditioning.hpp"
#include "maskdiff/dataio.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct ScheduleParams {
    int steps = 400;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

// Everything a run needs to denoise: network, text/handle tables, mask
// encoder and the noise schedule. Value semantics; copy the state to use it
// from another thread.
template <typename T>
struct ModelState {
    DenoiserConfig dcfg;
    ConditioningConfig ccfg;
    ScheduleParams sched_params;

    Denoiser<T> denoiser;
    ConditioningModel<T> cond;
    NoiseSchedule<T> schedule;

    ModelState() = default;

    ModelState(const DenoiserConfig& dc, const ConditioningConfig& cc, const ScheduleParams& sp,
               Rng& rng)
        : dcfg(dc), ccfg(cc), sched_params(sp) {
        if (dc.cond_dim != cc.dim)
            throw config_error("model: denoiser cond_dim differs from conditioning dim");
        denoiser = Denoiser<T>(dc, rng);
        cond = ConditioningModel<T>(cc, rng);
        schedule = build_schedule<T>(sp.steps, sp.beta_start, sp.beta_end);
    }

    ParamRefs<T> all_params() {
        ParamRefs<T> refs;
        denoiser.collect_params(refs);
        cond.collect_params(refs);
        return refs;
    }

    // ------------------------------------------------------------------
    // Checkpoint mapping
    // ------------------------------------------------------------------

    Checkpoint to_checkpoint(const std::string& phase, long step_count,
                             const std::string& config_digest) {
        Checkpoint ck;
        for (Param<T>* p : all_params()) ck.arrays[p->name] = p->value.template cast<float>();
        ck.metadata["phase"] = phase;
        ck.metadata["step_count"] = step_count;
        ck.metadata["config_digest"] = config_digest;
        ck.metadata["schedule"] = {{"steps", sched_params.steps},
                                   {"beta_start", sched_params.beta_start},
                                   {"beta_end", sched_params.beta_end}};
        ck.metadata["denoiser"] = {{"image_channels", dcfg.image_channels},
                                   {"image_size", dcfg.image_size},
                                   {"base_channels", dcfg.base_channels},
                                   {"channel_multipliers", dcfg.channel_multipliers},
                                   {"attention_resolutions", dcfg.attention_resolutions},
                                   {"num_heads", dcfg.num_heads},
                                   {"cond_dim", dcfg.cond_dim},
                                   {"time_embed_dim", dcfg.time_embed_dim},
                                   {"norm_groups", dcfg.norm_groups},
                                   {"aggregation_resolution", dcfg.aggregation_resolution}};
        ck.metadata["conditioning"] = {{"dim", ccfg.dim},
                                       {"mask_grid", ccfg.mask_grid},
                                       {"max_prompt_len", ccfg.max_prompt_len},
                                       {"plain_words", ccfg.plain_words},
                                       {"num_handles", ccfg.num_handles}};
        return ck;
    }

    // Copy checkpoint arrays into this model. Every required key must be
    // present with a matching shape; the first offending key is reported.
    void load_arrays(const Checkpoint& ck) {
        for (Param<T>* p : all_params()) {
            auto it = ck.arrays.find(p->name);
            if (it == ck.arrays.end())
                throw schema_error("checkpoint is missing array '" + p->name + "'");
            if (it->second.shape != p->value.shape)
                throw schema_error("checkpoint array '" + p->name + "' has shape " +
                                   shape_str(it->second) + ", expected " +
                                   shape_str(p->value));
            p->value = it->second.template cast<T>();
        }
    }

    static ModelState from_checkpoint(const Checkpoint& ck) {
        const auto& md = ck.metadata;
        if (!md.contains("denoiser") || !md.contains("conditioning") || !md.contains("schedule"))
            throw schema_error("checkpoint metadata is missing model configuration");
        DenoiserConfig dc;
        const auto& dj = md["denoiser"];
        dc.image_channels = dj["image_channels"].get<int>();
        dc.image_size = dj["image_size"].get<int>();
        dc.base_channels = dj["base_channels"].get<int>();
        dc.channel_multipliers = dj["channel_multipliers"].get<std::vector<int>>();
        dc.attention_resolutions = dj["attention_resolutions"].get<std::vector<int>>();
        dc.num_heads = dj["num_heads"].get<int>();
        dc.cond_dim = dj["cond_dim"].get<int>();
        dc.time_embed_dim = dj["time_embed_dim"].get<int>();
        dc.norm_groups = dj["norm_groups"].get<int>();
        dc.aggregation_resolution = dj["aggregation_resolution"].get<int>();
        ConditioningConfig cc;
        const auto& cj = md["conditioning"];
        cc.dim = cj["dim"].get<int>();
        cc.mask_grid = cj["mask_grid"].get<int>();
        cc.max_prompt_len = cj["max_prompt_len"].get<int>();
        cc.plain_words = cj["plain_words"].get<std::vector<std::string>>();
        cc.num_handles = cj["num_handles"].get<int>();
        ScheduleParams sp;
        const auto& sj = md["schedule"];
        sp.steps = sj["steps"].get<int>();
        sp.beta_start = sj["beta_start"].get<double>();
        sp.beta_end = sj["beta_end"].get<double>();
        Rng rng(0);
        ModelState st(dc, cc, sp, rng);
        st.load_arrays(ck);
        return st;
    }
};

}  // namespace maskdiff
