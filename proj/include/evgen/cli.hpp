// Command-line surface: the run configuration document (strict JSON schema,
// unknown keys rejected) and the subcommand dispatcher behind the evgen
// binary. Implementation lives in src/cli.cpp; everything else in the
// library stays header-only.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evgen/autoencoder.hpp"
#include "evgen/classifier.hpp"
#include "evgen/dataset.hpp"
#include "evgen/diffusion.hpp"
#include "evgen/losses.hpp"
#include "evgen/pipeline.hpp"
#include "evgen/preprocess.hpp"

namespace evgen::cli {

// Parsed form of the JSON run configuration. Field defaults double as the
// schema defaults; FORMATS.md documents the file layout.
struct RunConfig {
    std::uint64_t seed = 7;

    // [data]
    std::string data_dir;   // directory of .evs files; empty = use synth
    double val_fraction = 0.2;
    bool has_synth = false;
    SynthConfig synth;

    // [filter] + [voxel]
    FilterConfig filter{};
    std::size_t channels = 1;
    double prob_cap = 1.0;

    // [autoencoder]
    AeConfig ae{};
    std::vector<StageConfig> stages;  // one per stage, defaulted when absent
    std::size_t finetune_epochs = 0;  // 0 = skip the fine-tune pass
    std::size_t finetune_batch_size = 16;
    double finetune_lr = 1e-4;

    // [loss]
    LossConfig loss{};

    // [diffusion]
    DmConfig dm{};                      // latent_dim mirrors ae.latent_dim
    std::size_t dm_slice_events = 512;  // event count per latent slice
    DmTrainConfig dm_train{};
    std::string embeddings_file;        // optional EVEM path; empty = learned table

    // [classifier]
    std::size_t cls_head_hidden = 64;
    double cls_p_drop = 0.2;
    std::size_t cls_slice_events = 512;
    std::size_t cls_max_slices = 16;
    bool cls_keep_remainder = true;
    ClsTrainConfig cls_train{};

    // [generate] + [evaluate]
    GenerationConfig gen{};
    std::size_t samples_per_prompt = 20;

    PreprocessParams preprocess() const { return {filter, channels, prob_cap}; }
};

// Strict parse: unknown keys anywhere and unresolvable file paths are
// rejected with a ValidationError naming the offending key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Prompt file for `evgen evaluate`: class names, prompt->class pairs and an
// optional class-name -> group-name rollup.
struct PromptFile {
    std::vector<std::string> classes;
    std::vector<PromptSpec> prompts;
    std::map<std::size_t, std::string> groups;  // class id -> group name
};

PromptFile parse_prompt_file(const std::string& json_text);
PromptFile load_prompt_file(const std::string& path);

std::string report_to_json(const EvalReport& rep);

// Full subcommand dispatcher; returns the process exit code.
int dispatch(int argc, char** argv);

}  // namespace evgen::cli
