// Full generation path (diffusion sample -> decode per slice -> probability
// boost -> Bernoulli event sampling -> concatenated stream) and the
// evaluation harness that scores generated samples with a classifier and
// aggregates per-class / per-group accuracies.
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "evgen/autoencoder.hpp"
#include "evgen/classifier.hpp"
#include "evgen/common.hpp"
#include "evgen/dataset.hpp"
#include "evgen/diffusion.hpp"
#include "evgen/events.hpp"
#include "evgen/rng.hpp"
#include "evgen/voxel.hpp"

namespace evgen {

struct GenerationConfig {
    double guidance = 7.5;
    std::size_t sample_steps = 0;         // 0 = full schedule length
    double boost_factor = 3.0;            // "multiply by at least 3 and clip at 1"
    std::int64_t slice_duration_us = 20000;
    std::int64_t t_start_us = 0;

    void validate() const {
        if (!(guidance == guidance)) throw ValidationError("generate: guidance must be a number");
        if (!(boost_factor >= 1)) throw ValidationError("generate: boost factor must be >= 1");
        if (slice_duration_us <= 0) throw ValidationError("generate: slice duration must be positive");
    }
};

// Samples a latent sequence for the prompt, decodes each slice back to a
// probability grid and draws events slice by slice over consecutive windows.
// Slices are time-contiguous, so the concatenation is already sorted.
inline EventStream generate_stream(StagedAutoencoder& ae, DiffusionModel& dm,
                                   const std::string& key, std::int32_t label,
                                   const GenerationConfig& gen, std::uint64_t seed) {
    gen.validate();
    if (ae.config().latent_dim != dm.config().latent_dim)
        throw ValidationError("generate: autoencoder and diffusion latent dims differ");
    const std::size_t steps = gen.sample_steps == 0 ? dm.config().steps : gen.sample_steps;
    const nn::Tensor seq = dm.sample(key, gen.guidance, steps, hash_counters(seed, 0x9e41ULL));

    const std::size_t res = ae.stage_resolution();
    EventStream out;
    out.width = std::uint16_t(res);
    out.height = std::uint16_t(res);
    out.label = label;
    const std::size_t latent = dm.config().latent_dim;
    for (std::size_t s = 0; s < seq.shape[0]; ++s) {
        std::vector<double> z(seq.v.begin() + s * latent, seq.v.begin() + (s + 1) * latent);
        ProbGrid probs = boost(tensor_to_grid(ae.decode_one(z)), gen.boost_factor);
        const std::int64_t t0 = gen.t_start_us + std::int64_t(s) * gen.slice_duration_us;
        const EventSlice slice =
            bernoulli_sample(probs, t0, t0 + gen.slice_duration_us, hash_counters(seed, 0x9e42ULL, s));
        out.events.insert(out.events.end(), slice.events.begin(), slice.events.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

struct PromptSpec {
    std::string key;        // condition passed to the generator
    std::size_t class_id;   // expected class under the classifier
};

struct EvalReport {
    std::vector<std::string> class_names;            // index = class id
    std::vector<std::size_t> class_count;            // generated samples per class
    std::vector<double> class_accuracy;
    std::map<std::string, std::size_t> group_count;  // optional class -> group rollup
    std::map<std::string, double> group_accuracy;
    double mean_accuracy = 0;                        // weighted over all samples
    std::size_t sample_count = 0;
    std::size_t unclassifiable = 0;                  // scored as incorrect
    std::uint64_t seed = 0;
    double boost_factor = 1;
};

using GenerateFn = std::function<EventStream(const std::string& key, std::uint64_t sample_seed)>;
using ClassifyFn = std::function<ClassifyResult(const EventStream&)>;

// Generates samples_per_prompt streams per prompt, classifies each and
// aggregates. Per-sample seeds are counter-derived, so the report is a pure
// function of (prompts, samples_per_prompt, seed) given deterministic
// callables. `groups` maps class ids to group names; classes without an
// entry are skipped in the rollup.
inline EvalReport evaluate_generated(const GenerateFn& generate, const ClassifyFn& classify_fn,
                                     const std::vector<PromptSpec>& prompts,
                                     const std::vector<std::string>& class_names,
                                     std::size_t samples_per_prompt, double boost_factor,
                                     std::uint64_t seed,
                                     const std::map<std::size_t, std::string>& groups = {}) {
    if (prompts.empty()) throw ValidationError("evaluate: prompt set is empty");
    if (samples_per_prompt == 0) throw ValidationError("evaluate: samples_per_prompt must be >= 1");
    for (const PromptSpec& p : prompts)
        if (p.class_id >= class_names.size())
            throw ValidationError("evaluate: prompt \"" + p.key + "\" maps to unknown class id " +
                                  std::to_string(p.class_id));

    EvalReport rep;
    rep.class_names = class_names;
    rep.class_count.assign(class_names.size(), 0);
    rep.class_accuracy.assign(class_names.size(), 0.0);
    rep.seed = seed;
    rep.boost_factor = boost_factor;

    std::vector<std::size_t> correct(class_names.size(), 0);
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
        for (std::size_t j = 0; j < samples_per_prompt; ++j) {
            const EventStream s = generate(prompts[pi].key, hash_counters(seed, pi, j));
            const ClassifyResult r = classify_fn(s);
            const std::size_t expect = prompts[pi].class_id;
            ++rep.class_count[expect];
            ++rep.sample_count;
            if (!r.classifiable)
                ++rep.unclassifiable;
            else if (r.class_id == expect)
                ++correct[expect];
        }
    }

    std::size_t total_correct = 0;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        total_correct += correct[c];
        if (rep.class_count[c] > 0)
            rep.class_accuracy[c] = double(correct[c]) / double(rep.class_count[c]);
    }
    rep.mean_accuracy = double(total_correct) / double(rep.sample_count);
    for (const auto& [cid, gname] : groups) {
        if (cid >= class_names.size())
            throw ValidationError("evaluate: group map references unknown class id " +
                                  std::to_string(cid));
        rep.group_count[gname] += rep.class_count[cid];
        rep.group_accuracy[gname] += double(correct[cid]);
    }
    for (auto& [gname, acc] : rep.group_accuracy) {
        const std::size_t n = rep.group_count[gname];
        acc = n > 0 ? acc / double(n) : 0.0;
    }
    return rep;
}

// Convenience wrapper binding the real models into the harness.
inline EvalReport evaluate_pipeline(StagedAutoencoder& ae, DiffusionModel& dm, Classifier& cls,
                                    const std::vector<PromptSpec>& prompts,
                                    const std::vector<std::string>& class_names,
                                    std::size_t samples_per_prompt, const GenerationConfig& gen,
                                    std::uint64_t seed,
                                    const std::map<std::size_t, std::string>& groups = {}) {
    GenerateFn gfn = [&](const std::string& key, std::uint64_t s) {
        return generate_stream(ae, dm, key, -1, gen, s);
    };
    ClassifyFn cfn = [&](const EventStream& s) { return classify(cls, s); };
    return evaluate_generated(gfn, cfn, prompts, class_names, samples_per_prompt,
                              gen.boost_factor, seed, groups);
}

}  // namespace evgen
