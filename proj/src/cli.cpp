// evgen subcommand implementations: config/prompt parsing, dataset
// marshalling between disk formats and the library types, and one function
// per subcommand. Kept out of the header tree so the library itself stays
// header-only.
#include "evgen/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "evgen/render.hpp"

namespace evgen::cli {
namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Strict JSON helpers
// ---------------------------------------------------------------------------

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ValidationError("config: " + path + " must be an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) { ok = true; break; }
        if (!ok) throw ValidationError("config: unknown key " + path + "." + key);
    }
}

template <class T>
T get_or(const json& obj, const std::string& path, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config: bad value type for " + path + "." + key);
    }
}

void require_file(const std::string& path, const std::string& key) {
    if (!std::filesystem::exists(path))
        throw ValidationError("config: " + key + " does not resolve: " + path);
}

const GestureClass& class_by_name(const std::vector<GestureClass>& classes, const std::string& name) {
    for (const GestureClass& c : classes)
        if (c.name == name) return c;
    std::string avail;
    for (const GestureClass& c : classes) avail += (avail.empty() ? "" : ", ") + c.name;
    throw ValidationError("unknown class \"" + name + "\" (available: " + avail + ")");
}

}  // namespace

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

RunConfig parse_run_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    check_keys(root, "$", {"seed", "data", "filter", "voxel", "autoencoder", "loss", "diffusion",
                           "classifier", "generate", "evaluate"});
    RunConfig rc;
    rc.seed = get_or<std::uint64_t>(root, "$", "seed", rc.seed);

    if (root.contains("data")) {
        const json& d = root.at("data");
        check_keys(d, "$.data", {"dir", "val_fraction", "synth"});
        rc.data_dir = get_or<std::string>(d, "$.data", "dir", "");
        rc.val_fraction = get_or<double>(d, "$.data", "val_fraction", rc.val_fraction);
        if (d.contains("synth")) {
            const json& s = d.at("synth");
            check_keys(s, "$.data.synth", {"classes", "samples_per_class", "duration_us", "width",
                                           "height", "events_per_us", "noise_rate"});
            rc.has_synth = true;
            const auto names = get_or<std::vector<std::string>>(s, "$.data.synth", "classes",
                                                                {"cw", "ccw"});
            const auto builtin = builtin_gesture_classes();
            for (const std::string& n : names) rc.synth.classes.push_back(class_by_name(builtin, n));
            rc.synth.samples_per_class =
                get_or<std::size_t>(s, "$.data.synth", "samples_per_class", rc.synth.samples_per_class);
            rc.synth.duration_us = get_or<std::int64_t>(s, "$.data.synth", "duration_us", rc.synth.duration_us);
            rc.synth.width = get_or<std::uint16_t>(s, "$.data.synth", "width", rc.synth.width);
            rc.synth.height = get_or<std::uint16_t>(s, "$.data.synth", "height", rc.synth.height);
            rc.synth.events_per_us = get_or<double>(s, "$.data.synth", "events_per_us", rc.synth.events_per_us);
            rc.synth.noise_rate = get_or<double>(s, "$.data.synth", "noise_rate", rc.synth.noise_rate);
            rc.synth.validate();
        }
        if (!rc.data_dir.empty() && rc.has_synth)
            throw ValidationError("config: set $.data.dir or $.data.synth, not both");
        if (!rc.data_dir.empty()) require_file(rc.data_dir, "$.data.dir");
    }

    if (root.contains("filter")) {
        const json& f = root.at("filter");
        check_keys(f, "$.filter", {"window_us", "patch_px", "threshold"});
        rc.filter.window_us = get_or<std::int64_t>(f, "$.filter", "window_us", rc.filter.window_us);
        rc.filter.patch_px = get_or<std::uint32_t>(f, "$.filter", "patch_px", rc.filter.patch_px);
        rc.filter.threshold = get_or<std::uint64_t>(f, "$.filter", "threshold", rc.filter.threshold);
        rc.filter.validate();
    }

    if (root.contains("voxel")) {
        const json& v = root.at("voxel");
        check_keys(v, "$.voxel", {"channels", "prob_cap"});
        rc.channels = get_or<std::size_t>(v, "$.voxel", "channels", rc.channels);
        rc.prob_cap = get_or<double>(v, "$.voxel", "prob_cap", rc.prob_cap);
    }

    rc.ae.channels = rc.channels;
    if (root.contains("autoencoder")) {
        const json& a = root.at("autoencoder");
        check_keys(a, "$.autoencoder", {"resolution", "latent_dim", "core_channels", "core_hidden",
                                        "min_channels", "dropout", "stages", "finetune"});
        rc.ae.resolution = get_or<std::size_t>(a, "$.autoencoder", "resolution", rc.ae.resolution);
        rc.ae.latent_dim = get_or<std::size_t>(a, "$.autoencoder", "latent_dim", rc.ae.latent_dim);
        rc.ae.core_channels = get_or<std::size_t>(a, "$.autoencoder", "core_channels", rc.ae.core_channels);
        rc.ae.core_hidden = get_or<std::size_t>(a, "$.autoencoder", "core_hidden", rc.ae.core_hidden);
        rc.ae.min_channels = get_or<std::size_t>(a, "$.autoencoder", "min_channels", rc.ae.min_channels);
        rc.ae.dropout = get_or<double>(a, "$.autoencoder", "dropout", rc.ae.dropout);
        rc.ae.validate();
        if (a.contains("stages")) {
            const json& st = a.at("stages");
            if (!st.is_array())
                throw ValidationError("config: $.autoencoder.stages must be an array");
            if (st.size() != rc.ae.num_stages())
                throw ValidationError("config: $.autoencoder.stages needs exactly " +
                                      std::to_string(rc.ae.num_stages()) + " entries for resolution " +
                                      std::to_string(rc.ae.resolution));
            for (std::size_t i = 0; i < st.size(); ++i) {
                const std::string path = "$.autoencoder.stages[" + std::to_string(i) + "]";
                check_keys(st[i], path, {"max_events", "epochs", "warmup_epochs", "batch_size", "lr"});
                StageConfig sc;
                sc.stage = i + 1;
                sc.resolution = rc.ae.stage_resolution(sc.stage);
                sc.max_events = get_or<std::size_t>(st[i], path, "max_events", sc.max_events);
                sc.epochs = get_or<std::size_t>(st[i], path, "epochs", sc.epochs);
                sc.warmup_epochs = get_or<std::size_t>(st[i], path, "warmup_epochs", sc.warmup_epochs);
                sc.batch_size = get_or<std::size_t>(st[i], path, "batch_size", sc.batch_size);
                sc.lr = get_or<double>(st[i], path, "lr", sc.lr);
                sc.validate(rc.ae);
                rc.stages.push_back(sc);
            }
        }
        if (a.contains("finetune")) {
            const json& ft = a.at("finetune");
            check_keys(ft, "$.autoencoder.finetune", {"epochs", "batch_size", "lr"});
            rc.finetune_epochs = get_or<std::size_t>(ft, "$.autoencoder.finetune", "epochs", 10);
            rc.finetune_batch_size =
                get_or<std::size_t>(ft, "$.autoencoder.finetune", "batch_size", rc.finetune_batch_size);
            rc.finetune_lr = get_or<double>(ft, "$.autoencoder.finetune", "lr", rc.finetune_lr);
        }
    } else {
        rc.ae.validate();
    }
    if (rc.stages.empty()) {
        // default ladder: event cap quadruples with each doubling of resolution
        for (std::size_t s = 1; s <= rc.ae.num_stages(); ++s) {
            StageConfig sc;
            sc.stage = s;
            sc.resolution = rc.ae.stage_resolution(s);
            sc.max_events = 128;
            for (std::size_t k = 1; k < s; ++k) sc.max_events *= 4;
            rc.stages.push_back(sc);
        }
    }

    if (root.contains("loss")) {
        const json& l = root.at("loss");
        check_keys(l, "$.loss", {"k_err", "k_subopt", "c_min", "act_threshold"});
        rc.loss.k_err = get_or<double>(l, "$.loss", "k_err", rc.loss.k_err);
        rc.loss.k_subopt = get_or<double>(l, "$.loss", "k_subopt", rc.loss.k_subopt);
        rc.loss.c_min = get_or<double>(l, "$.loss", "c_min", rc.loss.c_min);
        rc.loss.act_threshold = get_or<double>(l, "$.loss", "act_threshold", rc.loss.act_threshold);
        rc.loss.validate();
    }

    rc.dm.latent_dim = rc.ae.latent_dim;
    if (root.contains("diffusion")) {
        const json& d = root.at("diffusion");
        check_keys(d, "$.diffusion", {"num_slices", "embed_dim", "time_dim", "hidden1", "hidden2",
                                      "steps", "schedule", "guidance", "slice_events", "epochs",
                                      "batch_size", "lr", "embeddings_file"});
        rc.dm.num_slices = get_or<std::size_t>(d, "$.diffusion", "num_slices", rc.dm.num_slices);
        rc.dm.embed_dim = get_or<std::size_t>(d, "$.diffusion", "embed_dim", rc.dm.embed_dim);
        rc.dm.time_dim = get_or<std::size_t>(d, "$.diffusion", "time_dim", rc.dm.time_dim);
        rc.dm.hidden1 = get_or<std::size_t>(d, "$.diffusion", "hidden1", rc.dm.hidden1);
        rc.dm.hidden2 = get_or<std::size_t>(d, "$.diffusion", "hidden2", rc.dm.hidden2);
        rc.dm.steps = get_or<std::size_t>(d, "$.diffusion", "steps", rc.dm.steps);
        rc.dm.schedule = schedule_kind_from_string(
            get_or<std::string>(d, "$.diffusion", "schedule", schedule_kind_name(rc.dm.schedule)));
        rc.dm.guidance = get_or<double>(d, "$.diffusion", "guidance", rc.dm.guidance);
        rc.dm.validate();
        rc.dm_slice_events = get_or<std::size_t>(d, "$.diffusion", "slice_events", rc.dm_slice_events);
        rc.dm_train.epochs = get_or<std::size_t>(d, "$.diffusion", "epochs", rc.dm_train.epochs);
        rc.dm_train.batch_size = get_or<std::size_t>(d, "$.diffusion", "batch_size", rc.dm_train.batch_size);
        rc.dm_train.lr = get_or<double>(d, "$.diffusion", "lr", rc.dm_train.lr);
        rc.dm_train.validate();
        rc.embeddings_file = get_or<std::string>(d, "$.diffusion", "embeddings_file", "");
        if (!rc.embeddings_file.empty()) require_file(rc.embeddings_file, "$.diffusion.embeddings_file");
    }

    if (root.contains("classifier")) {
        const json& c = root.at("classifier");
        check_keys(c, "$.classifier", {"head_hidden", "p_drop", "slice_events", "max_slices",
                                       "keep_remainder", "epochs", "batch_size", "lr"});
        rc.cls_head_hidden = get_or<std::size_t>(c, "$.classifier", "head_hidden", rc.cls_head_hidden);
        rc.cls_p_drop = get_or<double>(c, "$.classifier", "p_drop", rc.cls_p_drop);
        rc.cls_slice_events = get_or<std::size_t>(c, "$.classifier", "slice_events", rc.cls_slice_events);
        rc.cls_max_slices = get_or<std::size_t>(c, "$.classifier", "max_slices", rc.cls_max_slices);
        rc.cls_keep_remainder = get_or<bool>(c, "$.classifier", "keep_remainder", rc.cls_keep_remainder);
        rc.cls_train.epochs = get_or<std::size_t>(c, "$.classifier", "epochs", rc.cls_train.epochs);
        rc.cls_train.batch_size = get_or<std::size_t>(c, "$.classifier", "batch_size", rc.cls_train.batch_size);
        rc.cls_train.lr = get_or<double>(c, "$.classifier", "lr", rc.cls_train.lr);
        rc.cls_train.validate();
    }

    if (root.contains("generate")) {
        const json& g = root.at("generate");
        check_keys(g, "$.generate", {"boost_factor", "sample_steps", "slice_duration_us"});
        rc.gen.boost_factor = get_or<double>(g, "$.generate", "boost_factor", rc.gen.boost_factor);
        rc.gen.sample_steps = get_or<std::size_t>(g, "$.generate", "sample_steps", rc.gen.sample_steps);
        rc.gen.slice_duration_us =
            get_or<std::int64_t>(g, "$.generate", "slice_duration_us", rc.gen.slice_duration_us);
        rc.gen.validate();
    }
    rc.gen.guidance = rc.dm.guidance;

    if (root.contains("evaluate")) {
        const json& e = root.at("evaluate");
        check_keys(e, "$.evaluate", {"samples_per_prompt"});
        rc.samples_per_prompt = get_or<std::size_t>(e, "$.evaluate", "samples_per_prompt",
                                                    rc.samples_per_prompt);
    }

    if (!(rc.val_fraction >= 0 && rc.val_fraction < 1))
        throw ValidationError("config: $.data.val_fraction must be in [0, 1)");
    if (!(rc.prob_cap > 0)) throw ValidationError("config: $.voxel.prob_cap must be > 0");
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

// ---------------------------------------------------------------------------
// Prompt file + report emission
// ---------------------------------------------------------------------------

PromptFile parse_prompt_file(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("prompts: ") + e.what());
    }
    check_keys(root, "$", {"classes", "prompts", "groups"});
    PromptFile pf;
    if (!root.contains("classes") || !root.contains("prompts"))
        throw ValidationError("prompts: need both $.classes and $.prompts");
    pf.classes = root.at("classes").get<std::vector<std::string>>();
    if (pf.classes.empty()) throw ValidationError("prompts: $.classes is empty");
    for (std::size_t i = 0; i < root.at("prompts").size(); ++i) {
        const json& p = root.at("prompts")[i];
        const std::string path = "$.prompts[" + std::to_string(i) + "]";
        check_keys(p, path, {"key", "class"});
        PromptSpec spec;
        spec.key = get_or<std::string>(p, path, "key", "");
        if (spec.key.empty()) throw ValidationError("prompts: " + path + ".key is missing or empty");
        if (!p.contains("class")) throw ValidationError("prompts: " + path + ".class is missing");
        spec.class_id = get_or<std::size_t>(p, path, "class", 0);
        if (spec.class_id >= pf.classes.size())
            throw ValidationError("prompts: " + path + ".class out of range");
        pf.prompts.push_back(spec);
    }
    if (pf.prompts.empty()) throw ValidationError("prompts: $.prompts is empty");
    if (root.contains("groups")) {
        for (const auto& [cname, gname] : root.at("groups").items()) {
            const auto it = std::find(pf.classes.begin(), pf.classes.end(), cname);
            if (it == pf.classes.end())
                throw ValidationError("prompts: $.groups references unknown class \"" + cname + "\"");
            if (!gname.is_string())
                throw ValidationError("prompts: $.groups." + cname + " must be a string");
            pf.groups[std::size_t(it - pf.classes.begin())] = gname.get<std::string>();
        }
    }
    return pf;
}

PromptFile load_prompt_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open prompts: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_prompt_file(ss.str());
}

std::string report_to_json(const EvalReport& rep) {
    json j;
    j["seed"] = rep.seed;
    j["boost_factor"] = rep.boost_factor;
    j["sample_count"] = rep.sample_count;
    j["unclassifiable"] = rep.unclassifiable;
    j["mean_accuracy"] = rep.mean_accuracy;
    json ca = json::object(), cc = json::object();
    for (std::size_t c = 0; c < rep.class_names.size(); ++c) {
        ca[rep.class_names[c]] = rep.class_accuracy[c];
        cc[rep.class_names[c]] = rep.class_count[c];
    }
    j["class_accuracy"] = ca;
    j["class_count"] = cc;
    j["group_accuracy"] = json::object();
    j["group_count"] = json::object();
    for (const auto& [g, a] : rep.group_accuracy) j["group_accuracy"][g] = a;
    for (const auto& [g, n] : rep.group_count) j["group_count"][g] = n;
    return j.dump(2) + "\n";  // keys are map-ordered, so the bytes are stable
}

// ---------------------------------------------------------------------------
// Data marshalling
// ---------------------------------------------------------------------------

namespace {

std::vector<EventStream> read_stream_dir(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".evs") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());  // deterministic order
    if (paths.empty()) throw ValidationError("no .evs files in " + dir);
    std::vector<EventStream> out;
    out.reserve(paths.size());
    for (const std::string& p : paths) out.push_back(read_events(p, EventFormat::binary));
    return out;
}

// Training data per the config: explicit directory wins over synth.
std::vector<EventStream> gather_streams(const RunConfig& rc, const std::string& data_override) {
    const std::string dir = data_override.empty() ? rc.data_dir : data_override;
    if (!dir.empty()) return read_stream_dir(dir);
    if (rc.has_synth) return synth_dataset(rc.synth, hash_counters(rc.seed, 0x5da7aULL));
    throw ValidationError("no data source: pass --data or configure data.synth");
}

// Classes used to map labels <-> condition keys.
std::vector<GestureClass> gather_classes(const RunConfig& rc, const std::vector<EventStream>& streams) {
    if (rc.has_synth) return rc.synth.classes;
    std::vector<GestureClass> out;
    for (const GestureClass& c : builtin_gesture_classes())
        for (const EventStream& s : streams)
            if (s.label == c.id) { out.push_back(c); break; }
    if (out.empty()) throw ValidationError("no labeled streams match the built-in classes");
    return out;
}

std::string zero_pad(std::size_t v, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", width, v);
    return buf;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out_dir, classes = "cw,ccw", format = "binary";
    std::size_t samples = 24;
    std::int64_t duration_us = 400000;
    std::uint16_t width = 32, height = 32;
    double events_per_us = 0.03, noise_rate = 0.002;
    std::uint64_t seed = 7;
};

int run_synth(const SynthArgs& a) {
    SynthConfig sc;
    const auto builtin = builtin_gesture_classes();
    std::stringstream names(a.classes);
    for (std::string n; std::getline(names, n, ',');)
        if (!n.empty()) sc.classes.push_back(class_by_name(builtin, n));
    sc.samples_per_class = a.samples;
    sc.duration_us = a.duration_us;
    sc.width = a.width;
    sc.height = a.height;
    sc.events_per_us = a.events_per_us;
    sc.noise_rate = a.noise_rate;
    const auto streams = synth_dataset(sc, a.seed);
    std::filesystem::create_directories(a.out_dir);
    const EventFormat fmt = a.format == "csv" ? EventFormat::csv : EventFormat::binary;
    const char* ext = fmt == EventFormat::csv ? ".csv" : ".evs";
    std::size_t i = 0;
    for (const EventStream& s : streams) {
        const std::string name = sc.classes[i / sc.samples_per_class].name + "_" +
                                 zero_pad(i % sc.samples_per_class, 3) + ext;
        write_events(s, (std::filesystem::path(a.out_dir) / name).string(), fmt);
        ++i;
    }
    std::cout << "wrote " << streams.size() << " streams to " << a.out_dir << "\n";
    return 0;
}

struct FilterArgs {
    std::string in, out, in_format = "binary";
    FilterConfig cfg{};  // paper defaults: 20000 us / 8 px / 7 events
    std::uint16_t csv_width = 0, csv_height = 0;
};

int run_filter(const FilterArgs& a) {
    const EventFormat in_fmt = a.in_format == "csv" ? EventFormat::csv : EventFormat::binary;
    const EventStream s = read_events(a.in, in_fmt, a.csv_width, a.csv_height);
    const EventStream f = active_patch_filter(s, a.cfg);
    const EventFormat out_fmt = std::filesystem::path(a.out).extension() == ".csv"
                                    ? EventFormat::csv
                                    : EventFormat::binary;
    write_events(f, a.out, out_fmt);
    std::cout << "kept " << f.events.size() << " of " << s.events.size() << " events\n";
    return 0;
}

struct VoxelizeArgs {
    std::string in, out_prefix;
    std::size_t bins = 1, count = 512;
    double cap = 0;  // 0 = raw counts; > 0 = probability grids with this cap
    bool keep_remainder = false;
};

int run_voxelize(const VoxelizeArgs& a) {
    const EventStream s = read_events(a.in, EventFormat::binary);
    if (a.count == 0) throw ValidationError("voxelize: --count must be >= 1");
    std::size_t i = 0;
    for (const EventSlice& slice : slice_by_count(s, a.count, a.keep_remainder)) {
        Grid g = voxelize(slice, std::uint32_t(a.bins), s.width, s.height);
        if (a.cap > 0) g = to_prob(g, a.cap);
        write_grid(g, a.out_prefix + zero_pad(i, 3) + ".evg1");
        ++i;
    }
    std::cout << "wrote " << i << " grids\n";
    return 0;
}

struct TrainArgs {
    std::string config, data, out;
    std::string ae_ckpt;  // train-dm only
};

int run_train_ae(const TrainArgs& a) {
    const RunConfig rc = load_run_config(a.config);
    const auto streams = gather_streams(rc, a.data);
    StagedAutoencoder model(rc.ae);
    GridDataset data;
    for (const StageConfig& sc : rc.stages) {
        data = build_ae_dataset(streams, rc.preprocess(), sc.resolution, sc.max_events,
                                rc.val_fraction, rc.seed);
        model.build_stage(sc.stage, rc.seed);
        const TrainReport rep = train_stage(model, data, sc, rc.loss, rc.seed);
        for (const EpochLog& e : rep.epochs)
            std::cout << "stage " << sc.stage << " epoch " << e.epoch << " train " << e.train_loss
                      << " val " << e.val_loss << " f1 " << e.val_f1 << "\n";
    }
    if (rc.finetune_epochs > 0) {
        const TrainReport rep = finetune(model, data, rc.finetune_epochs, rc.finetune_batch_size,
                                         rc.finetune_lr, rc.loss, rc.seed);
        for (const EpochLog& e : rep.epochs)
            std::cout << "finetune epoch " << e.epoch << " train " << e.train_loss << " val "
                      << e.val_loss << " f1 " << e.val_f1 << "\n";
    }
    model.save(a.out);
    std::cout << "saved " << a.out << "\n";
    return 0;
}

int run_train_dm(const TrainArgs& a) {
    const RunConfig rc = load_run_config(a.config);
    const auto streams = gather_streams(rc, a.data);
    const auto classes = gather_classes(rc, streams);
    StagedAutoencoder ae = StagedAutoencoder::load(a.ae_ckpt);
    auto [seqs, keys] = build_latent_dataset(streams, classes, ae, rc.preprocess(),
                                             rc.dm.num_slices, rc.dm_slice_events);
    DmConfig cfg = rc.dm;
    cfg.latent_dim = ae.config().latent_dim;
    EmbeddingProvider provider = [&] {
        if (!rc.embeddings_file.empty()) return EmbeddingProvider::from_file(rc.embeddings_file);
        std::vector<std::string> names;
        for (const GestureClass& c : classes) names.push_back(c.name);
        return EmbeddingProvider(names, cfg.embed_dim, hash_counters(rc.seed, 0xe3bedULL));
    }();
    DiffusionModel model(cfg, provider, rc.seed);
    const DmTrainReport rep = train_dm(model, seqs, keys, rc.dm_train, rc.seed);
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
        std::cout << "epoch " << e + 1 << " loss " << rep.epoch_loss[e] << "\n";
    model.save(a.out);
    std::cout << "saved " << a.out << " and " << a.out << ".evem\n";
    return 0;
}

int run_train_cls(const TrainArgs& a) {
    const RunConfig rc = load_run_config(a.config);
    const auto streams = gather_streams(rc, a.data);
    const auto classes = gather_classes(rc, streams);
    std::int32_t max_label = 0;
    for (const GestureClass& c : classes) max_label = std::max(max_label, c.id);
    ClsConfig cfg;
    cfg.encoder = rc.ae;
    cfg.num_classes = std::size_t(max_label) + 1;
    cfg.head_hidden = rc.cls_head_hidden;
    cfg.p_drop = rc.cls_p_drop;
    cfg.slice_events = rc.cls_slice_events;
    cfg.max_slices = rc.cls_max_slices;
    cfg.keep_remainder = rc.cls_keep_remainder;
    cfg.filter = rc.filter;
    cfg.prob_cap = rc.prob_cap;
    Classifier model(cfg, rc.seed);
    auto [train, val] = split_streams(streams, rc.val_fraction, rc.seed);
    const ClsTrainReport rep = train_classifier(model, train, val, rc.cls_train, rc.seed);
    for (const ClsEpochLog& e : rep.epochs)
        std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " acc " << e.train_acc
                  << " val " << e.val_acc << "\n";
    model.save(a.out);
    std::cout << "saved " << a.out << "\n";
    return 0;
}

struct GenerateArgs {
    std::string ae_ckpt, dm_ckpt, prompt, out;
    double guidance = 7.5, boost = 3.0;
    std::size_t steps = 0;
    std::int64_t slice_duration_us = 20000;
    std::int32_t label = -1;
    std::uint64_t seed = 7;
};

int run_generate(const GenerateArgs& a) {
    StagedAutoencoder ae = StagedAutoencoder::load(a.ae_ckpt);
    DiffusionModel dm = DiffusionModel::load(a.dm_ckpt);
    GenerationConfig gen;
    gen.guidance = a.guidance;
    gen.boost_factor = a.boost;
    gen.sample_steps = a.steps;
    gen.slice_duration_us = a.slice_duration_us;
    const EventStream s = generate_stream(ae, dm, a.prompt, a.label, gen, a.seed);
    const EventFormat fmt = std::filesystem::path(a.out).extension() == ".csv" ? EventFormat::csv
                                                                               : EventFormat::binary;
    write_events(s, a.out, fmt);
    std::cout << "generated " << s.events.size() << " events -> " << a.out << "\n";
    return 0;
}

struct EvaluateArgs {
    std::string prompts, ae_ckpt, dm_ckpt, cls_ckpt, report;
    double boost = 3.0, guidance = 7.5;
    std::size_t steps = 0, samples = 20;
    std::int64_t slice_duration_us = 20000;
    std::uint64_t seed = 7;
};

int run_evaluate(const EvaluateArgs& a) {
    const PromptFile pf = load_prompt_file(a.prompts);
    StagedAutoencoder ae = StagedAutoencoder::load(a.ae_ckpt);
    DiffusionModel dm = DiffusionModel::load(a.dm_ckpt);
    Classifier cls = Classifier::load(a.cls_ckpt);
    GenerationConfig gen;
    gen.guidance = a.guidance;
    gen.boost_factor = a.boost;
    gen.sample_steps = a.steps;
    gen.slice_duration_us = a.slice_duration_us;
    const EvalReport rep = evaluate_pipeline(ae, dm, cls, pf.prompts, pf.classes, a.samples, gen,
                                             a.seed, pf.groups);
    const std::string text = report_to_json(rep);
    if (!a.report.empty()) {
        std::ofstream f(a.report, std::ios::binary);
        if (!f) throw IoError("cannot open report: " + a.report);
        f << text;
        if (!f.flush()) throw IoError("write failed: " + a.report);
    }
    std::cout << "mean accuracy " << rep.mean_accuracy << " over " << rep.sample_count
              << " samples (" << rep.unclassifiable << " unclassifiable)\n";
    return 0;
}

struct RenderArgs {
    std::string in, out, mode = "accumulate";
    std::size_t count = 512, bins = 1, max_grids = 100, time_bins = 256;
};

int run_render(const RenderArgs& a) {
    const EventStream s = read_events(a.in, EventFormat::binary);
    if (s.events.empty())
        std::cerr << "warning: " << a.in << " has no events; writing a blank image\n";
    if (a.mode == "accumulate") {
        write_pgm(render_accumulate_stream(s, a.count, std::uint32_t(a.bins), a.max_grids), a.out);
    } else if (a.mode == "spacetime") {
        write_ppm(render_spacetime(s, a.time_bins), a.out);
    } else {
        throw ValidationError("render: mode must be accumulate or spacetime");
    }
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// Finite-difference check over every layer kind; prints one line per kind.
int run_grad_check(double tolerance, std::uint64_t seed) {
    Rng rng(hash_counters(seed, 0x6adcULL));
    struct Case {
        const char* kind;
        nn::LayerPtr net;
        nn::Shape in_shape;
    };
    std::vector<Case> cases;
    cases.push_back({"dense", std::make_shared<nn::Dense>("g.dense", 6, 5, rng), {2, 6}});
    cases.push_back({"conv2d", std::make_shared<nn::Conv2d>("g.conv", 2, 3, rng), {2, 2, 6, 6}});
    cases.push_back({"maxpool2", std::make_shared<nn::MaxPool2>(), {2, 2, 6, 6}});
    cases.push_back({"upsample2", std::make_shared<nn::Upsample2>(), {2, 2, 3, 3}});
    cases.push_back({"flatten", std::make_shared<nn::Flatten>(), {2, 2, 3, 3}});
    cases.push_back({"unflatten", std::make_shared<nn::Unflatten>(2, 3, 3), {2, 18}});
    cases.push_back({"gelu", std::make_shared<nn::Gelu>(), {2, 7}});
    cases.push_back({"sigmoid", std::make_shared<nn::Sigmoid>(), {2, 7}});
    cases.push_back({"dropout", std::make_shared<nn::Dropout>(0.3), {2, 16}});
    {
        auto seq = std::make_shared<nn::Sequential>();
        seq->append(std::make_shared<nn::Conv2d>("g.seq.conv", 2, 4, rng));
        seq->append(std::make_shared<nn::Gelu>());
        seq->append(std::make_shared<nn::MaxPool2>());
        seq->append(std::make_shared<nn::Flatten>());
        seq->append(std::make_shared<nn::Dense>("g.seq.dense", 4 * 3 * 3, 5, rng));
        seq->append(std::make_shared<nn::Sigmoid>());
        cases.push_back({"sequential", seq, {2, 2, 6, 6}});
    }
    bool ok = true;
    for (auto& c : cases) {
        nn::Tensor x(c.in_shape);
        for (double& v : x.v) v = rng.normal();
        const auto report = nn::grad_check(*c.net, x, 1e-4, seed);
        std::cout << c.kind << " max_rel_err " << report.max_rel_err << "\n";
        ok = ok && report.all_below(tolerance);
    }
    std::cout << (ok ? "all layer kinds below " : "FAILED tolerance ") << tolerance << "\n";
    return ok ? 0 : 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

int dispatch(int argc, char** argv) {
    CLI::App app{"evgen: synthesize and evaluate labeled event-camera streams"};
    app.require_subcommand(1);

    SynthArgs sy;
    auto* synth = app.add_subcommand("synth-data", "write a synthetic labeled gesture dataset");
    synth->add_option("--out", sy.out_dir, "output directory")->required();
    synth->add_option("--classes", sy.classes, "comma-separated class names (cw,ccw,right,left)");
    synth->add_option("--samples", sy.samples, "streams per class");
    synth->add_option("--duration-us", sy.duration_us, "stream duration in microseconds");
    synth->add_option("--width", sy.width, "sensor width");
    synth->add_option("--height", sy.height, "sensor height");
    synth->add_option("--events-per-us", sy.events_per_us, "signal event rate");
    synth->add_option("--noise-rate", sy.noise_rate, "noise events per pixel per second scale");
    synth->add_option("--seed", sy.seed, "rng seed");
    synth->add_option("--format", sy.format, "binary or csv")
        ->check(CLI::IsMember({"binary", "csv"}));

    FilterArgs fi;
    auto* filter = app.add_subcommand("filter", "drop events outside active patches");
    filter->add_option("--in", fi.in, "input event file")->required();
    filter->add_option("--out", fi.out, "output event file (.csv extension switches format)")->required();
    filter->add_option("--window-us", fi.cfg.window_us, "time window in microseconds");
    filter->add_option("--patch-px", fi.cfg.patch_px, "square patch edge in pixels");
    filter->add_option("--threshold", fi.cfg.threshold, "minimum events per (window, patch)");
    filter->add_option("--in-format", fi.in_format, "binary or csv")
        ->check(CLI::IsMember({"binary", "csv"}));
    filter->add_option("--csv-width", fi.csv_width, "sensor width for csv input");
    filter->add_option("--csv-height", fi.csv_height, "sensor height for csv input");

    VoxelizeArgs vx;
    auto* vox = app.add_subcommand("voxelize", "slice a stream and write voxel grids");
    vox->add_option("--in", vx.in, "input event file")->required();
    vox->add_option("--out", vx.out_prefix, "output path prefix (files get NNN.evg1)")->required();
    vox->add_option("--bins", vx.bins, "time bins per polarity (C)");
    vox->add_option("--count", vx.count, "events per slice");
    vox->add_option("--cap", vx.cap, "emit probability grids with this cap (0 = raw counts)");
    vox->add_flag("--keep-remainder", vx.keep_remainder, "keep the short final slice");

    TrainArgs ta, td, tc;
    auto* tae = app.add_subcommand("train-ae", "train the staged autoencoder");
    tae->add_option("--config", ta.config, "run configuration json")->required();
    tae->add_option("--data", ta.data, "directory of .evs files (overrides config)");
    tae->add_option("--out", ta.out, "output checkpoint")->required();

    auto* tdm = app.add_subcommand("train-dm", "train the latent diffusion model");
    tdm->add_option("--config", td.config, "run configuration json")->required();
    tdm->add_option("--data", td.data, "directory of .evs files (overrides config)");
    tdm->add_option("--ae", td.ae_ckpt, "trained autoencoder checkpoint")->required();
    tdm->add_option("--out", td.out, "output checkpoint (embeddings go to <out>.evem)")->required();

    auto* tcl = app.add_subcommand("train-cls", "train the gesture classifier");
    tcl->add_option("--config", tc.config, "run configuration json")->required();
    tcl->add_option("--data", tc.data, "directory of .evs files (overrides config)");
    tcl->add_option("--out", tc.out, "output checkpoint")->required();

    GenerateArgs ga;
    auto* gen = app.add_subcommand("generate", "sample a labeled event stream from a prompt");
    gen->add_option("--ckpt-ae", ga.ae_ckpt, "autoencoder checkpoint")->required();
    gen->add_option("--ckpt-dm", ga.dm_ckpt, "diffusion checkpoint")->required();
    gen->add_option("--prompt", ga.prompt, "condition key")->required();
    gen->add_option("--out", ga.out, "output event file")->required();
    gen->add_option("--guidance", ga.guidance, "classifier-free guidance weight w");
    gen->add_option("--boost", ga.boost, "probability boost factor (>= 1)");
    gen->add_option("--steps", ga.steps, "sampling steps (0 = full schedule)");
    gen->add_option("--slice-duration-us", ga.slice_duration_us, "microseconds per decoded slice");
    gen->add_option("--label", ga.label, "label recorded in the output stream");
    gen->add_option("--seed", ga.seed, "rng seed");

    EvaluateArgs ea;
    auto* ev = app.add_subcommand("evaluate", "score generated samples with a classifier");
    ev->add_option("--prompts", ea.prompts, "prompt json file")->required();
    ev->add_option("--ckpt-ae", ea.ae_ckpt, "autoencoder checkpoint")->required();
    ev->add_option("--ckpt-dm", ea.dm_ckpt, "diffusion checkpoint")->required();
    ev->add_option("--ckpt-cls", ea.cls_ckpt, "classifier checkpoint")->required();
    ev->add_option("--report", ea.report, "write the json report here");
    ev->add_option("--boost", ea.boost, "probability boost factor (>= 1)");
    ev->add_option("--guidance", ea.guidance, "classifier-free guidance weight w");
    ev->add_option("--steps", ea.steps, "sampling steps (0 = full schedule)");
    ev->add_option("--samples-per-prompt", ea.samples, "generations per prompt");
    ev->add_option("--slice-duration-us", ea.slice_duration_us, "microseconds per decoded slice");
    ev->add_option("--seed", ea.seed, "rng seed");

    RenderArgs ra;
    auto* ren = app.add_subcommand("render", "write a pgm/ppm visualization of a stream");
    ren->add_option("--in", ra.in, "input event file")->required();
    ren->add_option("--out", ra.out, "output image path")->required();
    ren->add_option("--mode", ra.mode, "accumulate or spacetime")
        ->check(CLI::IsMember({"accumulate", "spacetime"}));
    ren->add_option("--count", ra.count, "events per slice (accumulate)");
    ren->add_option("--bins", ra.bins, "time bins per polarity (accumulate)");
    ren->add_option("--max-grids", ra.max_grids, "grids to accumulate (accumulate)");
    ren->add_option("--time-bins", ra.time_bins, "image width in time bins (spacetime)");

    double gc_tol = 1e-4;
    std::uint64_t gc_seed = 7;
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of every layer kind");
    gc->add_option("--tolerance", gc_tol, "max relative error allowed");
    gc->add_option("--seed", gc_seed, "rng seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cerr << app.help();
        return 2;
    }

    try {
        if (synth->parsed()) return run_synth(sy);
        if (filter->parsed()) return run_filter(fi);
        if (vox->parsed()) return run_voxelize(vx);
        if (tae->parsed()) return run_train_ae(ta);
        if (tdm->parsed()) return run_train_dm(td);
        if (tcl->parsed()) return run_train_cls(tc);
        if (gen->parsed()) return run_generate(ga);
        if (ev->parsed()) return run_evaluate(ea);
        if (ren->parsed()) return run_render(ra);
        if (gc->parsed()) return run_grad_check(gc_tol, gc_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace evgen::cli
