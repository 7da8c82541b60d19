#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "evgen/cli.hpp"
#include "evgen/render.hpp"
#include "evgen/voxel.hpp"

using namespace evgen;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct CmdResult {
    int code = -1;
    std::string out, err;
};

// run the real binary through the shell, capturing both channels
CmdResult run_cli(const std::string& args) {
    const fs::path so = fs::temp_directory_path() / "evgen_cli_out.txt";
    const fs::path se = fs::temp_directory_path() / "evgen_cli_err.txt";
    const std::string cmd =
        std::string(EVGEN_CLI_BINARY) + " " + args + " >" + so.string() + " 2>" + se.string();
    const int status = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = file_bytes(so);
    r.err = file_bytes(se);
    std::remove(so.string().c_str());
    std::remove(se.string().c_str());
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// run configuration parsing
// ---------------------------------------------------------------------------

TEST_CASE("an empty config document yields the documented defaults") {
    const cli::RunConfig rc = cli::parse_run_config("{}");
    CHECK(rc.seed == 7);
    CHECK(rc.data_dir.empty());
    CHECK(!rc.has_synth);
    CHECK(rc.val_fraction == 0.2);

    CHECK(rc.filter.window_us == 20000);
    CHECK(rc.filter.patch_px == 8);
    CHECK(rc.filter.threshold == 7);
    CHECK(rc.channels == 1);
    CHECK(rc.prob_cap == 1.0);

    CHECK(rc.ae.resolution == 32);
    CHECK(rc.ae.latent_dim == 64);
    CHECK(rc.ae.channels == 1);
    REQUIRE(rc.stages.size() == 3);  // resolution ladder 8 -> 16 -> 32
    CHECK(rc.stages[0].resolution == 8);
    CHECK(rc.stages[1].resolution == 16);
    CHECK(rc.stages[2].resolution == 32);
    CHECK(rc.stages[0].max_events == 128);
    CHECK(rc.stages[1].max_events == 512);
    CHECK(rc.stages[2].max_events == 2048);
    CHECK(rc.stages[0].epochs == 30);
    CHECK(rc.stages[0].warmup_epochs == 6);
    CHECK(rc.finetune_epochs == 0);

    CHECK(rc.loss.k_err == 1e2);
    CHECK(rc.loss.k_subopt == 1e-3);
    CHECK(rc.loss.c_min == 0.1);
    CHECK(rc.loss.act_threshold == 0.5);

    CHECK(rc.dm.latent_dim == 64);  // mirrors the autoencoder latent
    CHECK(rc.dm.steps == 200);
    CHECK(rc.dm.schedule == ScheduleKind::linear);
    CHECK(rc.dm.guidance == 7.5);
    CHECK(rc.dm_slice_events == 512);
    CHECK(rc.dm_train.epochs == 30);
    CHECK(rc.dm_train.batch_size == 8);
    CHECK(rc.dm_train.lr == 1e-5);
    CHECK(rc.embeddings_file.empty());

    CHECK(rc.cls_head_hidden == 64);
    CHECK(rc.cls_p_drop == 0.2);
    CHECK(rc.cls_slice_events == 512);
    CHECK(rc.cls_max_slices == 16);
    CHECK(rc.cls_keep_remainder);
    CHECK(rc.cls_train.epochs == 40);
    CHECK(rc.cls_train.lr == 1e-4);

    CHECK(rc.gen.guidance == 7.5);
    CHECK(rc.gen.boost_factor == 3.0);
    CHECK(rc.gen.sample_steps == 0);
    CHECK(rc.gen.slice_duration_us == 20000);
    CHECK(rc.samples_per_prompt == 20);
}

TEST_CASE("unknown keys are rejected with their full path") {
    auto message_of = [](const std::string& text) {
        try {
            cli::parse_run_config(text);
        } catch (const ValidationError& e) {
            return std::string(e.what());
        }
        return std::string("(no error)");
    };
    CHECK(message_of(R"({"bogus": 1})").find("$.bogus") != std::string::npos);
    CHECK(message_of(R"({"data": {"bogus": 1}})").find("$.data.bogus") != std::string::npos);
    CHECK(message_of(R"({"filter": {"window": 5}})").find("$.filter.window") != std::string::npos);
    CHECK(message_of(R"({"diffusion": {"Steps": 5}})").find("$.diffusion.Steps") != std::string::npos);
    CHECK(message_of(R"({"autoencoder": {"resolution": 16,
                          "stages": [{"oops": 1}, {}]}})")
              .find("$.autoencoder.stages[0].oops") != std::string::npos);
    CHECK(message_of(R"({"filter": {"window_us": "fast"}})").find("bad value type for $.filter.window_us") !=
          std::string::npos);
}

TEST_CASE("config cross-field rules are enforced") {
    CHECK_THROWS_AS(cli::parse_run_config("not json"), FormatError);
    CHECK_THROWS_AS(cli::parse_run_config(R"({"data": {"val_fraction": 1.0}})"), ValidationError);
    CHECK_THROWS_AS(cli::parse_run_config(R"({"voxel": {"prob_cap": 0}})"), ValidationError);
    CHECK_THROWS_AS(cli::parse_run_config(R"({"data": {"dir": "/definitely/not/here"}})"),
                    ValidationError);
    // a real directory plus synth is ambiguous
    const fs::path dir = temp_dir("evgen_cfg_data");
    const std::string both = std::string(R"({"data": {"dir": ")") + dir.string() +
                             R"(", "synth": {"classes": ["cw"]}}})";
    CHECK_THROWS_AS(cli::parse_run_config(both), ValidationError);
    fs::remove_all(dir);

    CHECK_THROWS_AS(cli::parse_run_config(R"({"data": {"synth": {"classes": ["diagonal"]}}})"),
                    ValidationError);
    CHECK_THROWS_AS(
        cli::parse_run_config(R"({"autoencoder": {"resolution": 16, "stages": [{}]}})"),
        ValidationError);  // needs exactly 2 entries
    CHECK_THROWS_AS(cli::parse_run_config(R"({"generate": {"boost_factor": 0.5}})"),
                    ValidationError);
    CHECK_THROWS_AS(cli::parse_run_config(R"({"diffusion": {"schedule": "quadratic"}})"),
                    ValidationError);
    CHECK_THROWS_AS(
        cli::parse_run_config(R"({"diffusion": {"embeddings_file": "/missing.evem"}})"),
        ValidationError);
}

TEST_CASE("overrides flow into the derived sections") {
    const std::string text = R"({
      "seed": 123,
      "data": {"synth": {"classes": ["right", "left"], "samples_per_class": 4}},
      "voxel": {"channels": 2},
      "autoencoder": {"resolution": 16, "latent_dim": 24,
                      "stages": [{"max_events": 64}, {"epochs": 5, "lr": 0.001}],
                      "finetune": {"epochs": 3}},
      "diffusion": {"steps": 64, "schedule": "cosine", "guidance": 3.0, "epochs": 2},
      "generate": {"boost_factor": 1.5, "sample_steps": 10, "slice_duration_us": 5000},
      "evaluate": {"samples_per_prompt": 3}
    })";
    const cli::RunConfig rc = cli::parse_run_config(text);
    CHECK(rc.seed == 123);
    REQUIRE(rc.has_synth);
    REQUIRE(rc.synth.classes.size() == 2);
    CHECK(rc.synth.classes[0].id == 2);  // "right" resolves to the built-in id
    CHECK(rc.synth.classes[1].id == 3);
    CHECK(rc.synth.samples_per_class == 4);
    CHECK(rc.ae.channels == 2);  // voxel channels feed the autoencoder input
    REQUIRE(rc.stages.size() == 2);
    CHECK(rc.stages[0].max_events == 64);
    CHECK(rc.stages[0].resolution == 8);
    CHECK(rc.stages[1].resolution == 16);
    CHECK(rc.stages[1].epochs == 5);
    CHECK(rc.stages[1].lr == 0.001);
    CHECK(rc.stages[1].max_events == 128);  // untouched fields keep defaults
    CHECK(rc.finetune_epochs == 3);
    CHECK(rc.dm.latent_dim == 24);
    CHECK(rc.dm.steps == 64);
    CHECK(rc.dm.schedule == ScheduleKind::cosine);
    CHECK(rc.dm_train.epochs == 2);
    CHECK(rc.gen.boost_factor == 1.5);
    CHECK(rc.gen.sample_steps == 10);
    CHECK(rc.gen.slice_duration_us == 5000);
    CHECK(rc.gen.guidance == 3.0);  // guidance rides along from the diffusion section
    CHECK(rc.samples_per_prompt == 3);
}

TEST_CASE("config files load from disk and report io failures") {
    const fs::path path = fs::temp_directory_path() / "evgen_cfg.json";
    std::ofstream(path) << R"({"seed": 55})";
    CHECK(cli::load_run_config(path.string()).seed == 55);
    std::remove(path.string().c_str());
    CHECK_THROWS_AS(cli::load_run_config(path.string()), IoError);
}

// ---------------------------------------------------------------------------
// prompt files and reports
// ---------------------------------------------------------------------------

TEST_CASE("prompt files map classes, prompts and group rollups") {
    const std::string text = R"({
      "classes": ["cw", "ccw", "right"],
      "prompts": [{"key": "cw", "class": 0}, {"key": "spin the other way", "class": 1}],
      "groups": {"cw": "rotation", "ccw": "rotation", "right": "translation"}
    })";
    const cli::PromptFile pf = cli::parse_prompt_file(text);
    CHECK(pf.classes == std::vector<std::string>{"cw", "ccw", "right"});
    REQUIRE(pf.prompts.size() == 2);
    CHECK(pf.prompts[1].key == "spin the other way");
    CHECK(pf.prompts[1].class_id == 1);
    CHECK(pf.groups.at(0) == "rotation");
    CHECK(pf.groups.at(2) == "translation");
}

TEST_CASE("prompt files are validated strictly") {
    CHECK_THROWS_AS(cli::parse_prompt_file("{"), FormatError);
    CHECK_THROWS_AS(cli::parse_prompt_file(R"({"classes": ["a"]})"), ValidationError);
    CHECK_THROWS_AS(cli::parse_prompt_file(R"({"prompts": []})"), ValidationError);
    CHECK_THROWS_AS(cli::parse_prompt_file(R"({"classes": [], "prompts": []})"), ValidationError);
    CHECK_THROWS_AS(
        cli::parse_prompt_file(R"({"classes": ["a"], "prompts": [{"key": "x", "class": 1}]})"),
        ValidationError);
    CHECK_THROWS_AS(cli::parse_prompt_file(R"({"classes": ["a"], "prompts": [{"class": 0}]})"),
                    ValidationError);
    CHECK_THROWS_AS(
        cli::parse_prompt_file(R"({"classes": ["a"], "prompts": [{"key": "x", "class": 0, "extra": 1}]})"),
        ValidationError);
    CHECK_THROWS_AS(
        cli::parse_prompt_file(
            R"({"classes": ["a"], "prompts": [{"key": "x", "class": 0}], "groups": {"b": "g"}})"),
        ValidationError);
    CHECK_THROWS_AS(
        cli::parse_prompt_file(
            R"({"classes": ["a"], "prompts": [{"key": "x", "class": 0}], "groups": {"a": 3}})"),
        ValidationError);
}

TEST_CASE("evaluation reports serialize deterministically") {
    EvalReport rep;
    rep.class_names = {"cw", "ccw"};
    rep.class_count = {2, 1};
    rep.class_accuracy = {0.5, 1.0};
    rep.group_count = {{"rotation", 3}};
    rep.group_accuracy = {{"rotation", 2.0 / 3.0}};
    rep.mean_accuracy = 2.0 / 3.0;
    rep.sample_count = 3;
    rep.unclassifiable = 1;
    rep.seed = 9;
    rep.boost_factor = 3.0;

    const std::string text = cli::report_to_json(rep);
    CHECK(text == cli::report_to_json(rep));
    CHECK(text.back() == '\n');
    const nlohmann::json j = nlohmann::json::parse(text);
    CHECK(j.at("seed").get<std::uint64_t>() == 9);
    CHECK(j.at("boost_factor").get<double>() == 3.0);
    CHECK(j.at("sample_count").get<std::size_t>() == 3);
    CHECK(j.at("unclassifiable").get<std::size_t>() == 1);
    CHECK(j.at("mean_accuracy").get<double>() == 2.0 / 3.0);
    CHECK(j.at("class_accuracy").at("cw").get<double>() == 0.5);
    CHECK(j.at("class_accuracy").at("ccw").get<double>() == 1.0);
    CHECK(j.at("class_count").at("ccw").get<std::size_t>() == 1);
    CHECK(j.at("group_accuracy").at("rotation").get<double>() == 2.0 / 3.0);
    CHECK(j.at("group_count").at("rotation").get<std::size_t>() == 3);
    // two-space indentation as documented
    CHECK(text.find("{\n  \"boost_factor\"") == 0);
}

// ---------------------------------------------------------------------------
// the real binary
// ---------------------------------------------------------------------------

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli("").code == 2);
    const CmdResult unknown = run_cli("frobnicate");
    CHECK(unknown.code == 2);
    CHECK(unknown.err.find("error:") != std::string::npos);
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("synth-data --nope x").code == 2);
    CHECK(run_cli("filter --in only.evs").code == 2);  // --out is required
    CHECK(run_cli("render --in a.evs --out b.pgm --mode sideways").code == 2);
}

TEST_CASE("runtime failures exit with code 1 and an error line") {
    const CmdResult r = run_cli("generate --ckpt-ae /no/ae --ckpt-dm /no/dm --prompt cw --out /tmp/x.evs");
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error: ", 0) == 0);
}

TEST_CASE("synth-data writes deterministic labeled datasets") {
    const fs::path a = temp_dir("evgen_cli_synth_a");
    const fs::path b = temp_dir("evgen_cli_synth_b");
    const std::string args = "--classes right,left --samples 2 --duration-us 50000 "
                             "--events-per-us 0.01 --seed 5 --out ";
    const CmdResult ra = run_cli("synth-data " + args + a.string());
    CHECK(ra.code == 0);
    CHECK(ra.out.find("wrote 4 streams") != std::string::npos);
    CHECK(run_cli("synth-data " + args + b.string()).code == 0);

    for (const char* name : {"right_000.evs", "right_001.evs", "left_000.evs", "left_001.evs"}) {
        REQUIRE(fs::exists(a / name));
        CHECK(file_bytes(a / name) == file_bytes(b / name));
    }
    const EventStream s = read_events((a / "left_001.evs").string(), EventFormat::binary);
    CHECK(s.label == 3);
    CHECK(s.width == 32);
    CHECK(!s.events.empty());
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("filter, voxelize and render run end to end on files") {
    const fs::path dir = temp_dir("evgen_cli_flow");
    REQUIRE(run_cli("synth-data --classes cw --samples 1 --duration-us 100000 --seed 3 --out " +
                    dir.string())
                .code == 0);
    const fs::path raw = dir / "cw_000.evs";

    const fs::path kept = dir / "kept.evs";
    const CmdResult fr = run_cli("filter --in " + raw.string() + " --out " + kept.string());
    CHECK(fr.code == 0);
    CHECK(fr.out.find("kept") != std::string::npos);
    const EventStream before = read_events(raw.string(), EventFormat::binary);
    const EventStream after = read_events(kept.string(), EventFormat::binary);
    CHECK(after.events.size() <= before.events.size());
    CHECK(!after.events.empty());

    // csv output is selected by extension and reads back identically
    const fs::path csv = dir / "kept.csv";
    REQUIRE(run_cli("filter --in " + raw.string() + " --out " + csv.string()).code == 0);
    const EventStream round = read_events(csv.string(), EventFormat::csv, after.width, after.height);
    CHECK(round.events == after.events);

    const CmdResult vr = run_cli("voxelize --in " + kept.string() + " --out " +
                                 (dir / "grid_").string() + " --bins 2 --count 128");
    CHECK(vr.code == 0);
    REQUIRE(fs::exists(dir / "grid_000.evg1"));
    const VoxelGrid g = read_grid((dir / "grid_000.evg1").string());
    CHECK(g.C == 2);
    CHECK(g.W == before.width);
    double total = 0;
    for (float v : g.data) {
        CHECK(v == float(std::int64_t(v)));  // raw counts stay integral
        total += v;
    }
    CHECK(total == 128.0);
    CHECK(run_cli("voxelize --in " + kept.string() + " --out x --count 0").code == 1);

    const fs::path pgm = dir / "view.pgm";
    CHECK(run_cli("render --in " + kept.string() + " --out " + pgm.string()).code == 0);
    CHECK(file_bytes(pgm).substr(0, 3) == "P5\n");
    const fs::path ppm = dir / "view.ppm";
    CHECK(run_cli("render --in " + kept.string() + " --out " + ppm.string() +
                  " --mode spacetime --time-bins 64")
              .code == 0);
    CHECK(file_bytes(ppm).substr(0, 3) == "P6\n");
    fs::remove_all(dir);
}

TEST_CASE("the built-in gradient check passes at the shipped tolerance") {
    const CmdResult r = run_cli("grad-check --seed 11");
    CHECK(r.code == 0);
    CHECK(r.out.find("max_rel_err") != std::string::npos);
    CHECK(r.out.find("all layer kinds below") != std::string::npos);
}
