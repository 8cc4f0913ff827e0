// Drives the installed binary end to end: exit codes, seeded determinism of
// every artifact it writes, and the scripted chat REPL.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "blsp/config.hpp"
#include "fixture.hpp"

namespace fs = std::filesystem;
using namespace blsp;

namespace {

std::string cli_path() {
    const char* p = std::getenv("BLSP_CLI");
    REQUIRE(p != nullptr);
    return p;
}

fs::path scratch_root() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / ("blsp-cli-test-" + std::to_string(getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

struct Cmd {
    int code = -1;
    std::string out, err;
};

Cmd run_cli(const std::string& args) {
    static int n = 0;
    const fs::path so = scratch_root() / ("stdout-" + std::to_string(n) + ".txt");
    const fs::path se = scratch_root() / ("stderr-" + std::to_string(n) + ".txt");
    ++n;
    const std::string cmd =
        cli_path() + " " + args + " >" + so.string() + " 2>" + se.string();
    const int rc = std::system(cmd.c_str());
    Cmd c;
    c.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    c.out = read_text_file(so.string());
    c.err = read_text_file(se.string());
    return c;
}

std::string file_bytes(const fs::path& p) { return read_text_file(p.string()); }

RunConfig base_config(const fs::path& dir) {
    RunConfig cfg;
    cfg.lm = fixture::lm_config();
    cfg.encoder = fixture::encoder_config();
    cfg.adapter = fixture::adapter_config();
    cfg.train.max_steps = 6;
    cfg.train.batch_size = 4;
    cfg.train.opt.lr = 2e-3f;
    cfg.train.seed = 5;
    cfg.train.log_every = 3;
    cfg.paths["lm_checkpoint"] = fixture::lm_checkpoint_path();
    cfg.paths["utterances"] = (dir / "data" / "utterances.jsonl").string();
    cfg.paths["out_dir"] = (dir / "train-out").string();
    return cfg;
}

}  // namespace

TEST_CASE("config json round-trips and rejects unknown sections") {
    RunConfig cfg;
    cfg.lm.d_model = 48;
    cfg.train.max_steps = 77;
    cfg.train.opt.lr = 3.5e-4f;
    cfg.mix.shuffle_seed = 9;
    cfg.lora.targets = {"query"};
    cfg.paths["utterances"] = "somewhere/utts.jsonl";
    cfg.judge_url = "http://127.0.0.1:9/complete";

    RunConfig back = RunConfig::from_json(cfg.to_json());
    CHECK(back == cfg);
    CHECK(back.to_json() == cfg.to_json());

    nlohmann::json j = cfg.to_json();
    j["surprise"] = 1;
    CHECK_THROWS_AS(RunConfig::from_json(j), ConfigError);

    SECTION("judge credentials come from the environment when set") {
        const fs::path p = scratch_root() / "env-cfg.json";
        cfg.save(p.string());
        setenv("JUDGE_URL", "http://judge.example/complete", 1);
        setenv("JUDGE_API_KEY", "sk-test", 1);
        RunConfig loaded = RunConfig::load(p.string());
        unsetenv("JUDGE_URL");
        unsetenv("JUDGE_API_KEY");
        CHECK(loaded.judge_url == "http://judge.example/complete");
        CHECK(loaded.judge_api_key == "sk-test");
    }
}

TEST_CASE("usage errors exit 1 with a synopsis on stderr") {
    Cmd unknown = run_cli("frobnicate");
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("usage error") != std::string::npos);
    CHECK(unknown.err.find("synth-data") != std::string::npos);

    CHECK(run_cli("").code == 1);
    CHECK(run_cli("train").code == 1);
    CHECK(run_cli("synth-data").code == 1);
    CHECK(run_cli("--help").code == 0);

    Cmd badpath = run_cli("train blsp --config /nonexistent/cfg.json");
    CHECK(badpath.code == 2);
    CHECK(badpath.err.find("error") != std::string::npos);
}

TEST_CASE("synth-data artifacts are seed-deterministic") {
    const fs::path dir = scratch_root() / "synth";
    auto gen = [&](const std::string& name, uint64_t seed) {
        const fs::path d = dir / name;
        Cmd c = run_cli("synth-data --out-dir " + d.string() + " --n 6 --seed " +
                        std::to_string(seed) + " --d-enc 16");
        REQUIRE(c.code == 0);
        return d;
    };
    const fs::path a = gen("a", 3), b = gen("b", 3), c = gen("c", 4);
    CHECK(file_bytes(a / "utterances.jsonl") == file_bytes(b / "utterances.jsonl"));
    CHECK(file_bytes(a / "feats/utt-0002.feat") == file_bytes(b / "feats/utt-0002.feat"));
    CHECK(file_bytes(a / "run.json") == file_bytes(b / "run.json"));
    CHECK(file_bytes(a / "utterances.jsonl") != file_bytes(c / "utterances.jsonl"));

    // audio refs are manifest-relative so the dataset is relocatable
    CHECK(file_bytes(a / "utterances.jsonl").find("\"audio_ref\":\"feats/") != std::string::npos);
}

TEST_CASE("behavior generation is parallel-stable and manifests its run") {
    const fs::path dir = scratch_root() / "gen";
    RunConfig cfg = base_config(dir);
    fs::create_directories(dir);
    const fs::path cfg_path = dir / "cfg.json";
    cfg.save(cfg_path.string());

    REQUIRE(run_cli("synth-data --out-dir " + (dir / "data").string() +
                    " --n 8 --seed 21 --d-enc 16").code == 0);

    auto gen = [&](const std::string& out, int workers) {
        Cmd c = run_cli("gen-behaviors --config " + cfg_path.string() + " --out " +
                        (dir / out).string() + " --behavior continuation --workers " +
                        std::to_string(workers));
        REQUIRE(c.code == 0);
    };
    gen("serial.jsonl", 1);
    gen("parallel.jsonl", 4);
    CHECK(file_bytes(dir / "serial.jsonl") == file_bytes(dir / "parallel.jsonl"));
    CHECK(!file_bytes(dir / "serial.jsonl").empty());

    nlohmann::json manifest =
        nlohmann::json::parse(file_bytes(dir / "serial.jsonl.run.json"));
    CHECK(manifest.at("command") == "gen-behaviors");
    CHECK(manifest.at("inputs").size() == 2);  // utterances + lm checkpoint
    for (const auto& [path, digest] : manifest.at("inputs").items())
        CHECK(digest.get<std::string>().size() == 16);

    Cmd rep = run_cli("gen-behaviors --utterances " + (dir / "data/utterances.jsonl").string() +
                      " --out " + (dir / "rep.jsonl").string() + " --behavior repetition");
    CHECK(rep.code == 0);
    CHECK(file_bytes(dir / "rep.jsonl").find("\"behavior\":\"repetition\"") != std::string::npos);
}

TEST_CASE("mix and the trainers wire together with stable bytes") {
    const fs::path dir = scratch_root() / "train";
    RunConfig cfg = base_config(dir);
    fs::create_directories(dir);
    REQUIRE(run_cli("synth-data --out-dir " + (dir / "data").string() +
                    " --n 8 --seed 21 --d-enc 16").code == 0);

    cfg.save((dir / "cfg.json").string());
    REQUIRE(run_cli("gen-behaviors --config " + (dir / "cfg.json").string() + " --out " +
                    (dir / "cont.jsonl").string() + " --behavior continuation").code == 0);
    REQUIRE(run_cli("gen-behaviors --utterances " + (dir / "data/utterances.jsonl").string() +
                    " --out " + (dir / "rep.jsonl").string() + " --behavior repetition")
                .code == 0);

    auto mix = [&](const std::string& out, uint64_t seed) {
        Cmd c = run_cli("mix --continuations " + (dir / "cont.jsonl").string() +
                        " --repetitions " + (dir / "rep.jsonl").string() + " --out " +
                        (dir / out).string() + " --rep-parts 1 --cont-parts 9 --seed " +
                        std::to_string(seed));
        REQUIRE(c.code == 0);
    };
    mix("mix-a.jsonl", 2);
    mix("mix-b.jsonl", 2);
    mix("mix-c.jsonl", 3);
    CHECK(file_bytes(dir / "mix-a.jsonl") == file_bytes(dir / "mix-b.jsonl"));
    CHECK(file_bytes(dir / "mix-a.jsonl") != file_bytes(dir / "mix-c.jsonl"));

    cfg.paths["behaviors"] = (dir / "mix-a.jsonl").string();
    cfg.save((dir / "cfg.json").string());

    SECTION("blsp training twice gives byte-identical checkpoints") {
        Cmd a = run_cli("train blsp --config " + (dir / "cfg.json").string() + " --out-dir " +
                        (dir / "out-a").string());
        REQUIRE(a.code == 0);
        Cmd b = run_cli("train blsp --config " + (dir / "cfg.json").string() + " --out-dir " +
                        (dir / "out-b").string());
        REQUIRE(b.code == 0);
        CHECK(file_bytes(dir / "out-a/blsp.ckpt") == file_bytes(dir / "out-b/blsp.ckpt"));
        CHECK(file_bytes(dir / "out-a/curve.csv") == file_bytes(dir / "out-b/curve.csv"));
        CHECK(fs::exists(dir / "out-a/run.json"));
    }

    SECTION("repetition-free data fails the mixed recipe with exit 2") {
        RunConfig norep = cfg;
        norep.paths["behaviors"] = (dir / "cont.jsonl").string();
        norep.save((dir / "cfg-norep.json").string());
        Cmd c = run_cli("train blsp-rp --config " + (dir / "cfg-norep.json").string() +
                        " --out-dir " + (dir / "out-norep").string());
        CHECK(c.code == 2);
        CHECK(c.err.find("InsufficientRepetitionData") != std::string::npos);
    }
}

TEST_CASE("chat replays a script byte-identically and survives bad paths") {
    const fs::path dir = scratch_root() / "chat";
    RunConfig cfg = base_config(dir);
    fs::create_directories(dir);
    cfg.save((dir / "cfg.json").string());
    REQUIRE(run_cli("synth-data --out-dir " + (dir / "data").string() +
                    " --n 2 --seed 9 --d-enc 16").code == 0);

    const fs::path script = dir / "session.script";
    write_text_file(script.string(),
                    ":text the sky\n"
                    ":speech " + (dir / "data/feats/utt-0000.feat").string() + "\n"
                    ":speech " + (dir / "missing.feat").string() + "\n"
                    ":dump\n"
                    ":quit\n");

    auto session = [&](const std::string& log) {
        Cmd c = run_cli("chat --config " + (dir / "cfg.json").string() + " --script " +
                        script.string() + " --log " + (dir / log).string());
        REQUIRE(c.code == 0);
        return file_bytes(dir / log);
    };
    const std::string a = session("a.log");
    const std::string b = session("b.log");
    CHECK(a == b);

    // two completed turns serialize two human blocks into the dumped prompt
    size_t blocks = 0;
    for (size_t pos = a.find("###[Human]:"); pos != std::string::npos;
         pos = a.find("###[Human]:", pos + 1))
        ++blocks;
    CHECK(blocks == 2);

    CHECK(a.find("error: IoError") != std::string::npos);
    CHECK(a.find("bye") != std::string::npos);  // the bad path did not end the session
    CHECK(a.find("assistant: is blue today") != std::string::npos);
}
