#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cwm/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

#ifndef CWM_CLI_PATH
#define CWM_CLI_PATH "./cwm"
#endif

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(CWM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

// small world + predictor so CLI smoke tests stay fast
void write_tiny_config(const std::string& path) {
    std::ofstream os(path);
    os << "[predictor]\n"
          "image_size = 32\n"
          "encoder_dim = 48\n"
          "encoder_depth = 2\n"
          "encoder_heads = 2\n"
          "decoder_dim = 24\n"
          "decoder_depth = 1\n"
          "decoder_heads = 2\n"
          "mask_ratio = 0.875\n"
          "[world]\n"
          "canvas = 32\n"
          "max_sprites = 2\n"
          "min_size = 6\n"
          "max_size = 10\n"
          "max_speed = 3\n"
          "frames = 8\n"
          "[train]\n"
          "steps = 2\n"
          "batch_size = 2\n"
          "eval_every = 2\n"
          "holdout_episodes = 2\n"
          "[probe]\n"
          "n_train = 8\n"
          "n_test = 4\n"
          "keypoints_per_pair = 1\n"
          "max_segments = 1\n"
          "movability_samples = 2\n"
          "l2_grid = 0.1,1\n"
          "[query]\n"
          "flow_upscale = 2\n"
          "segment_upscale = 1\n"
          "[eval]\n"
          "epe_episodes = 2\n"
          "iou_queries = 2\n";
}

struct TempTree {
    fs::path root;
    TempTree() : root("cli_smoke_tmp") {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TempTree() { fs::remove_all(root); }
    std::string operator/(const std::string& p) const { return (root / p).string(); }
};

}  // namespace

TEST_CASE("cli: end-to-end smoke (gen-data, train, queries, probe, report)") {
    TempTree tmp;
    const std::string cfg = tmp / "tiny.ini";
    write_tiny_config(cfg);

    CHECK(run("gen-data --config " + cfg + " --seed 3 --count 3 --out " + (tmp / "data")) == 0);
    int episodes = 0;
    for (const auto& e : fs::directory_iterator(tmp / "data"))
        episodes += e.path().filename().string().rfind("episode_", 0) == 0 ? 1 : 0;
    CHECK(episodes >= 2);

    CHECK(run("train --config " + cfg + " --seed 3 --steps 1 --out " + (tmp / "run")) == 0);
    CHECK(fs::exists(tmp / "run/checkpoint/manifest.json"));
    CHECK(fs::exists(tmp / "run/loss.csv"));
    CHECK(fs::exists(tmp / "run/config.resolved.ini"));

    const std::string common = " --config " + cfg + " --seed 3 --checkpoint " +
                               (tmp / "run/checkpoint") + " --episode " +
                               (tmp / "data/episode_00000");

    CHECK(run("flow" + common + " --method cosine --out " + (tmp / "flow")) == 0);
    CHECK(fs::exists(tmp / "flow/flow.bin"));
    CHECK(fs::exists(tmp / "flow/flow.ppm"));

    CHECK(run("keypoints" + common + " --iters 2 --out " + (tmp / "kp")) == 0);
    CHECK(fs::exists(tmp / "kp/keypoints.json"));

    CHECK(run("segment" + common + " --pixel 16,16 --out " + (tmp / "seg")) == 0);
    CHECK(fs::exists(tmp / "seg/segment.pgm"));
    CHECK(fs::exists(tmp / "seg/segment.json"));

    CHECK(run("discover" + common + " --out " + (tmp / "disc")) == 0);
    CHECK(fs::exists(tmp / "disc/discover.json"));

    CHECK(run("probe --config " + cfg + " --seed 3 --checkpoint " + (tmp / "run/checkpoint") +
              " --task ocd --ablate structures --out " + (tmp / "probe")) == 0);
    CHECK(fs::exists(tmp / "probe/results.json"));
    CHECK(fs::exists(tmp / "probe/predictions.csv"));
    {
        std::ifstream is(tmp / "probe/results.json");
        const std::string text((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
        CHECK(text.find("feat+keypt+flow+seg") != std::string::npos);
        CHECK(text.find("\"epe\"") != std::string::npos);
        CHECK(text.find("\"mean_iou\"") != std::string::npos);
    }

    CHECK(run("report --out " + (tmp / "rep") + " " + (tmp / "probe/results.json")) == 0);
    CHECK(fs::exists(tmp / "rep/report.txt"));
}

TEST_CASE("cli: exit codes for config errors, missing artifacts") {
    TempTree tmp;
    const std::string cfg = tmp / "tiny.ini";
    write_tiny_config(cfg);

    // unknown flag value -> config error
    CHECK(run("flow --config " + cfg + " --checkpoint nowhere --episode nowhere --method bogus "
              "--out " + (tmp / "x")) != 0);

    // missing checkpoint -> 2
    CHECK(run("flow --config " + cfg + " --checkpoint " + (tmp / "missing") + " --episode " +
              (tmp / "missing") + " --out " + (tmp / "x")) == 2);

    // malformed config -> 1
    const std::string bad = tmp / "bad.ini";
    {
        std::ofstream os(bad);
        os << "[predictor\nimage_size = 64\n";
    }
    CHECK(run("train --config " + bad + " --out " + (tmp / "y")) == 1);

    // invalid numeric value -> 1
    const std::string bad2 = tmp / "bad2.ini";
    {
        std::ofstream os(bad2);
        os << "[predictor]\nimage_size = banana\n";
    }
    CHECK(run("train --config " + bad2 + " --out " + (tmp / "z")) == 1);

    // missing subcommand -> parse error (1)
    CHECK(run("") == 1);
}

TEST_CASE("cli: identical config + seed give byte-identical outputs") {
    TempTree tmp;
    const std::string cfg = tmp / "tiny.ini";
    write_tiny_config(cfg);

    auto read_bytes = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(is)),
                           std::istreambuf_iterator<char>());
    };

    for (const std::string tag : {"a", "b"}) {
        CHECK(run("gen-data --config " + cfg + " --seed 9 --count 2 --out " +
                  (tmp / ("d" + tag))) == 0);
        CHECK(run("train --config " + cfg + " --seed 9 --steps 2 --out " +
                  (tmp / ("r" + tag))) == 0);
    }
    CHECK(read_bytes(tmp / "da/episode_00000/frame_000.ppm") ==
          read_bytes(tmp / "db/episode_00000/frame_000.ppm"));
    CHECK(read_bytes(tmp / "da/episode_00000/flow.bin") ==
          read_bytes(tmp / "db/episode_00000/flow.bin"));
    CHECK(read_bytes(tmp / "ra/checkpoint/weights.bin") ==
          read_bytes(tmp / "rb/checkpoint/weights.bin"));
    CHECK(read_bytes(tmp / "ra/loss.csv") == read_bytes(tmp / "rb/loss.csv"));
}

TEST_CASE("config: parsing, overrides, canonical hash") {
    using cwm::RunConfig;
    RunConfig cfg = RunConfig::parse_text("[a]\nx = 1\ny = 2.5\n# comment\n[b]\nz = hello\n");
    CHECK(cfg.get_int("a.x", 0) == 1);
    CHECK(cfg.get_num("a.y", 0) == 2.5);
    CHECK(cfg.get("b.z", "") == "hello");
    CHECK(cfg.get_int("a.missing", 7) == 7);

    const std::string h1 = cfg.hash();
    cfg.set_int("a.x", 2);  // flag override beats file value
    CHECK(cfg.get_int("a.x", 0) == 2);
    CHECK(cfg.hash() != h1);

    // canonical form is sorted and stable
    RunConfig cfg2 = RunConfig::parse_text("[b]\nz = hello\n[a]\ny = 2.5\nx = 2\n");
    CHECK(cfg2.canonical() == cfg.canonical());
    CHECK(cfg2.hash() == cfg.hash());

    CHECK_THROWS_AS(RunConfig::parse_text("nonsense line\n"), std::invalid_argument);
}
