// Command-line surface: gen-data, train, keypoints, flow, segment, discover,
// probe, report. Exit codes: 0 success, 1 config error, 2 missing artifact,
// 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include "cwm/config.hpp"
#include "cwm/counterfactual.hpp"
#include "cwm/eval.hpp"
#include "cwm/image.hpp"
#include "cwm/predictor.hpp"
#include "cwm/probe.hpp"
#include "cwm/rng.hpp"
#include "cwm/spriteworld.hpp"
#include "cwm/structures.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int env_threads() {
    const char* e = std::getenv("CWM_THREADS");
    if (!e) return 1;
    const int n = std::atoi(e);
    return n >= 1 ? n : 1;
}

void require_exists(const std::string& path, const std::string& what) {
    if (!fs::exists(path))
        throw MissingArtifact(what + " not found: " + path);
}

cwm::RunConfig resolve_config(const std::string& config_path, std::optional<long> seed) {
    cwm::RunConfig cfg =
        config_path.empty() ? cwm::RunConfig() : cwm::RunConfig::load_file(config_path);
    if (seed) cfg.set_int("run.seed", *seed);
    const long run_seed = cfg.get_int("run.seed", 0);
    const auto derived = [&](int salt) {
        return long(cwm::mix64(std::uint64_t(run_seed), salt) & 0x7fffffffffffffffULL);
    };
    if (!cfg.has("world.seed")) cfg.set_int("world.seed", derived(1));
    if (!cfg.has("train.seed")) cfg.set_int("train.seed", derived(2));
    if (!cfg.has("probe.feature_seed")) cfg.set_int("probe.feature_seed", derived(3));
    if (!cfg.has("query.seed")) cfg.set_int("query.seed", derived(4));
    return cfg;
}

void echo_config(const cwm::RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    cfg.write((fs::path(out_dir) / "config.resolved.ini").string());
}

cwm::PredictorState load_state(const cwm::RunConfig& cfg, const std::string& checkpoint) {
    require_exists(checkpoint, "checkpoint");
    require_exists((fs::path(checkpoint) / "manifest.json").string(), "checkpoint manifest");
    return cwm::PredictorState::load(checkpoint, cfg.predictor());
}

cwm::Episode load_episode(const std::string& dir) {
    require_exists(dir, "episode");
    require_exists((fs::path(dir) / "episode.json").string(), "episode metadata");
    return cwm::read_episode(dir);
}

json keypoint_json(const cwm::KeypointSet& ks, int patch_size) {
    json points = json::array();
    for (const auto& p : ks.points)
        points.push_back({{"prow", p.prow},
                          {"pcol", p.pcol},
                          {"row", p.prow * patch_size},
                          {"col", p.pcol * patch_size},
                          {"mse_after", p.mse_after}});
    return points;
}

// ---- commands -------------------------------------------------------------

int cmd_gen_data(const cwm::RunConfig& cfg, const std::string& out, long count, long start) {
    const cwm::WorldConfig world = cfg.world();
    echo_config(cfg, out);
    long written = 0;
    for (long i = start; i < start + count; ++i) {
        try {
            const cwm::Episode ep = cwm::generate_episode(world, std::uint64_t(i));
            char name[32];
            std::snprintf(name, sizeof(name), "episode_%05ld", i);
            cwm::write_episode((fs::path(out) / name).string(), ep);
            ++written;
        } catch (const cwm::PlacementError&) {
            std::cerr << "cwm: episode " << i << " skipped (placement unsatisfiable)\n";
        }
    }
    std::cout << "wrote " << written << " episodes to " << out << "\n";
    return 0;
}

int cmd_train(const cwm::RunConfig& cfg, const std::string& out) {
    const cwm::PredictorConfig pcfg = cfg.predictor();
    const cwm::WorldConfig world = cfg.world();
    const cwm::TrainConfig tcfg = cfg.train();
    echo_config(cfg, out);
    const cwm::TrainResult res = cwm::train_predictor(pcfg, world, tcfg, out, cfg.hash());
    if (res.aborted_nonfinite)
        throw NumericalFailure("training aborted on non-finite loss at step " +
                               std::to_string(res.completed_steps) +
                               "; last good checkpoint written to " + out);
    std::cout << "trained " << res.completed_steps << " steps";
    if (!res.curve.empty())
        std::cout << "; final holdout mse " << res.curve.back().holdout_loss << " vs baseline "
                  << res.curve.back().baseline_loss;
    std::cout << "\ncheckpoint: " << out << "/checkpoint\n";
    return 0;
}

int cmd_keypoints(const cwm::RunConfig& cfg, const std::string& checkpoint,
                  const std::string& episode, const std::string& out, int frame, int iters,
                  const std::string& mode) {
    const cwm::PredictorState state = load_state(cfg, checkpoint);
    const cwm::Episode ep = load_episode(episode);
    if (frame + 1 >= int(ep.frames.size()))
        throw std::invalid_argument("cwm: frame " + std::to_string(frame) +
                                    " has no successor in episode");
    const cwm::PredictorModel model(state);
    const auto km = mode == "greedy" ? cwm::KeypointMode::GreedyArgmax
                                     : cwm::KeypointMode::TopkEval;
    const auto ks =
        cwm::extract_keypoints(model, ep.frames[frame], ep.frames[frame + 1], iters, km);

    fs::create_directories(out);
    json j;
    j["config_hash"] = cfg.hash();
    j["episode"] = episode;
    j["frame"] = frame;
    j["mode"] = mode;
    j["points"] = keypoint_json(ks, state.cfg.patch_size);
    std::ofstream os(fs::path(out) / "keypoints.json");
    os << j.dump(2) << "\n";
    std::cout << "wrote " << out << "/keypoints.json (" << ks.points.size() << " keypoints)\n";
    return 0;
}

int cmd_flow(const cwm::RunConfig& cfg, const std::string& checkpoint,
             const std::string& episode, const std::string& out, int frame,
             const std::string& method) {
    const cwm::PredictorState state = load_state(cfg, checkpoint);
    const cwm::Episode ep = load_episode(episode);
    if (frame + 1 >= int(ep.frames.size()))
        throw std::invalid_argument("cwm: frame " + std::to_string(frame) +
                                    " has no successor in episode");
    fs::create_directories(out);

    cwm::FlowField flow;
    int upscale = 1;
    if (method == "cosine") {
        upscale = cfg.flow_upscale();
        const cwm::PredictorState scaled = state.resized(state.cfg.image_size * upscale);
        const cwm::PredictorModel model(scaled);
        const cwm::Frame x1 = cwm::upscale_nearest(ep.frames[frame], upscale);
        const cwm::Frame x2 = cwm::upscale_nearest(ep.frames[frame + 1], upscale);
        flow = cwm::downscale_flow(cwm::flow_field(model, x1, x2, cwm::FlowMethod::Cosine),
                                   upscale);
    } else {
        const cwm::PredictorModel model(state);
        flow = cwm::flow_field(model, ep.frames[frame], ep.frames[frame + 1],
                               cwm::FlowMethod::Perturbation,
                               std::uint64_t(cfg.get_int("query.seed", 0)));
    }

    cwm::write_flow_bin((fs::path(out) / "flow.bin").string(), {flow});
    cwm::write_ppm((fs::path(out) / "flow.ppm").string(), cwm::flow_to_color(flow));
    json meta;
    meta["config_hash"] = cfg.hash();
    meta["episode"] = episode;
    meta["frame"] = frame;
    meta["method"] = method;
    meta["upscale"] = upscale;
    // cosine flow is indexed by second-frame positions (matching gt_flow);
    // perturbation flow is indexed by first-frame positions with one query
    // per patch center, nearest-neighbor filled
    meta["indexed_by"] = method == "cosine" ? "second_frame" : "first_frame";
    if (method == "perturbation") meta["stride"] = state.cfg.patch_size;
    std::ofstream os(fs::path(out) / "flow.json");
    os << meta.dump(2) << "\n";
    std::cout << "wrote " << out << "/flow.bin and flow.ppm\n";
    return 0;
}

int cmd_segment(const cwm::RunConfig& cfg, const std::string& checkpoint,
                const std::string& episode, const std::string& out, int frame, int pr, int pc) {
    const cwm::PredictorState state = load_state(cfg, checkpoint);
    const cwm::Episode ep = load_episode(episode);
    if (frame >= int(ep.frames.size()))
        throw std::invalid_argument("cwm: frame out of range");
    fs::create_directories(out);

    const int upscale = cfg.segment_upscale();
    const cwm::PredictorState scaled = state.resized(state.cfg.image_size * upscale);
    const cwm::PredictorModel model(scaled);
    const cwm::Frame big = cwm::upscale_nearest(ep.frames[frame], upscale);
    const cwm::SegmentParams params = cfg.segment_params();
    const cwm::SegmentResult seg =
        cwm::extract_segment(model, big, pr * upscale, pc * upscale,
                             std::uint64_t(cfg.get_int("query.seed", 0)), params);

    cwm::Mask native(ep.canvas, ep.canvas);
    for (int r = 0; r < ep.canvas; ++r)
        for (int c = 0; c < ep.canvas; ++c) native.set(r, c, seg.mask.get(r * upscale, c * upscale));
    cwm::write_pgm((fs::path(out) / "segment.pgm").string(), native);

    json j;
    j["config_hash"] = cfg.hash();
    j["episode"] = episode;
    j["frame"] = frame;
    j["query_pixel"] = {pr, pc};
    j["query_inside"] = seg.query_inside;
    j["empty"] = seg.empty_flag;
    j["iterations"] = params.iterations;
    j["threshold"] = params.threshold;
    j["radius_frac"] = params.radius_frac;
    j["upscale"] = upscale;
    j["mask_pixels"] = native.count();
    std::ofstream os(fs::path(out) / "segment.json");
    os << j.dump(2) << "\n";
    std::cout << "wrote " << out << "/segment.pgm (" << native.count() << " px)\n";
    return 0;
}

int cmd_discover(const cwm::RunConfig& cfg, const std::string& checkpoint,
                 const std::string& episode, const std::string& out, int frame) {
    const cwm::PredictorState state = load_state(cfg, checkpoint);
    const cwm::Episode ep = load_episode(episode);
    if (frame >= int(ep.frames.size()))
        throw std::invalid_argument("cwm: frame out of range");
    fs::create_directories(out);

    const int upscale = cfg.segment_upscale();
    const cwm::PredictorState scaled = state.resized(state.cfg.image_size * upscale);
    const cwm::PredictorModel model(scaled);
    const cwm::Frame big = cwm::upscale_nearest(ep.frames[frame], upscale);

    cwm::DiscoverParams dp;
    dp.max_objects = int(cfg.get_int("discover.max_objects", 3));
    dp.movability_samples = int(cfg.get_int("discover.movability_samples", 16));
    dp.segment = cfg.segment_params();
    const auto found =
        cwm::discover_objects(model, big, std::uint64_t(cfg.get_int("query.seed", 0)), dp);

    json j;
    j["config_hash"] = cfg.hash();
    j["episode"] = episode;
    j["frame"] = frame;
    j["objects"] = json::array();
    for (std::size_t i = 0; i < found.size(); ++i) {
        cwm::Mask native(ep.canvas, ep.canvas);
        for (int r = 0; r < ep.canvas; ++r)
            for (int c = 0; c < ep.canvas; ++c)
                native.set(r, c, found[i].mask.get(r * upscale, c * upscale));
        char name[32];
        std::snprintf(name, sizeof(name), "discover_%zu.pgm", i);
        cwm::write_pgm((fs::path(out) / name).string(), native);
        j["objects"].push_back({{"mask", name},
                                {"pixels", native.count()},
                                {"query", {found[i].query_r / upscale, found[i].query_c / upscale}}});
    }
    std::ofstream os(fs::path(out) / "discover.json");
    os << j.dump(2) << "\n";
    std::cout << "found " << found.size() << " objects, wrote masks to " << out << "\n";
    return 0;
}

int cmd_probe(const cwm::RunConfig& cfg, const std::string& checkpoint, const std::string& out,
              const std::string& task_name, bool ablate) {
    const cwm::PredictorState state = load_state(cfg, checkpoint);
    echo_config(cfg, out);

    cwm::ProbeRunConfig pcfg = cfg.probe();
    pcfg.ablate_structures = ablate;
    pcfg.threads = env_threads();
    pcfg.seed = std::uint64_t(cfg.get_int("probe.feature_seed", 0));
    const cwm::ContactTask task =
        task_name == "ocd" ? cwm::ContactTask::OCD : cwm::ContactTask::OCP;

    const cwm::ProbeTaskResult res = cwm::run_probe_task(state, task, pcfg);

    // flow / segment quality metrics for the results table
    const cwm::WorldConfig world = pcfg.world;
    const int epe_eps = int(cfg.get_int("eval.epe_episodes", 20));
    const int iou_queries = int(cfg.get_int("eval.iou_queries", 20));
    const auto flow_eval = cwm::eval_flow_epe(state, world, epe_eps, cfg.flow_upscale(),
                                              pcfg.seed, pcfg.threads);
    const auto seg_eval = cwm::eval_segment_iou(state, world, iou_queries, cfg.segment_upscale(),
                                                pcfg.seed, pcfg.threads, cfg.segment_params());

    json j;
    j["task"] = task_name;
    j["config_hash"] = cfg.hash();
    j["seeds"] = {{"run", cfg.get_int("run.seed", 0)},
                  {"world", cfg.get_int("world.seed", 0)},
                  {"features", cfg.get_int("probe.feature_seed", 0)}};
    j["n_train"] = pcfg.n_train;
    j["n_test"] = pcfg.n_test;
    j["rows"] = json::array();
    for (const auto& row : res.rows)
        j["rows"].push_back({{"name", row.name},
                             {"keypoints", row.flags.keypoints},
                             {"flow", row.flags.flow},
                             {"segments", row.flags.segments},
                             {"accuracy", row.test_accuracy},
                             {"cv_accuracy", row.cv_accuracy},
                             {"l2", row.chosen_l2},
                             {"converged", row.converged}});
    j["epe"] = flow_eval.mean_epe;
    j["epe_episodes"] = flow_eval.episodes;
    j["mean_iou"] = seg_eval.mean_iou;
    j["iou_queries"] = seg_eval.queries;

    fs::create_directories(out);
    std::ofstream os(fs::path(out) / "results.json");
    os << j.dump(2) << "\n";

    std::ofstream csv(fs::path(out) / "predictions.csv");
    csv << "episode_index,label";
    for (const auto& row : res.rows) csv << "," << row.name;
    csv << "\n";
    for (std::size_t i = 0; i < res.split.test.size(); ++i) {
        csv << res.split.test[i] << "," << res.split.test_labels[i];
        for (const auto& row : res.rows) csv << "," << row.test_predictions[i];
        csv << "\n";
    }

    std::cout << "task " << task_name << ":";
    for (const auto& row : res.rows)
        std::cout << " " << row.name << "=" << row.test_accuracy;
    std::cout << " epe=" << flow_eval.mean_epe << " iou=" << seg_eval.mean_iou << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
    std::ostringstream table;
    table << "task        row                   acc     cv      l2      epe     iou\n";
    for (const auto& path : inputs) {
        require_exists(path, "results file");
        std::ifstream is(path);
        json j = json::parse(is);
        for (const auto& row : j.at("rows")) {
            char line[160];
            std::snprintf(line, sizeof(line), "%-10s  %-20s  %.4f  %.4f  %-6g  %.3f   %.3f\n",
                          j.value("task", "?").c_str(),
                          row.value("name", "?").c_str(), row.value("accuracy", 0.0),
                          row.value("cv_accuracy", 0.0), row.value("l2", 0.0),
                          j.value("epe", 0.0), j.value("mean_iou", 0.0));
            table << line;
        }
    }
    std::cout << table.str();
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream os(fs::path(out) / "report.txt");
        os << table.str();
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"counterfactual world model: train, query, evaluate"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", checkpoint, episode, method = "cosine";
    std::string task = "ocd", mode = "topk", pixel, ablate;
    std::optional<long> seed;
    long count = 8, start = 0, train_steps = -1;
    int frame = 0, iters = 5;
    std::vector<std::string> report_inputs;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (key=value sections)");
        sub->add_option("--seed", seed, "global seed override");
        sub->add_option("--out", out_dir, "output directory");
    };

    auto* gen = app.add_subcommand("gen-data", "materialize episode directories");
    add_common(gen);
    gen->add_option("--count", count, "episodes to generate");
    gen->add_option("--start-index", start, "first episode index");

    auto* train = app.add_subcommand("train", "train the predictor; writes checkpoint + loss csv");
    add_common(train);
    train->add_option("--steps", train_steps, "override train.steps");

    auto* keyp = app.add_subcommand("keypoints", "extract keypoints from an episode frame pair");
    add_common(keyp);
    keyp->add_option("--checkpoint", checkpoint)->required();
    keyp->add_option("--episode", episode)->required();
    keyp->add_option("--frame", frame, "first frame of the pair");
    keyp->add_option("--iters", iters, "number of keypoints");
    keyp->add_option("--mode", mode, "topk|greedy");

    auto* flow = app.add_subcommand("flow", "dense flow for an episode frame pair");
    add_common(flow);
    flow->add_option("--checkpoint", checkpoint)->required();
    flow->add_option("--episode", episode)->required();
    flow->add_option("--frame", frame);
    flow->add_option("--method", method, "cosine|perturbation");

    auto* segment = app.add_subcommand("segment", "segment at a pixel of an episode frame");
    add_common(segment);
    segment->add_option("--checkpoint", checkpoint)->required();
    segment->add_option("--episode", episode)->required();
    segment->add_option("--frame", frame);
    segment->add_option("--pixel", pixel, "query pixel as row,col")->required();

    auto* discover = app.add_subcommand("discover", "discover up to N objects in a frame");
    add_common(discover);
    discover->add_option("--checkpoint", checkpoint)->required();
    discover->add_option("--episode", episode)->required();
    discover->add_option("--frame", frame);

    auto* probe = app.add_subcommand("probe", "toy OCP/OCD probing protocol");
    add_common(probe);
    probe->add_option("--checkpoint", checkpoint)->required();
    probe->add_option("--task", task, "ocp|ocd")->required();
    probe->add_option("--ablate", ablate, "set to 'structures' for the four-row table");

    auto* report = app.add_subcommand("report", "aggregate results.json files into a table");
    report->add_option("--out", out_dir, "optional output directory");
    report->add_option("inputs", report_inputs, "results.json paths")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "cwm: " << e.what() << "\n";
        return 1;
    }

    try {
        const cwm::RunConfig cfg = resolve_config(config_path, seed);
        if (gen->parsed()) return cmd_gen_data(cfg, out_dir, count, start);
        if (train->parsed()) {
            cwm::RunConfig tcfg = cfg;
            if (train_steps >= 1) tcfg.set_int("train.steps", train_steps);
            return cmd_train(tcfg, out_dir);
        }
        if (keyp->parsed())
            return cmd_keypoints(cfg, checkpoint, episode, out_dir, frame, iters, mode);
        if (flow->parsed()) {
            if (method != "cosine" && method != "perturbation")
                throw std::invalid_argument("cwm: --method must be cosine or perturbation");
            return cmd_flow(cfg, checkpoint, episode, out_dir, frame, method);
        }
        if (segment->parsed()) {
            const auto comma = pixel.find(',');
            if (comma == std::string::npos)
                throw std::invalid_argument("cwm: --pixel expects row,col");
            const int pr = std::stoi(pixel.substr(0, comma));
            const int pc = std::stoi(pixel.substr(comma + 1));
            return cmd_segment(cfg, checkpoint, episode, out_dir, frame, pr, pc);
        }
        if (discover->parsed()) return cmd_discover(cfg, checkpoint, episode, out_dir, frame);
        if (probe->parsed()) {
            if (task != "ocp" && task != "ocd")
                throw std::invalid_argument("cwm: --task must be ocp or ocd");
            if (!ablate.empty() && ablate != "structures")
                throw std::invalid_argument("cwm: --ablate only supports 'structures'");
            return cmd_probe(cfg, checkpoint, out_dir, task, ablate == "structures");
        }
        if (report->parsed()) return cmd_report(report_inputs, out_dir);
        return 1;
    } catch (const MissingArtifact& e) {
        std::cerr << "cwm: " << e.what() << "\n";
        return 2;
    } catch (const NumericalFailure& e) {
        std::cerr << "cwm: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "cwm: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "cwm: " << e.what() << "\n";
        return 1;
    }
}
