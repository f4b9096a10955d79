// ovkv: bounded KV-cache engine driven by a synthetic camera-stream model.
//
//   ovkv run    --frames 500 --scene orbit --out metrics.jsonl --trace-out run.trace
//   ovkv probe  --strategy ffn --strategy random --probe-runs 20
//   ovkv replay --replay run.trace

#include <CLI11.hpp>

#include "ovkv/cli.hpp"

namespace {

void add_engine_flags(CLI::App* cmd, ovkv::cli::RunOptions& opt, std::string& scene_name) {
    cmd->add_option("--budget", opt.engine.total_budget, "Total cache budget in tokens")
        ->capture_default_str();
    cmd->add_option("--alpha", opt.engine.smoothing_alpha, "Smoothing blend weight")
        ->capture_default_str();
    cmd->add_option("--beta", opt.engine.hybrid_beta, "Fresh-token weight in hybrid scoring")
        ->capture_default_str();
    cmd->add_option("--tau", opt.engine.coverage_tau, "Coverage threshold for anchor registration")
        ->capture_default_str();
    cmd->add_option("--eta", opt.engine.anchor_eta, "Fraction of patches protected per anchor")
        ->capture_default_str();
    cmd->add_option("--kmax", opt.engine.max_anchors, "Historical anchor capacity")
        ->capture_default_str();
    cmd->add_option("--min-interval", opt.engine.min_anchor_interval,
                    "Minimum frames between anchor registrations")
        ->capture_default_str();
    cmd->add_option("--kernel-size", opt.engine.gaussian_kernel_size, "Smoothing kernel width (odd)")
        ->capture_default_str();
    cmd->add_option("--sigma", opt.engine.gaussian_sigma, "Smoothing kernel standard deviation")
        ->capture_default_str();
    cmd->add_option("--frames", opt.frames, "Frames to stream")->capture_default_str();
    cmd->add_option("--scene", scene_name, "Scene: orbit, corridor, randomwalk")
        ->capture_default_str();
    cmd->add_option("--seed", opt.seed, "Base RNG seed")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bounded KV-cache engine with anchor protection"};
    app.require_subcommand(1);

    ovkv::cli::RunOptions opt;
    opt.threads = ovkv::cli::threads_from_env();
    std::string scene_name = "orbit";
    std::vector<std::string> strategy_names;
    std::string replay_path;

    CLI::App* run = app.add_subcommand("run", "Stream a scene through the engine");
    add_engine_flags(run, opt, scene_name);
    run->add_option("--out", opt.metrics_out, "Per-step metrics output (JSONL)")
        ->capture_default_str();
    run->add_option("--trace-out", opt.trace_out, "Replayable trace output (JSONL)");

    CLI::App* probe = app.add_subcommand("probe", "Compare fresh-token scoring strategies");
    add_engine_flags(probe, opt, scene_name);
    probe->add_option("--strategy", strategy_names,
                      "Strategies to compare: ffn, attention, qk, random (repeatable)");
    probe->add_option("--probe-runs", opt.probe_runs, "Seeds evaluated per strategy")
        ->capture_default_str();
    probe->add_option("--out", opt.metrics_out, "Aggregate results output (JSON)")
        ->capture_default_str();

    CLI::App* replay = app.add_subcommand("replay", "Verify a recorded trace");
    replay->add_option("--replay", replay_path, "Trace file to verify")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ovkv::cli::kExitOk : ovkv::cli::kExitConfig;
    }

    const auto scene = ovkv::sim::parse_scene(scene_name);
    if (!scene) {
        std::cerr << "config error: unknown scene '" << scene_name << "'\n";
        return ovkv::cli::kExitConfig;
    }
    opt.scene = *scene;
    for (const auto& name : strategy_names) {
        const auto kind = ovkv::sim::parse_probe(name);
        if (!kind) {
            std::cerr << "config error: unknown strategy '" << name << "'\n";
            return ovkv::cli::kExitConfig;
        }
        opt.strategies.push_back(*kind);
    }

    if (run->parsed()) return ovkv::cli::cmd_run(opt);
    if (probe->parsed()) return ovkv::cli::cmd_probe(opt);
    return ovkv::cli::cmd_replay(replay_path);
}
