#pragma once

// Command layer behind the ovkv binary. Kept header-only so the test suite
// can exercise the exact code paths the executable runs.
//
// Exit codes: 0 success, 2 configuration or infeasibility, 3 I/O failure,
// 4 determinism mismatch during replay.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ovkv/engine.hpp"
#include "ovkv/sim.hpp"
#include "ovkv/trace.hpp"

namespace ovkv::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitMismatch = 4;

struct RunOptions {
    EngineConfig engine;            ///< dims fixed to the synthetic layout
    sim::SceneKind scene = sim::SceneKind::Orbit;
    std::uint64_t seed = 1;
    std::size_t frames = 200;
    std::vector<sim::ProbeKind> strategies;
    std::size_t probe_runs = 20;    ///< seeds evaluated per strategy
    std::size_t threads = 1;        ///< worker cap, from OVKV_THREADS
    std::string metrics_out = "metrics.jsonl";
    std::string trace_out;          ///< empty: no trace
    std::string replay_path;

    RunOptions() { engine.dims = sim::toy_dims(); }
};

/// Worker cap from the environment; defaults to the hardware concurrency.
inline std::size_t threads_from_env() {
    if (const char* env = std::getenv("OVKV_THREADS")) {
        char* end = nullptr;
        const unsigned long v = std::strtoul(env, &end, 10);
        if (end != env && v > 0) return static_cast<std::size_t>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

inline std::uint64_t config_hash(const RunOptions& options) {
    const std::string canon = engine_config_to_json(options.engine).dump() + "|" +
                              sim::scene_name(options.scene) + "|" +
                              std::to_string(options.seed) + "|" +
                              std::to_string(options.frames);
    return fnv1a64(canon.data(), canon.size());
}

inline nlohmann::json header_json(const RunOptions& options) {
    const Intrinsics cam = sim::default_intrinsics();
    return {{"type", "header"},
            {"version", 1},
            {"seed", options.seed},
            {"frames", options.frames},
            {"scene", sim::scene_name(options.scene)},
            {"camera",
             {{"fx", cam.fx}, {"fy", cam.fy}, {"cx", cam.cx}, {"cy", cam.cy},
              {"width", cam.width}, {"height", cam.height}}},
            {"config", engine_config_to_json(options.engine)},
            {"config_hash", hex_u64(config_hash(options))}};
}

inline std::string summary_path_for(const std::string& metrics_path) {
    return metrics_path + ".summary.json";
}

namespace detail {

inline double mean_step_ms(const std::vector<StepMetrics>& metrics, std::size_t lo,
                           std::size_t hi) {
    if (metrics.size() < hi) return -1.0;
    double sum = 0.0;
    for (std::size_t i = lo; i < hi; ++i) sum += metrics[i].step_seconds;
    return sum / static_cast<double>(hi - lo) * 1000.0;
}

}  // namespace detail

/// Streams one synthetic scene through the engine, writing line-delimited
/// metrics plus a summary document (and optionally a replayable trace).
inline int cmd_run(const RunOptions& options, std::ostream& log = std::cerr) {
    try {
        options.engine.validate();
    } catch (const std::exception& e) {
        log << "config error: " << e.what() << "\n";
        return kExitConfig;
    }

    std::ofstream metrics_file(options.metrics_out);
    if (!metrics_file) {
        log << "i/o error: cannot open " << options.metrics_out << "\n";
        return kExitIo;
    }
    std::ofstream trace_file;
    if (!options.trace_out.empty()) {
        trace_file.open(options.trace_out);
        if (!trace_file) {
            log << "i/o error: cannot open " << options.trace_out << "\n";
            return kExitIo;
        }
        trace_file << header_json(options).dump() << "\n";
    }

    sim::SceneConfig scene_cfg;
    scene_cfg.kind = options.scene;
    scene_cfg.seed = options.seed;
    scene_cfg.dims = options.engine.dims;
    sim::TrajectoryScene scene(scene_cfg);
    sim::ToyModelConfig model_cfg;
    model_cfg.seed = options.seed;
    model_cfg.num_aux = options.engine.dims.num_aux;
    sim::ToyModel model(model_cfg);

    Engine engine(options.engine);
    engine.set_camera_intrinsics(scene_cfg.cam);

    std::size_t total_evicted = 0, registrations = 0, demotions = 0, peak_tokens = 0;
    std::uint64_t peak_bytes = 0;
    for (std::size_t t = 0; t < options.frames; ++t) {
        StepMetrics m;
        try {
            const FrameInput frame = sim::generate_frame(scene, t, model);
            m = engine.step(frame);
            metrics_file << metrics_to_json(m).dump() << "\n";
            if (trace_file.is_open()) trace_file << frame_to_json(frame, m).dump() << "\n";
        } catch (const BudgetInfeasible& e) {
            log << "infeasible budget: " << e.what() << "\n";
            return kExitConfig;
        }
        total_evicted += m.tokens_evicted;
        registrations += m.anchor_registered ? 1 : 0;
        demotions += m.anchor_demoted ? 1 : 0;
        peak_tokens = std::max(peak_tokens, m.peak_tokens);
        peak_bytes = std::max(peak_bytes, m.bytes_resident);
    }
    if (!metrics_file.flush()) {
        log << "i/o error: writing " << options.metrics_out << "\n";
        return kExitIo;
    }

    nlohmann::json summary{{"config", engine_config_to_json(options.engine)},
                           {"scene", sim::scene_name(options.scene)},
                           {"seed", options.seed},
                           {"frames", options.frames},
                           {"config_hash", hex_u64(config_hash(options))},
                           {"tokens_evicted", total_evicted},
                           {"anchor_registrations", registrations},
                           {"anchor_demotions", demotions},
                           {"peak_tokens", peak_tokens},
                           {"peak_bytes_resident", peak_bytes},
                           {"camera_budget", camera_budget(options.engine)},
                           {"budget_violations", 0}};
    const auto& metrics = engine.metrics();
    if (!metrics.empty()) {
        summary["final_layer_sizes"] = metrics.back().layer_sizes;
        summary["final_camera_size"] = metrics.back().camera_size;
        // Wall-clock aggregates live only here; per-step records must stay
        // byte-identical across runs.
        const double early = detail::mean_step_ms(metrics, 100, 200);
        const double late = detail::mean_step_ms(metrics, 1500, 2000);
        if (early >= 0.0) summary["mean_step_ms_frames_100_200"] = early;
        if (late >= 0.0) summary["mean_step_ms_frames_1500_2000"] = late;
    }
    std::ofstream summary_file(summary_path_for(options.metrics_out));
    if (!summary_file) {
        log << "i/o error: cannot open " << summary_path_for(options.metrics_out) << "\n";
        return kExitIo;
    }
    summary_file << summary.dump(2) << "\n";
    std::cout << summary.dump(2) << "\n";
    return kExitOk;
}

/// Compares fresh-token scoring strategies over a set of seeds, reporting
/// each strategy's mean proxy error against the unbounded cache.
inline int cmd_probe(const RunOptions& options, std::ostream& log = std::cerr) {
    if (options.strategies.size() < 2) {
        log << "config error: probing needs at least two --strategy values\n";
        return kExitConfig;
    }
    try {
        options.engine.validate();
    } catch (const std::exception& e) {
        log << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    if (options.frames == 0 || options.probe_runs == 0) {
        log << "config error: probing needs positive --frames and --probe-runs\n";
        return kExitConfig;
    }

    std::vector<sim::FullCacheRun> runs(options.probe_runs);
    std::atomic<std::size_t> next{0};
    std::string worker_error;
    std::mutex error_mutex;
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= options.probe_runs) return;
            try {
                sim::SceneConfig scene_cfg;
                scene_cfg.kind = options.scene;
                scene_cfg.seed = options.seed + i;
                scene_cfg.dims = options.engine.dims;
                sim::ToyModelConfig model_cfg;
                model_cfg.seed = options.seed + i;
                model_cfg.num_aux = options.engine.dims.num_aux;
                runs[i] = sim::oracle_full_cache_run(scene_cfg, model_cfg, options.engine,
                                                     options.frames, options.strategies);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (worker_error.empty()) worker_error = e.what();
                return;
            }
        }
    };
    const std::size_t worker_count =
        std::max<std::size_t>(1, std::min(options.threads, options.probe_runs));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w + 1 < worker_count; ++w) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (!worker_error.empty()) {
        log << "probe error: " << worker_error << "\n";
        return kExitConfig;
    }

    nlohmann::json table = nlohmann::json::array();
    std::ostringstream text;
    text << "strategy      mean_proxy_error  mean_step_ms  peak_bytes  attn_allocs  evicted\n";
    for (std::size_t s = 0; s < options.strategies.size(); ++s) {
        double err = 0.0, ms = 0.0;
        std::uint64_t peak = 0, allocs = 0;
        std::size_t evicted = 0;
        for (const auto& run : runs) {
            const auto& outcome = run.strategies.at(s);
            err += outcome.mean_proxy_error;
            ms += outcome.mean_step_seconds * 1000.0;
            peak = std::max(peak, outcome.peak_bytes);
            allocs += outcome.attention_allocations;
            evicted += outcome.total_evicted;
        }
        err /= static_cast<double>(options.probe_runs);
        ms /= static_cast<double>(options.probe_runs);
        const char* name = sim::probe_name(options.strategies[s]);
        table.push_back({{"strategy", name},
                         {"mean_proxy_error", err},
                         {"mean_step_ms", ms},
                         {"peak_bytes", peak},
                         {"attention_allocations", allocs},
                         {"tokens_evicted", evicted}});
        char line[160];
        std::snprintf(line, sizeof(line), "%-12s  %16.8f  %12.4f  %10llu  %11llu  %7zu\n", name,
                      err, ms, static_cast<unsigned long long>(peak),
                      static_cast<unsigned long long>(allocs), evicted);
        text << line;
    }
    std::cout << text.str();
    if (!options.metrics_out.empty()) {
        std::ofstream out(options.metrics_out);
        if (!out) {
            log << "i/o error: cannot open " << options.metrics_out << "\n";
            return kExitIo;
        }
        nlohmann::json doc{{"seeds", options.probe_runs},
                           {"base_seed", options.seed},
                           {"frames", options.frames},
                           {"scene", sim::scene_name(options.scene)},
                           {"strategies", table}};
        out << doc.dump(2) << "\n";
    }
    return kExitOk;
}

/// Re-executes a recorded trace and verifies the embedded metrics records
/// bit-for-bit. The first divergent step fails the run with exit code 4.
inline int cmd_replay(const std::string& trace_path, std::ostream& log = std::cerr) {
    std::ifstream in(trace_path);
    if (!in) {
        log << "i/o error: cannot open " << trace_path << "\n";
        return kExitIo;
    }
    std::string line;
    if (!std::getline(in, line) || line.empty()) {
        std::cout << "replay ok: empty trace, 0 steps\n";
        return kExitOk;
    }

    std::optional<Engine> engine;
    Intrinsics cam = sim::default_intrinsics();
    try {
        const auto header = nlohmann::json::parse(line);
        if (header.at("type") != "header") {
            log << "i/o error: trace does not start with a header record\n";
            return kExitIo;
        }
        EngineConfig cfg = engine_config_from_json(header.at("config"));
        if (header.contains("camera")) {
            const auto& c = header.at("camera");
            cam = Intrinsics{c.at("fx").get<double>(),    c.at("fy").get<double>(),
                             c.at("cx").get<double>(),    c.at("cy").get<double>(),
                             c.at("width").get<std::size_t>(),
                             c.at("height").get<std::size_t>()};
        }
        engine.emplace(cfg);
        engine->set_camera_intrinsics(cam);
    } catch (const std::invalid_argument& e) {
        log << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        log << "i/o error: bad trace header: " << e.what() << "\n";
        return kExitIo;
    }

    std::size_t steps = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json record;
        FrameInput frame;
        std::string recorded;
        try {
            record = nlohmann::json::parse(line);
            if (record.at("type") != "frame") {
                log << "i/o error: unexpected record type at step " << steps << "\n";
                return kExitIo;
            }
            frame = frame_from_json(record);
            recorded = record.at("metrics").dump();
        } catch (const std::exception& e) {
            log << "i/o error: bad frame record at step " << steps << ": " << e.what() << "\n";
            return kExitIo;
        }
        std::string recomputed;
        try {
            const StepMetrics m = engine->step(frame);
            recomputed = metrics_to_json(m).dump();
        } catch (const std::exception& e) {
            log << "determinism mismatch at step " << steps
                << ": engine rejected the recorded frame: " << e.what() << "\n";
            return kExitMismatch;
        }
        if (recomputed != recorded) {
            log << "determinism mismatch at step " << steps << "\n  recorded:   " << recorded
                << "\n  recomputed: " << recomputed << "\n";
            return kExitMismatch;
        }
        ++steps;
    }
    std::cout << "replay ok: " << steps << " steps verified\n";
    return kExitOk;
}

}  // namespace ovkv::cli
