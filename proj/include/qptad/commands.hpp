// Command implementations behind the CLI: synthetic dataset generation,
// training, sliding-window inference, corpus evaluation, the gradient-check
// suite, and the scan-vs-convolution benchmark. Everything is deterministic
// given (config, seed); only wall-clock timings vary between reruns.
#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "qptad/config.hpp"
#include "qptad/decoder.hpp"
#include "qptad/evaluator.hpp"
#include "qptad/gradcheck.hpp"
#include "qptad/pipeline.hpp"
#include "qptad/trainer.hpp"

namespace qptad {

namespace fs = std::filesystem;

inline int inference_threads() {
    if (const char* env = std::getenv("QPTAD_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

// ---------------------------------------------------------------------------
// gen-synth
// ---------------------------------------------------------------------------

inline int cmd_gen_synth(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    SynthDataset ds = synth_generate(cfg.seed, cfg.synth_config());

    std::vector<std::string> written;
    for (const FeatureSequence& seq : ds.features) {
        const std::string name = seq.video_id + ".mgft";
        write_features(seq, (fs::path(out_dir) / name).string());
        written.push_back(name);
    }
    write_annotations(ds.annotations, (fs::path(out_dir) / "annotations.json").string(), false);
    written.push_back("annotations.json");

    nlohmann::json manifest{{"files", written}, {"num_videos", cfg.num_videos}, {"seed", cfg.seed}};
    std::ofstream mos((fs::path(out_dir) / "manifest.json").string());
    if (!mos) throw std::runtime_error("gen-synth: cannot write manifest in " + out_dir);
    mos << manifest.dump(2) << "\n";

    long total = 0;
    for (const auto& a : ds.annotations) total += static_cast<long>(a.instances.size());
    std::cout << "wrote " << ds.features.size() << " videos, " << total << " instances to " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct WindowSample {
    int video = 0;
    WindowSpec window;
    std::vector<ActionInstance> gt;  // window-local frames
};

struct Dataset {
    std::vector<FeatureSequence> features;
    std::vector<VideoAnnotation> annotations;
};

inline Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.annotations = read_annotations((fs::path(dir) / "annotations.json").string());
    for (const auto& ann : ds.annotations) {
        const std::string path = (fs::path(dir) / (ann.video_id + ".mgft")).string();
        ds.features.push_back(read_features(path, ann.video_id));
    }
    return ds;
}

// Builds the training windows: sliding windows at the training overlap, each
// with its re-based labels. Windows without any instance are kept so the
// background target is trained too.
inline std::vector<WindowSample> build_training_windows(const Dataset& ds, const RunConfig& cfg) {
    std::vector<WindowSample> samples;
    for (size_t v = 0; v < ds.features.size(); ++v) {
        const FeatureSequence& seq = ds.features[v];
        for (const WindowSpec& w :
             make_windows(seq.video_id, seq.num_frames(), cfg.beta, cfg.overlap_train, cfg.stride)) {
            samples.push_back({static_cast<int>(v), w, assign_labels(ds.annotations[v].instances, w)});
        }
    }
    return samples;
}

inline void save_train_state(const RunConfig& cfg, const std::vector<Parameter*>& params, const std::string& out_dir,
                             int epoch, long step) {
    save_checkpoint(params, (fs::path(out_dir) / "checkpoint.bin").string());
    nlohmann::json sidecar{{"config", cfg.to_json()}, {"epoch", epoch}, {"step", step}};
    std::ofstream os((fs::path(out_dir) / "checkpoint.json").string());
    os << sidecar.dump(2) << "\n";
}

inline int cmd_train(RunConfig cfg, const std::string& data_dir, const std::string& out_dir,
                     const std::string& resume_dir = "") {
    cfg.validate();
    fs::create_directories(out_dir);

    Dataset ds = load_dataset(data_dir);
    if (ds.features.empty()) throw std::runtime_error("train: no videos found in " + data_dir);
    for (const auto& seq : ds.features)
        if (seq.feature_dim() != cfg.D_in)
            throw std::runtime_error("train: feature width " + std::to_string(seq.feature_dim()) + " of " +
                                     seq.video_id + " does not match configured D_in " + std::to_string(cfg.D_in));

    std::vector<WindowSample> samples = build_training_windows(ds, cfg);
    if (samples.empty()) throw std::runtime_error("train: no training windows");

    Rng root(cfg.seed);
    ActionDecoder model(cfg.decoder_config(), root.child("weights"));
    auto params = model.parameters();
    AdamW opt;
    opt.attach(params);

    int start_epoch = 0;
    long step = 0;
    if (!resume_dir.empty()) {
        load_checkpoint(params, (fs::path(resume_dir) / "checkpoint.bin").string());
        std::ifstream is((fs::path(resume_dir) / "checkpoint.json").string());
        if (!is) throw std::runtime_error("train: resume sidecar missing in " + resume_dir);
        nlohmann::json sidecar = nlohmann::json::parse(is);
        start_epoch = sidecar.at("epoch").get<int>() + 1;
        step = sidecar.at("step").get<long>();
    }

    const TrainSchedule sched = cfg.schedule();
    const MatchCostWeights weights = cfg.match_weights();

    std::ofstream csv((fs::path(out_dir) / "loss.csv").string(), resume_dir.empty() ? std::ios::out : std::ios::app);
    if (resume_dir.empty()) csv << "step,epoch,lr,total,cls,l1,iou,grad_norm\n";

    bool stop = false;
    int epoch = start_epoch;
    for (; epoch < sched.total_epochs && !stop; ++epoch) {
        std::vector<size_t> order(samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = root.child("shuffle", static_cast<uint64_t>(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

        const double lr = sched.lr_at_epoch(epoch);
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(sched.batch_size)) {
            if (cfg.max_steps > 0 && step >= cfg.max_steps) {
                stop = true;
                break;
            }
            TrainStepResult r;
            if (sched.batch_size == 1) {
                const WindowSample& s = samples[order[pos]];
                r = train_step(model, opt, params, window_features(ds.features[s.video], s.window), s.gt, weights,
                               cfg.beta, cfg.stride, lr);
            } else {
                // gradient accumulation over the batch, loss averaged
                for (Parameter* p : params) p->zero_grad();
                const size_t n = std::min(static_cast<size_t>(sched.batch_size), order.size() - pos);
                for (size_t b = 0; b < n; ++b) {
                    const WindowSample& s = samples[order[pos + b]];
                    auto preds = model.forward(window_features(ds.features[s.video], s.window));
                    std::vector<MatchResult> matches;
                    for (const auto& p : preds) matches.push_back(match_layer(p, s.gt, weights, cfg.beta, cfg.stride));
                    LossBreakdown loss = compute_loss(preds, s.gt, matches, weights, cfg.beta, cfg.stride);
                    if (!std::isfinite(loss.value())) throw std::runtime_error("train: non-finite total loss");
                    Var scaled = vscale(loss.total, 1.0 / static_cast<double>(n));
                    scaled.backward();
                    r.total += loss.value() / n;
                    r.classification += loss.classification / n;
                    r.l1 += loss.l1 / n;
                    r.iou += loss.iou / n;
                }
                r.grad_norm = opt.global_grad_norm(params);
                opt.step(params, lr);
            }
            ++step;
            csv << step << "," << epoch << "," << lr << "," << r.total << "," << r.classification << "," << r.l1
                << "," << r.iou << "," << r.grad_norm << "\n";
        }
        save_train_state(cfg, params, out_dir, epoch, step);
        std::cout << "epoch " << epoch << " done, step " << step << ", lr " << lr << "\n";
    }
    if (epoch > start_epoch || stop) save_train_state(cfg, params, out_dir, std::max(start_epoch, epoch - 1), step);
    std::cout << "training finished at step " << step << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

// Model shape comes from the checkpoint sidecar when present so a checkpoint
// can be applied without repeating its training config.
inline RunConfig config_for_checkpoint(RunConfig cfg, const std::string& checkpoint_dir) {
    const fs::path sidecar = fs::path(checkpoint_dir) / "checkpoint.json";
    if (fs::exists(sidecar)) {
        std::ifstream is(sidecar.string());
        nlohmann::json j = nlohmann::json::parse(is);
        RunConfig stored = RunConfig::from_json(j.at("config"));
        cfg.L = stored.L;
        cfg.N_q = stored.N_q;
        cfg.N_s = stored.N_s;
        cfg.D = stored.D;
        cfg.D_prime = stored.D_prime;
        cfg.num_classes = stored.num_classes;
        cfg.D_in = stored.D_in;
        cfg.init_spread = stored.init_spread;
        cfg.M = stored.M;
        cfg.heads = stored.heads;
        cfg.N_state = stored.N_state;
        cfg.selective = stored.selective;
    }
    return cfg;
}

inline int cmd_infer(RunConfig cfg, const std::string& checkpoint_dir, const std::string& features_dir,
                     const std::string& out_path) {
    cfg = config_for_checkpoint(cfg, checkpoint_dir);
    cfg.validate();

    Rng root(cfg.seed);
    ActionDecoder model(cfg.decoder_config(), root.child("weights"));
    auto params = model.parameters();
    load_checkpoint(params, (fs::path(checkpoint_dir) / "checkpoint.bin").string());

    std::vector<std::string> feature_files;
    if (fs::exists(features_dir))
        for (const auto& entry : fs::directory_iterator(features_dir))
            if (entry.path().extension() == ".mgft") feature_files.push_back(entry.path().string());
    std::sort(feature_files.begin(), feature_files.end());

    std::vector<VideoAnnotation> predictions;
    for (const std::string& file : feature_files) {
        const std::string video_id = fs::path(file).stem().string();
        FeatureSequence seq = read_features(file, video_id);
        if (seq.feature_dim() != cfg.D_in)
            throw std::runtime_error("infer: feature width " + std::to_string(seq.feature_dim()) + " of " + video_id +
                                     " does not match model D_in " + std::to_string(cfg.D_in));
        std::vector<WindowSpec> windows =
            make_windows(video_id, seq.num_frames(), cfg.beta, cfg.overlap_infer, cfg.stride);

        std::vector<std::vector<ActionInstance>> per_window(windows.size());
        const int threads = std::min<int>(inference_threads(), static_cast<int>(windows.size()));
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            for (size_t i = next.fetch_add(1); i < windows.size(); i = next.fetch_add(1)) {
                Tensor feats = window_features(seq, windows[i]);
                auto preds = model.forward(feats);
                per_window[i] = decode_instances(preds.back().points.value(), preds.back().class_logits.value(),
                                                 windows[i], cfg.score_thresh);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
        for (auto& t : pool) t.join();

        std::vector<ActionInstance> all;
        for (const auto& w : per_window) all.insert(all.end(), w.begin(), w.end());

        VideoAnnotation out;
        out.video_id = video_id;
        out.fps = seq.fps;
        out.num_frames = seq.num_frames();
        out.instances = merge_predictions(std::move(all), cfg.nms_tiou);
        predictions.push_back(std::move(out));
    }

    write_annotations(predictions, out_path, true);
    long total = 0;
    for (const auto& p : predictions) total += static_cast<long>(p.instances.size());
    std::cout << "wrote " << total << " predictions for " << predictions.size() << " videos to " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline int cmd_eval(const RunConfig& cfg, const std::string& preds_path, const std::string& gts_path,
                    const std::string& report_path) {
    EvalReport report = evaluate_corpus(read_annotations(preds_path), read_annotations(gts_path), cfg.eval_config());
    const nlohmann::json j = report_to_json(report);
    if (!report_path.empty()) {
        std::ofstream os(report_path);
        if (!os) throw std::runtime_error("eval: cannot write " + report_path);
        os << j.dump(2) << "\n";
    }
    std::cout << "tp=" << report.tp << " fp=" << report.fp << " fn=" << report.fn << " precision=" << report.precision
              << " recall=" << report.recall << " f1=" << report.f1 << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

// The pinned verification model: small enough that sampled finite differences
// cover it in seconds.
inline DecoderConfig gradcheck_config() {
    DecoderConfig cfg;
    cfg.L = 2;
    cfg.N_q = 4;
    cfg.N_s = 6;
    cfg.D = 16;
    cfg.D_prime = 4;
    cfg.num_classes = 3;
    cfg.D_in = 8;
    cfg.mamba.M = 1;
    cfg.mamba.heads = 4;
    cfg.mamba.D = 16;
    cfg.mamba.N_state = 8;
    return cfg;
}

struct GradCheckRun {
    uint64_t trial_seed = 0;
    GradCheckReport report;
};

// Checks the full training loss of the tiny decoder against central finite
// differences over `wanted` valid random draws. Draws whose forward pass
// comes within `margin_factor * step` of a kink (relu zero, min/max tie,
// clamp edge, interpolation cell boundary) are redrawn: a central difference
// across a kink measures nothing. Matching is frozen per draw since the
// assignment is piecewise-constant in the parameters.
inline std::vector<GradCheckRun> run_gradcheck_suite(uint64_t base_seed, int wanted, double step, double tolerance,
                                                     int coords_per_param, double margin_factor = 50.0) {
    std::vector<GradCheckRun> runs;
    for (uint64_t trial = 0; trial < 200 && runs.size() < static_cast<size_t>(wanted); ++trial) {
        const uint64_t seed = base_seed + trial;
        Rng rng(seed);
        ActionDecoder model(gradcheck_config(), rng);
        auto params = model.parameters();
        Rng jig = rng.child("jiggle");
        for (auto* p : params)
            for (double& x : p->value.v) x += jig.normal(0.0, 0.05);

        Rng drng = rng.child("data");
        Tensor feats = random_normal({12, 8}, 1.0, drng);
        std::vector<ActionInstance> gt{{8.0, 24.0, 1, 1.0}, {30.0, 40.0, 2, 1.0}};
        const MatchCostWeights weights;

        reset_kink_margin();
        auto preds = model.forward(feats);
        std::vector<MatchResult> matches;
        for (const auto& p : preds) matches.push_back(match_layer(p, gt, weights, 48.0, 4));
        compute_loss(preds, gt, matches, weights, 48.0, 4);
        if (kink_margin() < margin_factor * step) continue;

        auto build = [&]() {
            auto ps = model.forward(feats);
            return compute_loss(ps, gt, matches, weights, 48.0, 4).total;
        };
        GradCheckRun run;
        run.trial_seed = seed;
        run.report = grad_check(build, params, step, tolerance, coords_per_param, seed ^ 0x5bd1e995ULL);
        runs.push_back(std::move(run));
    }
    return runs;
}

inline int cmd_gradcheck(const RunConfig& cfg, int trials, bool inject_fault) {
    tl_corrupt_backward = inject_fault;
    const auto runs = run_gradcheck_suite(cfg.seed, trials, 1e-5, 1e-4, 6);
    tl_corrupt_backward = false;

    bool ok = runs.size() == static_cast<size_t>(trials);
    double worst = 0.0;
    std::string worst_param;
    for (const auto& run : runs) {
        std::cout << "seed " << run.trial_seed << ": max relative error " << run.report.max_rel_err << " (worst "
                  << run.report.worst_param << ", " << (run.report.passed ? "pass" : "FAIL") << ")\n";
        if (run.report.max_rel_err > worst) {
            worst = run.report.max_rel_err;
            worst_param = run.report.worst_param;
        }
        ok = ok && run.report.passed;
    }
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << ": worst parameter " << worst_param
              << " at relative error " << worst << " over " << runs.size() << " draws\n";
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// bench-scan
// ---------------------------------------------------------------------------

inline int cmd_bench_scan(const RunConfig& cfg, std::vector<int> lengths, int n_state, int repeats) {
    repeats = std::max(1, repeats);
    if (lengths.empty()) lengths = {64, 256, 1024, 4096};
    Rng rng(cfg.seed);

    std::cout << "T,scan_ms,kernel_conv_ms,max_abs_diff\n";
    for (int t : lengths) {
        SsmParams p;
        p.A = Tensor({n_state, n_state});
        for (double& v : p.A.v) v = rng.normal();
        double norm = 0.0;
        for (double v : p.A.v) norm += v * v;
        p.A = scale(p.A, 0.9 / std::sqrt(norm));
        p.B = Tensor({n_state, 1});
        for (double& v : p.B.v) v = rng.normal();
        p.C = Tensor({1, n_state});
        for (double& v : p.C.v) v = rng.normal();
        p.delta = 0.1;
        DiscreteSsm d = discretize(p);
        std::vector<double> u(t);
        for (double& v : u) v = rng.normal();

        // the two paths must agree before any timing is reported
        std::vector<double> y_scan = scan(d, p.C, u);
        std::vector<double> y_conv = conv_apply(u, kernel(d, p.C, t));
        double diff = 0.0;
        for (int i = 0; i < t; ++i) diff = std::max(diff, std::abs(y_scan[i] - y_conv[i]));
        if (diff > 1e-9) {
            std::cerr << "bench-scan: path disagreement " << diff << " at T=" << t << "\n";
            return 1;
        }

        auto time_ms = [&](auto&& fn) {
            double best = std::numeric_limits<double>::infinity();
            for (int r = 0; r < repeats; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                fn();
                best = std::min(best,
                                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
            }
            return best;
        };
        const double scan_ms = time_ms([&]() { volatile double sink = scan(d, p.C, u).back(); (void)sink; });
        const double conv_ms =
            time_ms([&]() { volatile double sink = conv_apply(u, kernel(d, p.C, t)).back(); (void)sink; });
        std::cout << t << "," << scan_ms << "," << conv_ms << "," << diff << "\n";
    }
    return 0;
}

}  // namespace qptad
