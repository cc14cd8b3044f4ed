// CLI for the query-point action detector: synthetic data generation,
// training, sliding-window inference, F1 evaluation, gradient verification,
// and the scan-vs-convolution benchmark.
#include <CLI11.hpp>

#include <iostream>

#include "qptad/commands.hpp"

namespace {

using qptad::RunConfig;

// Common flags shared by every subcommand. Values land in the RunConfig after
// the config file loads, so explicit flags win over file contents.
struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    std::string out;
    int beta = 0, nq = 0, ns = 0, layers = 0, mamba_blocks = 0;
    bool echo_config = false;

    CLI::Option *seed_opt = nullptr, *beta_opt = nullptr, *nq_opt = nullptr, *ns_opt = nullptr, *layers_opt = nullptr,
                *mamba_opt = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        seed_opt = cmd->add_option("--seed", seed, "random seed governing all randomness");
        cmd->add_option("--out", out, "output directory or file");
        beta_opt = cmd->add_option("--beta", beta, "window size in frames");
        nq_opt = cmd->add_option("--nq", nq, "number of queries");
        ns_opt = cmd->add_option("--ns", ns, "points per query");
        layers_opt = cmd->add_option("--layers", layers, "decoder layers");
        mamba_opt = cmd->add_option("--mamba-blocks", mamba_blocks, "Mamba blocks per layer");
        cmd->add_flag("--echo-config", echo_config, "validate, build the model, print the config and exit");
    }

    RunConfig resolve() const {
        RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
        if (seed_opt && seed_opt->count()) cfg.seed = seed;
        if (beta_opt && beta_opt->count()) cfg.beta = beta;
        if (nq_opt && nq_opt->count()) cfg.N_q = nq;
        if (ns_opt && ns_opt->count()) cfg.N_s = ns;
        if (layers_opt && layers_opt->count()) cfg.L = layers;
        if (mamba_opt && mamba_opt->count()) cfg.M = mamba_blocks;
        return cfg;
    }
};

void echo(const RunConfig& cfg) { std::cout << "config: " << cfg.to_json().dump() << "\n"; }

// Builds the model once so invalid configurations fail here, then reports the
// configuration actually in effect.
int do_echo_config(const RunConfig& cfg) {
    cfg.validate();
    qptad::Rng rng(cfg.seed);
    qptad::ActionDecoder model(cfg.decoder_config(), rng.child("weights"));
    echo(cfg);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"qptad: micro-gesture detection with learnable query points"};
    app.require_subcommand(1);

    CommonFlags gen_flags, train_flags, infer_flags, eval_flags, grad_flags, bench_flags;

    auto* gen = app.add_subcommand("gen-synth", "generate a deterministic synthetic dataset");
    gen_flags.attach(gen);

    auto* train = app.add_subcommand("train", "train on a dataset directory");
    train_flags.attach(train);
    std::string train_data, train_resume;
    long train_max_steps = -1;
    train->add_option("--data", train_data, "dataset directory (features + annotations.json)");
    auto* max_steps_opt = train->add_option("--max-steps", train_max_steps, "stop after this many steps (0 = full schedule)");
    train->add_option("--resume", train_resume, "checkpoint directory to resume from");

    auto* infer = app.add_subcommand("infer", "run sliding-window inference");
    infer_flags.attach(infer);
    std::string infer_ckpt, infer_features;
    infer->add_option("--checkpoint", infer_ckpt, "checkpoint directory (checkpoint.bin + checkpoint.json)");
    infer->add_option("--features", infer_features, "directory of .mgft feature files");

    auto* evalc = app.add_subcommand("eval", "score predictions against ground truth");
    eval_flags.attach(evalc);
    std::string eval_preds, eval_gts;
    evalc->add_option("--preds", eval_preds, "prediction file");
    evalc->add_option("--gts", eval_gts, "ground-truth annotation file");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference verification of the backward pass");
    grad_flags.attach(grad);
    int grad_trials = 5;
    bool grad_fault = false;
    grad->add_option("--trials", grad_trials, "number of valid random draws to check");
    grad->add_flag("--inject-fault", grad_fault, "corrupt one backward rule to exercise the failure path");

    auto* bench = app.add_subcommand("bench-scan", "time the recurrent scan against kernel+convolution");
    bench_flags.attach(bench);
    std::vector<int> bench_t;
    int bench_nstate = 8, bench_repeats = 3;
    bench->add_option("--T", bench_t, "sequence lengths to benchmark");
    bench->add_option("--n-state", bench_nstate, "state dimension");
    bench->add_option("--repeats", bench_repeats, "timing repetitions per length (minimum 1)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            RunConfig cfg = gen_flags.resolve();
            if (gen_flags.echo_config) return do_echo_config(cfg);
            if (gen_flags.out.empty()) throw std::runtime_error("gen-synth: --out DIR is required");
            cfg.validate();
            echo(cfg);
            return qptad::cmd_gen_synth(cfg, gen_flags.out);
        }
        if (train->parsed()) {
            RunConfig cfg = train_flags.resolve();
            if (max_steps_opt->count()) cfg.max_steps = train_max_steps;
            if (train_flags.echo_config) return do_echo_config(cfg);
            const std::string data = !train_data.empty() ? train_data : cfg.data_dir;
            const std::string out = !train_flags.out.empty() ? train_flags.out : cfg.out_dir;
            if (data.empty() || out.empty()) throw std::runtime_error("train: --data and --out are required");
            cfg.validate();
            echo(cfg);
            return qptad::cmd_train(cfg, data, out, train_resume);
        }
        if (infer->parsed()) {
            RunConfig cfg = infer_flags.resolve();
            if (infer_flags.echo_config) return do_echo_config(cfg);
            const std::string ckpt = !infer_ckpt.empty() ? infer_ckpt : cfg.checkpoint;
            const std::string features = !infer_features.empty() ? infer_features : cfg.features_dir;
            if (ckpt.empty() || features.empty() || infer_flags.out.empty())
                throw std::runtime_error("infer: --checkpoint, --features and --out are required");
            cfg = qptad::config_for_checkpoint(cfg, ckpt);
            cfg.validate();
            echo(cfg);
            return qptad::cmd_infer(cfg, ckpt, features, infer_flags.out);
        }
        if (evalc->parsed()) {
            RunConfig cfg = eval_flags.resolve();
            if (eval_flags.echo_config) return do_echo_config(cfg);
            if (eval_preds.empty() || eval_gts.empty()) throw std::runtime_error("eval: --preds and --gts are required");
            cfg.validate();
            echo(cfg);
            return qptad::cmd_eval(cfg, eval_preds, eval_gts, eval_flags.out);
        }
        if (grad->parsed()) {
            RunConfig cfg = grad_flags.resolve();
            if (grad_flags.echo_config) return do_echo_config(cfg);
            echo(cfg);
            return qptad::cmd_gradcheck(cfg, grad_trials, grad_fault);
        }
        if (bench->parsed()) {
            RunConfig cfg = bench_flags.resolve();
            if (bench_flags.echo_config) return do_echo_config(cfg);
            echo(cfg);
            return qptad::cmd_bench_scan(cfg, bench_t, bench_nstate, bench_repeats);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
