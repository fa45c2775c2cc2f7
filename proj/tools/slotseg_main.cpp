#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "slotseg/checkpoint.hpp"
#include "slotseg/config.hpp"
#include "slotseg/data.hpp"
#include "slotseg/train.hpp"

namespace fs = std::filesystem;
using namespace slotseg;

namespace {

struct LoadedCheckpoint {
    CheckpointMeta meta;
    ParamRegistry reg;
};

LoadedCheckpoint load_for_inference(const std::string& prefix) {
    LoadedCheckpoint lc;
    lc.meta = load_checkpoint_meta(prefix);
    Rng rng(1);
    init_model(lc.reg, lc.meta.model, rng);
    AdamOptimizer opt(lc.reg, 5e-4);
    lc.meta = load_checkpoint(prefix, lc.reg, opt);
    return lc;
}

int cmd_generate(const std::string& config_path, const std::string& out_dir) {
    FullConfig cfg = load_config(config_path);
    fs::create_directories(out_dir);
    struct SplitSpec {
        const char* name;
        int count;
    };
    for (const SplitSpec& s : {SplitSpec{"train", cfg.generate.num_train},
                               SplitSpec{"valid", cfg.generate.num_valid},
                               SplitSpec{"test", cfg.generate.num_test}}) {
        if (s.count == 0) continue;
        Dataset ds = generate_split(cfg.generate, s.name, s.count, cfg.generate_seed);
        std::string path = out_dir + "/" + s.name + ".jsonl";
        save_dataset(ds, path);
        std::cout << "wrote " << ds.size() << " trajectories to " << path << "\n";
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
    FullConfig cfg = load_config(config_path);
    Dataset train_ds = load_dataset(data_dir + "/" + cfg.train.train_file);
    Dataset valid_ds = load_dataset(data_dir + "/" + cfg.train.valid_file);
    fs::create_directories(out_dir);

    TrainResult result = train_model(cfg.train, train_ds, valid_ds, out_dir, &std::cout);
    std::cout << "best epoch " << result.best_epoch << " val_score " << result.best_score
              << (result.stopped_early ? " (stopped early)" : "") << "\n";

    std::string test_path = data_dir + "/" + cfg.train.test_file;
    if (fs::exists(test_path)) {
        Dataset test_ds = load_dataset(test_path);
        EvalReport report = evaluate_model(result.best_params, result.model, test_ds,
                                           cfg.train.boundary_tolerance, cfg.train.t_on);
        std::cout << "test-set report (deterministic halting):\n" << report.to_table();
        std::ofstream rf(out_dir + "/report.json");
        rf << report.to_json().dump(2) << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, bool sampled, uint64_t seed,
             int tolerance, double t_on) {
    LoadedCheckpoint lc = load_for_inference(ckpt);
    Dataset ds = load_dataset(data_path);
    EvalReport report = evaluate_model(lc.reg, lc.meta.model, ds, tolerance, t_on, sampled, seed);
    std::cout << report.to_table() << report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_bench(const std::string& ckpt, const std::string& data_path, int batch_size,
              int batches, double beta) {
    LoadedCheckpoint lc = load_for_inference(ckpt);
    Dataset ds = load_dataset(data_path);
    BenchReport report = bench_model(lc.reg, lc.meta.model, ds, beta, batch_size, batches);
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
}

int cmd_inspect(const std::string& ckpt, const std::string& data_path, int index,
                const std::string& out_path, double t_on) {
    LoadedCheckpoint lc = load_for_inference(ckpt);
    Dataset ds = load_dataset(data_path);
    if (index < 0 || index >= ds.size())
        throw ConfigError("inspect: index " + std::to_string(index) + " outside dataset of " +
                          std::to_string(ds.size()) + " trajectories");
    nlohmann::json dump = inspect_trajectory(
        lc.reg, lc.meta.model, ds.trajectories[static_cast<size_t>(index)], t_on);
    dump["index"] = index;
    if (out_path.empty()) {
        std::cout << dump.dump(2) << "\n";
    } else {
        std::ofstream out(out_path);
        if (!out) throw IoError("cannot write " + out_path);
        out << dump.dump(2) << "\n";
        std::cout << "wrote " << out_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"slotseg: unsupervised trajectory segmentation"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, ckpt;
    bool sampled = false;
    uint64_t seed = 0;
    int tolerance = 1, batch_size = 64, batches = 10, index = 0;
    double t_on = 0.8, beta = 0.1;

    CLI::App* gen = app.add_subcommand("generate", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "config JSON")->required();
    gen->add_option("--out", out_path, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "train a model");
    train->add_option("--config", config_path, "config JSON")->required();
    train->add_option("--data", data_path, "dataset directory")->required();
    train->add_option("--out", out_path, "run directory")->required();

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
    eval->add_option("--data", data_path, "dataset file")->required();
    eval->add_flag("--sampled", sampled, "sampled halting instead of deterministic");
    eval->add_option("--seed", seed, "seed for sampled mode");
    eval->add_option("--tolerance", tolerance, "boundary matching tolerance");
    eval->add_option("--t-on", t_on, "attention/mask threshold");

    CLI::App* bench = app.add_subcommand("bench", "measure throughput");
    bench->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
    bench->add_option("--data", data_path, "dataset file")->required();
    bench->add_option("--batch-size", batch_size, "batch size");
    bench->add_option("--batches", batches, "timed batches");
    bench->add_option("--beta", beta, "KL weight used in the timed loss");

    CLI::App* inspect = app.add_subcommand("inspect", "dump one trajectory's internals");
    inspect->add_option("--ckpt", ckpt, "checkpoint prefix")->required();
    inspect->add_option("--data", data_path, "dataset file")->required();
    inspect->add_option("--index", index, "trajectory index")->required();
    inspect->add_option("--out", out_path, "output JSON file (default: stdout)");
    inspect->add_option("--t-on", t_on, "mask threshold");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(config_path, out_path);
        if (train->parsed()) return cmd_train(config_path, data_path, out_path);
        if (eval->parsed()) return cmd_eval(ckpt, data_path, sampled, seed, tolerance, t_on);
        if (bench->parsed()) return cmd_bench(ckpt, data_path, batch_size, batches, beta);
        if (inspect->parsed()) return cmd_inspect(ckpt, data_path, index, out_path, t_on);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
