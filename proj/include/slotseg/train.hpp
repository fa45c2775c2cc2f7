#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <json.hpp>
#include <string>
#include <thread>
#include <vector>

#include "slotseg/checkpoint.hpp"
#include "slotseg/config.hpp"
#include "slotseg/data.hpp"
#include "slotseg/metrics.hpp"
#include "slotseg/model.hpp"

namespace slotseg {

// Gradients are always reduced over a fixed number of lanes per batch, in
// lane order, regardless of how many worker threads process them. This pins
// the floating-point summation order, so results are identical for any
// num_threads.
inline constexpr int kGradLanes = 8;

struct TrajStats {
    double loss = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

// Forward + backward for one trajectory; accumulates parameter gradients of
// the (unscaled) trajectory loss into `gb`.
inline TrajStats trajectory_backward(const ParamRegistry& reg, const ModelConfig& mcfg,
                                     const Trajectory& traj, const Tensor& prior, double beta,
                                     const Tensor& noise, GradBuffer& gb) {
    Graph g(true);
    ModelOutputs out = model_forward(g, reg, mcfg, traj, noise);
    LossVars loss = model_loss(g, out, traj.actions, prior, beta);
    g.backward(loss.total);
    g.export_grads(gb);
    TrajStats s;
    s.loss = g.value(loss.total).v[0];
    s.kl = g.value(loss.kl).v[0];
    s.recon = s.loss - beta * s.kl;
    return s;
}

// Deterministic evaluation uses mu-only slot initialization (zero noise).
inline Tensor zero_noise(const ModelConfig& mcfg) {
    return Tensor({mcfg.num_slots, mcfg.d_slots});
}

struct TrajEval {
    HardSegmentation seg;
    std::vector<int> true_seg;
    AccessResult access;
    int k_star = 0;
    int true_k = 0;
};

inline TrajEval evaluate_trajectory(const ParamRegistry& reg, const ModelConfig& mcfg,
                                    const Trajectory& traj, double t_on, const Tensor& noise,
                                    Rng* halting_rng) {
    Graph g(false);
    ModelOutputs out = model_forward(g, reg, mcfg, traj, noise);
    Tensor masks = masks_tensor(g, out);
    Tensor attn = attn_tensor(g, out);
    TrajEval ev;
    ev.k_star = halting_rng ? sample_active_slots(lambdas_vector(g, out), *halting_rng)
                            : deterministic_active_slots(p_halt_vector(g, out));
    ev.seg = masks_to_segmentation(masks, ev.k_star, 0.0);
    ev.true_seg = segmentation_from_boundaries(traj.boundaries, traj.length());
    ev.true_k = traj.num_subroutines;
    ev.access = access_metrics(attn, masks, t_on);
    return ev;
}

// Whole-dataset evaluation. In sampled mode both the slot-initialization
// noise and the halting draw are stochastic (seeded); otherwise the pass is
// fully deterministic.
inline EvalReport evaluate_model(const ParamRegistry& reg, const ModelConfig& mcfg,
                                 const Dataset& ds, int tolerance, double t_on,
                                 bool sampled = false, uint64_t seed = 0) {
    if (ds.size() == 0) throw DataError("evaluate: empty dataset");
    if (ds.action_vocab_size != mcfg.action_vocab_size || ds.obs_dim != mcfg.obs_dim)
        throw ConfigError("evaluate: dataset (A=" + std::to_string(ds.action_vocab_size) +
                          ", obs_dim=" + std::to_string(ds.obs_dim) +
                          ") does not match the model (A=" +
                          std::to_string(mcfg.action_vocab_size) +
                          ", obs_dim=" + std::to_string(mcfg.obs_dim) + ")");
    MetricAccumulator acc;
    const Tensor zeros = zero_noise(mcfg);
    for (int i = 0; i < ds.size(); ++i) {
        const Trajectory& traj = ds.trajectories[static_cast<size_t>(i)];
        Rng rng(derive_seed(seed, fnv1a64("eval"), static_cast<uint64_t>(i), 0));
        Tensor noise = sampled ? draw_slot_noise(mcfg.slots(), rng) : zeros;
        TrajEval ev =
            evaluate_trajectory(reg, mcfg, traj, t_on, noise, sampled ? &rng : nullptr);
        acc.add_boundaries(ev.seg.boundaries, traj.boundaries, tolerance);
        acc.add_alignment(ev.seg.segment, ev.true_seg);
        acc.add_access(ev.access);
        acc.add_halt(ev.k_star, ev.true_k);
        acc.count_trajectory();
    }
    return acc.report();
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    double val_f1 = 0.0;
    double val_align = 0.0;
    double val_halt_acc = 0.0;
    double val_score = 0.0;
    double seconds = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},         {"train_loss", train_loss},
                {"recon", recon},         {"kl", kl},
                {"val_f1", val_f1},       {"val_align", val_align},
                {"val_halt_acc", val_halt_acc}, {"val_score", val_score},
                {"seconds", seconds}};
    }
};

struct TrainResult {
    std::vector<EpochRecord> history;
    ParamRegistry best_params;
    std::vector<Tensor> best_adam_m, best_adam_v;
    int64_t best_adam_steps = 0;
    int best_epoch = 0;
    double best_score = -1.0;
    bool stopped_early = false;
    ModelConfig model;
};

namespace detail {

inline void dump_batch(const std::string& out_dir, const Dataset& ds,
                       const std::vector<int>& indices, int epoch, int batch) {
    if (out_dir.empty()) return;
    std::ofstream out(out_dir + "/diverged_batch.jsonl");
    out << nlohmann::json{{"kind", "diverged_batch"}, {"epoch", epoch}, {"batch", batch}}
        << "\n";
    for (int idx : indices) {
        const Trajectory& t = ds.trajectories[static_cast<size_t>(idx)];
        out << nlohmann::json{{"index", idx},
                              {"actions", t.actions},
                              {"boundaries", t.boundaries},
                              {"num_subroutines", t.num_subroutines}}
            << "\n";
    }
}

}  // namespace detail

// Adam training with per-epoch validation, best-checkpoint tracking, and
// patience-based early stopping on the mean of boundary F1 and alignment
// accuracy. Deterministic for a fixed config and seed at any thread count.
// If out_dir is nonempty, writes history.jsonl and best.{json,bin} there.
inline TrainResult train_model(const TrainConfig& tc, const Dataset& train_ds,
                               const Dataset& valid_ds, const std::string& out_dir = "",
                               std::ostream* log = nullptr) {
    tc.validate();
    if (train_ds.size() == 0) throw DataError("train: empty training set");
    if (valid_ds.size() == 0) throw DataError("train: empty validation set");
    if (train_ds.action_vocab_size != valid_ds.action_vocab_size ||
        train_ds.obs_dim != valid_ds.obs_dim)
        throw ConfigError("train: train/validation datasets disagree on vocabulary or obs_dim");
    for (const Dataset* ds : {&train_ds, &valid_ds})
        for (const Trajectory& t : ds->trajectories)
            if (t.num_subroutines > tc.num_slots)
                throw ConfigError("train: trajectory with " + std::to_string(t.num_subroutines) +
                                  " sub-routines exceeds the slot budget " +
                                  std::to_string(tc.num_slots));

    const ModelConfig mcfg = tc.model(train_ds.action_vocab_size, train_ds.obs_dim);
    const Tensor prior = empirical_prior(train_ds, tc.num_slots);

    ParamRegistry reg;
    Rng init_rng(derive_seed(tc.seed, fnv1a64("init"), 0, 0));
    init_model(reg, mcfg, init_rng);
    AdamOptimizer opt(reg, tc.learning_rate);

    std::ofstream history_file;
    if (!out_dir.empty()) {
        history_file.open(out_dir + "/history.jsonl");
        if (!history_file) throw IoError("cannot write " + out_dir + "/history.jsonl");
    }

    TrainResult result;
    result.model = mcfg;
    int epochs_since_best = 0;

    std::vector<int> order(static_cast<size_t>(train_ds.size()));
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(derive_seed(tc.seed, fnv1a64("shuffle"), static_cast<uint64_t>(epoch), 0));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0, recon_sum = 0.0, kl_sum = 0.0;
        const int num_batches = (train_ds.size() + tc.batch_size - 1) / tc.batch_size;

        for (int b = 0; b < num_batches; ++b) {
            const int lo = b * tc.batch_size;
            const int hi = std::min(train_ds.size(), lo + tc.batch_size);
            const int bs = hi - lo;
            std::vector<int> batch(order.begin() + lo, order.begin() + hi);

            // Fixed lane partition: lane j owns a contiguous index range that
            // depends only on the batch size, never on the thread count.
            const int chunk = (bs + kGradLanes - 1) / kGradLanes;
            std::vector<GradBuffer> lane_gb(kGradLanes);
            std::vector<TrajStats> lane_stats(kGradLanes);
            std::vector<std::exception_ptr> lane_err(kGradLanes);
            for (auto& gbuf : lane_gb) gbuf.init_like(reg);

            auto run_lane = [&](int lane) {
                try {
                    const int a = lane * chunk;
                    const int z = std::min(bs, a + chunk);
                    for (int i = a; i < z; ++i) {
                        const int idx = batch[static_cast<size_t>(i)];
                        Rng noise_rng(derive_seed(tc.seed, fnv1a64("noise"),
                                                  static_cast<uint64_t>(epoch),
                                                  static_cast<uint64_t>(idx)));
                        Tensor noise = draw_slot_noise(mcfg.slots(), noise_rng);
                        TrajStats s = trajectory_backward(
                            reg, mcfg, train_ds.trajectories[static_cast<size_t>(idx)], prior,
                            tc.beta, noise, lane_gb[static_cast<size_t>(lane)]);
                        lane_stats[static_cast<size_t>(lane)].loss += s.loss;
                        lane_stats[static_cast<size_t>(lane)].recon += s.recon;
                        lane_stats[static_cast<size_t>(lane)].kl += s.kl;
                    }
                } catch (...) {
                    lane_err[static_cast<size_t>(lane)] = std::current_exception();
                }
            };

            if (tc.num_threads <= 1) {
                for (int lane = 0; lane < kGradLanes; ++lane) run_lane(lane);
            } else {
                std::atomic<int> next{0};
                std::vector<std::thread> workers;
                const int nw = std::min(tc.num_threads, kGradLanes);
                for (int w = 0; w < nw; ++w)
                    workers.emplace_back([&]() {
                        for (int lane = next.fetch_add(1); lane < kGradLanes;
                             lane = next.fetch_add(1))
                            run_lane(lane);
                    });
                for (auto& w : workers) w.join();
            }

            for (int lane = 0; lane < kGradLanes; ++lane) {
                if (lane_err[static_cast<size_t>(lane)]) {
                    detail::dump_batch(out_dir, train_ds, batch, epoch, b);
                    try {
                        std::rethrow_exception(lane_err[static_cast<size_t>(lane)]);
                    } catch (const std::exception& e) {
                        throw NumericError("training aborted at epoch " + std::to_string(epoch) +
                                           " batch " + std::to_string(b) + ": " + e.what() +
                                           (out_dir.empty()
                                                ? ""
                                                : "; batch dumped to " + out_dir +
                                                      "/diverged_batch.jsonl"));
                    }
                }
            }

            GradBuffer batch_gb;
            batch_gb.init_like(reg);
            double batch_loss = 0.0;
            for (int lane = 0; lane < kGradLanes; ++lane) {
                batch_gb.add(lane_gb[static_cast<size_t>(lane)]);
                batch_loss += lane_stats[static_cast<size_t>(lane)].loss;
                loss_sum += lane_stats[static_cast<size_t>(lane)].loss;
                recon_sum += lane_stats[static_cast<size_t>(lane)].recon;
                kl_sum += lane_stats[static_cast<size_t>(lane)].kl;
            }
            batch_gb.scale(1.0 / bs);
            if (!std::isfinite(batch_loss) || !batch_gb.all_finite()) {
                detail::dump_batch(out_dir, train_ds, batch, epoch, b);
                throw NumericError(
                    "non-finite loss or gradient at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(b) +
                    (out_dir.empty() ? "" : "; batch dumped to " + out_dir +
                                                "/diverged_batch.jsonl"));
            }
            opt.step(reg, batch_gb);
        }

        EvalReport val = evaluate_model(reg, mcfg, valid_ds, tc.boundary_tolerance, tc.t_on);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / train_ds.size();
        rec.recon = recon_sum / train_ds.size();
        rec.kl = kl_sum / train_ds.size();
        rec.val_f1 = val.f1;
        rec.val_align = val.align_acc;
        rec.val_halt_acc = val.halt_count_acc;
        rec.val_score = 0.5 * (val.f1 + val.align_acc);
        rec.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(rec);
        if (history_file) history_file << rec.to_json() << "\n" << std::flush;
        if (log)
            *log << "epoch " << epoch << " loss " << rec.train_loss << " val_f1 " << rec.val_f1
                 << " val_align " << rec.val_align << " val_score " << rec.val_score << " ("
                 << rec.seconds << "s)\n"
                 << std::flush;

        if (rec.val_score > result.best_score) {
            result.best_score = rec.val_score;
            result.best_epoch = epoch;
            result.best_params = reg;
            result.best_adam_m = opt.first_moment();
            result.best_adam_v = opt.second_moment();
            result.best_adam_steps = opt.steps_taken();
            epochs_since_best = 0;
            if (!out_dir.empty()) {
                CheckpointMeta meta;
                meta.epoch = epoch;
                meta.val_score = rec.val_score;
                meta.adam_steps = opt.steps_taken();
                meta.model = mcfg;
                save_checkpoint(out_dir + "/best", reg, opt, meta);
            }
        } else if (++epochs_since_best >= tc.patience) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

struct BenchReport {
    double train_tokens_per_sec = 0.0;
    double eval_tokens_per_sec = 0.0;
    double wall_clock_seconds = 0.0;
    int batches = 0;
    int batch_size = 0;

    nlohmann::json to_json() const {
        return {{"train_tokens_per_sec", train_tokens_per_sec},
                {"eval_tokens_per_sec", eval_tokens_per_sec},
                {"wall_clock_seconds", wall_clock_seconds},
                {"batches", batches},
                {"batch_size", batch_size}};
    }
};

// Forward-only and forward+backward+step throughput in trajectory timesteps
// per second, measured over `num_batches` after two warmup batches each.
// Works on a copy of the parameters, so the caller's weights are untouched.
inline BenchReport bench_model(const ParamRegistry& reg0, const ModelConfig& mcfg,
                               const Dataset& ds, double beta, int batch_size,
                               int num_batches = 10) {
    if (ds.size() == 0) throw DataError("bench: empty dataset");
    if (batch_size < 1) throw ConfigError("bench: batch_size must be >= 1");
    const Tensor prior = empirical_prior(ds, mcfg.num_slots);
    const Tensor zeros = zero_noise(mcfg);
    auto traj_at = [&](long i) -> const Trajectory& {
        return ds.trajectories[static_cast<size_t>(i % ds.size())];
    };

    auto eval_one = [&](const Trajectory& t) {
        Graph g(false);
        ModelOutputs out = model_forward(g, reg0, mcfg, t, zeros);
        Tensor masks = masks_tensor(g, out);
        (void)masks_to_segmentation(masks, deterministic_active_slots(p_halt_vector(g, out)),
                                    0.0);
    };

    ParamRegistry reg = reg0;
    AdamOptimizer opt(reg, 5e-4);
    GradBuffer gb;
    gb.init_like(reg);
    Rng noise_rng(0x6be9cull);
    auto train_one = [&](const Trajectory& t, GradBuffer& buf) {
        Tensor noise = draw_slot_noise(mcfg.slots(), noise_rng);
        trajectory_backward(reg, mcfg, t, prior, beta, noise, buf);
    };

    using clock = std::chrono::steady_clock;
    auto t_start = clock::now();

    long cursor = 0, tokens = 0;
    BenchReport rep;
    rep.batches = num_batches;
    rep.batch_size = batch_size;

    for (int b = 0; b < 2; ++b)
        for (int i = 0; i < batch_size; ++i) eval_one(traj_at(cursor++));
    auto t0 = clock::now();
    for (int b = 0; b < num_batches; ++b)
        for (int i = 0; i < batch_size; ++i) {
            const Trajectory& t = traj_at(cursor++);
            tokens += t.length();
            eval_one(t);
        }
    rep.eval_tokens_per_sec =
        tokens / std::chrono::duration<double>(clock::now() - t0).count();

    for (int b = 0; b < 2; ++b) {
        gb.zero();
        for (int i = 0; i < batch_size; ++i) train_one(traj_at(cursor++), gb);
        gb.scale(1.0 / batch_size);
        opt.step(reg, gb);
    }
    tokens = 0;
    t0 = clock::now();
    for (int b = 0; b < num_batches; ++b) {
        gb.zero();
        for (int i = 0; i < batch_size; ++i) {
            const Trajectory& t = traj_at(cursor++);
            tokens += t.length();
            train_one(t, gb);
        }
        gb.scale(1.0 / batch_size);
        opt.step(reg, gb);
    }
    rep.train_tokens_per_sec =
        tokens / std::chrono::duration<double>(clock::now() - t0).count();
    rep.wall_clock_seconds = std::chrono::duration<double>(clock::now() - t_start).count();
    return rep;
}

// One-trajectory diagnostic dump: masks, end distributions, attention, the
// halting distribution, and the implied segmentation, as a JSON document.
// The segmentation here uses the t_on threshold so that thresholding the
// dumped masks reproduces it.
inline nlohmann::json inspect_trajectory(const ParamRegistry& reg, const ModelConfig& mcfg,
                                         const Trajectory& traj, double t_on) {
    Graph g(false);
    ModelOutputs out = model_forward(g, reg, mcfg, traj, zero_noise(mcfg));
    Tensor masks = masks_tensor(g, out);
    Tensor ends = end_dists_tensor(g, out);
    Tensor attn = attn_tensor(g, out);
    std::vector<double> p_halt = p_halt_vector(g, out);
    int k_star = deterministic_active_slots(p_halt);
    HardSegmentation seg = masks_to_segmentation(masks, k_star, t_on);
    AccessResult access = access_metrics(attn, masks, t_on);

    auto rows = [](const Tensor& t) {
        std::vector<std::vector<double>> r;
        for (int k = 0; k < t.rows(); ++k) {
            std::vector<double> row;
            for (int l = 0; l < t.cols(); ++l) row.push_back(t(k, l));
            r.push_back(row);
        }
        return r;
    };

    return {{"kind", "inspect"},
            {"length", traj.length()},
            {"actions", traj.actions},
            {"true_boundaries", traj.boundaries},
            {"true_num_subroutines", traj.num_subroutines},
            {"t_on", t_on},
            {"k_star", k_star},
            {"lambdas", lambdas_vector(g, out)},
            {"p_halt", p_halt},
            {"masks", rows(masks)},
            {"end_dists", rows(ends)},
            {"attn", rows(attn)},
            {"segmentation", seg.segment},
            {"pred_boundaries", seg.boundaries},
            {"ba", access.ba},
            {"fa", access.fa}};
}

}  // namespace slotseg
