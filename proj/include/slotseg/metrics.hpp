#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <string>
#include <vector>

#include "slotseg/tensor.hpp"

namespace slotseg {

// A hard assignment of every timestep to a segment index, plus the implied
// boundary list (1-based inclusive segment ends).
struct HardSegmentation {
    std::vector<int> segment;     // per-timestep 1-based segment index, non-decreasing
    std::vector<int> boundaries;  // strictly increasing, last entry == L
    int active_k = 0;
};

// Assign each timestep to the strongest of the first active_k masks. Mask
// values at or below `threshold` are treated as zero; ties go to the lower
// slot. Raw argmax can briefly hand a timestep back to an earlier slot when
// masks are far from binary, so assignments are made monotone with a running
// maximum — a no-op once masks are near-binary.
inline HardSegmentation masks_to_segmentation(const Tensor& masks, int active_k,
                                              double threshold = 0.0) {
    if (masks.rank() != 2) throw ShapeError("masks_to_segmentation: masks must be (K, L)");
    const int K = masks.rows(), L = masks.cols();
    if (active_k < 1 || active_k > K)
        throw ConfigError("masks_to_segmentation: active_k " + std::to_string(active_k) +
                          " outside 1.." + std::to_string(K));
    HardSegmentation out;
    out.active_k = active_k;
    out.segment.resize(static_cast<size_t>(L));
    int prev = 1;
    for (int l = 0; l < L; ++l) {
        int best = 0;
        double best_v = masks(0, l) > threshold ? masks(0, l) : 0.0;
        for (int k = 1; k < active_k; ++k) {
            double v = masks(k, l) > threshold ? masks(k, l) : 0.0;
            if (v > best_v) {
                best = k;
                best_v = v;
            }
        }
        prev = std::max(prev, best + 1);
        out.segment[static_cast<size_t>(l)] = prev;
    }
    for (int l = 0; l < L; ++l)
        if (l + 1 == L || out.segment[static_cast<size_t>(l + 1)] != out.segment[static_cast<size_t>(l)])
            out.boundaries.push_back(l + 1);
    return out;
}

struct F1Result {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    int matches = 0;
};

// One-to-one matching of predicted to ground-truth boundaries within
// +-tolerance, both lists ascending. Greedy in ascending order; on sorted
// lists with a symmetric window this attains the optimal matching size.
inline F1Result boundary_f1(const std::vector<int>& pred, const std::vector<int>& truth,
                            int tolerance) {
    if (tolerance < 0) throw ConfigError("boundary_f1: tolerance must be >= 0");
    for (size_t i = 1; i < pred.size(); ++i)
        if (pred[i] <= pred[i - 1]) throw DataError("boundary_f1: pred not strictly increasing");
    for (size_t i = 1; i < truth.size(); ++i)
        if (truth[i] <= truth[i - 1]) throw DataError("boundary_f1: truth not strictly increasing");

    std::vector<bool> used(truth.size(), false);
    int matches = 0;
    for (int p : pred) {
        for (size_t j = 0; j < truth.size(); ++j) {
            if (!used[j] && std::abs(p - truth[j]) <= tolerance) {
                used[j] = true;
                ++matches;
                break;
            }
        }
    }
    F1Result r;
    r.matches = matches;
    r.precision = pred.empty() ? 0.0 : static_cast<double>(matches) / pred.size();
    r.recall = truth.empty() ? 0.0 : static_cast<double>(matches) / truth.size();
    r.f1 = (r.precision + r.recall) > 0.0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
    return r;
}

// Fraction of timesteps whose predicted segment index equals the true one.
inline double alignment_accuracy(const std::vector<int>& pred_seg,
                                 const std::vector<int>& true_seg) {
    if (pred_seg.size() != true_seg.size())
        throw ShapeError("alignment_accuracy: length mismatch " + std::to_string(pred_seg.size()) +
                         " vs " + std::to_string(true_seg.size()));
    if (pred_seg.empty()) throw ShapeError("alignment_accuracy: empty segmentation");
    int hits = 0;
    for (size_t i = 0; i < pred_seg.size(); ++i)
        if (pred_seg[i] == true_seg[i]) ++hits;
    return static_cast<double>(hits) / pred_seg.size();
}

struct AccessResult {
    double ba = 0.0;  // fraction of timesteps attended before the slot's segment
    double fa = 0.0;  // fraction attended after it
};

// Per-slot before/future access, averaged over slots. For each slot, the
// segment extent [a_min, a_max] is where the mask exceeds t_on; BA counts
// attended timesteps strictly before a_min over a_min - 1, FA counts those
// strictly after a_max over L - a_max + 1. A slot whose mask never exceeds
// t_on, or whose extent touches the relevant edge, contributes zero.
inline AccessResult access_metrics(const Tensor& attn, const Tensor& masks, double t_on) {
    if (attn.rank() != 2 || masks.rank() != 2 || !attn.same_shape(masks))
        throw ShapeError("access_metrics: attn " + attn.describe() + " vs masks " +
                         masks.describe());
    if (!(t_on > 0.0 && t_on < 1.0)) throw ConfigError("access_metrics: t_on must be in (0,1)");
    const int K = attn.rows(), L = attn.cols();
    AccessResult out;
    for (int k = 0; k < K; ++k) {
        int a_min = 0, a_max = 0;  // 1-based; 0 = not found
        for (int l = 0; l < L; ++l) {
            if (masks(k, l) > t_on) {
                if (a_min == 0) a_min = l + 1;
                a_max = l + 1;
            }
        }
        if (a_min == 0) continue;
        if (a_min > 1) {
            int before = 0;
            for (int l = 0; l < a_min - 1; ++l)
                if (attn(k, l) > t_on) ++before;
            out.ba += static_cast<double>(before) / (a_min - 1);
        }
        if (a_max < L) {
            int after = 0;
            for (int l = a_max; l < L; ++l)
                if (attn(k, l) > t_on) ++after;
            out.fa += static_cast<double>(after) / (L - a_max + 1);
        }
    }
    out.ba /= K;
    out.fa /= K;
    return out;
}

// Fraction of trajectories whose predicted active-slot count is exactly right.
inline double halt_count_accuracy(const std::vector<int>& pred_k, const std::vector<int>& true_k) {
    if (pred_k.size() != true_k.size())
        throw ShapeError("halt_count_accuracy: length mismatch " + std::to_string(pred_k.size()) +
                         " vs " + std::to_string(true_k.size()));
    if (pred_k.empty()) throw ShapeError("halt_count_accuracy: empty lists");
    int hits = 0;
    for (size_t i = 0; i < pred_k.size(); ++i)
        if (pred_k[i] == true_k[i]) ++hits;
    return static_cast<double>(hits) / pred_k.size();
}

struct EvalReport {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double align_acc = 0.0;
    double ba = 0.0;
    double fa = 0.0;
    double halt_count_acc = 0.0;
    int num_trajectories = 0;

    nlohmann::json to_json() const {
        return {{"f1", f1},
                {"precision", precision},
                {"recall", recall},
                {"align_acc", align_acc},
                {"ba", ba},
                {"fa", fa},
                {"halt_count_acc", halt_count_acc},
                {"num_trajectories", num_trajectories}};
    }

    std::string to_table() const {
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "%-16s %8s\n"
                      "%-16s %8.4f\n%-16s %8.4f\n%-16s %8.4f\n%-16s %8.4f\n"
                      "%-16s %8.4f\n%-16s %8.4f\n%-16s %8.4f\n%-16s %8d\n",
                      "metric", "value", "f1", f1, "precision", precision, "recall", recall,
                      "align_acc", align_acc, "ba", ba, "fa", fa, "halt_count_acc",
                      halt_count_acc, "trajectories", num_trajectories);
        return buf;
    }
};

// Pools per-trajectory statistics into one dataset-level report. Boundary
// precision/recall pool raw match counts (so f1 == 2PR/(P+R) holds exactly),
// alignment pools timesteps, halting pools trajectories, and BA/FA average
// their per-trajectory values.
class MetricAccumulator {
  public:
    void add_boundaries(const std::vector<int>& pred, const std::vector<int>& truth,
                        int tolerance) {
        F1Result r = boundary_f1(pred, truth, tolerance);
        matched_ += r.matches;
        num_pred_ += static_cast<int>(pred.size());
        num_truth_ += static_cast<int>(truth.size());
    }
    void add_alignment(const std::vector<int>& pred_seg, const std::vector<int>& true_seg) {
        if (pred_seg.size() != true_seg.size())
            throw ShapeError("MetricAccumulator: alignment length mismatch");
        for (size_t i = 0; i < pred_seg.size(); ++i)
            if (pred_seg[i] == true_seg[i]) ++align_hits_;
        align_total_ += static_cast<int>(pred_seg.size());
    }
    void add_access(const AccessResult& r) {
        ba_sum_ += r.ba;
        fa_sum_ += r.fa;
        ++access_count_;
    }
    void add_halt(int pred_k, int true_k) {
        if (pred_k == true_k) ++halt_hits_;
        ++halt_total_;
    }
    void count_trajectory() { ++trajectories_; }

    EvalReport report() const {
        if (trajectories_ == 0) throw DataError("MetricAccumulator: no trajectories accumulated");
        EvalReport r;
        r.num_trajectories = trajectories_;
        r.precision = num_pred_ > 0 ? static_cast<double>(matched_) / num_pred_ : 0.0;
        r.recall = num_truth_ > 0 ? static_cast<double>(matched_) / num_truth_ : 0.0;
        r.f1 = (r.precision + r.recall) > 0.0
                   ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                   : 0.0;
        r.align_acc = align_total_ > 0 ? static_cast<double>(align_hits_) / align_total_ : 0.0;
        r.ba = access_count_ > 0 ? ba_sum_ / access_count_ : 0.0;
        r.fa = access_count_ > 0 ? fa_sum_ / access_count_ : 0.0;
        r.halt_count_acc = halt_total_ > 0 ? static_cast<double>(halt_hits_) / halt_total_ : 0.0;
        return r;
    }

  private:
    int matched_ = 0, num_pred_ = 0, num_truth_ = 0;
    int align_hits_ = 0, align_total_ = 0;
    double ba_sum_ = 0.0, fa_sum_ = 0.0;
    int access_count_ = 0;
    int halt_hits_ = 0, halt_total_ = 0;
    int trajectories_ = 0;
};

}  // namespace slotseg
