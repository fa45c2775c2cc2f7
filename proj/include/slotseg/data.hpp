#pragma once

#include <algorithm>
#include <fstream>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "slotseg/common.hpp"
#include "slotseg/tensor.hpp"

namespace slotseg {

// One action/observation sequence. `boundaries` are 1-based inclusive segment
// end positions in ascending order; the last entry equals the length.
struct Trajectory {
    std::vector<int> actions;
    std::vector<std::vector<double>> observations;
    std::vector<int> boundaries;
    int num_subroutines = 0;

    int length() const { return static_cast<int>(actions.size()); }
};

struct Dataset {
    std::vector<Trajectory> trajectories;
    int action_vocab_size = 0;
    int obs_dim = 0;
    std::vector<int> delimiters;  // ascending
    std::string split;

    int size() const { return static_cast<int>(trajectories.size()); }
};

// Boundary positions implied by delimiter occurrences: each delimiter closes a
// segment at its own (1-based) position. A trailing run of non-delimiter
// actions counts as one final unterminated segment.
inline std::vector<int> extract_boundaries(const std::vector<int>& actions,
                                           const std::set<int>& delimiters) {
    std::vector<int> out;
    const int L = static_cast<int>(actions.size());
    for (int l = 0; l < L; ++l)
        if (delimiters.count(actions[static_cast<size_t>(l)])) out.push_back(l + 1);
    if (L > 0 && (out.empty() || out.back() != L)) out.push_back(L);
    return out;
}

// Fraction of trajectories having each sub-routine count, as a vector over
// counts 1..k_max.
inline Tensor empirical_prior(const Dataset& ds, int k_max) {
    if (k_max < 1) throw ConfigError("empirical_prior: k_max must be positive");
    if (ds.size() == 0) throw DataError("empirical_prior: empty dataset");
    Tensor prior({k_max});
    for (const Trajectory& t : ds.trajectories) {
        if (t.num_subroutines < 1 || t.num_subroutines > k_max)
            throw ConfigError("empirical_prior: trajectory has " +
                              std::to_string(t.num_subroutines) +
                              " sub-routines, outside 1.." + std::to_string(k_max));
        prior.v[static_cast<size_t>(t.num_subroutines - 1)] += 1.0;
    }
    for (double& p : prior.v) p /= ds.size();
    return prior;
}

// ---- synthetic generation ----
//
// Segmented trajectories over a token vocabulary of size A whose top
// `num_delimiters` tokens are reserved as delimiters. Each segment carries two
// independent latent draws:
//
//   * a cluster type, revealed by the observations (noisy samples of a
//     per-type center; adjacent segments always differ in type), and
//   * a hidden phase φ, revealed only by the actions: the segment's len-1
//     content steps emit the cyclic run (φ+i) mod C over the C non-delimiter
//     tokens, closed by a delimiter.
//
// The phase makes every content token exactly predictable — but only from a
// summary of the segment it belongs to, never from the observations or the
// position alone. A grouping that merges or straddles segments therefore
// mixes incompatible phases and pays full cross-entropy on the mismatched
// steps, so the reconstruction objective itself rewards cutting the sequence
// at the true boundaries.
//
// Observation centers are compositional: segment j of a trajectory samples
// around center[type] + ordinal[j], where the ordinal offsets are fixed
// random directions shared by all trajectories. Where a segment sits in its
// trajectory is thus plainly visible in the observations, not something that
// has to be recovered by counting delimiters — the kind of cue a sub-task's
// world state gives away for free in the environments this generator stands
// in for.
struct GenerateConfig {
    int num_train = 2000;
    int num_valid = 500;
    int num_test = 500;
    int action_vocab_size = 8;
    int obs_dim = 16;
    int num_delimiters = 1;
    int num_obs_types = 4;     // observation cluster count
    double ordinal_scale = 1.0;  // weight of the per-ordinal obs offset; 0 disables
    bool phase_content = true;   // false: every segment uses phase 0
    bool lock_content = false;   // true: tokens = (phase + per-step obs lock) mod C
    bool constant_content = false;  // true: every content step emits the phase itself
    double flag_scale = 0.0;     // weight of the end-of-segment obs marker; 0 disables
    int segment_count_min = 4;
    int segment_count_max = 4;
    std::vector<double> segment_count_weights;  // empty = uniform over the range
    int segment_len_min = 3;
    int segment_len_max = 8;
    std::vector<double> segment_len_weights;  // empty = uniform over the range
    double obs_noise = 0.1;

    void validate() const {
        if (num_train < 1 || num_valid < 0 || num_test < 0)
            throw ConfigError("generate: split sizes must be positive (train) / nonnegative");
        if (num_delimiters < 1) throw ConfigError("generate: num_delimiters must be >= 1");
        if (action_vocab_size <= num_delimiters)
            throw ConfigError("generate: action_vocab_size must exceed num_delimiters");
        if (obs_dim < 1) throw ConfigError("generate: obs_dim must be >= 1");
        if (num_obs_types < 1) throw ConfigError("generate: num_obs_types must be >= 1");
        if (segment_count_min < 1 || segment_count_max < segment_count_min)
            throw ConfigError("generate: bad segment_count range");
        if (segment_len_min < 1 || segment_len_max < segment_len_min)
            throw ConfigError("generate: bad segment_len range");
        if (!(obs_noise >= 0.0)) throw ConfigError("generate: obs_noise must be >= 0");
        if (!(ordinal_scale >= 0.0)) throw ConfigError("generate: ordinal_scale must be >= 0");
        if (!(flag_scale >= 0.0)) throw ConfigError("generate: flag_scale must be >= 0");
        if (!segment_count_weights.empty()) {
            if (static_cast<int>(segment_count_weights.size()) !=
                segment_count_max - segment_count_min + 1)
                throw ConfigError("generate: segment_count_weights length must match the range");
            double s = 0.0;
            for (double w : segment_count_weights) {
                if (w < 0.0) throw ConfigError("generate: negative segment_count weight");
                s += w;
            }
            if (s <= 0.0) throw ConfigError("generate: segment_count_weights sum to zero");
        }
        if (!segment_len_weights.empty()) {
            if (static_cast<int>(segment_len_weights.size()) !=
                segment_len_max - segment_len_min + 1)
                throw ConfigError("generate: segment_len_weights length must match the range");
            double s = 0.0;
            for (double w : segment_len_weights) {
                if (w < 0.0) throw ConfigError("generate: negative segment_len weight");
                s += w;
            }
            if (s <= 0.0) throw ConfigError("generate: segment_len_weights sum to zero");
        }
    }

    int num_content_tokens() const { return action_vocab_size - num_delimiters; }

    std::vector<int> delimiter_tokens() const {
        std::vector<int> d;
        for (int t = num_content_tokens(); t < action_vocab_size; ++t) d.push_back(t);
        return d;
    }
};

// Per-type observation centers. Derived from the seed alone (not the split),
// so all splits of one seed share the same cluster bank.
inline Tensor observation_centers(const GenerateConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, fnv1a64("centers")));
    Tensor centers({cfg.num_obs_types, cfg.obs_dim});
    for (double& x : centers.v) x = rng.normal();
    return centers;
}

// Per-ordinal observation offsets (segment 1st, 2nd, ... within a
// trajectory); seed-derived and split-independent like the centers.
inline Tensor ordinal_offsets(const GenerateConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, fnv1a64("ordinals")));
    Tensor offsets({cfg.segment_count_max, cfg.obs_dim});
    for (double& x : offsets.v) x = rng.normal();
    return offsets;
}

// Per-lock observation directions, one per content token; seed-derived and
// split-independent like the centers.
inline Tensor lock_directions(const GenerateConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, fnv1a64("locks")));
    Tensor dirs({cfg.num_content_tokens(), cfg.obs_dim});
    for (double& x : dirs.v) x = rng.normal();
    return dirs;
}

// Direction marking a segment's final step in the observations.
inline Tensor flag_direction(const GenerateConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, fnv1a64("flag")));
    Tensor dir({cfg.obs_dim});
    for (double& x : dir.v) x = rng.normal();
    return dir;
}

inline Dataset generate_split(const GenerateConfig& cfg, const std::string& split, int count,
                              uint64_t seed) {
    cfg.validate();
    if (count < 0) throw ConfigError("generate_split: negative count");
    const Tensor centers = observation_centers(cfg, seed);
    const Tensor ordinals = ordinal_offsets(cfg, seed);
    const Tensor locks = lock_directions(cfg, seed);
    const Tensor flag = flag_direction(cfg, seed);
    const int num_types = cfg.num_obs_types;
    const int num_content = cfg.num_content_tokens();
    const std::vector<int> delims = cfg.delimiter_tokens();

    Dataset ds;
    ds.action_vocab_size = cfg.action_vocab_size;
    ds.obs_dim = cfg.obs_dim;
    ds.delimiters = delims;
    ds.split = split;
    ds.trajectories.reserve(static_cast<size_t>(count));

    Rng rng(derive_seed(seed, fnv1a64("split:" + split)));
    const int count_span = cfg.segment_count_max - cfg.segment_count_min + 1;
    std::vector<double> cum;
    if (!cfg.segment_count_weights.empty()) {
        double s = 0.0;
        for (double w : cfg.segment_count_weights) cum.push_back(s += w);
        for (double& c : cum) c /= s;
    }
    const int len_span = cfg.segment_len_max - cfg.segment_len_min + 1;
    std::vector<double> len_cum;
    if (!cfg.segment_len_weights.empty()) {
        double s = 0.0;
        for (double w : cfg.segment_len_weights) len_cum.push_back(s += w);
        for (double& c : len_cum) c /= s;
    }

    for (int n = 0; n < count; ++n) {
        Trajectory traj;
        int k = 0;
        if (cum.empty()) {
            k = cfg.segment_count_min + rng.uniform_int(0, count_span - 1);
        } else {
            const double u = rng.uniform();
            int idx = 0;
            while (idx + 1 < count_span && u >= cum[static_cast<size_t>(idx)]) ++idx;
            k = cfg.segment_count_min + idx;
        }
        traj.num_subroutines = k;
        int prev_type = -1;
        for (int s = 0; s < k; ++s) {
            int type = rng.uniform_int(0, num_types - 1);
            if (num_types > 1)
                while (type == prev_type) type = rng.uniform_int(0, num_types - 1);
            prev_type = type;
            int len;
            if (len_cum.empty()) {
                len = rng.uniform_int(cfg.segment_len_min, cfg.segment_len_max);
            } else {
                const double u = rng.uniform();
                int idx = 0;
                while (idx + 1 < len_span && u >= len_cum[static_cast<size_t>(idx)]) ++idx;
                len = cfg.segment_len_min + idx;
            }
            const int delim = delims[static_cast<size_t>(rng.uniform_int(
                0, static_cast<int>(delims.size()) - 1))];
            int phase = rng.uniform_int(0, num_content - 1);
            if (!cfg.phase_content) phase = 0;
            for (int i = 0; i < len; ++i) {
                int lock = 0;
                if (cfg.lock_content) lock = rng.uniform_int(0, num_content - 1);
                int tok = cfg.constant_content ? phase : (phase + i) % num_content;
                if (cfg.lock_content) tok = (phase + lock) % num_content;
                traj.actions.push_back(i + 1 < len ? tok : delim);
                std::vector<double> obs(static_cast<size_t>(cfg.obs_dim));
                for (int d = 0; d < cfg.obs_dim; ++d) {
                    double x = centers(type, d) + cfg.ordinal_scale * ordinals(s, d);
                    if (cfg.lock_content) x += locks(lock, d);
                    if (i + 1 == len) x += cfg.flag_scale * flag.v[static_cast<size_t>(d)];
                    obs[static_cast<size_t>(d)] = x + cfg.obs_noise * rng.normal();
                }
                traj.observations.push_back(std::move(obs));
            }
            traj.boundaries.push_back(static_cast<int>(traj.actions.size()));
        }
        ds.trajectories.push_back(std::move(traj));
    }
    return ds;
}

// ---- validation & serialization ----

inline void validate_trajectory(const Trajectory& t, int vocab, int obs_dim,
                                const std::string& where) {
    const int L = t.length();
    if (L == 0) throw DataError(where + ": empty trajectory");
    if (static_cast<int>(t.observations.size()) != L)
        throw DataError(where + ": " + std::to_string(t.observations.size()) +
                        " observations for " + std::to_string(L) + " actions");
    for (int l = 0; l < L; ++l) {
        const int a = t.actions[static_cast<size_t>(l)];
        if (a < 0 || a >= vocab)
            throw DataError(where + ": action " + std::to_string(a) + " at position " +
                            std::to_string(l) + " outside vocabulary of size " +
                            std::to_string(vocab));
        if (static_cast<int>(t.observations[static_cast<size_t>(l)].size()) != obs_dim)
            throw DataError(where + ": observation at position " + std::to_string(l) + " has " +
                            std::to_string(t.observations[static_cast<size_t>(l)].size()) +
                            " dims, expected " + std::to_string(obs_dim));
    }
    if (t.boundaries.empty()) throw DataError(where + ": no boundaries");
    int prev = 0;
    for (int b : t.boundaries) {
        if (b <= prev) throw DataError(where + ": boundaries not strictly increasing");
        prev = b;
    }
    if (t.boundaries.back() != L)
        throw DataError(where + ": last boundary " + std::to_string(t.boundaries.back()) +
                        " does not equal trajectory length " + std::to_string(L));
    if (t.num_subroutines != static_cast<int>(t.boundaries.size()))
        throw DataError(where + ": num_subroutines " + std::to_string(t.num_subroutines) +
                        " does not match " + std::to_string(t.boundaries.size()) + " boundaries");
}

inline void validate_dataset(const Dataset& ds) {
    if (ds.action_vocab_size < 2) throw DataError("dataset: action vocabulary too small");
    if (ds.obs_dim < 1) throw DataError("dataset: bad observation dimension");
    for (int d : ds.delimiters)
        if (d < 0 || d >= ds.action_vocab_size)
            throw DataError("dataset: delimiter token " + std::to_string(d) +
                            " outside vocabulary");
    for (size_t i = 0; i < ds.trajectories.size(); ++i)
        validate_trajectory(ds.trajectories[i], ds.action_vocab_size, ds.obs_dim,
                            "trajectory " + std::to_string(i));
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_dataset: cannot open '" + path + "' for writing");
    nlohmann::json header = {{"kind", "dataset"},
                             {"action_vocab_size", ds.action_vocab_size},
                             {"obs_dim", ds.obs_dim},
                             {"delimiters", ds.delimiters},
                             {"split", ds.split}};
    out << header.dump() << "\n";
    for (const Trajectory& t : ds.trajectories) {
        nlohmann::json j = {{"actions", t.actions},
                            {"observations", t.observations},
                            {"boundaries", t.boundaries},
                            {"num_subroutines", t.num_subroutines}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("save_dataset: write to '" + path + "' failed");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    Dataset ds;
    auto parse = [&](const std::string& text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded())
            throw DataError("load_dataset: " + path + ":" + std::to_string(lineno) +
                            ": invalid JSON");
        return j;
    };
    try {
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j = parse(line);
            if (lineno == 1) {
                if (j.value("kind", "") != "dataset")
                    throw DataError("load_dataset: " + path + ":1: missing dataset header");
                ds.action_vocab_size = j.at("action_vocab_size").get<int>();
                ds.obs_dim = j.at("obs_dim").get<int>();
                ds.delimiters = j.at("delimiters").get<std::vector<int>>();
                ds.split = j.value("split", "");
                continue;
            }
            Trajectory t;
            t.actions = j.at("actions").get<std::vector<int>>();
            t.observations = j.at("observations").get<std::vector<std::vector<double>>>();
            t.boundaries = j.at("boundaries").get<std::vector<int>>();
            t.num_subroutines = j.at("num_subroutines").get<int>();
            validate_trajectory(t, ds.action_vocab_size, ds.obs_dim,
                                path + ":" + std::to_string(lineno));
            ds.trajectories.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_dataset: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (lineno == 0) throw DataError("load_dataset: " + path + ": empty file");
    if (ds.trajectories.empty())
        throw DataError("load_dataset: " + path + ": no trajectories");
    validate_dataset(ds);
    return ds;
}

}  // namespace slotseg
