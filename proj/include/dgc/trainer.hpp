#pragma once

// Two-phase alternating training: (I) one Adam step on the encoder (and,
// unless frozen, the centroids) from the four-term loss, then (II) EMA
// centroid repositioning, dead-cluster reactivation, and re-normalization.
// Includes the full config with canonical text serialization, binary
// checkpoints with a config digest, per-step CSV metrics, and the training
// driver over the cube scheduler (sync or async).

#include <chrono>
#include <iomanip>
#include <map>

#include "dgc/eval_diag.hpp"
#include "dgc/losses.hpp"

namespace dgc {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct TrainConfig {
    u32 k = 2;
    u32 patch_size = 64;
    u32 batch = 4;  // patch pairs per step, all from the resident cube
    f64 overlap_min = 0.25;
    f64 overlap_max = 0.75;
    u64 reuse_budget = 32;  // patch-pair draws per cube load
    u64 steps = 2000;

    f64 lr = 1e-3;
    f64 adam_beta1 = 0.9;
    f64 adam_beta2 = 0.999;
    f64 adam_eps = 1e-8;

    f64 weight_unif = 1.0;
    f64 weight_orth = 0.1;
    f64 weight_bal = 1.0;
    f64 weight_cons = 1.0;

    u32 ms_iterations = 5;
    f64 ms_bandwidth = 0.5;
    bool ms_in_training = true;  // bypass switch for the training loop

    f64 alpha = 0.99;           // EMA decay
    f64 tau = 0.1;              // soft-assignment temperature
    f64 dead_threshold = 0.0;   // mass fraction; 0 selects 0.5/K
    f64 reactivation_eps = 0.05;
    bool centroid_grads = true;  // centroids receive gradients in phase (I)

    ScheduleMode mode = ScheduleMode::sync;
    u64 seed = 0;
    u64 checkpoint_interval = 0;  // 0: final checkpoint only
    u64 log_interval = 1;
    u64 snapshot_interval = 0;  // 0: no segmentation snapshots
    u32 snapshot_cube = 0;      // dataset index of the snapshot reference cube

    u32 bands = 301;
    u32 channels = 32;
    u32 spectral_kernel = 9;
    u32 stride1 = 4;
    u32 stride2 = 4;
    u32 stride3 = 2;
    u32 spatial_kernel = 3;

    EncoderConfig encoder_config() const {
        EncoderConfig cfg;
        cfg.bands = bands;
        cfg.channels = channels;
        cfg.spectral_kernel = spectral_kernel;
        cfg.spectral_strides = {stride1, stride2, stride3};
        cfg.spatial_kernel = spatial_kernel;
        return cfg;
    }

    MeanShiftConfig ms_config() const { return {ms_iterations, ms_bandwidth}; }

    f64 effective_dead_threshold() const {
        return dead_threshold > 0.0 ? dead_threshold : 0.5 / static_cast<f64>(k);
    }

    template <class T>
    LossWeights<T> loss_weights() const {
        LossWeights<T> w;
        w.unif = static_cast<T>(weight_unif);
        w.orth = static_cast<T>(weight_orth);
        w.bal = static_cast<T>(weight_bal);
        w.cons = static_cast<T>(weight_cons);
        return w;
    }

    void validate() const {
        if (k < 2) throw ConfigError("config: k must be >= 2");
        if (patch_size == 0 || batch == 0) throw ConfigError("config: counts must be positive");
        if (!(overlap_min > 0.0 && overlap_min <= overlap_max && overlap_max < 1.0))
            throw ConfigError("config: overlap range must satisfy 0 < min <= max < 1");
        if (reuse_budget == 0) throw ConfigError("config: reuse budget must be positive");
        if (lr < 0.0) throw ConfigError("config: negative learning rate");
        if (weight_unif < 0 || weight_orth < 0 || weight_bal < 0 || weight_cons < 0)
            throw ConfigError("config: loss weights must be >= 0");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("config: alpha must be in [0,1]");
        if (tau <= 0.0) throw ConfigError("config: tau must be positive");
        if (ms_bandwidth <= 0.0) throw ConfigError("config: mean-shift bandwidth must be positive");
        if (log_interval == 0) throw ConfigError("config: log interval must be positive");
        encoder_config().validate();
        if (static_cast<u64>(2) * batch * patch_size * patch_size < k)
            throw ConfigError("config: batch too small for K pseudo-label targets");
    }

    // Canonical key=value text: sorted keys, round-trip-exact values. Used as
    // the checkpoint-embedded config and as the digest input.
    std::string canonical_text() const;
    static TrainConfig from_text(const std::string& text);
    std::array<u8, 32> digest() const { return digest256(canonical_text()); }
};

namespace detail {

inline std::string format_f64(f64 v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string TrainConfig::canonical_text() const {
    std::map<std::string, std::string> kv;
    kv["k"] = std::to_string(k);
    kv["patch_size"] = std::to_string(patch_size);
    kv["batch"] = std::to_string(batch);
    kv["overlap_min"] = detail::format_f64(overlap_min);
    kv["overlap_max"] = detail::format_f64(overlap_max);
    kv["reuse_budget"] = std::to_string(reuse_budget);
    kv["steps"] = std::to_string(steps);
    kv["lr"] = detail::format_f64(lr);
    kv["adam_beta1"] = detail::format_f64(adam_beta1);
    kv["adam_beta2"] = detail::format_f64(adam_beta2);
    kv["adam_eps"] = detail::format_f64(adam_eps);
    kv["weight_unif"] = detail::format_f64(weight_unif);
    kv["weight_orth"] = detail::format_f64(weight_orth);
    kv["weight_bal"] = detail::format_f64(weight_bal);
    kv["weight_cons"] = detail::format_f64(weight_cons);
    kv["ms_iterations"] = std::to_string(ms_iterations);
    kv["ms_bandwidth"] = detail::format_f64(ms_bandwidth);
    kv["ms_in_training"] = ms_in_training ? "1" : "0";
    kv["alpha"] = detail::format_f64(alpha);
    kv["tau"] = detail::format_f64(tau);
    kv["dead_threshold"] = detail::format_f64(dead_threshold);
    kv["reactivation_eps"] = detail::format_f64(reactivation_eps);
    kv["centroid_grads"] = centroid_grads ? "1" : "0";
    kv["mode"] = mode == ScheduleMode::sync ? "sync" : "async";
    kv["seed"] = std::to_string(seed);
    kv["checkpoint_interval"] = std::to_string(checkpoint_interval);
    kv["log_interval"] = std::to_string(log_interval);
    kv["snapshot_interval"] = std::to_string(snapshot_interval);
    kv["snapshot_cube"] = std::to_string(snapshot_cube);
    kv["bands"] = std::to_string(bands);
    kv["channels"] = std::to_string(channels);
    kv["spectral_kernel"] = std::to_string(spectral_kernel);
    kv["stride1"] = std::to_string(stride1);
    kv["stride2"] = std::to_string(stride2);
    kv["stride3"] = std::to_string(stride3);
    kv["spatial_kernel"] = std::to_string(spatial_kernel);
    std::string out;
    for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
    return out;
}

inline TrainConfig TrainConfig::from_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    auto as_u32 = [](const std::string& v) { return static_cast<u32>(std::stoul(v)); };
    auto as_u64 = [](const std::string& v) { return static_cast<u64>(std::stoull(v)); };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find(" = ");
        if (eq == std::string::npos) throw ConfigError("config text: malformed line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 3);
        if (key == "k") cfg.k = as_u32(value);
        else if (key == "patch_size") cfg.patch_size = as_u32(value);
        else if (key == "batch") cfg.batch = as_u32(value);
        else if (key == "overlap_min") cfg.overlap_min = std::stod(value);
        else if (key == "overlap_max") cfg.overlap_max = std::stod(value);
        else if (key == "reuse_budget") cfg.reuse_budget = as_u64(value);
        else if (key == "steps") cfg.steps = as_u64(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(value);
        else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(value);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
        else if (key == "weight_unif") cfg.weight_unif = std::stod(value);
        else if (key == "weight_orth") cfg.weight_orth = std::stod(value);
        else if (key == "weight_bal") cfg.weight_bal = std::stod(value);
        else if (key == "weight_cons") cfg.weight_cons = std::stod(value);
        else if (key == "ms_iterations") cfg.ms_iterations = as_u32(value);
        else if (key == "ms_bandwidth") cfg.ms_bandwidth = std::stod(value);
        else if (key == "ms_in_training") cfg.ms_in_training = value == "1";
        else if (key == "alpha") cfg.alpha = std::stod(value);
        else if (key == "tau") cfg.tau = std::stod(value);
        else if (key == "dead_threshold") cfg.dead_threshold = std::stod(value);
        else if (key == "reactivation_eps") cfg.reactivation_eps = std::stod(value);
        else if (key == "centroid_grads") cfg.centroid_grads = value == "1";
        else if (key == "mode") cfg.mode = value == "async" ? ScheduleMode::async : ScheduleMode::sync;
        else if (key == "seed") cfg.seed = as_u64(value);
        else if (key == "checkpoint_interval") cfg.checkpoint_interval = as_u64(value);
        else if (key == "log_interval") cfg.log_interval = as_u64(value);
        else if (key == "snapshot_interval") cfg.snapshot_interval = as_u64(value);
        else if (key == "snapshot_cube") cfg.snapshot_cube = as_u32(value);
        else if (key == "bands") cfg.bands = as_u32(value);
        else if (key == "channels") cfg.channels = as_u32(value);
        else if (key == "spectral_kernel") cfg.spectral_kernel = as_u32(value);
        else if (key == "stride1") cfg.stride1 = as_u32(value);
        else if (key == "stride2") cfg.stride2 = as_u32(value);
        else if (key == "stride3") cfg.stride3 = as_u32(value);
        else if (key == "spatial_kernel") cfg.spatial_kernel = as_u32(value);
        else throw ConfigError("config text: unknown key: " + key);
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Dataset manifest (written by synth, consumed by train)
// ---------------------------------------------------------------------------

struct DatasetManifest {
    u64 seed = 0;
    std::vector<std::string> cubes;  // resolved absolute-ish paths
    std::vector<std::string> masks;  // aligned with cubes; may contain ""
};

// Plain text manifest: "seed <n>" then one "cube_path[\tmask_path]" per line,
// paths relative to the manifest file.
inline void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::write_failed, "cannot write: " + path);
    out << "seed " << manifest.seed << "\n";
    for (size_t i = 0; i < manifest.cubes.size(); ++i) {
        out << manifest.cubes[i];
        if (i < manifest.masks.size() && !manifest.masks[i].empty()) out << "\t" << manifest.masks[i];
        out << "\n";
    }
    if (!out) throw IoError(IoErrorKind::write_failed, "write failed: " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrorKind::missing_file, "cannot open manifest: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    DatasetManifest manifest;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first && line.rfind("seed ", 0) == 0) {
            manifest.seed = std::stoull(line.substr(5));
            first = false;
            continue;
        }
        first = false;
        const size_t tab = line.find('\t');
        const std::string cube = tab == std::string::npos ? line : line.substr(0, tab);
        const std::string mask = tab == std::string::npos ? "" : line.substr(tab + 1);
        manifest.cubes.push_back((base / cube).string());
        manifest.masks.push_back(mask.empty() ? "" : (base / mask).string());
    }
    if (manifest.cubes.empty()) throw IoError(IoErrorKind::corrupt, "manifest lists no cubes: " + path);
    return manifest;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    u64 t = 0;

    void init(size_t n) {
        m.assign(n, T(0));
        v.assign(n, T(0));
        t = 0;
    }

    // Updates one parameter segment; `offset` addresses this segment inside
    // the moment arrays. Call after incrementing t for the step.
    void apply(T* params, const T* grads, size_t n, size_t offset, const TrainConfig& cfg) {
        const T beta1 = static_cast<T>(cfg.adam_beta1);
        const T beta2 = static_cast<T>(cfg.adam_beta2);
        const T eps = static_cast<T>(cfg.adam_eps);
        const T lr = static_cast<T>(cfg.lr);
        const T bc1 = T(1) - static_cast<T>(std::pow(cfg.adam_beta1, static_cast<f64>(t)));
        const T bc2 = T(1) - static_cast<T>(std::pow(cfg.adam_beta2, static_cast<f64>(t)));
        T* mm = m.data() + offset;
        T* vv = v.data() + offset;
        for (size_t i = 0; i < n; ++i) {
            mm[i] = beta1 * mm[i] + (T(1) - beta1) * grads[i];
            vv[i] = beta2 * vv[i] + (T(1) - beta2) * grads[i] * grads[i];
            const T m_hat = mm[i] / bc1;
            const T v_hat = vv[i] / bc2;
            params[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
};

// ---------------------------------------------------------------------------
// Training state and step records
// ---------------------------------------------------------------------------

struct StepRecord {
    u64 step = 0;
    LossBreakdown<f64> losses;
    std::vector<f64> usage;  // marginal assignment fraction per cluster
    u32 active_clusters = 0;
    f64 wall_ms = 0.0;
    bool aborted = false;  // non-finite loss; state was not modified
};

template <class T>
struct TrainState {
    TrainConfig config;
    EncoderParams<T> encoder;
    CentroidBank<T> bank;
    AdamState<T> opt;
    u64 step = 0;
    Rng patch_rng;
    Rng reactivate_rng;
    CubeScheduler::Snapshot scheduler;  // captured when checkpointing
    std::vector<StepRecord> history;    // in-memory only, not checkpointed
};

template <class T>
inline TrainState<T> init_train_state(const TrainConfig& config) {
    config.validate();
    TrainState<T> state;
    state.config = config;
    state.encoder = init_params<T>(config.encoder_config(), config.seed);
    state.bank = init_centroid_bank<T>(config.k, config.channels, config.seed);
    state.bank.ema_decay = static_cast<T>(config.alpha);
    state.bank.temperature = static_cast<T>(config.tau);
    state.bank.dead_threshold = static_cast<T>(config.effective_dead_threshold());
    state.bank.reactivation_eps = static_cast<T>(config.reactivation_eps);
    state.opt.init(state.encoder.flat.size() + state.bank.centers.size());
    state.patch_rng = Rng(child_seed(config.seed, "patches"));
    state.reactivate_rng = Rng(child_seed(config.seed, "reactivate"));
    return state;
}

inline std::string metric_csv_header(u32 k) {
    std::string header = "step,comp1,comp2,unif,orth,bal,cons,total,active_clusters";
    for (u32 c = 0; c < k; ++c) header += ",usage_" + std::to_string(c);
    header += ",wall_ms";
    return header;
}

inline std::string metric_csv_row(const StepRecord& rec) {
    std::string row = std::to_string(rec.step);
    const f64 values[7] = {rec.losses.comp1, rec.losses.comp2, rec.losses.unif, rec.losses.orth,
                           rec.losses.bal,   rec.losses.cons,  rec.losses.total};
    for (f64 v : values) row += "," + detail::format_f64(v);
    row += "," + std::to_string(rec.active_clusters);
    for (f64 u : rec.usage) row += "," + detail::format_f64(u);
    row += "," + detail::format_f64(rec.wall_ms);
    return row;
}

// ---------------------------------------------------------------------------
// train_step
// ---------------------------------------------------------------------------

template <class T>
inline StepRecord train_step(TrainState<T>& state, std::span<const PatchPair<T>> pairs) {
    const auto t_start = std::chrono::steady_clock::now();
    const TrainConfig& cfg = state.config;
    if (pairs.size() != cfg.batch) throw ConfigError("train_step: batch size mismatch");
    const u32 P = cfg.patch_size;
    const size_t per_patch = static_cast<size_t>(P) * P;
    const u32 B = cfg.batch;
    const u32 K = cfg.k;
    const u32 dim = cfg.channels;

    // one batch of 2B patches: [0,B) crop 1, [B,2B) crop 2
    PatchBatch<T> batch;
    batch.reserve_patches(2 * B, P, cfg.bands);
    for (const auto& pair : pairs) batch.append(pair.grid1);
    for (const auto& pair : pairs) batch.append(pair.grid2);

    EncoderTape<T> enc_tape;
    EmbeddingGrid<T> encoded = encode_with_tape(state.encoder, batch, &enc_tape);

    const bool use_ms = cfg.ms_in_training && cfg.ms_iterations > 0;
    MeanShiftTape<T> ms_tape;
    const MeanShiftConfig ms_cfg = cfg.ms_config();
    EmbeddingGrid<T> refined =
        use_ms ? mean_shift_forward(encoded, ms_cfg, &ms_tape) : encoded;
    const T* z = refined.values.data();
    const size_t n_all = refined.pixels();
    const size_t n_crop = static_cast<size_t>(B) * per_patch;

    SoftAssignment<T> assign = soft_assign(refined, state.bank);
    const LossWeights<T> weights = cfg.loss_weights<T>();

    std::vector<T> d_p(n_all * K, T(0));
    std::vector<T> d_z(n_all * dim, T(0));
    std::vector<T> d_c(state.bank.centers.size(), T(0));

    const T comp1 = compactness<T>(assign.p.data(), z, n_crop, state.bank, d_p.data(), d_z.data(),
                                   d_c.data());
    const T comp2 = compactness<T>(assign.p.data() + n_crop * K, z + n_crop * dim, n_crop,
                                   state.bank, d_p.data() + n_crop * K, d_z.data() + n_crop * dim,
                                   d_c.data());
    const std::vector<u32> labels = uniform_pseudo_labels<T>(assign.p.data(), n_all, K);
    const T unif =
        uniform_loss<T>(assign.p.data(), n_all, K, labels, d_p.data(), weights.unif);
    const T orth = orthogonality<T>(state.bank, d_c.data(), weights.orth);
    const T bal = balance<T>(assign.p.data(), n_all, K, d_p.data(), weights.bal);

    // gather aligned overlap rows for the consistency term
    std::vector<size_t> rows1, rows2;
    for (u32 b = 0; b < B; ++b) {
        const auto& pair = pairs[b];
        for (size_t i = 0; i < pair.overlap1.size(); ++i) {
            rows1.push_back(static_cast<size_t>(b) * per_patch + pair.overlap1[i]);
            rows2.push_back(n_crop + static_cast<size_t>(b) * per_patch + pair.overlap2[i]);
        }
    }
    const size_t m_overlap = rows1.size();
    T cons = T(0);
    if (m_overlap > 0) {
        std::vector<T> p1(m_overlap * K), p2(m_overlap * K);
        for (size_t i = 0; i < m_overlap; ++i) {
            std::copy_n(assign.row(rows1[i]), K, p1.data() + i * K);
            std::copy_n(assign.row(rows2[i]), K, p2.data() + i * K);
        }
        std::vector<T> d_p1(m_overlap * K, T(0)), d_p2(m_overlap * K, T(0));
        cons = consistency<T>(p1.data(), p2.data(), m_overlap, K, d_p1.data(), d_p2.data(),
                              weights.cons);
        for (size_t i = 0; i < m_overlap; ++i)
            for (u32 c = 0; c < K; ++c) {
                d_p[rows1[i] * K + c] += d_p1[i * K + c];
                d_p[rows2[i] * K + c] += d_p2[i * K + c];
            }
    }

    const LossBreakdown<T> breakdown =
        total_loss<T>(comp1, comp2, unif, orth, bal, cons, weights);

    StepRecord record;
    record.step = state.step + 1;
    record.losses = {static_cast<f64>(breakdown.comp1), static_cast<f64>(breakdown.comp2),
                     static_cast<f64>(breakdown.unif),  static_cast<f64>(breakdown.orth),
                     static_cast<f64>(breakdown.bal),   static_cast<f64>(breakdown.cons),
                     static_cast<f64>(breakdown.total)};
    const std::vector<T> masses = assignment_masses(assign);
    record.usage.resize(K);
    for (u32 c = 0; c < K; ++c)
        record.usage[c] = static_cast<f64>(masses[c]) / static_cast<f64>(n_all);
    {
        std::vector<bool> hit(K, false);
        for (size_t i = 0; i < n_all; ++i) {
            const T* pi = assign.row(i);
            u32 best = 0;
            for (u32 c = 1; c < K; ++c)
                if (pi[c] > pi[best]) best = c;
            hit[best] = true;
        }
        for (u32 c = 0; c < K; ++c) record.active_clusters += hit[c];
    }

    if (!record.losses.finite()) {
        // abort the step: no state mutation, prior parameters stay intact
        record.aborted = true;
        log_warn("step " + std::to_string(record.step) + ": non-finite loss, step aborted");
        record.wall_ms = std::chrono::duration<f64, std::milli>(std::chrono::steady_clock::now() -
                                                                t_start)
                             .count();
        return record;
    }

    // phase (I): backprop and one optimizer step
    soft_assign_backward<T>(z, n_all, dim, state.bank, assign, d_p.data(), d_z.data(),
                            cfg.centroid_grads ? d_c.data() : nullptr);
    if (use_ms) d_z = mean_shift_backward<T>(ms_tape, ms_cfg, std::move(d_z));
    const std::vector<T> d_params =
        encode_backward_from_tape(state.encoder, batch, enc_tape, encoded, d_z);

    // poisoned inputs can slip a finite loss past the check above (ReLU maps
    // NaN to zero) yet still blow up the chain rule; never let that reach the
    // parameters
    if (!all_finite(d_params) || !all_finite(d_c)) {
        record.aborted = true;
        log_warn("step " + std::to_string(record.step) + ": non-finite gradient, step aborted");
        record.wall_ms = std::chrono::duration<f64, std::milli>(std::chrono::steady_clock::now() -
                                                                t_start)
                             .count();
        return record;
    }

    ++state.opt.t;
    state.opt.apply(state.encoder.flat.data(), d_params.data(), d_params.size(), 0, cfg);
    if (cfg.centroid_grads)
        state.opt.apply(state.bank.centers.data(), d_c.data(), d_c.size(),
                        state.encoder.flat.size(), cfg);

    // phase (II): EMA toward the batch means, reactivation, normalization
    ema_update<T>(state.bank, z, n_all, dim, assign);
    reactivate_dead<T>(state.bank, masses, state.reactivate_rng);
    state.bank.normalize_centers();

    ++state.step;
    record.wall_ms =
        std::chrono::duration<f64, std::milli>(std::chrono::steady_clock::now() - t_start).count();
    return record;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr u32 kCheckpointVersion = 1;

namespace detail {

inline void write_string(std::ostream& out, const std::string& s) {
    write_le<u64>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const std::string& path) {
    u64 n = 0;
    if (!read_le<u64>(in, n)) throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n)))
        throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    return s;
}

template <class T>
inline void write_array(std::ostream& out, const std::vector<T>& values) {
    write_le<u64>(out, values.size());
    for (T v : values) write_f32_le(out, static_cast<f32>(v));
}

template <class T>
inline std::vector<T> read_array(std::istream& in, const std::string& path) {
    u64 n = 0;
    if (!read_le<u64>(in, n)) throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    std::vector<T> values(n);
    for (u64 i = 0; i < n; ++i) {
        f32 v = 0;
        if (!read_f32_le(in, v)) throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
        values[i] = static_cast<T>(v);
    }
    return values;
}

inline void write_u32_array(std::ostream& out, const std::vector<u32>& values) {
    write_le<u64>(out, values.size());
    for (u32 v : values) write_le<u32>(out, v);
}

inline std::vector<u32> read_u32_array(std::istream& in, const std::string& path) {
    u64 n = 0;
    if (!read_le<u64>(in, n)) throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    std::vector<u32> values(n);
    for (u64 i = 0; i < n; ++i)
        if (!read_le<u32>(in, values[i]))
            throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    return values;
}

}  // namespace detail

template <class T>
inline void save_checkpoint(const TrainState<T>& state, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::write_failed, "cannot write checkpoint: " + path);
    out.write("DGCK", 4);
    write_le<u32>(out, kCheckpointVersion);
    const std::string config_text = state.config.canonical_text();
    const std::array<u8, 32> digest = digest256(config_text);
    out.write(reinterpret_cast<const char*>(digest.data()), 32);
    detail::write_string(out, config_text);
    write_le<u64>(out, state.step);
    detail::write_string(out, state.patch_rng.serialize());
    detail::write_string(out, state.reactivate_rng.serialize());
    detail::write_string(out, state.scheduler.rng_state);
    write_le<u64>(out, state.scheduler.epoch);
    write_le<u32>(out, state.scheduler.cursor);
    write_le<u64>(out, state.scheduler.draws_used);
    write_le<u32>(out, state.scheduler.current_index);
    write_le<u32>(out, state.scheduler.prefetch_index);
    detail::write_u32_array(out, state.scheduler.permutation);
    detail::write_array(out, state.encoder.flat);
    write_le<u32>(out, state.bank.k);
    write_le<u32>(out, state.bank.dim);
    detail::write_array(out, state.bank.centers);
    write_le<u64>(out, state.opt.t);
    detail::write_array(out, state.opt.m);
    detail::write_array(out, state.opt.v);
    if (!out) throw IoError(IoErrorKind::write_failed, "checkpoint write failed: " + path);
}

template <class T>
inline TrainState<T> load_checkpoint(const std::string& path) {
    std::ifstream in = detail::open_input(path);
    detail::check_magic(in, "DGCK", path);
    std::array<u8, 32> stored_digest{};
    if (!in.read(reinterpret_cast<char*>(stored_digest.data()), 32))
        throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    const std::string config_text = detail::read_string(in, path);
    if (digest256(config_text) != stored_digest)
        throw IoError(IoErrorKind::corrupt, "checkpoint config digest mismatch: " + path);
    TrainConfig config = TrainConfig::from_text(config_text);
    TrainState<T> state = init_train_state<T>(config);
    if (!read_le<u64>(in, state.step))
        throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    state.patch_rng.deserialize(detail::read_string(in, path));
    state.reactivate_rng.deserialize(detail::read_string(in, path));
    state.scheduler.rng_state = detail::read_string(in, path);
    if (!read_le<u64>(in, state.scheduler.epoch) || !read_le<u32>(in, state.scheduler.cursor) ||
        !read_le<u64>(in, state.scheduler.draws_used) ||
        !read_le<u32>(in, state.scheduler.current_index) ||
        !read_le<u32>(in, state.scheduler.prefetch_index))
        throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    state.scheduler.permutation = detail::read_u32_array(in, path);
    state.encoder.flat = detail::read_array<T>(in, path);
    if (state.encoder.flat.size() != config.encoder_config().param_count())
        throw IoError(IoErrorKind::corrupt, "checkpoint parameter count mismatch: " + path);
    u32 k = 0, dim = 0;
    if (!read_le<u32>(in, k) || !read_le<u32>(in, dim))
        throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    if (k != config.k || dim != config.channels)
        throw IoError(IoErrorKind::corrupt, "checkpoint bank shape mismatch: " + path);
    state.bank.centers = detail::read_array<T>(in, path);
    if (state.bank.centers.size() != static_cast<size_t>(k) * dim)
        throw IoError(IoErrorKind::corrupt, "checkpoint bank size mismatch: " + path);
    if (!read_le<u64>(in, state.opt.t))
        throw IoError(IoErrorKind::truncated, "truncated checkpoint: " + path);
    state.opt.m = detail::read_array<T>(in, path);
    state.opt.v = detail::read_array<T>(in, path);
    const size_t want = state.encoder.flat.size() + state.bank.centers.size();
    if (state.opt.m.size() != want || state.opt.v.size() != want)
        throw IoError(IoErrorKind::corrupt, "checkpoint optimizer size mismatch: " + path);
    return state;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

struct TrainResult {
    std::string metrics_csv;
    std::string final_checkpoint;
    u64 peak_cube_buffers = 0;
    u64 peak_tracked_bytes = 0;
};

template <class T>
inline TrainResult train(TrainState<T>& state, const DatasetManifest& manifest,
                         const std::string& out_dir, bool resumed = false) {
    const TrainConfig& cfg = state.config;
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const std::string csv_path = out_dir + "/metrics.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError(IoErrorKind::write_failed, "cannot write: " + csv_path);
    csv << metric_csv_header(cfg.k) << "\n";

    CubeScheduler scheduler(manifest.cubes, cfg.mode, cfg.reuse_budget,
                            child_seed(cfg.seed, "scheduler"));
    if (resumed) scheduler.restore(state.scheduler);

    const bool snapshots = cfg.snapshot_interval > 0;
    if (snapshots) std::filesystem::create_directories(out_dir + "/snapshots");

    std::vector<PatchPair<T>> pairs(cfg.batch);
    for (u64 step = state.step; step < cfg.steps;) {
        auto cube = scheduler.next(cfg.batch);
        for (u32 b = 0; b < cfg.batch; ++b)
            pairs[b] = sample_patch_pair<T>(*cube, cfg.patch_size, cfg.overlap_min,
                                            cfg.overlap_max, state.patch_rng);
        cube.reset();  // release the handle before the next scheduler call
        StepRecord record = train_step(state, std::span<const PatchPair<T>>(pairs));
        if (record.aborted) ++state.step;  // the step is spent either way
        step = state.step;
        state.history.push_back(record);
        if (step % cfg.log_interval == 0 || step == cfg.steps) csv << metric_csv_row(record) << "\n";
        if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) {
            state.scheduler = scheduler.snapshot();
            char name[64];
            std::snprintf(name, sizeof name, "/ckpt_%06llu.dgck",
                          static_cast<unsigned long long>(step));
            save_checkpoint(state, out_dir + name);
        }
        if (snapshots && step % cfg.snapshot_interval == 0) {
            const u32 idx = cfg.snapshot_cube < manifest.cubes.size() ? cfg.snapshot_cube : 0;
            const HsiCube ref = load_cube(manifest.cubes[idx]);
            const u64 ref_bytes = ref.data.size() * sizeof(f32);
            MemoryTracker::instance().add_cube(ref_bytes);
            SegmentationMap snap =
                segment_cube(state.encoder, state.bank, cfg.ms_config(), ref, cfg.patch_size);
            char name[64];
            std::snprintf(name, sizeof name, "/snapshots/snap_%08llu.hsim",
                          static_cast<unsigned long long>(step));
            save_mask(snap, out_dir + name);
            MemoryTracker::instance().sub_cube(ref_bytes);
        }
    }

    state.scheduler = scheduler.snapshot();
    const std::string final_path = out_dir + "/ckpt_final.dgck";
    save_checkpoint(state, final_path);
    csv.flush();

    TrainResult result;
    result.metrics_csv = csv_path;
    result.final_checkpoint = final_path;
    result.peak_cube_buffers = MemoryTracker::instance().peak_cubes();
    result.peak_tracked_bytes = MemoryTracker::instance().peak_bytes();
    return result;
}

}  // namespace dgc
