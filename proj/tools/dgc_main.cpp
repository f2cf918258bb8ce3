// dgc: command-line front end for the whole workflow — synthetic dataset
// generation, training, segmentation, IoU evaluation, cluster merging, and
// training-dynamics diagnostics.
//
// Options double as config-file keys: pass --config FILE with INI-style
// sections named after the subcommands ([train], [synth], ...) and override
// any key on the command line. Unknown keys are rejected. DGC_LOG controls
// log verbosity (0 silent, 1 warn, 2 info, 3 debug).
//
// Exit codes: 0 success, 2 config/validation error, 3 I/O error,
// 4 numerical failure, 1 anything else.

#include <CLI11.hpp>

#include "dgc/dgc.hpp"

namespace {

using namespace dgc;

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::string zero_pad(u64 value, int width) {
    std::string s = std::to_string(value);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

std::string file_stem(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

// Expands entries that are directories into their sorted *.hsim contents.
std::vector<std::string> expand_hsim_inputs(const std::vector<std::string>& inputs) {
    std::vector<std::string> files;
    for (const std::string& entry : inputs) {
        if (std::filesystem::is_directory(entry)) {
            std::vector<std::string> found;
            for (const auto& item : std::filesystem::directory_iterator(entry))
                if (item.path().extension() == ".hsim") found.push_back(item.path().string());
            std::sort(found.begin(), found.end());
            files.insert(files.end(), found.begin(), found.end());
        } else {
            files.push_back(entry);
        }
    }
    return files;
}

MergeMap load_merge_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrorKind::missing_file, "cannot open merge spec: " + path);
    std::map<u32, u32> mapping;
    std::string line;
    while (std::getline(in, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("merge spec: expected 'cluster = class': " + line);
        const u32 cluster = static_cast<u32>(std::stoul(line.substr(0, eq)));
        const u32 cls = static_cast<u32>(std::stoul(line.substr(eq + 1)));
        if (cluster > 255 || cls > 255) throw ConfigError("merge spec: label out of range");
        mapping[cluster] = cls;
    }
    if (mapping.empty()) throw ConfigError("merge spec: no entries in " + path);
    MergeMap merge;
    merge.to_class.assign(mapping.rbegin()->first + 1, 255);
    for (const auto& [cluster, cls] : mapping) merge.to_class[cluster] = static_cast<u8>(cls);
    for (size_t c = 0; c < merge.to_class.size(); ++c)
        if (merge.to_class[c] == 255)
            throw ConfigError("merge spec: cluster " + std::to_string(c) + " uncovered");
    return merge;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    SynthSpec spec;
    u32 classes = 2;
    f64 min_angle = 0.26;  // pairwise spectral separation of the base spectra (rad)
};

int run_synth(const SynthArgs& args) {
    SynthSpec spec = args.spec;
    spec.class_spectra = make_smooth_spectra(args.classes, spec.bands, spec.seed, args.min_angle);
    spec.validate();
    std::filesystem::create_directories(args.out);
    DatasetManifest manifest;
    manifest.seed = spec.seed;
    Rng rng(child_seed(spec.seed, "synth"));
    for (u32 i = 0; i < spec.cubes; ++i) {
        auto [cube, mask] = generate_synthetic_cube(spec, rng);
        const std::string stem = "c" + zero_pad(i, 3);
        save_cube(cube, args.out + "/" + stem + ".hsic");
        save_mask(mask, args.out + "/" + stem + ".hsim");
        manifest.cubes.push_back(stem + ".hsic");
        manifest.masks.push_back(stem + ".hsim");
    }
    const std::string manifest_path = args.out + "/manifest.txt";
    save_manifest(manifest, manifest_path);
    std::cout << "wrote " << spec.cubes << " cube/mask pairs to " << args.out << "\n"
              << "manifest=" << manifest_path << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string out;
    std::string resume;
    std::string mode = "sync";
    TrainConfig config;
};

int run_train(const TrainArgs& args) {
    TrainConfig config = args.config;
    if (args.mode == "sync")
        config.mode = ScheduleMode::sync;
    else if (args.mode == "async")
        config.mode = ScheduleMode::async;
    else
        throw ConfigError("train: mode must be sync or async");
    config.validate();

    DatasetManifest manifest = load_manifest(args.data);
    TrainState<f32> state;
    bool resumed = false;
    if (!args.resume.empty()) {
        state = load_checkpoint<f32>(args.resume);
        if (state.config.digest() != config.digest())
            throw ConfigError("train: checkpoint config does not match the requested config");
        resumed = true;
        log_info("resuming from step " + std::to_string(state.step));
    } else {
        state = init_train_state<f32>(config);
    }

    TrainResult result = train(state, manifest, args.out, resumed);
    std::cout << "final_checkpoint=" << result.final_checkpoint << "\n"
              << "metrics_csv=" << result.metrics_csv << "\n"
              << "steps=" << state.step << "\n"
              << "peak_cube_buffers=" << result.peak_cube_buffers << "\n"
              << "peak_tracked_bytes=" << result.peak_tracked_bytes << "\n"
              << "peak_rss_kb=" << read_peak_rss_kb() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

struct SegmentArgs {
    std::string checkpoint;
    std::vector<std::string> cubes;
    std::string out;
    u32 tile = 0;            // 0: use the training patch size
    i32 ms_iterations = -1;  // <0: use the checkpoint config
    f64 ms_bandwidth = 0.0;  // <=0: use the checkpoint config
};

int run_segment(const SegmentArgs& args) {
    TrainState<f32> state = load_checkpoint<f32>(args.checkpoint);
    const u32 tile = args.tile > 0 ? args.tile : state.config.patch_size;
    MeanShiftConfig ms = state.config.ms_config();
    if (args.ms_iterations >= 0) ms.iterations = static_cast<u32>(args.ms_iterations);
    if (args.ms_bandwidth > 0.0) ms.bandwidth = args.ms_bandwidth;
    std::filesystem::create_directories(args.out);
    for (const std::string& cube_path : args.cubes) {
        const HsiCube cube = load_cube(cube_path);
        SegmentationMap map = segment_cube(state.encoder, state.bank, ms, cube, tile);
        const std::string stem = args.out + "/" + file_stem(cube_path);
        save_mask(map, stem + "_seg.hsim");
        render_pseudo_rgb(cube, stem + "_rgb.ppm");
        render_cluster_colors(map, stem + "_clusters.ppm");
        std::cout << stem << "_seg.hsim\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> pred;
    std::vector<std::string> gt;
    std::string merge_spec;
    bool auto_merge = false;
    u32 classes = 2;
    std::string out_csv;
};

int run_eval(const EvalArgs& args) {
    const std::vector<std::string> pred_files = expand_hsim_inputs(args.pred);
    const std::vector<std::string> gt_files = expand_hsim_inputs(args.gt);
    if (pred_files.empty()) throw ConfigError("eval: no prediction maps given");
    if (pred_files.size() != gt_files.size())
        throw ConfigError("eval: prediction/mask counts differ");

    std::vector<SegmentationMap> preds;
    std::vector<GroundTruthMask> gts;
    for (size_t i = 0; i < pred_files.size(); ++i) {
        preds.push_back(load_mask(pred_files[i]));
        gts.push_back(load_mask(gt_files[i]));
    }

    MergeMap merge;
    if (args.auto_merge) {
        u32 k = 0;
        for (const auto& map : preds)
            for (u8 l : map.labels) k = std::max<u32>(k, l + 1u);
        std::vector<u64> counts(static_cast<size_t>(k) * args.classes, 0);
        for (size_t i = 0; i < preds.size(); ++i) {
            std::vector<u64> local;
            accumulate_cooccurrence(preds[i], gts[i], k, args.classes, local);
            for (size_t j = 0; j < counts.size(); ++j) counts[j] += local[j];
        }
        merge = merge_from_counts(counts, k, args.classes);
        std::cout << "auto-merge:";
        for (size_t c = 0; c < merge.to_class.size(); ++c)
            std::cout << " " << c << "->" << static_cast<int>(merge.to_class[c]);
        std::cout << "\n";
    } else if (!args.merge_spec.empty()) {
        merge = load_merge_spec(args.merge_spec);
    } else {
        u32 k = 0;
        for (const auto& map : preds)
            for (u8 l : map.labels) k = std::max<u32>(k, l + 1u);
        merge.to_class.resize(std::max(k, 1u));
        for (u32 c = 0; c < merge.to_class.size(); ++c)
            merge.to_class[c] = static_cast<u8>(std::min<u32>(c, args.classes - 1));
    }

    std::vector<u8> class_list;
    for (u32 c = 0; c < args.classes; ++c) class_list.push_back(static_cast<u8>(c));

    std::ofstream csv;
    if (!args.out_csv.empty()) {
        csv.open(args.out_csv, std::ios::trunc);
        if (!csv) throw IoError(IoErrorKind::write_failed, "cannot write: " + args.out_csv);
        csv << "cube";
        for (u32 c = 0; c < args.classes; ++c) csv << ",iou_" << c;
        csv << ",mean\n";
    }

    // pooled counts across cubes for the aggregate score
    std::vector<u64> pool_inter(args.classes, 0), pool_union(args.classes, 0), pool_gt(args.classes, 0);
    for (size_t i = 0; i < preds.size(); ++i) {
        const SegmentationMap merged = apply_merge(preds[i], merge);
        const IoUReport report = iou(merged, gts[i], class_list);
        std::cout << file_stem(pred_files[i]) << ": IoU";
        for (size_t c = 0; c < class_list.size(); ++c)
            std::cout << (c ? "," : "") << " " << detail::format_f64(report.per_class[c])
                      << " (class " << static_cast<int>(class_list[c]) << ")";
        std::cout << ", mean " << detail::format_f64(report.mean) << "\n";
        if (csv.is_open()) {
            csv << file_stem(pred_files[i]);
            for (f64 v : report.per_class) csv << "," << detail::format_f64(v);
            csv << "," << detail::format_f64(report.mean) << "\n";
        }
        for (u32 c = 0; c < args.classes; ++c) {
            for (size_t px = 0; px < merged.labels.size(); ++px) {
                const bool in_pred = merged.labels[px] == c;
                const bool in_gt = gts[i].labels[px] == c;
                pool_inter[c] += in_pred && in_gt;
                pool_union[c] += in_pred || in_gt;
                pool_gt[c] += in_gt;
            }
        }
    }

    f64 mean_sum = 0.0;
    u32 mean_count = 0;
    std::cout << "aggregate: IoU";
    std::string agg_row = "aggregate";
    for (u32 c = 0; c < args.classes; ++c) {
        const f64 value =
            pool_union[c] == 0 ? 1.0 : static_cast<f64>(pool_inter[c]) / static_cast<f64>(pool_union[c]);
        std::cout << (c ? "," : "") << " " << detail::format_f64(value) << " (class " << c << ")";
        agg_row += "," + detail::format_f64(value);
        if (pool_gt[c] > 0) {
            mean_sum += value;
            ++mean_count;
        }
    }
    const f64 aggregate_mean = mean_count > 0 ? mean_sum / mean_count : 1.0;
    std::cout << ", mean " << detail::format_f64(aggregate_mean) << "\n";
    std::cout << "aggregate_mean_iou=" << detail::format_f64(aggregate_mean) << "\n";
    if (csv.is_open()) csv << agg_row << "," << detail::format_f64(aggregate_mean) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

struct MergeArgs {
    std::string map;
    std::string spec;
    std::string out;
};

int run_merge(const MergeArgs& args) {
    const SegmentationMap map = load_mask(args.map);
    const MergeMap merge = load_merge_spec(args.spec);
    save_mask(apply_merge(map, merge), args.out);
    std::cout << args.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

struct DiagnoseArgs {
    std::string snapshots;
    std::string metrics;  // accepted for step cross-checks; optional
    std::string out_csv;
    u32 window = 3;
};

int run_diagnose(const DiagnoseArgs& args) {
    if (args.window < 2) throw ConfigError("diagnose: window must be >= 2");
    std::vector<std::pair<u64, std::string>> snaps;
    if (!std::filesystem::is_directory(args.snapshots))
        throw IoError(IoErrorKind::missing_file, "diagnose: missing snapshot directory " + args.snapshots);
    for (const auto& item : std::filesystem::directory_iterator(args.snapshots)) {
        const std::string name = item.path().filename().string();
        if (name.rfind("snap_", 0) == 0 && item.path().extension() == ".hsim") {
            const u64 step = std::stoull(name.substr(5, name.size() - 5 - 5));
            snaps.emplace_back(step, item.path().string());
        }
    }
    if (snaps.size() < 2)
        throw IoError(IoErrorKind::missing_file, "diagnose: need at least 2 snapshots in " + args.snapshots);
    std::sort(snaps.begin(), snaps.end());

    std::vector<SnapshotStats> stats;
    SegmentationMap prev;
    u32 max_k = 2;
    for (size_t i = 0; i < snaps.size(); ++i) {
        SegmentationMap map = load_mask(snaps[i].second);
        SnapshotStats s;
        s.step = snaps[i].first;
        s.entropy = seg_entropy(map);
        s.active_clusters = active_cluster_count(map);
        s.mi_prev = i == 0 ? 0.0 : seg_mutual_information(map, prev);
        for (u8 l : map.labels) max_k = std::max<u32>(max_k, l + 1u);
        stats.push_back(s);
        prev = std::move(map);
    }

    // disjoint windows of `window` snapshots; a short tail joins the previous
    std::vector<std::pair<size_t, size_t>> windows;  // [begin, end)
    for (size_t begin = 0; begin < stats.size();) {
        size_t end = std::min(begin + args.window, stats.size());
        if (stats.size() - end == 1) end = stats.size();  // avoid a 1-snapshot tail
        if (end - begin < 2 && !windows.empty()) {
            windows.back().second = end;
            begin = end;
            continue;
        }
        windows.emplace_back(begin, end);
        begin = end;
    }

    std::ofstream csv(args.out_csv, std::ios::trunc);
    if (!csv) throw IoError(IoErrorKind::write_failed, "cannot write: " + args.out_csv);
    csv << "snapshot,entropy,mi_prev,active_clusters,phase\n";
    f64 running_max = 0.0;
    u64 ignite_on = 0, ignite_off = 0;
    bool saw_ignite = false;
    for (const auto& [begin, end] : windows) {
        for (size_t i = begin; i < end; ++i) running_max = std::max(running_max, stats[i].entropy);
        const std::span<const SnapshotStats> window(stats.data() + begin, end - begin);
        const PhaseLabel label = classify_phase(window, running_max, max_k);
        for (size_t i = begin; i < end; ++i) {
            csv << stats[i].step << "," << detail::format_f64(stats[i].entropy) << ","
                << detail::format_f64(stats[i].mi_prev) << "," << stats[i].active_clusters << ","
                << phase_name(label) << "\n";
        }
        if (label == PhaseLabel::ignite) {
            if (!saw_ignite) ignite_on = stats[begin].step;
            ignite_off = stats[end - 1].step;
            saw_ignite = true;
        }
    }
    if (saw_ignite)
        std::cout << "ignite_onset=" << ignite_on << "\nignite_offset=" << ignite_off << "\n";
    else
        std::cout << "ignite_onset=none\n";
    std::cout << "timeline=" << args.out_csv << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dgc: memory-bounded deep global clustering for hyperspectral cubes"};
    app.set_config("--config", "", "INI config file with [subcommand] sections");
    app.require_subcommand(1);
    app.allow_config_extras(false);

    SynthArgs synth;
    CLI::App* synth_cmd = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
    synth_cmd->add_option("--out", synth.out, "Output directory")->required();
    synth_cmd->add_option("--cubes", synth.spec.cubes, "Cube count")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--size", synth.spec.height, "Cube height and width")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--bands", synth.spec.bands, "Spectral band count")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--classes", synth.classes, "Entity classes incl. background")
        ->check(CLI::Range(2u, 64u));
    synth_cmd->add_option("--seed", synth.spec.seed, "Dataset seed");
    synth_cmd->add_option("--noise", synth.spec.noise_std, "Gaussian noise std")
        ->check(CLI::NonNegativeNumber);
    synth_cmd->add_option("--gain_min", synth.spec.gain_min, "Illumination gain lower bound");
    synth_cmd->add_option("--gain_max", synth.spec.gain_max, "Illumination gain upper bound");
    synth_cmd->add_option("--blobs_min", synth.spec.blobs_min, "Minimum blob count");
    synth_cmd->add_option("--blobs_max", synth.spec.blobs_max, "Maximum blob count");
    synth_cmd->add_option("--radius_min", synth.spec.radius_min_frac, "Blob radius lower frac");
    synth_cmd->add_option("--radius_max", synth.spec.radius_max_frac, "Blob radius upper frac");
    synth_cmd->add_option("--interior_frac", synth.spec.interior_radius_frac,
                          "Interior (lesion-like) blob radius, relative to parent");
    synth_cmd->add_option("--min_angle", synth.min_angle,
                          "Minimum pairwise spectral angle between class spectra (rad)");
    synth_cmd->add_option("--wl_start", synth.spec.wavelength_start_nm, "First wavelength (nm)");
    synth_cmd->add_option("--wl_step", synth.spec.wavelength_step_nm, "Wavelength step (nm)");

    TrainArgs train_args;
    CLI::App* train_cmd = app.add_subcommand("train", "Train DGC on a dataset manifest");
    train_cmd->add_option("--data", train_args.data, "Dataset manifest")->required();
    train_cmd->add_option("--out", train_args.out, "Output directory")->required();
    train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from");
    train_cmd->add_option("--mode", train_args.mode, "sync | async")
        ->check(CLI::IsMember({"sync", "async"}));
    TrainConfig& tc = train_args.config;
    train_cmd->add_option("--k", tc.k, "Cluster count")->check(CLI::Range(2u, 64u));
    train_cmd->add_option("--patch_size", tc.patch_size, "Patch size P")->check(CLI::PositiveNumber);
    train_cmd->add_option("--batch", tc.batch, "Patch pairs per step")->check(CLI::PositiveNumber);
    train_cmd->add_option("--overlap_min", tc.overlap_min, "Overlap fraction lower bound");
    train_cmd->add_option("--overlap_max", tc.overlap_max, "Overlap fraction upper bound");
    train_cmd->add_option("--reuse", tc.reuse_budget, "Patch-pair draws per cube load");
    train_cmd->add_option("--steps", tc.steps, "Total training steps");
    train_cmd->add_option("--lr", tc.lr, "Learning rate");
    train_cmd->add_option("--adam_beta1", tc.adam_beta1, "Adam beta1");
    train_cmd->add_option("--adam_beta2", tc.adam_beta2, "Adam beta2");
    train_cmd->add_option("--adam_eps", tc.adam_eps, "Adam epsilon");
    train_cmd->add_option("--weight_unif", tc.weight_unif, "Uniform-assignment loss weight");
    train_cmd->add_option("--weight_orth", tc.weight_orth, "Orthogonality loss weight");
    train_cmd->add_option("--weight_bal", tc.weight_bal, "Balance loss weight");
    train_cmd->add_option("--weight_cons", tc.weight_cons, "Consistency loss weight");
    train_cmd->add_option("--ms_iterations", tc.ms_iterations, "Mean-shift iterations");
    train_cmd->add_option("--ms_bandwidth", tc.ms_bandwidth, "Mean-shift bandwidth");
    train_cmd->add_flag("--ms_in_training,!--no_ms_in_training", tc.ms_in_training,
                        "Run mean-shift inside the training loop");
    train_cmd->add_option("--alpha", tc.alpha, "EMA decay");
    train_cmd->add_option("--tau", tc.tau, "Soft-assignment temperature");
    train_cmd->add_option("--dead_threshold", tc.dead_threshold, "Dead-cluster mass fraction (0: 0.5/K)");
    train_cmd->add_option("--reactivation_eps", tc.reactivation_eps, "Dead-cluster perturbation scale");
    train_cmd->add_flag("--centroid_grads,!--no_centroid_grads", tc.centroid_grads,
                        "Centroids receive gradients in phase I");
    train_cmd->add_option("--seed", tc.seed, "Master seed");
    train_cmd->add_option("--checkpoint_interval", tc.checkpoint_interval, "Steps between checkpoints");
    train_cmd->add_option("--log_interval", tc.log_interval, "Steps between CSV rows");
    train_cmd->add_option("--snapshot_interval", tc.snapshot_interval, "Steps between segmentation snapshots");
    train_cmd->add_option("--snapshot_cube", tc.snapshot_cube, "Dataset index of the snapshot cube");
    train_cmd->add_option("--bands", tc.bands, "Spectral bands expected by the encoder");
    train_cmd->add_option("--channels", tc.channels, "Embedding dimension");
    train_cmd->add_option("--spectral_kernel", tc.spectral_kernel, "1D kernel length");
    train_cmd->add_option("--stride1", tc.stride1, "Stride of spectral conv 1");
    train_cmd->add_option("--stride2", tc.stride2, "Stride of spectral conv 2");
    train_cmd->add_option("--stride3", tc.stride3, "Stride of spectral conv 3");
    train_cmd->add_option("--spatial_kernel", tc.spatial_kernel, "2D kernel size");

    SegmentArgs seg;
    CLI::App* segment_cmd = app.add_subcommand("segment", "Segment cubes with a trained checkpoint");
    segment_cmd->add_option("--checkpoint", seg.checkpoint, "Trained checkpoint")->required();
    segment_cmd->add_option("--cube", seg.cubes, "Cube file(s)")->required();
    segment_cmd->add_option("--out", seg.out, "Output directory")->required();
    segment_cmd->add_option("--tile", seg.tile, "Tile size (default: training patch size)");
    segment_cmd->add_option("--ms_iterations", seg.ms_iterations,
                            "Mean-shift iterations (default: checkpoint config)");
    segment_cmd->add_option("--ms_bandwidth", seg.ms_bandwidth,
                            "Mean-shift bandwidth (default: checkpoint config)");

    EvalArgs eval_args;
    CLI::App* eval_cmd = app.add_subcommand("eval", "Score segmentation maps against masks");
    eval_cmd->add_option("--pred", eval_args.pred, "Prediction maps (files or a directory)")->required();
    eval_cmd->add_option("--gt", eval_args.gt, "Ground-truth masks (files or a directory)")->required();
    eval_cmd->add_option("--merge", eval_args.merge_spec, "Merge spec file (cluster = class lines)");
    eval_cmd->add_flag("--auto_merge", eval_args.auto_merge, "Derive the merge map by best match");
    eval_cmd->add_option("--classes", eval_args.classes, "Semantic class count")->check(CLI::Range(1u, 255u));
    eval_cmd->add_option("--out", eval_args.out_csv, "Report CSV path");

    MergeArgs merge_args;
    CLI::App* merge_cmd = app.add_subcommand("merge", "Relabel a cluster map through a merge spec");
    merge_cmd->add_option("--map", merge_args.map, "Cluster map (.hsim)")->required();
    merge_cmd->add_option("--spec", merge_args.spec, "Merge spec file")->required();
    merge_cmd->add_option("--out", merge_args.out, "Output map path")->required();

    DiagnoseArgs diag;
    CLI::App* diagnose_cmd = app.add_subcommand("diagnose", "Phase-classify training snapshots");
    diagnose_cmd->add_option("--snapshots", diag.snapshots, "Snapshot directory from a train run")->required();
    diagnose_cmd->add_option("--metrics", diag.metrics, "metrics.csv from the same run (optional)");
    diagnose_cmd->add_option("--out", diag.out_csv, "Timeline CSV path")->required();
    diagnose_cmd->add_option("--window", diag.window, "Snapshots per diagnostic window")->check(CLI::Range(2u, 64u));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (synth_cmd->parsed()) {
            synth.spec.width = synth.spec.height;
            return run_synth(synth);
        }
        if (train_cmd->parsed()) return run_train(train_args);
        if (segment_cmd->parsed()) return run_segment(seg);
        if (eval_cmd->parsed()) return run_eval(eval_args);
        if (merge_cmd->parsed()) return run_merge(merge_args);
        if (diagnose_cmd->parsed()) return run_diagnose(diag);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitOther;
    }
    return kExitOther;
}
