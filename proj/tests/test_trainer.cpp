#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dgc;
using dgc_test::TempDir;

namespace {

// small, fast training configuration used throughout these tests
TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.k = 2;
    cfg.patch_size = 8;
    cfg.batch = 2;
    cfg.reuse_budget = 4;
    cfg.steps = 6;
    cfg.bands = 12;
    cfg.channels = 4;
    cfg.spectral_kernel = 3;
    cfg.stride1 = 1;
    cfg.stride2 = 1;
    cfg.stride3 = 2;
    cfg.ms_iterations = 2;
    cfg.ms_in_training = true;
    cfg.log_interval = 1;
    cfg.seed = 5;
    return cfg;
}

// writes a small synthetic dataset and returns its manifest
DatasetManifest tiny_dataset(const TempDir& dir, u32 cubes, u32 side, u32 bands, u64 seed) {
    SynthSpec spec;
    spec.cubes = cubes;
    spec.height = spec.width = side;
    spec.bands = bands;
    spec.noise_std = 0.01;
    spec.seed = seed;
    spec.class_spectra = make_smooth_spectra(2, bands, seed);
    DatasetManifest manifest;
    manifest.seed = seed;
    Rng rng(child_seed(seed, "synth"));
    for (u32 i = 0; i < cubes; ++i) {
        auto [cube, mask] = generate_synthetic_cube(spec, rng);
        const std::string stem = "c" + std::to_string(i);
        save_cube(cube, dir.file(stem + ".hsic"));
        save_mask(mask, dir.file(stem + ".hsim"));
        manifest.cubes.push_back(stem + ".hsic");
        manifest.masks.push_back(stem + ".hsim");
    }
    save_manifest(manifest, dir.file("manifest.txt"));
    return load_manifest(dir.file("manifest.txt"));
}

std::vector<PatchPair<f32>> pairs_from_cube(const HsiCube& cube, const TrainConfig& cfg, Rng& rng) {
    std::vector<PatchPair<f32>> pairs;
    for (u32 b = 0; b < cfg.batch; ++b)
        pairs.push_back(sample_patch_pair<f32>(cube, cfg.patch_size, cfg.overlap_min,
                                               cfg.overlap_max, rng));
    return pairs;
}

// metric rows with the wall-time column stripped (it is the only
// non-deterministic column)
std::vector<std::string> metric_rows_without_wall(const std::string& csv_path) {
    std::ifstream in(csv_path);
    std::vector<std::string> rows;
    std::string line;
    while (std::getline(in, line)) {
        const size_t cut = line.rfind(',');
        rows.push_back(line.substr(0, cut));
    }
    return rows;
}

}  // namespace

TEST(TrainConfig, CanonicalTextRoundTrips) {
    TrainConfig cfg = tiny_config();
    cfg.lr = 0.00123;
    cfg.mode = ScheduleMode::async;
    const std::string text = cfg.canonical_text();
    const TrainConfig back = TrainConfig::from_text(text);
    EXPECT_EQ(back.canonical_text(), text);
    EXPECT_EQ(back.digest(), cfg.digest());

    TrainConfig other = cfg;
    other.k = 3;
    EXPECT_NE(other.digest(), cfg.digest());
}

TEST(TrainConfig, UnknownKeyRejected) {
    EXPECT_THROW(TrainConfig::from_text("bogus_key = 1\n"), ConfigError);
}

TEST(TrainConfig, InvalidValuesRejected) {
    TrainConfig cfg = tiny_config();
    cfg.k = 1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.overlap_min = 0.8;
    cfg.overlap_max = 0.3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.bands = 4;  // too small for the stride plan
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(TrainStep, AllUpdatesDisabledLeavesStateUnchanged) {
    TrainConfig cfg = tiny_config();
    cfg.lr = 0.0;
    cfg.alpha = 1.0;
    cfg.reactivation_eps = 0.0;
    TrainState<f32> state = init_train_state<f32>(cfg);
    const auto params_before = state.encoder.flat;
    const auto centers_before = state.bank.centers;

    TempDir dir("step_noop");
    const auto manifest = tiny_dataset(dir, 1, 24, cfg.bands, 9);
    const HsiCube cube = load_cube(manifest.cubes[0]);
    const auto pairs = pairs_from_cube(cube, cfg, state.patch_rng);
    const StepRecord rec = train_step(state, std::span<const PatchPair<f32>>(pairs));

    EXPECT_FALSE(rec.aborted);
    EXPECT_TRUE(rec.losses.finite());
    EXPECT_GT(rec.losses.total, 0.0);  // losses still reported
    EXPECT_EQ(state.encoder.flat, params_before);
    for (size_t i = 0; i < centers_before.size(); ++i)
        EXPECT_NEAR(state.bank.centers[i], centers_before[i], 1e-6);
}

TEST(TrainStep, IdenticalCropsHaveZeroConsistency) {
    TrainConfig cfg = tiny_config();
    TrainState<f32> state = init_train_state<f32>(cfg);
    TempDir dir("step_cons");
    const auto manifest = tiny_dataset(dir, 1, 24, cfg.bands, 11);
    const HsiCube cube = load_cube(manifest.cubes[0]);
    for (int step = 0; step < 3; ++step) {
        std::vector<PatchPair<f32>> pairs;
        for (u32 b = 0; b < cfg.batch; ++b)
            pairs.push_back(make_patch_pair<f32>(cube, cfg.patch_size, {0, 0}, {0, 0}));
        const StepRecord rec = train_step(state, std::span<const PatchPair<f32>>(pairs));
        EXPECT_EQ(rec.losses.cons, 0.0) << "step " << step;
    }
}

TEST(TrainStep, UsageFractionsSumToOne) {
    TrainConfig cfg = tiny_config();
    TrainState<f32> state = init_train_state<f32>(cfg);
    TempDir dir("step_usage");
    const auto manifest = tiny_dataset(dir, 1, 24, cfg.bands, 13);
    const HsiCube cube = load_cube(manifest.cubes[0]);
    const auto pairs = pairs_from_cube(cube, cfg, state.patch_rng);
    const StepRecord rec = train_step(state, std::span<const PatchPair<f32>>(pairs));
    f64 sum = 0;
    for (f64 u : rec.usage) sum += u;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_GE(rec.active_clusters, 1u);
    EXPECT_LE(rec.active_clusters, cfg.k);
}

TEST(TrainStep, NonFiniteLossAbortsAndRollsBack) {
    TrainConfig cfg = tiny_config();
    TrainState<f32> state = init_train_state<f32>(cfg);
    const auto params_before = state.encoder.flat;
    const auto centers_before = state.bank.centers;
    const u64 step_before = state.step;

    // a diverged parameter: an infinite final-layer bias makes every
    // embedding inf/inf = NaN, so the loss itself is non-finite
    state.encoder.vb2()[0] = std::numeric_limits<f32>::infinity();
    const auto poisoned_params = state.encoder.flat;

    TempDir dir("step_abort");
    const auto manifest = tiny_dataset(dir, 1, 24, cfg.bands, 15);
    const HsiCube cube = load_cube(manifest.cubes[0]);
    std::vector<PatchPair<f32>> pairs;
    for (u32 b = 0; b < cfg.batch; ++b)
        pairs.push_back(make_patch_pair<f32>(cube, cfg.patch_size, {0, 0}, {0, 2}));

    const StepRecord rec = train_step(state, std::span<const PatchPair<f32>>(pairs));
    EXPECT_TRUE(rec.aborted);
    EXPECT_FALSE(rec.losses.finite());
    EXPECT_EQ(state.encoder.flat, poisoned_params);  // untouched since the abort
    EXPECT_EQ(state.bank.centers, centers_before);
    EXPECT_EQ(state.step, step_before);
    (void)params_before;
}

TEST(TrainStep, NonFiniteGradientAbortsEvenWhenLossIsFinite) {
    // a single infinite pixel is masked to zero by ReLU in the forward pass
    // (finite loss) but still yields inf * 0 products in the chain rule; the
    // step must abort before the optimizer touches the parameters
    TrainConfig cfg = tiny_config();
    TrainState<f32> state = init_train_state<f32>(cfg);
    const auto params_before = state.encoder.flat;
    const auto centers_before = state.bank.centers;

    TempDir dir("step_abort_grad");
    const auto manifest = tiny_dataset(dir, 1, 24, cfg.bands, 15);
    const HsiCube cube = load_cube(manifest.cubes[0]);
    std::vector<PatchPair<f32>> pairs;
    for (u32 b = 0; b < cfg.batch; ++b)
        pairs.push_back(make_patch_pair<f32>(cube, cfg.patch_size, {0, 0}, {0, 2}));
    pairs[0].grid1.data[0] = std::numeric_limits<f32>::infinity();

    const StepRecord rec = train_step(state, std::span<const PatchPair<f32>>(pairs));
    EXPECT_TRUE(rec.aborted);
    EXPECT_EQ(state.encoder.flat, params_before);
    EXPECT_EQ(state.bank.centers, centers_before);
    EXPECT_EQ(state.step, 0u);
}

TEST(TrainStep, EmaAppliesToPostGradientCentroidsExactly) {
    // with lr = 0 the post-gradient centroids equal the pre-step centroids,
    // so the step's phase (II) must be bitwise the EMA -> reactivate ->
    // normalize composition on the same forward pipeline
    TrainConfig cfg = tiny_config();
    cfg.lr = 0.0;
    TrainState<f32> state = init_train_state<f32>(cfg);
    const CentroidBank<f32> bank_before = state.bank;
    Rng reactivate_rng_copy = state.reactivate_rng;

    TempDir dir("step_phase");
    const auto manifest = tiny_dataset(dir, 1, 24, cfg.bands, 17);
    const HsiCube cube = load_cube(manifest.cubes[0]);
    const auto pairs = pairs_from_cube(cube, cfg, state.patch_rng);

    // expected phase (II) result, composed from the library pieces
    PatchBatch<f32> batch;
    for (const auto& p : pairs) batch.append(p.grid1);
    for (const auto& p : pairs) batch.append(p.grid2);
    EmbeddingGrid<f32> grid = encode(state.encoder, batch);
    if (cfg.ms_in_training && cfg.ms_iterations > 0)
        grid = mean_shift_refine(grid, cfg.ms_config());
    const SoftAssignment<f32> assign = soft_assign(grid, bank_before);
    CentroidBank<f32> expected = bank_before;
    ema_update(expected, grid, assign);
    reactivate_dead(expected, assignment_masses(assign), reactivate_rng_copy);
    expected.normalize_centers();

    const StepRecord rec = train_step(state, std::span<const PatchPair<f32>>(pairs));
    ASSERT_FALSE(rec.aborted);
    EXPECT_EQ(state.bank.centers, expected.centers);
}

TEST(Train, FixedSeedReplaysBitwise) {
    TempDir data("replay_data");
    const auto manifest = tiny_dataset(data, 3, 24, 12, 21);
    TrainConfig cfg = tiny_config();
    cfg.steps = 10;

    TempDir out_a("replay_a"), out_b("replay_b");
    TrainState<f32> state_a = init_train_state<f32>(cfg);
    TrainState<f32> state_b = init_train_state<f32>(cfg);
    train(state_a, manifest, out_a.path());
    train(state_b, manifest, out_b.path());

    EXPECT_EQ(state_a.encoder.flat, state_b.encoder.flat);
    EXPECT_EQ(state_a.bank.centers, state_b.bank.centers);
    const auto rows_a = metric_rows_without_wall(out_a.file("metrics.csv"));
    const auto rows_b = metric_rows_without_wall(out_b.file("metrics.csv"));
    ASSERT_EQ(rows_a.size(), 11u);  // header + 10 steps
    EXPECT_EQ(rows_a, rows_b);
}

TEST(Train, ZeroStepsReturnsInitializedState) {
    TempDir data("zerosteps");
    const auto manifest = tiny_dataset(data, 2, 24, 12, 23);
    TrainConfig cfg = tiny_config();
    cfg.steps = 0;
    TrainState<f32> state = init_train_state<f32>(cfg);
    const auto params_before = state.encoder.flat;
    TempDir out("zerosteps_out");
    const TrainResult result = train(state, manifest, out.path());
    EXPECT_TRUE(state.history.empty());
    EXPECT_EQ(state.step, 0u);
    EXPECT_EQ(state.encoder.flat, params_before);
    EXPECT_TRUE(std::filesystem::exists(result.final_checkpoint));
    const auto rows = metric_rows_without_wall(result.metrics_csv);
    EXPECT_EQ(rows.size(), 1u);  // header only
}

TEST(Train, AsyncMatchesSyncStepForStep) {
    TempDir data("asynceq");
    const auto manifest = tiny_dataset(data, 3, 24, 12, 27);
    TrainConfig cfg = tiny_config();
    cfg.steps = 12;

    TempDir out_sync("sync_out"), out_async("async_out");
    TrainState<f32> s_sync = init_train_state<f32>(cfg);
    train(s_sync, manifest, out_sync.path());

    cfg.mode = ScheduleMode::async;
    TrainState<f32> s_async = init_train_state<f32>(cfg);
    train(s_async, manifest, out_async.path());

    EXPECT_EQ(s_sync.encoder.flat, s_async.encoder.flat);
    ASSERT_EQ(s_sync.history.size(), s_async.history.size());
    for (size_t i = 0; i < s_sync.history.size(); ++i) {
        EXPECT_EQ(s_sync.history[i].losses.total, s_async.history[i].losses.total) << "step " << i;
        EXPECT_EQ(s_sync.history[i].losses.cons, s_async.history[i].losses.cons) << "step " << i;
    }
}

TEST(Train, MeanShiftBypassChangesTrajectory) {
    TempDir data("msbypass");
    const auto manifest = tiny_dataset(data, 2, 24, 12, 29);
    TrainConfig cfg = tiny_config();
    cfg.steps = 4;
    TrainState<f32> with_ms = init_train_state<f32>(cfg);
    TempDir out_a("ms_on");
    train(with_ms, manifest, out_a.path());

    cfg.ms_in_training = false;
    TrainState<f32> without_ms = init_train_state<f32>(cfg);
    TempDir out_b("ms_off");
    train(without_ms, manifest, out_b.path());

    EXPECT_NE(with_ms.history.back().losses.total, without_ms.history.back().losses.total);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    TempDir data("ckpt_data");
    const auto manifest = tiny_dataset(data, 2, 24, 12, 31);
    TrainConfig cfg = tiny_config();
    cfg.steps = 5;
    TrainState<f32> state = init_train_state<f32>(cfg);
    TempDir out("ckpt_out");
    train(state, manifest, out.path());

    const std::string first = out.file("ckpt_final.dgck");
    TrainState<f32> loaded = load_checkpoint<f32>(first);
    const std::string second = out.file("resaved.dgck");
    save_checkpoint(loaded, second);
    EXPECT_EQ(dgc_test::read_file(first), dgc_test::read_file(second));
    EXPECT_EQ(loaded.step, state.step);
    EXPECT_EQ(loaded.encoder.flat, state.encoder.flat);
    EXPECT_EQ(loaded.bank.centers, state.bank.centers);
    EXPECT_EQ(loaded.opt.m, state.opt.m);
}

TEST(Checkpoint, CorruptedDigestRejected) {
    TempDir data("ckpt_corrupt");
    const auto manifest = tiny_dataset(data, 1, 24, 12, 33);
    TrainConfig cfg = tiny_config();
    cfg.steps = 1;
    TrainState<f32> state = init_train_state<f32>(cfg);
    TempDir out("ckpt_corrupt_out");
    const TrainResult result = train(state, manifest, out.path());

    std::string bytes = dgc_test::read_file(result.final_checkpoint);
    bytes[9] ^= 0x5a;  // inside the stored digest
    const std::string tampered = out.file("tampered.dgck");
    std::ofstream(tampered, std::ios::binary).write(bytes.data(), bytes.size());
    try {
        load_checkpoint<f32>(tampered);
        FAIL() << "expected digest rejection";
    } catch (const IoError& e) {
        EXPECT_EQ(e.kind, IoErrorKind::corrupt);
    }
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    TempDir data("resume_data");
    const auto manifest = tiny_dataset(data, 3, 24, 12, 35);
    TrainConfig cfg = tiny_config();
    cfg.steps = 12;
    cfg.checkpoint_interval = 6;

    TempDir out_full("resume_full");
    TrainState<f32> full = init_train_state<f32>(cfg);
    train(full, manifest, out_full.path());

    TempDir out_resumed("resume_cont");
    TrainState<f32> resumed = load_checkpoint<f32>(out_full.file("ckpt_000006.dgck"));
    EXPECT_EQ(resumed.step, 6u);
    train(resumed, manifest, out_resumed.path(), /*resumed=*/true);

    EXPECT_EQ(resumed.step, 12u);
    EXPECT_EQ(resumed.encoder.flat, full.encoder.flat);
    EXPECT_EQ(resumed.bank.centers, full.bank.centers);

    // metric rows for steps 7..12 match bitwise (wall time excluded)
    const auto rows_full = metric_rows_without_wall(out_full.file("metrics.csv"));
    const auto rows_res = metric_rows_without_wall(out_resumed.file("metrics.csv"));
    ASSERT_EQ(rows_full.size(), 13u);
    ASSERT_EQ(rows_res.size(), 7u);
    for (size_t i = 0; i < 6; ++i) EXPECT_EQ(rows_res[1 + i], rows_full[7 + i]) << "row " << i;
}

TEST(Checkpoint, SnapshotsWrittenWhenEnabled) {
    TempDir data("snap_data");
    const auto manifest = tiny_dataset(data, 2, 24, 12, 37);
    TrainConfig cfg = tiny_config();
    cfg.steps = 4;
    cfg.snapshot_interval = 2;
    cfg.ms_iterations = 1;
    TrainState<f32> state = init_train_state<f32>(cfg);
    TempDir out("snap_out");
    train(state, manifest, out.path());
    EXPECT_TRUE(std::filesystem::exists(out.file("snapshots/snap_00000002.hsim")));
    EXPECT_TRUE(std::filesystem::exists(out.file("snapshots/snap_00000004.hsim")));
    const SegmentationMap snap = load_mask(out.file("snapshots/snap_00000002.hsim"));
    EXPECT_EQ(snap.height, 24u);
    EXPECT_EQ(snap.width, 24u);
}

TEST(Train, MemoryBoundedByTwoCubesInAsyncMode) {
    TempDir data("mem_data");
    const auto manifest = tiny_dataset(data, 6, 24, 12, 39);
    TrainConfig cfg = tiny_config();
    cfg.steps = 18;
    cfg.mode = ScheduleMode::async;
    cfg.reuse_budget = 2;
    MemoryTracker::instance().reset();
    TrainState<f32> state = init_train_state<f32>(cfg);
    TempDir out("mem_out");
    const TrainResult result = train(state, manifest, out.path());
    EXPECT_EQ(result.peak_cube_buffers, 2u);
}
