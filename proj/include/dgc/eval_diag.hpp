#pragma once

// Full-cube pseudo-segmentation (tiled, stitched by nearest window center),
// cluster -> semantic merging, IoU scoring, label-map entropy and mutual
// information, the training-phase classifier, and PPM rendering.

#include <map>
#include <span>

#include "dgc/clustering.hpp"

namespace dgc {

// Segmentation maps reuse the mask container and its .hsim on-disk format;
// labels are cluster ids (or semantic class ids after merging).
using SegmentationMap = GroundTruthMask;

// ---------------------------------------------------------------------------
// segment_cube: tile -> encode -> mean-shift -> nearest centroid -> stitch
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<u32> tile_origins(u32 extent, u32 tile) {
    std::vector<u32> origins;
    for (u32 o = 0; o + tile <= extent; o += tile) origins.push_back(o);
    if (origins.empty() || origins.back() + tile < extent) origins.push_back(extent - tile);
    return origins;
}

}  // namespace detail

template <class T>
inline SegmentationMap segment_cube(const EncoderParams<T>& params, const CentroidBank<T>& bank,
                                    const MeanShiftConfig& ms_cfg, const HsiCube& cube,
                                    u32 tile_size) {
    if (cube.bands != params.config.bands)
        throw ConfigError("segment_cube: cube band count does not match encoder");
    if (tile_size == 0 || tile_size > cube.height || tile_size > cube.width)
        throw ConfigError("segment_cube: cube smaller than tile size");

    SegmentationMap map;
    map.height = cube.height;
    map.width = cube.width;
    map.labels.assign(map.size(), 0);
    std::vector<f64> best_dist(map.size(), std::numeric_limits<f64>::max());

    const std::vector<u32> rows = detail::tile_origins(cube.height, tile_size);
    const std::vector<u32> cols = detail::tile_origins(cube.width, tile_size);
    for (u32 r0 : rows)
        for (u32 c0 : cols) {
            PatchBatch<T> batch;
            batch.append(extract_patch<T>(cube, r0, c0, tile_size));
            EmbeddingGrid<T> grid = encode(params, batch);
            if (ms_cfg.iterations > 0) grid = mean_shift_refine(grid, ms_cfg);
            const std::vector<u32> labels = hard_assign(grid, bank);
            const f64 center_y = r0 + (tile_size - 1) / 2.0;
            const f64 center_x = c0 + (tile_size - 1) / 2.0;
            for (u32 y = 0; y < tile_size; ++y)
                for (u32 x = 0; x < tile_size; ++x) {
                    const size_t px = static_cast<size_t>(r0 + y) * cube.width + (c0 + x);
                    const f64 dy = static_cast<f64>(r0 + y) - center_y;
                    const f64 dx = static_cast<f64>(c0 + x) - center_x;
                    const f64 d2 = dy * dy + dx * dx;
                    if (d2 < best_dist[px]) {  // ties keep the earlier tile
                        best_dist[px] = d2;
                        map.labels[px] = static_cast<u8>(labels[static_cast<size_t>(y) * tile_size + x]);
                    }
                }
        }
    return map;
}

// ---------------------------------------------------------------------------
// Merge maps
// ---------------------------------------------------------------------------

struct MergeMap {
    std::vector<u8> to_class;  // indexed by cluster id

    u8 map_label(u8 cluster) const {
        if (cluster >= to_class.size())
            throw ConfigError("merge: uncovered cluster id " + std::to_string(cluster));
        return to_class[cluster];
    }
};

inline SegmentationMap apply_merge(const SegmentationMap& map, const MergeMap& merge) {
    SegmentationMap out = map;
    for (u8& label : out.labels) label = merge.map_label(label);
    return out;
}

// Cluster/class co-occurrence counts, accumulated into `counts` (k rows of
// n_classes entries).
inline void accumulate_cooccurrence(const SegmentationMap& map, const GroundTruthMask& gt, u32 k,
                                    u32 n_classes, std::vector<u64>& counts) {
    if (map.height != gt.height || map.width != gt.width)
        throw ConfigError("cooccurrence: shape mismatch");
    counts.resize(static_cast<size_t>(k) * n_classes, 0);
    for (size_t i = 0; i < map.labels.size(); ++i) {
        const u8 cluster = map.labels[i];
        const u8 cls = gt.labels[i];
        if (cluster >= k || cls >= n_classes) throw ConfigError("cooccurrence: label out of range");
        ++counts[static_cast<size_t>(cluster) * n_classes + cls];
    }
}

// Per-cluster argmax of the co-occurrence counts; ties take the smaller
// class id. Clusters that never occur map to class 0.
inline MergeMap merge_from_counts(const std::vector<u64>& counts, u32 k, u32 n_classes) {
    MergeMap merge;
    merge.to_class.resize(k, 0);
    for (u32 c = 0; c < k; ++c) {
        u64 best = 0;
        u8 best_class = 0;
        for (u32 cls = 0; cls < n_classes; ++cls) {
            const u64 n = counts[static_cast<size_t>(c) * n_classes + cls];
            if (n > best) {
                best = n;
                best_class = static_cast<u8>(cls);
            }
        }
        merge.to_class[c] = best_class;
    }
    return merge;
}

inline MergeMap best_match_merge(const SegmentationMap& map, const GroundTruthMask& gt,
                                 u32 n_classes, u32 k = 0) {
    if (map.labels.empty()) throw ConfigError("best_match_merge: empty map");
    if (k == 0) {
        u8 max_label = 0;
        for (u8 l : map.labels) max_label = std::max(max_label, l);
        k = static_cast<u32>(max_label) + 1;
    }
    std::vector<u64> counts;
    accumulate_cooccurrence(map, gt, k, n_classes, counts);
    return merge_from_counts(counts, k, n_classes);
}

// ---------------------------------------------------------------------------
// IoU
// ---------------------------------------------------------------------------

struct IoUReport {
    std::vector<u8> classes;
    std::vector<f64> per_class;  // aligned with `classes`
    f64 mean = 0.0;              // arithmetic mean over classes present in gt
};

inline IoUReport iou(const SegmentationMap& pred, const GroundTruthMask& gt,
                     const std::vector<u8>& classes) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ConfigError("iou: shape mismatch");
    IoUReport report;
    report.classes = classes;
    f64 mean_sum = 0.0;
    u32 mean_count = 0;
    for (u8 cls : classes) {
        u64 inter = 0, uni = 0, gt_count = 0;
        for (size_t i = 0; i < pred.labels.size(); ++i) {
            const bool in_pred = pred.labels[i] == cls;
            const bool in_gt = gt.labels[i] == cls;
            inter += in_pred && in_gt;
            uni += in_pred || in_gt;
            gt_count += in_gt;
        }
        const f64 value = uni == 0 ? 1.0 : static_cast<f64>(inter) / static_cast<f64>(uni);
        report.per_class.push_back(value);
        if (gt_count > 0) {
            mean_sum += value;
            ++mean_count;
        }
    }
    report.mean = mean_count > 0 ? mean_sum / mean_count : 1.0;
    return report;
}

// ---------------------------------------------------------------------------
// Label-map entropy and mutual information (natural log)
// ---------------------------------------------------------------------------

inline f64 seg_entropy(const SegmentationMap& map) {
    if (map.labels.empty()) throw ConfigError("seg_entropy: empty map");
    std::array<u64, 256> counts{};
    for (u8 l : map.labels) ++counts[l];
    const f64 n = static_cast<f64>(map.labels.size());
    f64 entropy = 0.0;
    for (u64 c : counts) {
        if (c == 0) continue;
        const f64 p = static_cast<f64>(c) / n;
        entropy -= p * std::log(p);
    }
    return entropy;
}

inline f64 seg_mutual_information(const SegmentationMap& a, const SegmentationMap& b) {
    if (a.height != b.height || a.width != b.width)
        throw ConfigError("seg_mutual_information: shape mismatch");
    u32 ka = 0, kb = 0;
    for (u8 l : a.labels) ka = std::max<u32>(ka, l + 1u);
    for (u8 l : b.labels) kb = std::max<u32>(kb, l + 1u);
    std::vector<u64> joint(static_cast<size_t>(ka) * kb, 0);
    std::vector<u64> ca(ka, 0), cb(kb, 0);
    for (size_t i = 0; i < a.labels.size(); ++i) {
        ++joint[static_cast<size_t>(a.labels[i]) * kb + b.labels[i]];
        ++ca[a.labels[i]];
        ++cb[b.labels[i]];
    }
    const f64 n = static_cast<f64>(a.labels.size());
    f64 mi = 0.0;
    for (u32 i = 0; i < ka; ++i)
        for (u32 j = 0; j < kb; ++j) {
            const u64 c = joint[static_cast<size_t>(i) * kb + j];
            if (c == 0) continue;
            const f64 pij = static_cast<f64>(c) / n;
            const f64 pi = static_cast<f64>(ca[i]) / n;
            const f64 pj = static_cast<f64>(cb[j]) / n;
            mi += pij * std::log(pij / (pi * pj));
        }
    return std::max(0.0, mi);
}

// ---------------------------------------------------------------------------
// Training-phase classification
// ---------------------------------------------------------------------------

enum class PhaseLabel { inactive, ignite, afterglow, smoldering, aftermath };

inline const char* phase_name(PhaseLabel label) {
    switch (label) {
        case PhaseLabel::inactive: return "inactive";
        case PhaseLabel::ignite: return "ignite";
        case PhaseLabel::afterglow: return "afterglow";
        case PhaseLabel::smoldering: return "smoldering";
        case PhaseLabel::aftermath: return "aftermath";
    }
    return "?";
}

struct SnapshotStats {
    u64 step = 0;
    f64 entropy = 0.0;
    f64 mi_prev = 0.0;  // MI with the previous snapshot (0 for the first)
    u32 active_clusters = 0;
};

struct PhaseThresholds {
    f64 stable_frac = 0.5;  // MI floor for "persistent structure", x log K
    f64 noise_frac = 0.1;   // MI ceiling for "noise", x log K
    f64 drop_frac = 0.2;    // entropy drop from running max marking over-merge
    f64 near_frac = 0.8;    // "entropy near log K" floor, x log K
};

// Classifies one diagnostic window (>= 2 snapshots). `running_max_entropy`
// is the maximum entropy seen up to and including this window.
inline PhaseLabel classify_phase(std::span<const SnapshotStats> window, f64 running_max_entropy,
                                 u32 k, const PhaseThresholds& th = {}) {
    if (window.size() < 2) throw ConfigError("classify_phase: window needs >= 2 snapshots");
    const SnapshotStats& last = window.back();
    const f64 log_k = std::log(static_cast<f64>(k));
    if (last.active_clusters <= 1) return PhaseLabel::inactive;
    if (last.mi_prev < th.noise_frac * log_k && last.entropy >= th.near_frac * log_k)
        return PhaseLabel::aftermath;
    const bool rising = last.entropy > window.front().entropy + 1e-12;
    if (last.active_clusters >= 2 && rising && last.mi_prev >= th.stable_frac * log_k)
        return PhaseLabel::ignite;
    if (running_max_entropy - last.entropy >= th.drop_frac * running_max_entropy &&
        running_max_entropy > 0.0)
        return PhaseLabel::smoldering;
    return PhaseLabel::afterglow;
}

inline u32 active_cluster_count(const SegmentationMap& map) {
    std::array<bool, 256> seen{};
    for (u8 l : map.labels) seen[l] = true;
    u32 count = 0;
    for (bool s : seen) count += s;
    return count;
}

// ---------------------------------------------------------------------------
// Rendering (binary PPM, P6)
// ---------------------------------------------------------------------------

// Fixed distinct palette for the first clusters, golden-ratio hues beyond.
inline std::array<u8, 3> cluster_color(u32 idx) {
    static constexpr u8 fixed[8][3] = {
        {230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {255, 225, 25},
        {145, 30, 180}, {70, 240, 240}, {245, 130, 48}, {240, 50, 230}};
    if (idx < 8) return {fixed[idx][0], fixed[idx][1], fixed[idx][2]};
    const f64 hue = std::fmod(static_cast<f64>(idx) * 0.61803398875, 1.0) * 6.0;
    const f64 sat = 0.75, val = 0.95;
    const int sector = static_cast<int>(hue) % 6;
    const f64 f = hue - std::floor(hue);
    const f64 p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
    f64 r = 0, g = 0, b = 0;
    switch (sector) {
        case 0: r = val; g = t; b = p; break;
        case 1: r = q; g = val; b = p; break;
        case 2: r = p; g = val; b = t; break;
        case 3: r = p; g = q; b = val; break;
        case 4: r = t; g = p; b = val; break;
        default: r = val; g = p; b = q; break;
    }
    return {static_cast<u8>(std::lround(r * 255)), static_cast<u8>(std::lround(g * 255)),
            static_cast<u8>(std::lround(b * 255))};
}

inline void write_ppm(const std::vector<u8>& rgb, u32 height, u32 width, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::write_failed, "cannot write: " + path);
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw IoError(IoErrorKind::write_failed, "write failed: " + path);
}

inline void render_cluster_colors(const SegmentationMap& map, const std::string& path) {
    std::vector<u8> rgb(map.size() * 3);
    for (size_t i = 0; i < map.labels.size(); ++i) {
        const auto color = cluster_color(map.labels[i]);
        rgb[i * 3 + 0] = color[0];
        rgb[i * 3 + 1] = color[1];
        rgb[i * 3 + 2] = color[2];
    }
    write_ppm(rgb, map.height, map.width, path);
}

// Picks the three bands nearest 650/550/450 nm and min-max normalizes each
// over the cube; a zero-range band renders mid-gray.
inline void render_pseudo_rgb(const HsiCube& cube, const std::string& path) {
    const u32 band_r = cube.nearest_band(650.0);
    const u32 band_g = cube.nearest_band(550.0);
    const u32 band_b = cube.nearest_band(450.0);
    const u32 chosen[3] = {band_r, band_g, band_b};
    std::vector<u8> rgb(cube.plane() * 3);
    for (int ch = 0; ch < 3; ++ch) {
        const f32* plane = cube.data.data() + static_cast<size_t>(chosen[ch]) * cube.plane();
        f32 lo = plane[0], hi = plane[0];
        for (size_t i = 0; i < cube.plane(); ++i) {
            lo = std::min(lo, plane[i]);
            hi = std::max(hi, plane[i]);
        }
        const f32 range = hi - lo;
        for (size_t i = 0; i < cube.plane(); ++i) {
            rgb[i * 3 + ch] = range > 0
                                  ? static_cast<u8>(std::lround((plane[i] - lo) / range * 255.0f))
                                  : static_cast<u8>(128);
        }
    }
    write_ppm(rgb, cube.height, cube.width, path);
}

}  // namespace dgc
