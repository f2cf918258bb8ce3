#pragma once

// Memorized centroid bank and the clustering operations around it: softmax
// soft assignment over cosine similarity, unrolled mean-shift refinement
// (differentiable, with a tape for reverse mode), nearest-centroid hard
// assignment, EMA centroid updates, and dead-cluster reactivation.
//
// Embeddings entering these functions are unit-norm (the encoder normalizes
// at its boundary), so cosine similarity is a plain dot product.

#include "dgc/encoder.hpp"

namespace dgc {

template <class T>
struct CentroidBank {
    u32 k = 0;
    u32 dim = 0;
    std::vector<T> centers;  // [k][dim], unit rows
    T ema_decay = T(0.99);        // alpha
    T temperature = T(0.1);       // tau
    T dead_threshold = T(0);      // minimum assignment-mass fraction
    T reactivation_eps = T(0.05); // perturbation scale

    T* center(u32 idx) { return centers.data() + static_cast<size_t>(idx) * dim; }
    const T* center(u32 idx) const { return centers.data() + static_cast<size_t>(idx) * dim; }

    void normalize_centers() {
        for (u32 c = 0; c < k; ++c) {
            T* row = center(c);
            T norm_sq = T(0);
            for (u32 d = 0; d < dim; ++d) norm_sq += row[d] * row[d];
            const T norm = std::sqrt(norm_sq);
            if (norm < T(1e-12)) {
                for (u32 d = 0; d < dim; ++d) row[d] = d == 0 ? T(1) : T(0);
            } else {
                const T inv = T(1) / norm;
                for (u32 d = 0; d < dim; ++d) row[d] *= inv;
            }
        }
    }

    template <class U>
    CentroidBank<U> cast() const {
        CentroidBank<U> out;
        out.k = k;
        out.dim = dim;
        out.centers.resize(centers.size());
        for (size_t i = 0; i < centers.size(); ++i) out.centers[i] = static_cast<U>(centers[i]);
        out.ema_decay = static_cast<U>(ema_decay);
        out.temperature = static_cast<U>(temperature);
        out.dead_threshold = static_cast<U>(dead_threshold);
        out.reactivation_eps = static_cast<U>(reactivation_eps);
        return out;
    }
};

template <class T>
inline CentroidBank<T> init_centroid_bank(u32 k, u32 dim, u64 seed) {
    if (k < 2) throw ConfigError("centroid bank: need K >= 2");
    if (dim == 0) throw ConfigError("centroid bank: zero dimension");
    CentroidBank<T> bank;
    bank.k = k;
    bank.dim = dim;
    bank.dead_threshold = T(0.5) / static_cast<T>(k);
    bank.centers.resize(static_cast<size_t>(k) * dim);
    Rng rng(child_seed(seed, "centroid-init"));
    for (T& v : bank.centers) v = static_cast<T>(rng.gaussian());
    bank.normalize_centers();
    return bank;
}

// ---------------------------------------------------------------------------
// Soft assignment: p_i = softmax_k( cos(z_i, c_k) / tau )
// ---------------------------------------------------------------------------

template <class T>
struct SoftAssignment {
    u32 rows = 0;
    u32 k = 0;
    std::vector<T> p;  // [rows][k]

    T* row(size_t i) { return p.data() + i * k; }
    const T* row(size_t i) const { return p.data() + i * k; }
};

template <class T>
inline SoftAssignment<T> soft_assign_flat(const T* z, size_t n, u32 dim, const CentroidBank<T>& bank) {
    if (dim != bank.dim) throw ConfigError("soft_assign: embedding dimension mismatch");
    SoftAssignment<T> out;
    out.rows = static_cast<u32>(n);
    out.k = bank.k;
    out.p.resize(n * bank.k);
    const T inv_tau = T(1) / bank.temperature;
    std::vector<T> logits(bank.k);
    for (size_t i = 0; i < n; ++i) {
        const T* zi = z + i * dim;
        T max_logit = -std::numeric_limits<T>::infinity();
        for (u32 c = 0; c < bank.k; ++c) {
            const T* ck = bank.center(c);
            T dot = T(0);
            for (u32 d = 0; d < dim; ++d) dot += zi[d] * ck[d];
            logits[c] = dot * inv_tau;
            max_logit = std::max(max_logit, logits[c]);
        }
        T sum = T(0);
        T* pi = out.row(i);
        for (u32 c = 0; c < bank.k; ++c) {
            pi[c] = std::exp(logits[c] - max_logit);
            sum += pi[c];
        }
        const T inv_sum = T(1) / sum;
        for (u32 c = 0; c < bank.k; ++c) pi[c] *= inv_sum;
    }
    return out;
}

template <class T>
inline SoftAssignment<T> soft_assign(const EmbeddingGrid<T>& grid, const CentroidBank<T>& bank) {
    return soft_assign_flat(grid.values.data(), grid.pixels(), grid.dim, bank);
}

// Backpropagates a gradient on the assignment probabilities through the
// softmax into the embeddings and centers.
template <class T>
inline void soft_assign_backward(const T* z, size_t n, u32 dim, const CentroidBank<T>& bank,
                                 const SoftAssignment<T>& assign, const T* d_p, T* d_z, T* d_centers) {
    const T inv_tau = T(1) / bank.temperature;
    for (size_t i = 0; i < n; ++i) {
        const T* zi = z + i * dim;
        const T* pi = assign.row(i);
        const T* gi = d_p + i * bank.k;
        T weighted = T(0);
        for (u32 c = 0; c < bank.k; ++c) weighted += gi[c] * pi[c];
        for (u32 c = 0; c < bank.k; ++c) {
            const T ds = pi[c] * (gi[c] - weighted) * inv_tau;
            if (ds == T(0)) continue;
            const T* ck = bank.center(c);
            if (d_z) {
                T* dz = d_z + i * dim;
                for (u32 d = 0; d < dim; ++d) dz[d] += ds * ck[d];
            }
            if (d_centers) {
                T* dc = d_centers + static_cast<size_t>(c) * dim;
                for (u32 d = 0; d < dim; ++d) dc[d] += ds * zi[d];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Unrolled mean-shift. Each patch's pixels are shifted toward the
// Gaussian-kernel-weighted mean of the patch and re-normalized, for a fixed
// number of iterations, keeping the whole refinement differentiable.
// ---------------------------------------------------------------------------

struct MeanShiftConfig {
    u32 iterations = 5;
    f64 bandwidth = 0.5;  // kernel scale h in embedding space

    void validate() const {
        if (bandwidth <= 0.0) throw ConfigError("mean-shift: bandwidth must be positive");
    }
};

template <class T>
struct MeanShiftTape {
    // stage embeddings: inputs[0] is the original grid, inputs[iterations] the
    // final output; m_norms[t][i] == 0 marks a degenerate mean (pixel copied)
    std::vector<std::vector<T>> stages;
    std::vector<std::vector<T>> m_norms;
    u32 batch = 0, per_patch = 0, dim = 0;
};

template <class T>
inline EmbeddingGrid<T> mean_shift_forward(const EmbeddingGrid<T>& grid, const MeanShiftConfig& cfg,
                                           MeanShiftTape<T>* tape) {
    cfg.validate();
    EmbeddingGrid<T> out = grid;
    const size_t n = static_cast<size_t>(grid.height) * grid.width;
    const u32 dim = grid.dim;
    const T inv_h2 = static_cast<T>(1.0 / (cfg.bandwidth * cfg.bandwidth));
    if (tape) {
        tape->stages.clear();
        tape->m_norms.clear();
        tape->stages.push_back(grid.values);
        tape->batch = grid.batch;
        tape->per_patch = static_cast<u32>(n);
        tape->dim = dim;
    }
    std::vector<T> next(out.values.size());
    for (u32 iter = 0; iter < cfg.iterations; ++iter) {
        std::vector<T> norms;
        if (tape) norms.resize(out.pixels());
        for (u32 b = 0; b < grid.batch; ++b) {
            const T* z = out.values.data() + static_cast<size_t>(b) * n * dim;
            T* zn = next.data() + static_cast<size_t>(b) * n * dim;
            for (size_t i = 0; i < n; ++i) {
                const T* zi = z + i * dim;
                T weight_sum = T(0);
                T* mi = zn + i * dim;
                for (u32 d = 0; d < dim; ++d) mi[d] = T(0);
                for (size_t j = 0; j < n; ++j) {
                    const T* zj = z + j * dim;
                    T dot = T(0);
                    for (u32 d = 0; d < dim; ++d) dot += zi[d] * zj[d];
                    // unit vectors: |zi - zj|^2 = 2 - 2 dot
                    const T w = std::exp((dot - T(1)) * inv_h2);
                    weight_sum += w;
                    for (u32 d = 0; d < dim; ++d) mi[d] += w * zj[d];
                }
                const T inv_sum = T(1) / weight_sum;
                T norm_sq = T(0);
                for (u32 d = 0; d < dim; ++d) {
                    mi[d] *= inv_sum;
                    norm_sq += mi[d] * mi[d];
                }
                const T norm = std::sqrt(norm_sq);
                if (norm < T(1e-12)) {
                    for (u32 d = 0; d < dim; ++d) mi[d] = zi[d];  // degenerate: keep the pixel
                    if (tape) norms[static_cast<size_t>(b) * n + i] = T(0);
                } else {
                    const T inv = T(1) / norm;
                    for (u32 d = 0; d < dim; ++d) mi[d] *= inv;
                    if (tape) norms[static_cast<size_t>(b) * n + i] = norm;
                }
            }
        }
        out.values.swap(next);
        if (tape) {
            tape->m_norms.push_back(std::move(norms));
            tape->stages.push_back(out.values);
        }
    }
    out.normalized = true;
    return out;
}

template <class T>
inline EmbeddingGrid<T> mean_shift_refine(const EmbeddingGrid<T>& grid, const MeanShiftConfig& cfg) {
    return mean_shift_forward<T>(grid, cfg, nullptr);
}

// Reverse-mode gradient through the unrolled iterations. `d_out` is the
// gradient on the refined embeddings; returns the gradient on the inputs.
template <class T>
inline std::vector<T> mean_shift_backward(const MeanShiftTape<T>& tape, const MeanShiftConfig& cfg,
                                          std::vector<T> d_out) {
    const u32 dim = tape.dim;
    const size_t n = tape.per_patch;
    const T inv_h2 = static_cast<T>(1.0 / (cfg.bandwidth * cfg.bandwidth));
    std::vector<T> d_in;
    std::vector<T> mi(dim);
    std::vector<T> dm(dim);
    for (u32 iter = cfg.iterations; iter-- > 0;) {
        const std::vector<T>& z_in = tape.stages[iter];
        const std::vector<T>& z_out = tape.stages[iter + 1];
        const std::vector<T>& norms = tape.m_norms[iter];
        d_in.assign(z_in.size(), T(0));
        for (u32 b = 0; b < tape.batch; ++b) {
            const size_t base = static_cast<size_t>(b) * n * dim;
            const T* z = z_in.data() + base;
            const T* zo = z_out.data() + base;
            const T* u_all = d_out.data() + base;
            T* dz = d_in.data() + base;
            for (size_t i = 0; i < n; ++i) {
                const T* u = u_all + i * dim;
                const T norm = norms[static_cast<size_t>(b) * n + i];
                if (norm == T(0)) {  // degenerate pixel was copied through
                    for (u32 d = 0; d < dim; ++d) dz[i * dim + d] += u[d];
                    continue;
                }
                const T* zhat = zo + i * dim;
                const T* zi = z + i * dim;
                // dm = (u - (u.zhat) zhat) / norm ; m = zhat * norm
                T u_dot = T(0);
                for (u32 d = 0; d < dim; ++d) u_dot += u[d] * zhat[d];
                T dm_dot_m = T(0);
                for (u32 d = 0; d < dim; ++d) {
                    dm[d] = (u[d] - u_dot * zhat[d]) / norm;
                    mi[d] = zhat[d] * norm;
                    dm_dot_m += dm[d] * mi[d];
                }
                // recompute the kernel row
                T weight_sum = T(0);
                for (size_t j = 0; j < n; ++j) {
                    const T* zj = z + j * dim;
                    T dot = T(0);
                    for (u32 d = 0; d < dim; ++d) dot += zi[d] * zj[d];
                    weight_sum += std::exp((dot - T(1)) * inv_h2);
                }
                const T inv_sum = T(1) / weight_sum;
                for (size_t j = 0; j < n; ++j) {
                    const T* zj = z + j * dim;
                    T dot = T(0);
                    T dm_dot_zj = T(0);
                    for (u32 d = 0; d < dim; ++d) {
                        dot += zi[d] * zj[d];
                        dm_dot_zj += dm[d] * zj[d];
                    }
                    const T w = std::exp((dot - T(1)) * inv_h2);
                    const T value_coef = w * inv_sum;
                    // dL/dw_ij = dm . (z_j - m_i) / S_i
                    const T dw = (dm_dot_zj - dm_dot_m) * inv_sum;
                    const T pair_coef = dw * w * inv_h2;
                    T* dzj = dz + j * dim;
                    T* dzi = dz + i * dim;
                    for (u32 d = 0; d < dim; ++d) {
                        const T diff = zj[d] - zi[d];
                        dzj[d] += value_coef * dm[d] - pair_coef * diff;
                        dzi[d] += pair_coef * diff;
                    }
                }
            }
        }
        d_out.swap(d_in);
    }
    return d_out;
}

// ---------------------------------------------------------------------------
// Hard assignment, EMA update, reactivation
// ---------------------------------------------------------------------------

template <class T>
inline std::vector<u32> hard_assign_flat(const T* z, size_t n, u32 dim, const CentroidBank<T>& bank) {
    if (dim != bank.dim) throw ConfigError("hard_assign: embedding dimension mismatch");
    std::vector<u32> labels(n);
    for (size_t i = 0; i < n; ++i) {
        const T* zi = z + i * dim;
        T best = std::numeric_limits<T>::max();
        u32 best_k = 0;
        for (u32 c = 0; c < bank.k; ++c) {
            const T* ck = bank.center(c);
            T dist = T(0);
            for (u32 d = 0; d < dim; ++d) {
                const T diff = zi[d] - ck[d];
                dist += diff * diff;
            }
            if (dist < best) {  // ties keep the smaller cluster index
                best = dist;
                best_k = c;
            }
        }
        labels[i] = best_k;
    }
    return labels;
}

template <class T>
inline std::vector<u32> hard_assign(const EmbeddingGrid<T>& grid, const CentroidBank<T>& bank) {
    return hard_assign_flat(grid.values.data(), grid.pixels(), grid.dim, bank);
}

// Per-cluster soft assignment mass.
template <class T>
inline std::vector<T> assignment_masses(const SoftAssignment<T>& assign) {
    std::vector<T> masses(assign.k, T(0));
    for (size_t i = 0; i < assign.rows; ++i) {
        const T* pi = assign.row(i);
        for (u32 c = 0; c < assign.k; ++c) masses[c] += pi[c];
    }
    return masses;
}

// EMA reposition toward the assignment-weighted mean embedding. No gradient
// flows through this update. Clusters with mass below the dead threshold are
// left untouched (reactivate_dead handles them).
template <class T>
inline void ema_update(CentroidBank<T>& bank, const T* z, size_t n, u32 dim,
                       const SoftAssignment<T>& assign) {
    if (dim != bank.dim || assign.k != bank.k) throw ConfigError("ema_update: shape mismatch");
    const std::vector<T> masses = assignment_masses(assign);
    const T total = static_cast<T>(n);
    std::vector<T> mean(dim);
    for (u32 c = 0; c < bank.k; ++c) {
        if (masses[c] < bank.dead_threshold * total) continue;
        std::fill(mean.begin(), mean.end(), T(0));
        for (size_t i = 0; i < n; ++i) {
            const T w = assign.row(i)[c];
            if (w == T(0)) continue;
            const T* zi = z + i * dim;
            for (u32 d = 0; d < dim; ++d) mean[d] += w * zi[d];
        }
        const T inv_mass = T(1) / masses[c];
        T* ck = bank.center(c);
        T norm_sq = T(0);
        for (u32 d = 0; d < dim; ++d) {
            ck[d] = bank.ema_decay * ck[d] + (T(1) - bank.ema_decay) * mean[d] * inv_mass;
            norm_sq += ck[d] * ck[d];
        }
        const T norm = std::sqrt(norm_sq);
        if (norm >= T(1e-12)) {
            const T inv = T(1) / norm;
            for (u32 d = 0; d < dim; ++d) ck[d] *= inv;
        } else {
            for (u32 d = 0; d < dim; ++d) ck[d] = d == 0 ? T(1) : T(0);
        }
    }
}

template <class T>
inline void ema_update(CentroidBank<T>& bank, const EmbeddingGrid<T>& grid,
                       const SoftAssignment<T>& assign) {
    ema_update(bank, grid.values.data(), grid.pixels(), grid.dim, assign);
}

// Perturb-and-renormalize clusters whose mass fraction fell below the dead
// threshold. Draws dim gaussians per dead cluster, in cluster order.
template <class T>
inline void reactivate_dead(CentroidBank<T>& bank, const std::vector<T>& masses, Rng& rng) {
    if (masses.size() != bank.k) throw ConfigError("reactivate_dead: masses length mismatch");
    T total = T(0);
    for (T m : masses) total += m;
    for (u32 c = 0; c < bank.k; ++c) {
        if (total > T(0) && masses[c] / total >= bank.dead_threshold) continue;
        T* ck = bank.center(c);
        T norm_sq = T(0);
        for (u32 d = 0; d < bank.dim; ++d) {
            ck[d] += bank.reactivation_eps * static_cast<T>(rng.gaussian());
            norm_sq += ck[d] * ck[d];
        }
        const T norm = std::sqrt(norm_sq);
        if (norm >= T(1e-12)) {
            const T inv = T(1) / norm;
            for (u32 d = 0; d < bank.dim; ++d) ck[d] *= inv;
        } else {
            for (u32 d = 0; d < bank.dim; ++d) ck[d] = d == 0 ? T(1) : T(0);
        }
    }
}

}  // namespace dgc
