#pragma once

// The four training loss families and their exact gradients: compactness
// (pull pixels toward assigned centers), centroid orthogonality, marginal
// balance (entropy gap to uniform usage), uniform assignment against
// capacity-balanced pseudo-labels, and cross-crop consistency (symmetric KL
// on overlap pixels). Probabilities are clamped at 1e-8 before every log so
// one-hot corners stay finite. Every term is >= 0 and the weighted total is
// assembled exactly from the logged components.

#include "dgc/clustering.hpp"

namespace dgc {

inline constexpr f64 kProbClamp = 1e-8;

template <class T>
struct LossWeights {
    T unif = T(1.0);
    T orth = T(0.1);
    T bal = T(1.0);
    T cons = T(1.0);
};

template <class T>
struct LossBreakdown {
    T comp1 = T(0);
    T comp2 = T(0);
    T unif = T(0);
    T orth = T(0);
    T bal = T(0);
    T cons = T(0);
    T total = T(0);

    bool finite() const {
        return std::isfinite(static_cast<f64>(comp1)) && std::isfinite(static_cast<f64>(comp2)) &&
               std::isfinite(static_cast<f64>(unif)) && std::isfinite(static_cast<f64>(orth)) &&
               std::isfinite(static_cast<f64>(bal)) && std::isfinite(static_cast<f64>(cons)) &&
               std::isfinite(static_cast<f64>(total));
    }
};

// ---------------------------------------------------------------------------
// Compactness: (1/n) sum_{i,k} p_ik (1 - z_i . c_k)
// ---------------------------------------------------------------------------

template <class T>
inline T compactness(const T* p, const T* z, size_t n, const CentroidBank<T>& bank,
                     T* d_p = nullptr, T* d_z = nullptr, T* d_centers = nullptr, T weight = T(1)) {
    const u32 k = bank.k;
    const u32 dim = bank.dim;
    const T inv_n = T(1) / static_cast<T>(n);
    T loss = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T* zi = z + i * dim;
        const T* pi = p + i * k;
        for (u32 c = 0; c < k; ++c) {
            const T* ck = bank.center(c);
            T dot = T(0);
            for (u32 d = 0; d < dim; ++d) dot += zi[d] * ck[d];
            loss += pi[c] * (T(1) - dot);
            if (d_p) d_p[i * k + c] += weight * inv_n * (T(1) - dot);
            const T coef = weight * inv_n * pi[c];
            if (d_z) {
                T* dz = d_z + i * dim;
                for (u32 d = 0; d < dim; ++d) dz[d] -= coef * ck[d];
            }
            if (d_centers) {
                T* dc = d_centers + static_cast<size_t>(c) * dim;
                for (u32 d = 0; d < dim; ++d) dc[d] -= coef * zi[d];
            }
        }
    }
    return loss * inv_n;
}

template <class T>
inline T compactness(const SoftAssignment<T>& assign, const EmbeddingGrid<T>& grid,
                     const CentroidBank<T>& bank) {
    if (assign.rows != grid.pixels() || assign.k != bank.k)
        throw ConfigError("compactness: shape mismatch");
    return compactness<T>(assign.p.data(), grid.values.data(), grid.pixels(), bank);
}

// ---------------------------------------------------------------------------
// Orthogonality: sum_{i != j} (c_i . c_j)^2
// ---------------------------------------------------------------------------

template <class T>
inline T orthogonality(const CentroidBank<T>& bank, T* d_centers = nullptr, T weight = T(1)) {
    T loss = T(0);
    for (u32 a = 0; a < bank.k; ++a) {
        const T* ca = bank.center(a);
        for (u32 b = 0; b < bank.k; ++b) {
            if (a == b) continue;
            const T* cb = bank.center(b);
            T dot = T(0);
            for (u32 d = 0; d < bank.dim; ++d) dot += ca[d] * cb[d];
            loss += dot * dot;
            if (d_centers) {
                // each unordered pair appears twice in the sum
                T* da = d_centers + static_cast<size_t>(a) * bank.dim;
                const T coef = weight * T(4) * dot;
                for (u32 d = 0; d < bank.dim; ++d) da[d] += coef * cb[d];
            }
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Balance: log K - H(p_bar), zero exactly at the uniform marginal
// ---------------------------------------------------------------------------

template <class T>
inline T balance(const T* p, size_t n, u32 k, T* d_p = nullptr, T weight = T(1)) {
    if (n == 0) throw ConfigError("balance: empty assignment");
    std::vector<T> marginal(k, T(0));
    const T inv_n = T(1) / static_cast<T>(n);
    for (size_t i = 0; i < n; ++i) {
        const T* pi = p + i * k;
        for (u32 c = 0; c < k; ++c) marginal[c] += pi[c];
    }
    for (u32 c = 0; c < k; ++c) marginal[c] *= inv_n;
    T entropy = T(0);
    for (u32 c = 0; c < k; ++c) {
        const T clamped = std::max(marginal[c], static_cast<T>(kProbClamp));
        entropy -= marginal[c] * std::log(clamped);
    }
    const T loss = std::log(static_cast<T>(k)) - entropy;
    if (d_p) {
        std::vector<T> d_marginal(k);
        for (u32 c = 0; c < k; ++c) {
            const T clamped = std::max(marginal[c], static_cast<T>(kProbClamp));
            const T inside = marginal[c] >= static_cast<T>(kProbClamp) ? T(1) : T(0);
            d_marginal[c] = weight * (std::log(clamped) + inside) * inv_n;
        }
        for (size_t i = 0; i < n; ++i)
            for (u32 c = 0; c < k; ++c) d_p[i * k + c] += d_marginal[c];
    }
    return loss;
}

template <class T>
inline T balance(const SoftAssignment<T>& assign) {
    return balance<T>(assign.p.data(), assign.rows, assign.k);
}

// ---------------------------------------------------------------------------
// Capacity-balanced pseudo-labels: greedy assignment of each pixel to its
// best-scoring cluster with remaining capacity. floor(M/K) per cluster, with
// the M mod K remainder spread one extra label across at most that many
// clusters, so every cluster ends within [floor(M/K), ceil(M/K)].
// ---------------------------------------------------------------------------

inline std::vector<u32> uniform_pseudo_labels_impl(const f64* p, size_t n, u32 k) {
    if (n < k) throw ConfigError("uniform_pseudo_labels: need at least K pixels");
    struct Entry {
        f64 score;
        u32 pixel;
        u32 cluster;
    };
    std::vector<Entry> entries;
    entries.reserve(n * k);
    for (u32 i = 0; i < n; ++i)
        for (u32 c = 0; c < k; ++c) entries.push_back({p[static_cast<size_t>(i) * k + c], i, c});
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.pixel != b.pixel) return a.pixel < b.pixel;
        return a.cluster < b.cluster;
    });
    const u32 base_cap = static_cast<u32>(n / k);
    u32 plus_slots = static_cast<u32>(n % k);
    std::vector<u32> labels(n, k);
    std::vector<u32> counts(k, 0);
    size_t assigned = 0;
    for (const Entry& e : entries) {
        if (assigned == n) break;
        if (labels[e.pixel] != k) continue;
        if (counts[e.cluster] < base_cap) {
            labels[e.pixel] = e.cluster;
            ++counts[e.cluster];
            ++assigned;
        } else if (counts[e.cluster] == base_cap && plus_slots > 0) {
            labels[e.pixel] = e.cluster;
            ++counts[e.cluster];
            --plus_slots;
            ++assigned;
        }
    }
    return labels;
}

template <class T>
inline std::vector<u32> uniform_pseudo_labels(const T* p, size_t n, u32 k) {
    if constexpr (std::is_same_v<T, f64>) {
        return uniform_pseudo_labels_impl(p, n, k);
    } else {
        std::vector<f64> wide(n * k);
        for (size_t i = 0; i < wide.size(); ++i) wide[i] = static_cast<f64>(p[i]);
        return uniform_pseudo_labels_impl(wide.data(), n, k);
    }
}

template <class T>
inline std::vector<u32> uniform_pseudo_labels(const SoftAssignment<T>& assign) {
    return uniform_pseudo_labels<T>(assign.p.data(), assign.rows, assign.k);
}

// ---------------------------------------------------------------------------
// Uniform assignment loss: mean NLL of the pseudo-labels
// ---------------------------------------------------------------------------

template <class T>
inline T uniform_loss(const T* p, size_t n, u32 k, const std::vector<u32>& labels,
                      T* d_p = nullptr, T weight = T(1)) {
    if (labels.size() != n) throw ConfigError("uniform_loss: label length mismatch");
    const T inv_n = T(1) / static_cast<T>(n);
    T loss = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T prob = p[i * k + labels[i]];
        const T clamped = std::max(prob, static_cast<T>(kProbClamp));
        loss -= std::log(clamped);
        if (d_p && prob >= static_cast<T>(kProbClamp))
            d_p[i * k + labels[i]] -= weight * inv_n / prob;
    }
    return loss * inv_n;
}

template <class T>
inline T uniform_loss(const SoftAssignment<T>& assign, const std::vector<u32>& labels) {
    return uniform_loss<T>(assign.p.data(), assign.rows, assign.k, labels);
}

// ---------------------------------------------------------------------------
// Consistency: symmetric KL between aligned overlap-pixel distributions
// ---------------------------------------------------------------------------

template <class T>
inline T consistency(const T* p1, const T* p2, size_t m, u32 k, T* d_p1 = nullptr,
                     T* d_p2 = nullptr, T weight = T(1)) {
    if (m == 0) throw ConfigError("consistency: empty overlap");
    const T inv_2m = T(1) / (T(2) * static_cast<T>(m));
    const T clamp = static_cast<T>(kProbClamp);
    T loss = T(0);
    for (size_t i = 0; i < m; ++i) {
        const T* a = p1 + i * k;
        const T* b = p2 + i * k;
        for (u32 c = 0; c < k; ++c) {
            const T la = std::log(std::max(a[c], clamp));
            const T lb = std::log(std::max(b[c], clamp));
            loss += a[c] * (la - lb) + b[c] * (lb - la);
            if (d_p1) {
                T g = la - lb;
                if (a[c] >= clamp) g += T(1) - b[c] / a[c];
                d_p1[i * k + c] += weight * inv_2m * g;
            }
            if (d_p2) {
                T g = lb - la;
                if (b[c] >= clamp) g += T(1) - a[c] / b[c];
                d_p2[i * k + c] += weight * inv_2m * g;
            }
        }
    }
    return loss * inv_2m;
}

// ---------------------------------------------------------------------------
// Weighted total
// ---------------------------------------------------------------------------

template <class T>
inline LossBreakdown<T> total_loss(T comp1, T comp2, T unif, T orth, T bal, T cons,
                                   const LossWeights<T>& w) {
    LossBreakdown<T> out;
    out.comp1 = comp1;
    out.comp2 = comp2;
    out.unif = unif;
    out.orth = orth;
    out.bal = bal;
    out.cons = cons;
    out.total = comp1 + comp2 + w.unif * unif + w.orth * orth + w.bal * bal + w.cons * cons;
    return out;
}

}  // namespace dgc
