#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace dgc;
using dgc_test::random_assignment;
using dgc_test::random_bank;
using dgc_test::random_unit_vector;

namespace {

template <class T>
CentroidBank<T> bank_from(const std::vector<std::vector<T>>& rows) {
    CentroidBank<T> bank;
    bank.k = static_cast<u32>(rows.size());
    bank.dim = static_cast<u32>(rows[0].size());
    for (const auto& row : rows) bank.centers.insert(bank.centers.end(), row.begin(), row.end());
    return bank;
}

}  // namespace

// ---------------------------------------------------------------------------
// Compactness
// ---------------------------------------------------------------------------

TEST(Compactness, ZeroWhenPixelsSitOnAssignedCenters) {
    const auto bank = bank_from<f64>({{1, 0, 0}, {0, 1, 0}});
    const std::vector<f64> z = {1, 0, 0, 0, 1, 0};  // two pixels on their centers
    const std::vector<f64> p = {1, 0, 0, 1};        // one-hot matching
    EXPECT_NEAR(compactness<f64>(p.data(), z.data(), 2, bank), 0.0, 1e-12);
}

TEST(Compactness, OrthogonalPixelScoresOne) {
    const auto bank = bank_from<f64>({{1, 0, 0}});  // single-center bank, built by hand
    const std::vector<f64> z = {0, 1, 0};
    const std::vector<f64> p = {1};
    EXPECT_NEAR(compactness<f64>(p.data(), z.data(), 1, bank), 1.0, 1e-12);
}

TEST(Compactness, MatchesBruteForceSummation) {
    Rng rng(30);
    const auto bank = random_bank<f64>(rng, 2, 4);
    std::vector<f64> z;
    for (int i = 0; i < 2; ++i) {
        const auto v = random_unit_vector(rng, 4);
        z.insert(z.end(), v.begin(), v.end());
    }
    const auto assign = random_assignment<f64>(rng, 2, 2);
    // independent oracle: explicit loop over (pixel, cluster)
    f64 expect = 0;
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < 2; ++c) {
            f64 dot = 0;
            for (int d = 0; d < 4; ++d) dot += z[i * 4 + d] * bank.center(c)[d];
            expect += assign.row(i)[c] * (1.0 - dot);
        }
    expect /= 2.0;
    EXPECT_NEAR(compactness<f64>(assign.p.data(), z.data(), 2, bank), expect, 1e-12);
}

// ---------------------------------------------------------------------------
// Orthogonality
// ---------------------------------------------------------------------------

TEST(Orthogonality, ZeroOnOrthonormalBank) {
    const auto bank = bank_from<f64>({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
    EXPECT_NEAR(orthogonality(bank), 0.0, 1e-12);
}

TEST(Orthogonality, DuplicatedUnitCentersScoreTwo) {
    const auto bank = bank_from<f64>({{0, 1, 0}, {0, 1, 0}});
    EXPECT_NEAR(orthogonality(bank), 2.0, 1e-12);
}

TEST(Orthogonality, HalfCosineCaseScoresOne) {
    const f64 r = std::sqrt(0.5);
    const auto bank = bank_from<f64>({{1, 0, 0, 0}, {r, r, 0, 0}});
    // dot = sqrt(1/2), squared = 1/2, two ordered pairs -> 1.0
    EXPECT_NEAR(orthogonality(bank), 1.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Balance
// ---------------------------------------------------------------------------

TEST(Balance, ZeroAtUniformMarginal) {
    SoftAssignment<f64> assign;
    assign.rows = 4;
    assign.k = 4;
    assign.p.assign(16, 0.25);
    EXPECT_NEAR(balance(assign), 0.0, 1e-12);
}

TEST(Balance, OneHotMarginalScoresLogK) {
    SoftAssignment<f64> assign;
    assign.rows = 3;
    assign.k = 4;
    assign.p.assign(12, 0.0);
    for (int i = 0; i < 3; ++i) assign.p[i * 4 + 2] = 1.0;
    EXPECT_NEAR(balance(assign), std::log(4.0), 1e-6);  // ~1.3863
}

TEST(Balance, HalfSplitMarginalScoresLogTwo) {
    // marginal (0.5, 0.5, 0, 0): rows one-hot on clusters 0 and 1
    SoftAssignment<f64> assign;
    assign.rows = 2;
    assign.k = 4;
    assign.p.assign(8, 0.0);
    assign.p[0] = 1.0;
    assign.p[4 + 1] = 1.0;
    EXPECT_NEAR(balance(assign), std::log(2.0), 1e-6);
}

TEST(Balance, MinimizedExactlyAtUniformOverSimplexGrid) {
    // sweep a discretized 3-simplex; the uniform point is the unique zero
    const int steps = 20;
    f64 best = std::numeric_limits<f64>::max();
    f64 at_uniform = -1;
    for (int a = 0; a <= steps; ++a)
        for (int b = 0; b + a <= steps; ++b) {
            const f64 pa = static_cast<f64>(a) / steps;
            const f64 pb = static_cast<f64>(b) / steps;
            const f64 pc = 1.0 - pa - pb;
            SoftAssignment<f64> assign;
            assign.rows = 1;
            assign.k = 3;
            assign.p = {pa, pb, pc};
            const f64 value = balance(assign);
            EXPECT_GE(value, -1e-12);
            best = std::min(best, value);
            if (std::abs(pa - 1.0 / 3) < 1e-9 && std::abs(pb - 1.0 / 3) < 1e-9) at_uniform = value;
        }
    // grid does not contain exact 1/3 for steps=20; check the exact point too
    SoftAssignment<f64> uniform;
    uniform.rows = 1;
    uniform.k = 3;
    uniform.p = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    EXPECT_NEAR(balance(uniform), 0.0, 1e-12);
    EXPECT_GE(best, -1e-12);
    (void)at_uniform;
}

// ---------------------------------------------------------------------------
// Pseudo-labels
// ---------------------------------------------------------------------------

TEST(PseudoLabels, BalanceBoundForced) {
    Rng rng(31);
    const auto assign = random_assignment<f64>(rng, 8, 4);
    const auto labels = uniform_pseudo_labels(assign);
    std::vector<int> counts(4, 0);
    for (u32 l : labels) ++counts[l];
    for (int c : counts) EXPECT_EQ(c, 2);
}

TEST(PseudoLabels, PerfectlyBalancedOneHotPreserved) {
    SoftAssignment<f64> assign;
    assign.rows = 6;
    assign.k = 3;
    assign.p.assign(18, 0.0);
    const u32 hard[6] = {0, 1, 2, 2, 0, 1};
    for (int i = 0; i < 6; ++i) assign.p[i * 3 + hard[i]] = 1.0;
    const auto labels = uniform_pseudo_labels(assign);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(labels[i], hard[i]);
}

TEST(PseudoLabels, GreedyMatchesSpecExample) {
    SoftAssignment<f64> assign;
    assign.rows = 4;
    assign.k = 2;
    assign.p = {0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4};
    const auto labels = uniform_pseudo_labels(assign);
    EXPECT_EQ(labels, (std::vector<u32>{0, 0, 1, 1}));
}

TEST(PseudoLabels, BoundHoldsWhenKDoesNotDivideM) {
    Rng rng(32);
    for (int trial = 0; trial < 200; ++trial) {
        const u32 m = 5 + static_cast<u32>(rng.below(60));
        const u32 k = 2 + static_cast<u32>(rng.below(7));
        if (m < k) continue;
        const auto assign = random_assignment<f64>(rng, m, k);
        const auto labels = uniform_pseudo_labels(assign);
        std::vector<u32> counts(k, 0);
        for (u32 l : labels) {
            ASSERT_LT(l, k);
            ++counts[l];
        }
        for (u32 c : counts) {
            EXPECT_GE(c, m / k);
            EXPECT_LE(c, (m + k - 1) / k);
        }
    }
}

TEST(PseudoLabels, FewerPixelsThanClustersRejected) {
    Rng rng(33);
    const auto assign = random_assignment<f64>(rng, 3, 4);
    EXPECT_THROW(uniform_pseudo_labels(assign), ConfigError);
}

// ---------------------------------------------------------------------------
// Uniform loss
// ---------------------------------------------------------------------------

TEST(UniformLoss, ZeroWhenOneHotAgrees) {
    SoftAssignment<f64> assign;
    assign.rows = 4;
    assign.k = 2;
    assign.p = {1, 0, 0, 1, 1, 0, 0, 1};
    const std::vector<u32> labels = {0, 1, 0, 1};
    EXPECT_NEAR(uniform_loss(assign, labels), 0.0, 1e-9);
}

TEST(UniformLoss, UniformRowsScoreLogK) {
    SoftAssignment<f64> assign;
    assign.rows = 4;
    assign.k = 4;
    assign.p.assign(16, 0.25);
    const std::vector<u32> labels = {0, 1, 2, 3};
    EXPECT_NEAR(uniform_loss(assign, labels), std::log(4.0), 1e-9);
}

TEST(UniformLoss, TwoPixelClosedForm) {
    SoftAssignment<f64> assign;
    assign.rows = 2;
    assign.k = 2;
    assign.p = {0.5, 0.5, 0.25, 0.75};
    const std::vector<u32> labels = {0, 0};  // probabilities 0.5 and 0.25
    EXPECT_NEAR(uniform_loss(assign, labels), 1.0397207708399179, 1e-9);
}

TEST(UniformLoss, LengthMismatchRejected) {
    SoftAssignment<f64> assign;
    assign.rows = 2;
    assign.k = 2;
    assign.p = {1, 0, 0, 1};
    EXPECT_THROW(uniform_loss(assign, std::vector<u32>{0}), ConfigError);
}

// ---------------------------------------------------------------------------
// Consistency
// ---------------------------------------------------------------------------

TEST(Consistency, ZeroAtEquality) {
    Rng rng(34);
    const auto assign = random_assignment<f64>(rng, 12, 3);
    EXPECT_NEAR(consistency<f64>(assign.p.data(), assign.p.data(), 12, 3), 0.0, 1e-12);
}

TEST(Consistency, SymmetricInArguments) {
    Rng rng(35);
    const auto a = random_assignment<f64>(rng, 10, 4);
    const auto b = random_assignment<f64>(rng, 10, 4);
    const f64 ab = consistency<f64>(a.p.data(), b.p.data(), 10, 4);
    const f64 ba = consistency<f64>(b.p.data(), a.p.data(), 10, 4);
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_GE(ab, 0.0);
}

TEST(Consistency, CrossedPairClosedForm) {
    // p1 = (0.8, 0.2), p2 = (0.2, 0.8): symmetric KL = 1.2 ln 4, averaged -> 0.6 ln 4
    const std::vector<f64> p1 = {0.8, 0.2}, p2 = {0.2, 0.8};
    EXPECT_NEAR(consistency<f64>(p1.data(), p2.data(), 1, 2), 0.6 * std::log(4.0), 1e-9);
    EXPECT_NEAR(consistency<f64>(p1.data(), p2.data(), 1, 2), 0.8317766166719343, 1e-9);
}

// ---------------------------------------------------------------------------
// Total loss
// ---------------------------------------------------------------------------

TEST(TotalLoss, ZeroWeightsKeepOnlyCompactness) {
    LossWeights<f64> w;
    w.unif = w.orth = w.bal = w.cons = 0.0;
    const auto bd = total_loss<f64>(0.5, 0.25, 10, 10, 10, 10, w);
    EXPECT_DOUBLE_EQ(bd.total, 0.75);
}

TEST(TotalLoss, PerfectConfigurationScoresZero) {
    // orthonormal bank, pixels on their centers, one-hot balanced assignment,
    // equal overlap distributions: every term vanishes
    const auto bank = bank_from<f64>({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    std::vector<f64> z = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::vector<f64> p = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const f64 comp = compactness<f64>(p.data(), z.data(), 3, bank);
    const f64 orth = orthogonality(bank);
    const f64 bal = balance<f64>(p.data(), 3, 3);
    const std::vector<u32> labels = uniform_pseudo_labels<f64>(p.data(), 3, 3);
    const f64 unif = uniform_loss<f64>(p.data(), 3, 3, labels);
    const f64 cons = consistency<f64>(p.data(), p.data(), 3, 3);
    const auto bd = total_loss<f64>(comp, comp, unif, orth, bal, cons, LossWeights<f64>{});
    EXPECT_NEAR(bd.total, 0.0, 1e-7);
}

TEST(TotalLoss, AssemblyMatchesIndependentRecomputation) {
    Rng rng(36);
    LossWeights<f64> w;
    w.unif = 0.7;
    w.orth = 0.3;
    w.bal = 1.1;
    w.cons = 0.9;
    for (int trial = 0; trial < 20; ++trial) {
        const f64 c1 = rng.uniform(), c2 = rng.uniform(), un = rng.uniform(), ort = rng.uniform();
        const f64 ba = rng.uniform(), co = rng.uniform();
        const auto bd = total_loss<f64>(c1, c2, un, ort, ba, co, w);
        const f64 expect = c1 + c2 + 0.7 * un + 0.3 * ort + 1.1 * ba + 0.9 * co;
        EXPECT_DOUBLE_EQ(bd.total, expect);
    }
}

// ---------------------------------------------------------------------------
// Gradients of every differentiable term vs central finite differences
// ---------------------------------------------------------------------------

namespace {

constexpr f64 kStep = 1e-6;
constexpr f64 kTol = 1e-6;

void expect_close(f64 analytic, f64 fd, const std::string& what) {
    const f64 denom = std::max({std::abs(analytic), std::abs(fd), 1e-4});
    EXPECT_LT(std::abs(analytic - fd) / denom, kTol) << what << " analytic " << analytic << " fd " << fd;
}

}  // namespace

TEST(LossGradients, CompactnessMatchesFiniteDifferences) {
    Rng rng(37);
    const u32 n = 6, k = 3, dim = 4;
    auto bank = random_bank<f64>(rng, k, dim);
    std::vector<f64> z;
    for (u32 i = 0; i < n; ++i) {
        const auto v = random_unit_vector(rng, dim);
        z.insert(z.end(), v.begin(), v.end());
    }
    auto assign = random_assignment<f64>(rng, n, k);

    std::vector<f64> d_p(n * k, 0), d_z(n * dim, 0), d_c(k * dim, 0);
    compactness<f64>(assign.p.data(), z.data(), n, bank, d_p.data(), d_z.data(), d_c.data());

    auto eval = [&] { return compactness<f64>(assign.p.data(), z.data(), n, bank); };
    for (size_t j = 0; j < assign.p.size(); ++j) {
        const f64 saved = assign.p[j];
        assign.p[j] = saved + kStep;
        const f64 up = eval();
        assign.p[j] = saved - kStep;
        const f64 down = eval();
        assign.p[j] = saved;
        expect_close(d_p[j], (up - down) / (2 * kStep), "d_p[" + std::to_string(j) + "]");
    }
    for (size_t j = 0; j < z.size(); ++j) {
        const f64 saved = z[j];
        z[j] = saved + kStep;
        const f64 up = eval();
        z[j] = saved - kStep;
        const f64 down = eval();
        z[j] = saved;
        expect_close(d_z[j], (up - down) / (2 * kStep), "d_z[" + std::to_string(j) + "]");
    }
    for (size_t j = 0; j < bank.centers.size(); ++j) {
        const f64 saved = bank.centers[j];
        bank.centers[j] = saved + kStep;
        const f64 up = eval();
        bank.centers[j] = saved - kStep;
        const f64 down = eval();
        bank.centers[j] = saved;
        expect_close(d_c[j], (up - down) / (2 * kStep), "d_c[" + std::to_string(j) + "]");
    }
}

TEST(LossGradients, OrthogonalityMatchesFiniteDifferences) {
    Rng rng(38);
    auto bank = random_bank<f64>(rng, 4, 5);
    std::vector<f64> d_c(bank.centers.size(), 0);
    orthogonality(bank, d_c.data());
    for (size_t j = 0; j < bank.centers.size(); ++j) {
        const f64 saved = bank.centers[j];
        bank.centers[j] = saved + kStep;
        const f64 up = orthogonality(bank);
        bank.centers[j] = saved - kStep;
        const f64 down = orthogonality(bank);
        bank.centers[j] = saved;
        expect_close(d_c[j], (up - down) / (2 * kStep), "orth d_c[" + std::to_string(j) + "]");
    }
}

TEST(LossGradients, BalanceMatchesFiniteDifferences) {
    Rng rng(39);
    auto assign = random_assignment<f64>(rng, 10, 4);
    std::vector<f64> d_p(assign.p.size(), 0);
    balance<f64>(assign.p.data(), 10, 4, d_p.data());
    for (size_t j = 0; j < assign.p.size(); ++j) {
        const f64 saved = assign.p[j];
        assign.p[j] = saved + kStep;
        const f64 up = balance<f64>(assign.p.data(), 10, 4);
        assign.p[j] = saved - kStep;
        const f64 down = balance<f64>(assign.p.data(), 10, 4);
        assign.p[j] = saved;
        expect_close(d_p[j], (up - down) / (2 * kStep), "bal d_p[" + std::to_string(j) + "]");
    }
}

TEST(LossGradients, UniformLossMatchesFiniteDifferences) {
    Rng rng(40);
    auto assign = random_assignment<f64>(rng, 8, 4);
    const auto labels = uniform_pseudo_labels(assign);  // frozen while differentiating
    std::vector<f64> d_p(assign.p.size(), 0);
    uniform_loss<f64>(assign.p.data(), 8, 4, labels, d_p.data());
    for (size_t j = 0; j < assign.p.size(); ++j) {
        const f64 saved = assign.p[j];
        assign.p[j] = saved + kStep;
        const f64 up = uniform_loss<f64>(assign.p.data(), 8, 4, labels);
        assign.p[j] = saved - kStep;
        const f64 down = uniform_loss<f64>(assign.p.data(), 8, 4, labels);
        assign.p[j] = saved;
        expect_close(d_p[j], (up - down) / (2 * kStep), "unif d_p[" + std::to_string(j) + "]");
    }
}

TEST(LossGradients, ConsistencyMatchesFiniteDifferences) {
    Rng rng(41);
    auto a = random_assignment<f64>(rng, 6, 3);
    auto b = random_assignment<f64>(rng, 6, 3);
    std::vector<f64> d_a(a.p.size(), 0), d_b(b.p.size(), 0);
    consistency<f64>(a.p.data(), b.p.data(), 6, 3, d_a.data(), d_b.data());
    for (size_t j = 0; j < a.p.size(); ++j) {
        const f64 saved = a.p[j];
        a.p[j] = saved + kStep;
        const f64 up = consistency<f64>(a.p.data(), b.p.data(), 6, 3);
        a.p[j] = saved - kStep;
        const f64 down = consistency<f64>(a.p.data(), b.p.data(), 6, 3);
        a.p[j] = saved;
        expect_close(d_a[j], (up - down) / (2 * kStep), "cons d_a[" + std::to_string(j) + "]");
    }
    for (size_t j = 0; j < b.p.size(); ++j) {
        const f64 saved = b.p[j];
        b.p[j] = saved + kStep;
        const f64 up = consistency<f64>(a.p.data(), b.p.data(), 6, 3);
        b.p[j] = saved - kStep;
        const f64 down = consistency<f64>(a.p.data(), b.p.data(), 6, 3);
        b.p[j] = saved;
        expect_close(d_b[j], (up - down) / (2 * kStep), "cons d_b[" + std::to_string(j) + "]");
    }
}

TEST(LossGradients, SoftAssignBackwardMatchesFiniteDifferences) {
    // composite: z, c -> softmax assignment -> weighted sum of probabilities
    Rng rng(42);
    const u32 n = 5, k = 3, dim = 4;
    auto bank = random_bank<f64>(rng, k, dim);
    std::vector<f64> z;
    for (u32 i = 0; i < n; ++i) {
        const auto v = random_unit_vector(rng, dim);
        z.insert(z.end(), v.begin(), v.end());
    }
    std::vector<f64> weights(n * k);
    for (f64& w : weights) w = rng.uniform(-1.0, 1.0);

    auto eval = [&] {
        const auto assign = soft_assign_flat<f64>(z.data(), n, dim, bank);
        f64 loss = 0;
        for (size_t i = 0; i < assign.p.size(); ++i) loss += weights[i] * assign.p[i];
        return loss;
    };

    const auto assign = soft_assign_flat<f64>(z.data(), n, dim, bank);
    std::vector<f64> d_z(n * dim, 0), d_c(k * dim, 0);
    soft_assign_backward<f64>(z.data(), n, dim, bank, assign, weights.data(), d_z.data(), d_c.data());

    for (size_t j = 0; j < z.size(); ++j) {
        const f64 saved = z[j];
        z[j] = saved + kStep;
        const f64 up = eval();
        z[j] = saved - kStep;
        const f64 down = eval();
        z[j] = saved;
        expect_close(d_z[j], (up - down) / (2 * kStep), "softmax d_z[" + std::to_string(j) + "]");
    }
    for (size_t j = 0; j < bank.centers.size(); ++j) {
        const f64 saved = bank.centers[j];
        bank.centers[j] = saved + kStep;
        const f64 up = eval();
        bank.centers[j] = saved - kStep;
        const f64 down = eval();
        bank.centers[j] = saved;
        expect_close(d_c[j], (up - down) / (2 * kStep), "softmax d_c[" + std::to_string(j) + "]");
    }
}
