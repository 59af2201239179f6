#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mcdm/attention.hpp"

using namespace mcdm;

namespace {

double rel_frobenius(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)];
        num += d * d;
        den += b.data()[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("sdpa with a single key returns the value row") {
    PrecisionGuard pg(Precision::f64);
    Rng r(1);
    Tensor Q = rng_tensor(r, {3, 4}, Dist::normal);
    Tensor K = rng_tensor(r, {1, 4}, Dist::normal);
    Tensor V = rng_tensor(r, {1, 5}, Dist::normal);
    Tensor out = sdpa(Q, K, V);
    CHECK(out.shape() == Shape{3, 5});
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 5; ++j) CHECK(out.at({i, j}) == V.at({0, j}));
}

TEST_CASE("sdpa with equal logits averages the value rows") {
    PrecisionGuard pg(Precision::f64);
    Rng r(2);
    Tensor Q = Tensor::zeros({2, 4});  // zero queries -> all logits equal
    Tensor K = rng_tensor(r, {5, 4}, Dist::normal);
    Tensor V = rng_tensor(r, {5, 3}, Dist::normal);
    Tensor out = sdpa(Q, K, V);
    for (int64_t j = 0; j < 3; ++j) {
        double m = 0.0;
        for (int64_t i = 0; i < 5; ++i) m += V.at({i, j});
        m /= 5.0;
        CHECK(out.at({0, j}) == doctest::Approx(m).epsilon(1e-12));
        CHECK(out.at({1, j}) == doctest::Approx(m).epsilon(1e-12));
    }
}

TEST_CASE("sdpa matches direct softmax evaluation") {
    PrecisionGuard pg(Precision::f64);
    Tensor Q = Tensor::from({1, 2}, {1, 0});
    Tensor K = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor V = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor out = sdpa(Q, K, V);
    CHECK(out.at({0, 0}) == doctest::Approx(0.6698).epsilon(2e-4));
    CHECK(out.at({0, 1}) == doctest::Approx(0.3302).epsilon(2e-4));
}

TEST_CASE("sdpa rejects mismatched dims") {
    Tensor Q = Tensor::zeros({2, 3});
    Tensor K = Tensor::zeros({2, 4});
    Tensor V = Tensor::zeros({2, 4});
    CHECK_THROWS_AS(sdpa(Q, K, V), ShapeError);
}

TEST_CASE("causal sdpa is bit-invariant to future perturbations") {
    PrecisionGuard pg(Precision::f64);
    Rng r(3);
    Tensor Q = rng_tensor(r, {6, 4}, Dist::normal);
    Tensor K = rng_tensor(r, {6, 4}, Dist::normal);
    Tensor V = rng_tensor(r, {6, 4}, Dist::normal);
    Tensor base = sdpa(Q, K, V, true);

    for (int64_t j = 2; j < 6; ++j) {
        std::vector<double> kd(K.data().begin(), K.data().end());
        std::vector<double> vd(V.data().begin(), V.data().end());
        for (int64_t c = 0; c < 4; ++c) {
            kd[static_cast<size_t>(j * 4 + c)] += 3.5;
            vd[static_cast<size_t>(j * 4 + c)] -= 2.25;
        }
        Tensor out = sdpa(Q, Tensor::from({6, 4}, kd), Tensor::from({6, 4}, vd), true);
        for (int64_t i = 0; i < j; ++i)
            for (int64_t c = 0; c < 4; ++c) CHECK(out.at({i, c}) == base.at({i, c}));
    }
}

TEST_CASE("exact attention outputs stay within the value envelope") {
    PrecisionGuard pg(Precision::f64);
    Rng r(4);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor Q = rng_tensor(r, {4, 6}, Dist::normal);
        Tensor K = rng_tensor(r, {7, 6}, Dist::normal);
        Tensor V = rng_tensor(r, {7, 3}, Dist::normal);
        Tensor out = sdpa(Q, K, V);
        for (int64_t j = 0; j < 3; ++j) {
            double lo = 1e300, hi = -1e300;
            for (int64_t i = 0; i < 7; ++i) {
                lo = std::min(lo, V.at({i, j}));
                hi = std::max(hi, V.at({i, j}));
            }
            for (int64_t i = 0; i < 4; ++i) {
                CHECK(out.at({i, j}) >= lo - 1e-12);
                CHECK(out.at({i, j}) <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("frame-aligned attention with identity projections and equal logits") {
    PrecisionGuard pg(Precision::f64);
    Rng r(5);
    int64_t m = 4, n = 3, d = 4;
    FrameAlignedParams p;
    std::vector<double> eye(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < d; ++i) eye[static_cast<size_t>(i * d + i)] = 1.0;
    p.W_K = Tensor::from({d, d}, eye);
    p.W_V = Tensor::from({d, d}, eye);
    p.Q = rng_tensor(r, {n, d}, Dist::normal);

    // identical reference tokens -> all key logits equal per query
    Tensor row = rng_tensor(r, {1, 1, 1, d}, Dist::normal);
    Tensor F_x = broadcast_to(row, {1, 1, m, d});
    Tensor F_a = rng_tensor(r, {1, 1, m, d}, Dist::normal);
    Tensor out = frame_aligned_attention(F_x, F_a, p);
    CHECK(out.shape() == Shape{1, 1, n, d});
    for (int64_t q = 0; q < n; ++q)
        for (int64_t c = 0; c < d; ++c) {
            double mean = 0.0;
            for (int64_t t = 0; t < m; ++t) mean += F_a.at({0, 0, t, c});
            mean /= static_cast<double>(m);
            CHECK(out.at({0, 0, q, c}) == doctest::Approx(mean).epsilon(1e-12));
        }
}

TEST_CASE("frame-aligned attention is equivariant to frame permutations") {
    PrecisionGuard pg(Precision::f64);
    Rng r(6);
    int64_t a = 5, m = 3, n = 2, d = 4;
    auto p = make_frame_aligned(r, n, d, false);
    Tensor F_x = rng_tensor(r, {1, 1, m, d}, Dist::normal);
    Tensor F_a = rng_tensor(r, {1, a, m, d}, Dist::normal);
    Tensor base = frame_aligned_attention(F_x, F_a, p);

    std::vector<int64_t> perm = {3, 0, 4, 2, 1};
    std::vector<double> pd(static_cast<size_t>(a * m * d));
    for (int64_t i = 0; i < a; ++i)
        for (int64_t j = 0; j < m * d; ++j)
            pd[static_cast<size_t>(i * m * d + j)] =
                F_a.data()[static_cast<size_t>(perm[static_cast<size_t>(i)] * m * d + j)];
    Tensor out = frame_aligned_attention(F_x, Tensor::from({1, a, m, d}, pd), p);
    // per-frame independence makes the permuted outputs bit-identical
    for (int64_t i = 0; i < a; ++i)
        for (int64_t j = 0; j < n * d; ++j)
            CHECK(out.data()[static_cast<size_t>(i * n * d + j)] ==
                  base.data()[static_cast<size_t>(perm[static_cast<size_t>(i)] * n * d + j)]);
}

TEST_CASE("frame-aligned attention matches a per-frame loop") {
    PrecisionGuard pg(Precision::f64);
    Rng r(11);
    int64_t a = 2, m = 3, n = 2, d = 4;
    auto p = make_frame_aligned(r, n, d, false);
    Tensor F_x = rng_tensor(r, {1, 1, m, d}, Dist::normal);
    Tensor F_a = rng_tensor(r, {1, a, m, d}, Dist::normal);
    Tensor out = frame_aligned_attention(F_x, F_a, p);

    // straight-line reimplementation, one frame at a time
    Tensor K = matmul(reshape(F_x, {m, d}), p.W_K);
    for (int64_t i = 0; i < a; ++i) {
        Tensor Vi = matmul(reshape(slice(F_a, 1, i, 1), {m, d}), p.W_V);
        Tensor oi = sdpa(p.Q, K, Vi);
        for (int64_t q = 0; q < n; ++q)
            for (int64_t c = 0; c < d; ++c)
                CHECK(out.at({0, i, q, c}) == doctest::Approx(oi.at({q, c})).epsilon(1e-6));
    }
}

TEST_CASE("frame-aligned attention rejects mismatched embeddings") {
    Rng r(7);
    auto p = make_frame_aligned(r, 2, 4, false);
    Tensor F_a = Tensor::zeros({1, 1, 3, 4});
    Tensor wrong = Tensor::zeros({1, 1, 3, 5});
    CHECK_THROWS_AS(frame_aligned_attention(wrong, F_a, p), ShapeError);
}

TEST_CASE("favor map of the zero vector is uniform") {
    PrecisionGuard pg(Precision::f64);
    auto feats = make_favor(9, 16, 4);
    Tensor x = Tensor::zeros({3, 4});
    Tensor phi = favor_map(x, feats);
    for (double v : phi.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));  // 1/sqrt(16)
}

TEST_CASE("favor map is strictly positive") {
    PrecisionGuard pg(Precision::f64);
    Rng r(10);
    auto feats = make_favor(10, 32, 6);
    Tensor x = rng_tensor(r, {20, 6}, Dist::normal);
    Tensor phi = favor_map(x, feats);
    for (double v : phi.data()) CHECK(v > 0.0);
}

TEST_CASE("favor features estimate the exponential kernel") {
    PrecisionGuard pg(Precision::f64);
    Rng r(12);
    int64_t d = 8;
    std::vector<double> qv(static_cast<size_t>(d)), kv(static_cast<size_t>(d));
    for (auto& v : qv) v = 0.35 * r.normal();
    for (auto& v : kv) v = 0.35 * r.normal();
    Tensor q = Tensor::from({1, d}, qv);
    Tensor k = Tensor::from({1, d}, kv);
    double dot = 0.0;
    for (int64_t i = 0; i < d; ++i) dot += qv[static_cast<size_t>(i)] * kv[static_cast<size_t>(i)];
    double exact = std::exp(dot);

    double acc = 0.0;
    for (uint64_t redraw = 0; redraw < 20; ++redraw) {
        auto feats = make_favor(1000 + redraw, 256, d);
        Tensor pq = favor_map(q, feats);
        Tensor pk = favor_map(k, feats);
        double est = 0.0;
        for (int64_t i = 0; i < 256; ++i)
            est += pq.data()[static_cast<size_t>(i)] * pk.data()[static_cast<size_t>(i)];
        acc += est;
    }
    acc /= 20.0;
    CHECK(std::abs(acc - exact) / exact < 0.10);
}

TEST_CASE("fast attention with a single key returns the value row") {
    PrecisionGuard pg(Precision::f64);
    Rng r(13);
    auto feats = make_favor(13, 32, 4);
    Tensor Q = rng_tensor(r, {5, 4}, Dist::normal);
    Tensor K = rng_tensor(r, {1, 4}, Dist::normal);
    Tensor V = rng_tensor(r, {1, 3}, Dist::normal);
    Tensor out = fast_attention(Q, K, V, feats);
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 3; ++j)
            CHECK(out.at({i, j}) == doctest::Approx(V.at({0, j})).epsilon(1e-12));

    // with power-of-two values the ratio cancels bit-exactly
    Tensor V2 = Tensor::from({1, 3}, {0.5, 2.0, -4.0});
    Tensor out2 = fast_attention(Q, K, V2, feats);
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 3; ++j) CHECK(out2.at({i, j}) == V2.at({0, j}));
}

TEST_CASE("fast attention error vs exact attention shrinks with feature count") {
    PrecisionGuard pg(Precision::f64);
    int64_t L = 32, d = 32;
    Rng r(21);
    Tensor Q = rng_tensor(r, {L, d}, Dist::normal);
    Tensor K = rng_tensor(r, {L, d}, Dist::normal);
    Tensor V = rng_tensor(r, {L, d}, Dist::normal);
    Tensor exact = sdpa(Q, K, V);
    double scale = std::pow(static_cast<double>(d), -0.25);
    Tensor Qs = mul_scalar(Q, scale);
    Tensor Ks = mul_scalar(K, scale);

    std::vector<double> medians;
    for (int64_t rf : {16, 64, 256, 1024}) {
        std::vector<double> errs;
        for (uint64_t seed = 0; seed < 10; ++seed) {
            auto feats = make_favor(500 + seed, rf, d);
            errs.push_back(rel_frobenius(fast_attention(Qs, Ks, V, feats), exact));
        }
        std::sort(errs.begin(), errs.end());
        medians.push_back(0.5 * (errs[4] + errs[5]));
    }
    for (size_t i = 1; i < medians.size(); ++i) CHECK(medians[i] <= medians[i - 1]);
}

TEST_CASE("fast attention is accurate at r=1024") {
    PrecisionGuard pg(Precision::f64);
    int64_t L = 64, d = 16;
    Rng r(3);
    // entries at 0.2 sigma keep |q.k|/sqrt(d) of order one, the regime the
    // blocks hold themselves in; estimator variance grows exponentially in
    // the query/key norms, so wild inputs are out of contract
    Tensor Q = mul_scalar(rng_tensor(r, {L, d}, Dist::normal), 0.2);
    Tensor K = mul_scalar(rng_tensor(r, {L, d}, Dist::normal), 0.2);
    Tensor V = rng_tensor(r, {L, d}, Dist::normal);
    Tensor exact = sdpa(Q, K, V);
    double scale = std::pow(static_cast<double>(d), -0.25);
    auto feats = make_favor(3, 1024, d);
    Tensor approx = fast_attention(mul_scalar(Q, scale), mul_scalar(K, scale), V, feats);
    CHECK(rel_frobenius(approx, exact) < 0.05);
}

TEST_CASE("fast attention reports kernel underflow") {
    PrecisionGuard pg(Precision::f64);
    auto feats = make_favor(14, 8, 4);
    Tensor Q = Tensor::full({2, 4}, 30.0);  // |q|^2/2 = 1800 dominates any projection
    Tensor K = Tensor::full({2, 4}, 30.0);
    Tensor V = Tensor::zeros({2, 2});
    CHECK_THROWS_WITH_AS(fast_attention(Q, K, V, feats), "kernel underflow", GradError);
}

TEST_CASE("streaming fast attention matches the taped path bitwise in f64") {
    PrecisionGuard pg(Precision::f64);
    Rng r(15);
    int64_t L = 12, d = 6, dv = 5;
    auto feats = make_favor(15, 24, d);
    Tensor Q = rng_tensor(r, {L, d}, Dist::normal);
    Tensor K = rng_tensor(r, {L, d}, Dist::normal);
    Tensor V = rng_tensor(r, {L, dv}, Dist::normal);
    Tensor taped = fast_attention(Q, K, V, feats);
    std::vector<double> out(static_cast<size_t>(L * dv));
    fast_attention_stream(Q.data().data(), L, K.data().data(), V.data().data(), L, d, dv, feats,
                          out.data());
    for (int64_t i = 0; i < L * dv; ++i)
        CHECK(out[static_cast<size_t>(i)] == taped.data()[static_cast<size_t>(i)]);
}

TEST_CASE("streaming fast attention scratch is independent of sequence length") {
    PrecisionGuard pg(Precision::f64);
    int64_t d = 8, dv = 8;
    auto feats = make_favor(16, 32, d);
    auto peak_for = [&](int64_t L) {
        Rng r(17);
        Tensor Q = rng_tensor(r, {L, d}, Dist::normal);
        Tensor V = rng_tensor(r, {L, dv}, Dist::normal);
        std::vector<double> out(static_cast<size_t>(L * dv));
        AllocMeter meter;
        {
            MeterScope scope(&meter);
            fast_attention_stream(Q.data().data(), L, Q.data().data(), V.data().data(), L, d, dv,
                                  feats, out.data());
        }
        return meter.peak;
    };
    int64_t p64 = peak_for(64), p512 = peak_for(512);
    CHECK(p64 == p512);

    // exact attention materializes L x L logits: quadratic growth
    auto sdpa_peak = [&](int64_t L) {
        Rng r(18);
        Tensor Q = rng_tensor(r, {L, d}, Dist::normal);
        Tensor V = rng_tensor(r, {L, dv}, Dist::normal);
        AllocMeter meter;
        {
            MeterScope scope(&meter);
            Tensor out = sdpa(Q, Q, V);
        }
        return meter.peak;
    };
    CHECK(sdpa_peak(512) > 16 * sdpa_peak(64));
}

TEST_CASE("memory init records features, counter and alpha") {
    Rng r(19);
    Tensor F = rng_tensor(r, {4, 3, 5}, Dist::normal);
    MemoryState s = memory_init(F, 0.1);
    CHECK(s.f == 1);
    CHECK(s.alpha == 0.1);
    for (int64_t i = 0; i < F.numel(); ++i)
        CHECK(s.M.data()[static_cast<size_t>(i)] == F.data()[static_cast<size_t>(i)]);
}

TEST_CASE("memory update limits") {
    Rng r(20);
    Tensor F1 = rng_tensor(r, {2, 2, 2}, Dist::normal);
    Tensor F2 = rng_tensor(r, {2, 2, 2}, Dist::normal);

    MemoryState zero = memory_init(F1, 0.0);
    zero = memory_update(zero, F2);
    for (int64_t i = 0; i < F2.numel(); ++i)
        CHECK(zero.M.data()[static_cast<size_t>(i)] == F2.data()[static_cast<size_t>(i)]);

    MemoryState one = memory_init(F1, 1.0);
    MemoryState one2 = memory_update(memory_update(one, F2), F2);
    CHECK(one2.f == 3);
    for (int64_t i = 0; i < F1.numel(); ++i)
        CHECK(one2.M.data()[static_cast<size_t>(i)] == F1.data()[static_cast<size_t>(i)]);
}

TEST_CASE("memory update scalar proxy") {
    MemoryState s = memory_init(Tensor::from({1, 1, 1}, {1.0}), 0.5);
    s = memory_update(s, Tensor::from({1, 1, 1}, {3.0}));
    CHECK(s.M.item() == 2.0);
    CHECK(s.f == 2);
    s = memory_update(s, Tensor::from({1, 1, 1}, {5.0}));
    CHECK(s.M.item() == 3.5);
    CHECK(s.f == 3);
}

TEST_CASE("memory update rejects shape mismatch and uninitialized state") {
    Rng r(21);
    MemoryState s = memory_init(rng_tensor(r, {2, 2, 2}, Dist::normal), 0.1);
    CHECK_THROWS_AS(memory_update(s, rng_tensor(r, {2, 2, 3}, Dist::normal)), ShapeError);
    MemoryState fresh;
    CHECK_THROWS_AS(memory_update(fresh, rng_tensor(r, {2, 2, 2}, Dist::normal)), GradError);
}

TEST_CASE("iterated memory updates match the closed form") {
    PrecisionGuard pg(Precision::f64);
    Rng r(22);
    for (double alpha : {0.05, 0.3, 0.7, 0.95}) {
        int64_t F_MAX = 64;
        Tensor M1 = rng_tensor(r, {2, 3, 4}, Dist::normal);
        std::vector<Tensor> updates;
        for (int64_t j = 2; j <= F_MAX; ++j)
            updates.push_back(rng_tensor(r, {2, 3, 4}, Dist::normal));

        MemoryState s = memory_init(M1, alpha);
        for (const auto& F : updates) s = memory_update(s, F);
        CHECK(s.f == F_MAX);

        // M_f = alpha^(f-1) M_1 + (1 - alpha) sum_{j=2..f} alpha^(f-j) F_j
        for (int64_t i = 0; i < M1.numel(); ++i) {
            double expect = std::pow(alpha, static_cast<double>(F_MAX - 1)) *
                            M1.data()[static_cast<size_t>(i)];
            for (int64_t j = 2; j <= F_MAX; ++j)
                expect += (1.0 - alpha) * std::pow(alpha, static_cast<double>(F_MAX - j)) *
                          updates[static_cast<size_t>(j - 2)].data()[static_cast<size_t>(i)];
            CHECK(std::abs(s.M.data()[static_cast<size_t>(i)] - expect) < 1e-6);
        }
    }
}

TEST_CASE("memory temporal attention shape and finiteness with duplicated memory") {
    PrecisionGuard pg(Precision::f64);
    Rng r(23);
    int64_t T = 4, s_tok = 3, d = 6;
    Tensor F = rng_tensor(r, {T, s_tok, d}, Dist::normal);
    MemoryState mem = memory_init(F, 0.1);  // a == T, M == F
    auto feats = make_favor(23, 64, d);
    Tensor out = memory_temporal_attention(F, mem, feats);
    CHECK(out.shape() == Shape{T, s_tok, d});
    for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("memory temporal attention approaches exact attention at high r") {
    PrecisionGuard pg(Precision::f64);
    Rng r(24);
    int64_t T = 6, a = 4, s_tok = 3, d = 16;
    Tensor F = mul_scalar(rng_tensor(r, {T, s_tok, d}, Dist::normal), 0.15);
    Tensor M = mul_scalar(rng_tensor(r, {a, s_tok, d}, Dist::normal), 0.15);
    MemoryState mem = memory_init(M, 0.1);
    auto feats = make_favor(24, 1024, d);
    Tensor fast = memory_temporal_attention(F, mem, feats);

    // oracle: per spatial token, exact attention over the concatenated axis
    double worst = 0.0;
    Tensor seq = concat({M, F}, 0);  // [a+T, s, d]
    for (int64_t tok = 0; tok < s_tok; ++tok) {
        std::vector<double> sub(static_cast<size_t>((a + T) * d));
        for (int64_t t = 0; t < a + T; ++t)
            for (int64_t c = 0; c < d; ++c)
                sub[static_cast<size_t>(t * d + c)] = seq.at({t, tok, c});
        Tensor st = Tensor::from({a + T, d}, sub);
        Tensor exact = sdpa(st, st, st);
        double num = 0.0, den = 0.0;
        for (int64_t t = 0; t < T; ++t)
            for (int64_t c = 0; c < d; ++c) {
                double e = exact.at({a + t, c});
                double diff = fast.at({t, tok, c}) - e;
                num += diff * diff;
                den += e * e;
            }
        worst = std::max(worst, std::sqrt(num / den));
    }
    CHECK(worst < 0.05);
}

TEST_CASE("memory temporal attention with zero memory matches a straight-line oracle") {
    PrecisionGuard pg(Precision::f64);
    Rng r(25);
    int64_t T = 4, a = 4, s_tok = 2, d = 6;
    Tensor F = rng_tensor(r, {T, s_tok, d}, Dist::normal);
    MemoryState mem = memory_init(Tensor::zeros({a, s_tok, d}), 0.5);
    auto feats = make_favor(25, 128, d);
    Tensor out = memory_temporal_attention(F, mem, feats);

    // straight-line: concatenate the zero block explicitly and evaluate the
    // combined sequence position by position
    double scale = std::pow(static_cast<double>(d), -0.25);
    for (int64_t tok = 0; tok < s_tok; ++tok) {
        std::vector<double> sub(static_cast<size_t>((a + T) * d), 0.0);
        for (int64_t t = 0; t < T; ++t)
            for (int64_t c = 0; c < d; ++c)
                sub[static_cast<size_t>((a + t) * d + c)] = F.at({t, tok, c});
        Tensor st = Tensor::from({a + T, d}, sub);
        Tensor expected = fast_attention(mul_scalar(st, scale), mul_scalar(st, scale), st, feats);
        for (int64_t t = 0; t < T; ++t)
            for (int64_t c = 0; c < d; ++c)
                CHECK(out.at({t, tok, c}) ==
                      doctest::Approx(expected.at({a + t, c})).epsilon(1e-9));
    }
}

TEST_CASE("memory temporal attention streaming path equals taped path") {
    PrecisionGuard pg(Precision::f64);
    Rng r(26);
    int64_t T = 5, s_tok = 3, d = 8;
    Tensor M = rng_tensor(r, {4, s_tok, d}, Dist::normal);
    MemoryState mem = memory_init(M, 0.1);
    auto feats = make_favor(26, 32, d);

    Tensor F_plain = rng_tensor(r, {T, s_tok, d}, Dist::normal);
    std::vector<double> same(F_plain.data().begin(), F_plain.data().end());
    Tensor F_grad = Tensor::from({T, s_tok, d}, same, /*requires_grad=*/true);

    Tensor streamed = memory_temporal_attention(F_plain, mem, feats);  // no grad -> streaming
    Tensor taped = memory_temporal_attention(F_grad, mem, feats);      // taped
    for (int64_t i = 0; i < streamed.numel(); ++i)
        CHECK(streamed.data()[static_cast<size_t>(i)] == taped.data()[static_cast<size_t>(i)]);
}

TEST_CASE("gradient flows through frame-aligned and fast attention") {
    Rng r(27);
    int64_t m = 3, n = 2, d = 4;
    auto p = make_frame_aligned(r, n, d, false);
    Tensor F_a = rng_tensor(r, {1, 2, m, d}, Dist::normal);
    auto f1 = [&](const Tensor& fx) {
        return sum(square(frame_aligned_attention(reshape(fx, {1, 1, m, d}), F_a, p)));
    };
    CHECK(grad_check(f1, rng_tensor(r, {m, d}, Dist::normal), 1e-6) < 1e-4);

    auto feats = make_favor(27, 16, d);
    Tensor K = rng_tensor(r, {5, d}, Dist::normal);
    Tensor V = rng_tensor(r, {5, d}, Dist::normal);
    auto f2 = [&](const Tensor& q) { return sum(square(fast_attention(q, K, V, feats))); };
    CHECK(grad_check(f2, rng_tensor(r, {5, d}, Dist::normal), 1e-6) < 1e-4);
    auto f3 = [&](const Tensor& k) { return sum(square(fast_attention(V, k, V, feats))); };
    CHECK(grad_check(f3, K, 1e-6) < 1e-4);
}
