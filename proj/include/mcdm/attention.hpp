#pragma once

// Attention variants used by the denoiser and the motion prior:
//
//   * exact scaled dot-product attention (optionally causal),
//   * frame-aligned attention: keys from reference tokens, values from each
//     archived frame, shared learnable queries,
//   * kernelized fast attention with positive orthogonal random features,
//     linear in sequence length, with a streaming evaluation path whose
//     scratch memory is independent of sequence length,
//   * the EMA motion memory and the memory-backed temporal attention that
//     concatenates memory slots with present-clip features along time and
//     keeps the trailing clip-length positions.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mcdm/tensor.hpp"

namespace mcdm {

// ---------------------------------------------------------------------------
// exact attention
// ---------------------------------------------------------------------------

// Softmax(Q K^T / sqrt(d)) V. With causal=true queries and keys must align
// (n == m) and logits at key j > query i are masked before the softmax; the
// mask offset of -1e30 underflows to an exact zero weight after
// max-subtraction, so future positions cannot perturb earlier outputs even
// at the bit level.
inline Tensor sdpa(const Tensor& Q, const Tensor& K, const Tensor& V, bool causal = false) {
    int64_t d = Q.dim(-1);
    if (K.dim(-1) != d)
        throw ShapeError("sdpa: query dim " + shape_str(Q.shape()) + " vs key dim " +
                         shape_str(K.shape()));
    int64_t n = Q.dim(-2), m = K.dim(-2);
    if (K.dim(-2) != V.dim(-2))
        throw ShapeError("sdpa: key/value length mismatch " + shape_str(K.shape()) + " vs " +
                         shape_str(V.shape()));
    Tensor scores = mul_scalar(matmul(Q, transpose_last(K)), 1.0 / std::sqrt(static_cast<double>(d)));
    if (causal) {
        if (n != m) throw ShapeError("sdpa: causal attention needs square logits");
        std::vector<double> mask(static_cast<size_t>(n * m), 0.0);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < m; ++j) mask[static_cast<size_t>(i * m + j)] = -1e30;
        scores = add(scores, Tensor::from({n, m}, std::move(mask)));
    }
    return matmul(softmax(scores, -1), V);
}

// ---------------------------------------------------------------------------
// frame-aligned attention
// ---------------------------------------------------------------------------

struct FrameAlignedParams {
    Tensor W_K;  // [d, d]
    Tensor W_V;  // [d, d]
    Tensor Q;    // [n, d] learnable query tokens

    int64_t n() const { return Q.dim(0); }
    int64_t d() const { return Q.dim(1); }
};

inline FrameAlignedParams make_frame_aligned(Rng& rng, int64_t n, int64_t d,
                                             bool requires_grad = true) {
    FrameAlignedParams p;
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.W_K = rng_tensor(rng, {d, d}, Dist::normal, requires_grad);
    p.W_V = rng_tensor(rng, {d, d}, Dist::normal, requires_grad);
    for (Tensor* t : {&p.W_K, &p.W_V}) {
        auto& v = t->mutable_data();
        for (double& x : v) x *= s;
        quantize_inplace(v);
    }
    p.Q = rng_tensor(rng, {n, d}, Dist::normal, requires_grad);
    return p;
}

// F_x: [b, 1, m, d] reference tokens, F_a: [b, a, m, d] archived-frame
// tokens. Per frame i, keys come from the reference (K = F_x W_K) and values
// from that frame (V_i = F_a[i] W_V); the shared queries attend each frame
// independently. Output [b, a, n, d].
inline Tensor frame_aligned_attention(const Tensor& F_x, const Tensor& F_a,
                                      const FrameAlignedParams& p) {
    if (F_x.ndim() != 4 || F_a.ndim() != 4)
        throw ShapeError("frame_aligned_attention expects rank-4 inputs");
    if (F_a.dim(1) < 1) throw ShapeError("empty archived clip");
    if (F_x.dim(-1) != p.d() || F_a.dim(-1) != p.d())
        throw ShapeError("frame_aligned_attention: embedding dim mismatch");
    Tensor K = matmul(F_x, p.W_K);  // [b, 1, m, d]
    Tensor V = matmul(F_a, p.W_V);  // [b, a, m, d]
    Tensor scores =
        mul_scalar(matmul(p.Q, transpose_last(K)), 1.0 / std::sqrt(static_cast<double>(p.d())));
    // scores [b, 1, n, m] broadcast over the frame axis of V
    return matmul(softmax(scores, -1), V);  // [b, a, n, d]
}

// ---------------------------------------------------------------------------
// positive orthogonal random features
// ---------------------------------------------------------------------------

struct FavorFeatures {
    Tensor omega;  // [r, d], block-orthogonal rows with chi-resampled norms
    uint64_t redraw_seed = 0;

    int64_t r() const { return omega.dim(0); }
    int64_t d() const { return omega.dim(1); }
};

// Rows are drawn standard normal, orthogonalized blockwise with modified
// Gram-Schmidt, then rescaled to the norm of an independent gaussian row so
// the marginal row distribution matches the unstructured estimator.
inline FavorFeatures make_favor(uint64_t seed, int64_t r, int64_t d) {
    if (r < 1 || d < 1) throw ShapeError("favor features need r >= 1, d >= 1");
    Rng rng(seed);
    std::vector<double> rows(static_cast<size_t>(r * d));
    for (int64_t block = 0; block < r; block += d) {
        int64_t bs = std::min(d, r - block);
        std::vector<std::vector<double>> g(static_cast<size_t>(bs),
                                           std::vector<double>(static_cast<size_t>(d)));
        for (auto& row : g)
            for (double& v : row) v = rng.normal();
        for (int64_t i = 0; i < bs; ++i) {
            auto& ri = g[static_cast<size_t>(i)];
            for (int64_t j = 0; j < i; ++j) {
                const auto& rj = g[static_cast<size_t>(j)];
                double dot = 0.0;
                for (int64_t k = 0; k < d; ++k)
                    dot += ri[static_cast<size_t>(k)] * rj[static_cast<size_t>(k)];
                for (int64_t k = 0; k < d; ++k)
                    ri[static_cast<size_t>(k)] -= dot * rj[static_cast<size_t>(k)];
            }
            double norm = 0.0;
            for (double v : ri) norm += v * v;
            norm = std::sqrt(norm);
            if (norm < 1e-12) throw GradError("degenerate favor block");
            // resample the row norm from the gaussian length distribution
            double target = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                double z = rng.normal();
                target += z * z;
            }
            target = std::sqrt(target);
            for (int64_t k = 0; k < d; ++k) {
                ri[static_cast<size_t>(k)] *= target / norm;
                rows[static_cast<size_t>((block + i) * d + k)] = ri[static_cast<size_t>(k)];
            }
        }
    }
    FavorFeatures f;
    f.omega = Tensor::from({r, d}, std::move(rows));
    f.redraw_seed = seed;
    return f;
}

// phi(x) = exp(omega x - |x|^2 / 2) / sqrt(r), strictly positive.
inline Tensor favor_map(const Tensor& x, const FavorFeatures& feats) {
    if (x.dim(-1) != feats.d())
        throw ShapeError("favor_map: dim mismatch " + shape_str(x.shape()) + " vs omega " +
                         shape_str(feats.omega.shape()));
    Tensor proj = matmul(x, transpose_last(feats.omega));          // [.., r]
    Tensor half_sq = mul_scalar(sum(square(x), -1, true), 0.5);    // [.., 1]
    return mul_scalar(exp(sub(proj, half_sq)),
                      1.0 / std::sqrt(static_cast<double>(feats.r())));
}

// phi(Q) (phi(K)^T V) / (phi(Q) phi(K)^T 1). Q and K arrive pre-scaled by
// d^(-1/4) when the caller wants softmax-attention semantics. Runs in
// O(L r d) time; the streaming variant below keeps only O(r d) scratch.
inline Tensor fast_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                             const FavorFeatures& feats) {
    Tensor phi_q = favor_map(Q, feats);
    Tensor phi_k = favor_map(K, feats);
    Tensor kv = matmul(transpose_last(phi_k), V);               // [.., r, dv]
    Tensor num = matmul(phi_q, kv);                             // [.., L, dv]
    Tensor ksum = sum(phi_k, -2, true);                         // [.., 1, r]
    Tensor den = matmul(phi_q, transpose_last(ksum));           // [.., L, 1]
    for (double v : den.data())
        if (!(v >= 1e-9)) throw GradError("kernel underflow");
    return div(num, den);
}

namespace detail {

// vector buffer that reports itself to the active allocation meter
struct ScratchVec {
    std::vector<double> v;
    AllocMeter* meter = nullptr;
    int64_t metered = 0;
    explicit ScratchVec(size_t n) : v(n, 0.0) {
        if (AllocMeter* m = active_meter()) {
            meter = m;
            metered = static_cast<int64_t>(n * sizeof(double));
            m->add(metered);
        }
    }
    ~ScratchVec() {
        if (meter) meter->sub(metered);
    }
    double* data() { return v.data(); }
    double& operator[](size_t i) { return v[i]; }
};

inline void favor_phi_row(const double* x, const double* omega, int64_t r, int64_t d,
                          double inv_sqrt_r, double* phi) {
    double half_sq = 0.0;
    for (int64_t k = 0; k < d; ++k) half_sq += x[k] * x[k];
    half_sq *= 0.5;
    for (int64_t j = 0; j < r; ++j) {
        double dot = 0.0;
        const double* row = omega + j * d;
        for (int64_t k = 0; k < d; ++k) dot += x[k] * row[k];
        phi[j] = std::exp(dot - half_sq) * inv_sqrt_r;
    }
}

}  // namespace detail

// Streaming evaluation: accumulators kv [r, dv] and ksum [r] are filled in a
// single pass over the keys, then each query row is produced independently.
// Scratch memory is O(r dv) regardless of sequence length. Only rows
// [q_begin, Lq) of the query set are evaluated and written to `out`
// (row-major [Lq - q_begin, dv]). Summation orders match the taped path, so
// the two agree bitwise in f64 mode.
inline void fast_attention_stream(const double* Q, int64_t Lq, const double* K, const double* V,
                                  int64_t Lk, int64_t d, int64_t dv, const FavorFeatures& feats,
                                  double* out, int64_t q_begin = 0) {
    int64_t r = feats.r();
    const double* omega = feats.omega.data().data();
    double inv_sqrt_r = 1.0 / std::sqrt(static_cast<double>(r));
    detail::ScratchVec kv(static_cast<size_t>(r * dv));
    detail::ScratchVec ksum(static_cast<size_t>(r));
    detail::ScratchVec phi(static_cast<size_t>(r));
    for (int64_t j = 0; j < Lk; ++j) {
        detail::favor_phi_row(K + j * d, omega, r, d, inv_sqrt_r, phi.data());
        const double* vrow = V + j * dv;
        for (int64_t f = 0; f < r; ++f) {
            double p = phi[static_cast<size_t>(f)];
            ksum[static_cast<size_t>(f)] += p;
            double* kvrow = kv.data() + f * dv;
            for (int64_t c = 0; c < dv; ++c) kvrow[c] += p * vrow[c];
        }
    }
    for (int64_t i = q_begin; i < Lq; ++i) {
        detail::favor_phi_row(Q + i * d, omega, r, d, inv_sqrt_r, phi.data());
        double den = 0.0;
        for (int64_t f = 0; f < r; ++f) den += phi[static_cast<size_t>(f)] * ksum[static_cast<size_t>(f)];
        if (!(den >= 1e-9)) throw GradError("kernel underflow");
        double* orow = out + (i - q_begin) * dv;
        for (int64_t c = 0; c < dv; ++c) {
            double acc = 0.0;
            for (int64_t f = 0; f < r; ++f) acc += phi[static_cast<size_t>(f)] * kv[static_cast<size_t>(f * dv + c)];
            orow[c] = acc / den;
        }
    }
}

// ---------------------------------------------------------------------------
// EMA motion memory
// ---------------------------------------------------------------------------

struct MemoryState {
    Tensor M;           // [a, s, d] memory slots
    double alpha = 0.1;  // balance between past and current features
    int64_t f = 0;      // clip counter; 0 means uninitialized

    bool initialized() const { return f >= 1; }
};

// M_1 = F; memory holds detached values (it is carried state, not a live
// graph edge).
inline MemoryState memory_init(const Tensor& F_ac_ref, double alpha) {
    MemoryState s;
    s.M = F_ac_ref.detach();
    s.alpha = alpha;
    s.f = 1;
    return s;
}

// M_f = alpha * M_{f-1} + (1 - alpha) * F; f increments by exactly one.
inline MemoryState memory_update(const MemoryState& state, const Tensor& F_ac_ref) {
    if (!state.initialized()) throw GradError("memory_update on uninitialized memory");
    if (state.M.shape() != F_ac_ref.shape())
        throw ShapeError("memory_update: shape " + shape_str(F_ac_ref.shape()) +
                         " does not match memory " + shape_str(state.M.shape()));
    const auto ms = state.M.data();
    const auto fs = F_ac_ref.data();
    std::vector<double> out(ms.size());
    double a = state.alpha;
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * ms[i] + (1.0 - a) * fs[i];
    MemoryState next;
    next.M = Tensor::from(state.M.shape(), std::move(out));
    next.alpha = state.alpha;
    next.f = state.f + 1;
    return next;
}

// ---------------------------------------------------------------------------
// memory-backed temporal attention
// ---------------------------------------------------------------------------

// Core routine shared by the plain kernel and the denoiser sublayer: given
// per-token time sequences q/k/v of shape [seq, s, d] (time-major), attend
// along time independently per spatial token and return the last `keep`
// positions, shape [keep, s, dv]. Chooses the streaming path when no input
// participates in the tape.
inline Tensor time_attention_tail(const Tensor& q, const Tensor& k, const Tensor& v, int64_t keep,
                                  const FavorFeatures& feats) {
    int64_t seq = q.dim(0), s = q.dim(1), d = q.dim(2);
    int64_t dv = v.dim(2);
    if (k.dim(0) != seq || v.dim(0) != seq || k.dim(1) != s || v.dim(1) != s)
        throw ShapeError("time_attention_tail: mismatched sequence shapes");
    if (keep < 1 || keep > seq) throw ShapeError("time_attention_tail: bad keep length");

    bool taped = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    if (taped) {
        Tensor qs = permute(q, {1, 0, 2});  // [s, seq, d]
        Tensor ks = permute(k, {1, 0, 2});
        Tensor vs = permute(v, {1, 0, 2});
        Tensor att = fast_attention(qs, ks, vs, feats);       // [s, seq, dv]
        Tensor tail = slice(att, 1, seq - keep, keep);        // [s, keep, dv]
        return permute(tail, {1, 0, 2});                      // [keep, s, dv]
    }

    // streaming: per spatial token, O(r d) scratch independent of seq
    std::vector<double> out(static_cast<size_t>(keep * s * dv));
    detail::ScratchVec qbuf(static_cast<size_t>(seq * d));
    detail::ScratchVec kbuf(static_cast<size_t>(seq * d));
    detail::ScratchVec vbuf(static_cast<size_t>(seq * dv));
    detail::ScratchVec obuf(static_cast<size_t>(keep * dv));
    const auto qd = q.data(), kd = k.data(), vd = v.data();
    for (int64_t tok = 0; tok < s; ++tok) {
        for (int64_t t = 0; t < seq; ++t) {
            for (int64_t c = 0; c < d; ++c) {
                qbuf[static_cast<size_t>(t * d + c)] = qd[static_cast<size_t>((t * s + tok) * d + c)];
                kbuf[static_cast<size_t>(t * d + c)] = kd[static_cast<size_t>((t * s + tok) * d + c)];
            }
            for (int64_t c = 0; c < dv; ++c)
                vbuf[static_cast<size_t>(t * dv + c)] = vd[static_cast<size_t>((t * s + tok) * dv + c)];
        }
        fast_attention_stream(qbuf.data(), seq, kbuf.data(), vbuf.data(), seq, d, dv, feats,
                              obuf.data(), seq - keep);
        for (int64_t t = 0; t < keep; ++t)
            for (int64_t c = 0; c < dv; ++c)
                out[static_cast<size_t>((t * s + tok) * dv + c)] =
                    obuf[static_cast<size_t>(t * dv + c)];
    }
    return Tensor::from({keep, s, dv}, std::move(out));
}

// Concatenate memory slots with present-clip features along time, run fast
// attention over the combined axis per spatial token, and keep the trailing
// clip-length positions.
inline Tensor memory_temporal_attention(const Tensor& F_pc_ref, const MemoryState& state,
                                        const FavorFeatures& feats) {
    if (!state.initialized())
        throw GradError("memory_temporal_attention: uninitialized memory; call memory_init");
    if (F_pc_ref.ndim() != 3 || state.M.ndim() != 3)
        throw ShapeError("memory_temporal_attention expects [time, tokens, dim]");
    if (F_pc_ref.dim(1) != state.M.dim(1) || F_pc_ref.dim(2) != state.M.dim(2))
        throw ShapeError("memory_temporal_attention: memory shape " + shape_str(state.M.shape()) +
                         " incompatible with " + shape_str(F_pc_ref.shape()));
    int64_t T = F_pc_ref.dim(0);
    int64_t d = F_pc_ref.dim(2);
    Tensor seq = concat({state.M, F_pc_ref}, 0);  // [a + T, s, d]
    Tensor qk = mul_scalar(seq, std::pow(static_cast<double>(d), -0.25));
    return time_attention_tail(qk, qk, seq, T, feats);
}

// ---------------------------------------------------------------------------
// sinusoidal position table (shared by temporal and sequence blocks)
// ---------------------------------------------------------------------------

inline Tensor sinusoid_table(int64_t len, int64_t d) {
    std::vector<double> data(static_cast<size_t>(len * d));
    for (int64_t p = 0; p < len; ++p)
        for (int64_t c = 0; c < d; ++c) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(c / 2) / static_cast<double>(d));
            double arg = static_cast<double>(p) * freq;
            data[static_cast<size_t>(p * d + c)] = (c % 2 == 0) ? std::sin(arg) : std::cos(arg);
        }
    return Tensor::from({len, d}, std::move(data));
}

}  // namespace mcdm
