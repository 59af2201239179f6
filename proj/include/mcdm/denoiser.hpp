#pragma once

// Video denoiser built from transformer blocks with four attention
// sublayers: spatial self-attention per frame, two parallel cross
// attentions (archived-clip and present-clip conditioning) whose outputs
// are residual-summed, and memory-backed temporal attention over the
// concatenation of EMA memory slots with the present-clip cross features.
// Also the lossless space-to-depth latent, the clip sampler, and the
// semi-autoregressive long-horizon generation loop with a sliding archived
// window.

#include <optional>
#include <string>
#include <vector>

#include "mcdm/archived.hpp"
#include "mcdm/attention.hpp"
#include "mcdm/diffusion.hpp"
#include "mcdm/prior.hpp"

namespace mcdm {

// ---------------------------------------------------------------------------
// lossless latent transform (factor-4 space to depth)
// ---------------------------------------------------------------------------

constexpr int64_t kPatch = 4;
constexpr int64_t kLatentDepth = kPatch * kPatch;

// [H, W] -> [s, 16] with token index gy * (W/4) + gx and channel dy * 4 + dx
inline Tensor space_to_depth(const Tensor& frame) {
    if (frame.ndim() != 2) throw ShapeError("space_to_depth expects a 2-d frame");
    int64_t H = frame.dim(0), W = frame.dim(1);
    if (H % kPatch != 0 || W % kPatch != 0)
        throw ShapeError("space_to_depth: dims " + shape_str(frame.shape()) +
                         " not divisible by " + std::to_string(kPatch));
    int64_t gh = H / kPatch, gw = W / kPatch;
    std::vector<double> out(static_cast<size_t>(gh * gw * kLatentDepth));
    const auto fd = frame.data();
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx)
            for (int64_t dy = 0; dy < kPatch; ++dy)
                for (int64_t dx = 0; dx < kPatch; ++dx)
                    out[static_cast<size_t>((gy * gw + gx) * kLatentDepth + dy * kPatch + dx)] =
                        fd[static_cast<size_t>((gy * kPatch + dy) * W + gx * kPatch + dx)];
    return Tensor::from({gh * gw, kLatentDepth}, std::move(out));
}

inline Tensor depth_to_space(const Tensor& tokens, int64_t H, int64_t W) {
    if (tokens.ndim() != 2 || tokens.dim(1) != kLatentDepth)
        throw ShapeError("depth_to_space expects [s, 16]");
    int64_t gh = H / kPatch, gw = W / kPatch;
    if (tokens.dim(0) != gh * gw)
        throw ShapeError("depth_to_space: token count does not match target resolution");
    std::vector<double> out(static_cast<size_t>(H * W));
    const auto td = tokens.data();
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx)
            for (int64_t dy = 0; dy < kPatch; ++dy)
                for (int64_t dx = 0; dx < kPatch; ++dx)
                    out[static_cast<size_t>((gy * kPatch + dy) * W + gx * kPatch + dx)] =
                        td[static_cast<size_t>((gy * gw + gx) * kLatentDepth + dy * kPatch + dx)];
    return Tensor::from({H, W}, std::move(out));
}

// clip frames [T, H, W] -> [T, s, 16]
inline Tensor clip_to_latent(const Tensor& frames) {
    std::vector<Tensor> rows;
    for (int64_t t = 0; t < frames.dim(0); ++t)
        rows.push_back(space_to_depth(reshape(slice(frames, 0, t, 1),
                                              {frames.dim(1), frames.dim(2)})));
    return stack(rows);
}

// ---------------------------------------------------------------------------
// denoiser
// ---------------------------------------------------------------------------

enum class TemporalMode {
    memory_efficient,  // EMA memory slots + fast attention, constant footprint
    full_history,      // exact attention over every past clip's features
    present_only       // conventional temporal attention over F_ac_ref + F_pc_ref
};

class Denoiser {
  public:
    struct Config {
        int64_t T = 16;
        int64_t d_lat = kLatentDepth;
        int64_t d_model = 32;
        int64_t n_blocks = 4;
        int64_t d_ac = 32;  // archived-token dim
        int64_t d_pc = 32;  // motion-token dim
        int64_t ffn_mult = 2;
        int64_t r_features = 64;
        bool zero_residual_init = true;
        bool use_posenc = true;
    };

    struct Inputs {
        Tensor F_ac;  // [a, n, d_ac]
        Tensor F_pc;  // [T, c, d_pc]
        std::vector<MemoryState>* mems = nullptr;  // one per block (memory mode)
        TemporalMode mode = TemporalMode::memory_efficient;
        std::vector<std::vector<Tensor>>* histories = nullptr;  // per block (full history)
        AllocMeter* temporal_meter = nullptr;
        std::vector<Tensor>* fac_ref_capture = nullptr;
        std::vector<Tensor>* fpc_ref_capture = nullptr;
        bool skip_temporal = false;  // conditioning-only pass used to prime memory
    };

    Denoiser(Config cfg, uint64_t seed) : cfg_(cfg) {
        Rng rng(Rng::mix(seed, 0xDE401ULL));
        int64_t dm = cfg_.d_model;
        store_.add("den.in.w", linear_init(rng, cfg_.d_lat, dm));
        store_.add("den.in.b", Tensor::zeros({dm}, true));
        store_.add("den.temb.w", linear_init(rng, dm, dm));
        store_.add("den.temb.b", Tensor::zeros({dm}, true));
        for (int64_t i = 0; i < cfg_.n_blocks; ++i) {
            std::string p = "den.b" + std::to_string(i) + ".";
            auto lin = [&](int64_t in, int64_t out) { return linear_init(rng, in, out); };
            auto res = [&](int64_t in, int64_t out) {
                return cfg_.zero_residual_init ? Tensor::zeros({in, out}, true) : lin(in, out);
            };
            store_.add(p + "self.ln.g", Tensor::full({dm}, 1.0, true));
            store_.add(p + "self.ln.b", Tensor::zeros({dm}, true));
            store_.add(p + "self.wq", lin(dm, dm));
            store_.add(p + "self.wk", lin(dm, dm));
            store_.add(p + "self.wv", lin(dm, dm));
            store_.add(p + "self.wo", res(dm, dm));
            store_.add(p + "cross.ln.g", Tensor::full({dm}, 1.0, true));
            store_.add(p + "cross.ln.b", Tensor::zeros({dm}, true));
            store_.add(p + "ca.wq", lin(dm, dm));
            store_.add(p + "ca.wk", lin(cfg_.d_ac, dm));
            store_.add(p + "ca.wv", lin(cfg_.d_ac, dm));
            store_.add(p + "ca.wo", res(dm, dm));
            store_.add(p + "cp.wq", lin(dm, dm));
            store_.add(p + "cp.wk", lin(cfg_.d_pc, dm));
            store_.add(p + "cp.wv", lin(cfg_.d_pc, dm));
            store_.add(p + "cp.wo", res(dm, dm));
            store_.add(p + "tmp.ln.g", Tensor::full({dm}, 1.0, true));
            store_.add(p + "tmp.ln.b", Tensor::zeros({dm}, true));
            store_.add(p + "tmp.wq", lin(dm, dm));
            store_.add(p + "tmp.wk", lin(dm, dm));
            store_.add(p + "tmp.wv", lin(dm, dm));
            store_.add(p + "tmp.wo", res(dm, dm));
            store_.add(p + "ffn.ln.g", Tensor::full({dm}, 1.0, true));
            store_.add(p + "ffn.ln.b", Tensor::zeros({dm}, true));
            store_.add(p + "ffn.w1", lin(dm, dm * cfg_.ffn_mult));
            store_.add(p + "ffn.b1", Tensor::zeros({dm * cfg_.ffn_mult}, true));
            store_.add(p + "ffn.w2", res(dm * cfg_.ffn_mult, dm));
            store_.add(p + "ffn.b2", Tensor::zeros({dm}, true));
            feats_.push_back(make_favor(Rng::mix(seed, 0xFEA70ULL + static_cast<uint64_t>(i)),
                                        cfg_.r_features, dm));
        }
        store_.add("den.out.w", linear_init(rng, dm, cfg_.d_lat));
        store_.add("den.out.b", Tensor::zeros({cfg_.d_lat}, true));
    }

    const Config& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const FavorFeatures& features(int64_t block) const {
        return feats_[static_cast<size_t>(block)];
    }

    // parameter groups for the staged-training freezing contract
    std::vector<std::string> group_self_arch() const {
        std::vector<std::string> out;
        for (const auto& n : store_.names()) {
            bool backbone = n.rfind("den.in.", 0) == 0 || n.rfind("den.out.", 0) == 0 ||
                            n.rfind("den.temb.", 0) == 0;
            bool block_part = n.find(".self.") != std::string::npos ||
                              n.find(".ca.") != std::string::npos ||
                              n.find(".cross.ln") != std::string::npos ||
                              n.find(".ffn.") != std::string::npos;
            if (backbone || block_part) out.push_back(n);
        }
        return out;
    }
    std::vector<std::string> group_present_temporal() const {
        std::vector<std::string> out;
        for (const auto& n : store_.names())
            if (n.find(".cp.") != std::string::npos || n.find(".tmp.") != std::string::npos)
                out.push_back(n);
        return out;
    }

    Tensor layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) const {
        Tensor mu = mean(x, -1, true);
        Tensor xc = sub(x, mu);
        Tensor var = mean(square(xc), -1, true);
        return add(mul(div(xc, sqrt(var + 1e-5)), g), b);
    }

    // rescale rows to a fixed norm; keeps the kernel features of the
    // temporal sublayer inside their accurate range for any parameter state
    Tensor qk_norm(const Tensor& x) const {
        double target = 0.8 * std::pow(static_cast<double>(cfg_.d_model), 0.25);
        Tensor norm = sqrt(sum(square(x), -1, true) + 1e-8);
        return mul_scalar(div(x, norm), target);
    }

    Tensor block_forward(int64_t i, const Tensor& x, const Inputs& in) const {
        std::string p = "den.b" + std::to_string(i) + ".";
        int64_t T = x.dim(0), s = x.dim(1), dm = cfg_.d_model;

        // (1) spatial self-attention per frame
        Tensor h = layer_norm(x, store_.get(p + "self.ln.g"), store_.get(p + "self.ln.b"));
        Tensor att = sdpa(matmul(h, store_.get(p + "self.wq")),
                          matmul(h, store_.get(p + "self.wk")),
                          matmul(h, store_.get(p + "self.wv")));
        Tensor x1 = add(x, matmul(att, store_.get(p + "self.wo")));

        // (2)(3) parallel cross attentions from a shared pre-norm
        Tensor hn = layer_norm(x1, store_.get(p + "cross.ln.g"), store_.get(p + "cross.ln.b"));
        Tensor ka = matmul(reshape(in.F_ac, {in.F_ac.dim(0) * in.F_ac.dim(1), cfg_.d_ac}),
                           store_.get(p + "ca.wk"));
        Tensor va = matmul(reshape(in.F_ac, {in.F_ac.dim(0) * in.F_ac.dim(1), cfg_.d_ac}),
                           store_.get(p + "ca.wv"));
        Tensor fac_ref = matmul(sdpa(matmul(hn, store_.get(p + "ca.wq")), ka, va),
                                store_.get(p + "ca.wo"));  // [T, s, dm]

        Tensor kp = matmul(in.F_pc, store_.get(p + "cp.wk"));  // [T, c, dm]
        Tensor vp = matmul(in.F_pc, store_.get(p + "cp.wv"));
        Tensor fpc_ref = matmul(sdpa(matmul(hn, store_.get(p + "cp.wq")), kp, vp),
                                store_.get(p + "cp.wo"));  // [T, s, dm]

        if (in.fac_ref_capture) in.fac_ref_capture->push_back(fac_ref.detach());
        if (in.fpc_ref_capture) in.fpc_ref_capture->push_back(fpc_ref.detach());

        Tensor x2 = add(x1, add(fac_ref, fpc_ref));

        // (4) temporal attention
        Tensor x3 = x2;
        if (!in.skip_temporal) {
            MeterScope meter(in.temporal_meter ? in.temporal_meter : active_meter());
            Tensor tm;
            if (in.mode == TemporalMode::memory_efficient) {
                if (!in.mems)
                    throw GradError("denoiser block " + std::to_string(i) +
                                    ": no memory provided; call memory_init via prime_memories");
                MemoryState& mem = (*in.mems)[static_cast<size_t>(i)];
                if (!mem.initialized())
                    throw GradError("denoiser block " + std::to_string(i) +
                                    ": uninitialized memory; call memory_init via prime_memories");
                Tensor seq = concat({mem.M, fpc_ref}, 0);  // [a + T, s, dm]
                Tensor seqn = layer_norm(seq, store_.get(p + "tmp.ln.g"),
                                         store_.get(p + "tmp.ln.b"));
                Tensor pos = reshape(sinusoid_table(seq.dim(0), dm), {seq.dim(0), 1, dm});
                Tensor withpos = add(seqn, pos);
                Tensor q = qk_norm(matmul(withpos, store_.get(p + "tmp.wq")));
                Tensor k = qk_norm(matmul(withpos, store_.get(p + "tmp.wk")));
                Tensor v = matmul(seqn, store_.get(p + "tmp.wv"));
                double sc = std::pow(static_cast<double>(dm), -0.25);
                Tensor tail = time_attention_tail(mul_scalar(q, sc), mul_scalar(k, sc), v, T,
                                                  feats_[static_cast<size_t>(i)]);
                tm = matmul(tail, store_.get(p + "tmp.wo"));
            } else if (in.mode == TemporalMode::full_history) {
                if (!in.histories)
                    throw GradError("denoiser block: full-history mode needs history buffers");
                std::vector<Tensor> parts = (*in.histories)[static_cast<size_t>(i)];
                parts.push_back(fpc_ref);
                Tensor seq = parts.size() == 1 ? parts[0] : concat(parts, 0);  // [L', s, dm]
                Tensor seqn = layer_norm(seq, store_.get(p + "tmp.ln.g"),
                                         store_.get(p + "tmp.ln.b"));
                Tensor pos = reshape(sinusoid_table(seq.dim(0), dm), {seq.dim(0), 1, dm});
                Tensor withpos = add(seqn, pos);
                Tensor q = permute(matmul(withpos, store_.get(p + "tmp.wq")), {1, 0, 2});
                Tensor k = permute(matmul(withpos, store_.get(p + "tmp.wk")), {1, 0, 2});
                Tensor v = permute(matmul(seqn, store_.get(p + "tmp.wv")), {1, 0, 2});
                Tensor full = sdpa(q, k, v);  // [s, L', dm] with L' x L' logits
                Tensor tail = permute(slice(full, 1, seq.dim(0) - T, T), {1, 0, 2});
                tm = matmul(tail, store_.get(p + "tmp.wo"));
            } else {  // present_only: conventional temporal attention
                Tensor seq = add(fac_ref, fpc_ref);
                Tensor seqn = layer_norm(seq, store_.get(p + "tmp.ln.g"),
                                         store_.get(p + "tmp.ln.b"));
                Tensor pos = reshape(sinusoid_table(T, dm), {T, 1, dm});
                Tensor withpos = add(seqn, pos);
                Tensor q = permute(matmul(withpos, store_.get(p + "tmp.wq")), {1, 0, 2});
                Tensor k = permute(matmul(withpos, store_.get(p + "tmp.wk")), {1, 0, 2});
                Tensor v = permute(matmul(seqn, store_.get(p + "tmp.wv")), {1, 0, 2});
                Tensor out = permute(sdpa(q, k, v), {1, 0, 2});
                tm = matmul(out, store_.get(p + "tmp.wo"));
            }
            x3 = add(x2, tm);
        }

        Tensor f = layer_norm(x3, store_.get(p + "ffn.ln.g"), store_.get(p + "ffn.ln.b"));
        f = matmul(gelu(add(matmul(f, store_.get(p + "ffn.w1")), store_.get(p + "ffn.b1"))),
                   store_.get(p + "ffn.w2"));
        return add(x3, add(f, store_.get(p + "ffn.b2")));
    }

    Tensor timestep_embedding(int64_t t) const {
        int64_t dm = cfg_.d_model;
        std::vector<double> row(static_cast<size_t>(dm));
        for (int64_t c = 0; c < dm; ++c) {
            double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(c / 2) / static_cast<double>(dm));
            double arg = static_cast<double>(t) * freq;
            row[static_cast<size_t>(c)] = (c % 2 == 0) ? std::sin(arg) : std::cos(arg);
        }
        Tensor base = Tensor::from({1, 1, dm}, std::move(row));
        return add(matmul(base, store_.get("den.temb.w")), store_.get("den.temb.b"));
    }

    // Z_t [T, s, d_lat] -> same-shape noise estimate
    Tensor forward(const Tensor& Z_t, int64_t t, const Inputs& in) const {
        if (Z_t.ndim() != 3 || Z_t.dim(2) != cfg_.d_lat)
            throw ShapeError("denoiser forward expects [T, s, " + std::to_string(cfg_.d_lat) +
                             "], got " + shape_str(Z_t.shape()));
        if (in.mode == TemporalMode::memory_efficient && !in.skip_temporal &&
            (!in.mems || in.mems->size() != static_cast<size_t>(cfg_.n_blocks)))
            throw GradError("denoiser forward: one MemoryState per block required");
        Tensor x = add(matmul(Z_t, store_.get("den.in.w")), store_.get("den.in.b"));
        x = add(x, timestep_embedding(t));
        if (cfg_.use_posenc)
            x = add(x, reshape(sinusoid_table(Z_t.dim(1), cfg_.d_model),
                               {1, Z_t.dim(1), cfg_.d_model}));
        for (int64_t i = 0; i < cfg_.n_blocks; ++i) x = block_forward(i, x, in);
        return add(matmul(x, store_.get("den.out.w")), store_.get("den.out.b"));
    }

    // Conditioning-only pass on a zero latent: computes each block's cross
    // outputs, initializes or updates the per-block memory with F_ac_ref,
    // and appends F_pc_ref to full-history buffers. This defines the
    // per-clip feature sequence that the EMA recurrence runs over.
    void prime_memories(const Tensor& F_ac, const Tensor& F_pc, int64_t s,
                        std::vector<MemoryState>& mems, double alpha, TemporalMode mode,
                        std::vector<std::vector<Tensor>>* histories = nullptr,
                        std::vector<Tensor>* fac_ref_out = nullptr) const {
        NoGradGuard ng;
        if (mems.size() != static_cast<size_t>(cfg_.n_blocks))
            mems.resize(static_cast<size_t>(cfg_.n_blocks));
        if (histories && histories->size() != static_cast<size_t>(cfg_.n_blocks))
            histories->resize(static_cast<size_t>(cfg_.n_blocks));
        Tensor zero = Tensor::zeros({cfg_.T, s, cfg_.d_lat});
        std::vector<Tensor> fac_refs, fpc_refs;
        Inputs in;
        in.F_ac = F_ac;
        in.F_pc = F_pc;
        in.skip_temporal = true;
        in.fac_ref_capture = &fac_refs;
        in.fpc_ref_capture = &fpc_refs;
        (void)forward(zero, 0, in);
        for (int64_t i = 0; i < cfg_.n_blocks; ++i) {
            const Tensor& fr = fac_refs[static_cast<size_t>(i)];
            MemoryState& mem = mems[static_cast<size_t>(i)];
            if (mode == TemporalMode::memory_efficient)
                mem = mem.initialized() ? memory_update(mem, fr) : memory_init(fr, alpha);
            if (mode == TemporalMode::full_history && histories)
                (*histories)[static_cast<size_t>(i)].push_back(
                    fpc_refs[static_cast<size_t>(i)]);
            if (fac_ref_out) fac_ref_out->push_back(fr);
        }
    }

    int64_t spatial_tokens_for(int64_t H, int64_t W) const { return (H / kPatch) * (W / kPatch); }

  private:
    Config cfg_;
    ParamStore store_;
    std::vector<FavorFeatures> feats_;
};

// ---------------------------------------------------------------------------
// clip sampling and long-horizon generation
// ---------------------------------------------------------------------------

inline Tensor generate_clip(const Denoiser& den, const Denoiser::Inputs& in,
                            const NoiseSchedule& sched, int64_t s_tokens, Rng& rng) {
    EpsModel model = [&](const Tensor& z, int64_t t) { return den.forward(z, t, in); };
    return ddpm_sample(model, sched, {den.config().T, s_tokens, den.config().d_lat}, rng);
}

struct RolloutConfig {
    int64_t total_frames = 16;
    int64_t a = 16;          // archived window length
    double alpha = 0.1;      // EMA coefficient
    NoiseSchedule video_sched;
    NoiseSchedule motion_sched;
    bool use_landmarks = false;
    TemporalMode mode = TemporalMode::memory_efficient;
    bool archive_ref_only = false;  // ablation: archived window = reference repeated
    uint64_t seed = 0;
};

struct RolloutProbe {
    std::vector<std::vector<Tensor>> fac_ref;    // [clip][block]
    std::vector<std::vector<Tensor>> mem_after;  // [clip][block]
    std::vector<Tensor> windows;                 // [clip] archived window [a, H, W]
    AllocMeter temporal_meter;
};

// Semi-autoregressive rollout: per clip, sample motion tokens from the
// prior for the next clip of audio, compute archived-clip features from the
// current window (reference repeated before anything was generated),
// update each block's memory, sample the clip, decode its frames, and slide
// the window over the newly emitted frames.
inline Tensor long_generate(const Denoiser& den, const MotionPrior& prior,
                            const ArchivedPrior& arch, const Tensor& ref_frame,
                            const AudioTrack& audio, const std::optional<Tensor>& landmarks,
                            const RolloutConfig& rc, RolloutProbe* probe = nullptr) {
    NoGradGuard ng;
    int64_t T = den.config().T;
    if (rc.total_frames % T != 0)
        throw ConfigError("long_generate: total_frames must be a multiple of the clip length " +
                          std::to_string(T));
    if (audio.frames() < rc.total_frames)
        throw ConfigError("long_generate: audio shorter than the requested rollout");
    if (rc.use_landmarks && (!landmarks || landmarks->dim(0) < rc.total_frames))
        throw ConfigError("long_generate: landmark track shorter than the rollout");
    int64_t H = ref_frame.dim(0), W = ref_frame.dim(1);
    int64_t s = den.spatial_tokens_for(H, W);
    int64_t clips = rc.total_frames / T;
    Rng rng(Rng::mix(rc.seed, 0x9011ULL));

    std::vector<Tensor> window(static_cast<size_t>(rc.a), ref_frame);
    std::vector<Tensor> out_frames;
    std::vector<MemoryState> mems;
    std::vector<std::vector<Tensor>> histories;

    for (int64_t k = 0; k < clips; ++k) {
        // motion tokens for this clip
        Tensor audio_rows = MotionPrior::lagged_audio_rows(audio.features, k * T, T);
        std::optional<Tensor> lm;
        if (rc.use_landmarks) lm = slice(*landmarks, 0, k * T, T);
        ConditioningBundle F_p = prior.make_conditioning(audio_rows, ref_frame, lm);
        MotionTokens motion = prior.sample_motion(F_p, rc.motion_sched, rng);
        MotionTokens full = motion;
        full.landmark_guided = false;  // denoiser always sees all three streams
        Tensor F_pc = MotionPrior::pack(full);

        // archived features from the current window
        Tensor win = stack(rc.archive_ref_only
                               ? std::vector<Tensor>(static_cast<size_t>(rc.a), ref_frame)
                               : window);
        Tensor F_ac = arch.forward(ref_frame, win);

        std::vector<Tensor> fac_ref_clip;
        den.prime_memories(F_ac, F_pc, s, mems, rc.alpha, rc.mode, &histories,
                           probe ? &fac_ref_clip : nullptr);
        if (probe) {
            probe->fac_ref.push_back(std::move(fac_ref_clip));
            std::vector<Tensor> snap;
            for (auto& m : mems) snap.push_back(m.initialized() ? m.M : Tensor());
            probe->mem_after.push_back(std::move(snap));
            probe->windows.push_back(win);
        }

        Denoiser::Inputs in;
        in.F_ac = F_ac;
        in.F_pc = F_pc;
        in.mems = &mems;
        in.mode = rc.mode;
        in.histories = &histories;
        in.temporal_meter = probe ? &probe->temporal_meter : nullptr;
        Tensor Z0 = generate_clip(den, in, rc.video_sched, s, rng);

        for (int64_t t = 0; t < T; ++t) {
            Tensor frame = depth_to_space(reshape(slice(Z0, 0, t, 1), {s, kLatentDepth}), H, W);
            out_frames.push_back(frame);
            if (!rc.archive_ref_only) {
                window.erase(window.begin());
                window.push_back(frame);
            }
        }
    }
    return stack(out_frames);
}

}  // namespace mcdm
