#pragma once

// Three-stage training with bit-verified freezing, checkpoint files, the
// drift / lip-sync evaluations, and the attention / memory benchmarks.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mcdm/config.hpp"
#include "mcdm/denoiser.hpp"
#include "mcdm/metrics.hpp"

namespace mcdm {

struct McdmModels {
    RunConfig cfg;
    ArchivedPrior arch;
    MotionPrior prior;
    Denoiser den;

    explicit McdmModels(const RunConfig& c)
        : cfg(c),
          arch(ArchivedPrior::Config{.d = c.d, .n = c.n}, c.seed),
          prior(MotionPrior::Config{.T = c.T, .d = c.d, .L = c.L, .ffn_mult = 4,
                                    .zero_residual_init = true},
                c.seed),
          den([&] {
                  Denoiser::Config dc;
                  dc.T = c.T;
                  dc.d_model = c.d_model;
                  dc.n_blocks = c.N;
                  dc.d_ac = c.d;
                  dc.d_pc = c.d;
                  dc.r_features = c.r_features;
                  dc.zero_residual_init = true;
                  return dc;
              }(),
              c.seed) {}

    int64_t spatial_tokens() const {
        return den.spatial_tokens_for(cfg.resolution, cfg.resolution);
    }
};

// ---------------------------------------------------------------------------
// parameter-group hashing across stores
// ---------------------------------------------------------------------------

using GroupRef = std::pair<const ParamStore*, std::vector<std::string>>;

inline uint64_t hash_groups(const std::vector<GroupRef>& groups) {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& [store, names] : groups) {
        uint64_t g = store->hash_group(names);
        for (int b = 0; b < 8; ++b) {
            h ^= (g >> (8 * b)) & 0xFF;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

inline std::vector<GroupRef> stage_frozen_groups(const McdmModels& m, int64_t stage) {
    switch (stage) {
        case 1:
            return {{&m.den.params(), m.den.group_present_temporal()},
                    {&m.prior.params(), m.prior.params().names()},
                    {&m.arch.params(), m.arch.frozen_names()}};
        case 2:
            return {{&m.den.params(), m.den.params().names()},
                    {&m.arch.params(), m.arch.params().names()},
                    {&m.prior.params(), m.prior.frozen_names()}};
        case 3:
            return {{&m.den.params(), m.den.group_self_arch()},
                    {&m.arch.params(), m.arch.params().names()},
                    {&m.prior.params(), m.prior.params().names()}};
        default:
            throw ConfigError("stage must be 1, 2 or 3");
    }
}

inline std::vector<GroupRef> stage_trainable_groups(const McdmModels& m, int64_t stage) {
    switch (stage) {
        case 1:
            return {{&m.arch.params(), m.arch.trainable_names()},
                    {&m.den.params(), m.den.group_self_arch()}};
        case 2:
            return {{&m.prior.params(), m.prior.trainable_names()}};
        case 3:
            return {{&m.den.params(), m.den.group_present_temporal()}};
        default:
            throw ConfigError("stage must be 1, 2 or 3");
    }
}

// ---------------------------------------------------------------------------
// staged training
// ---------------------------------------------------------------------------

struct StageStats {
    std::vector<double> losses;
    uint64_t frozen_before = 0, frozen_after = 0;
    uint64_t trainable_before = 0, trainable_after = 0;
    int64_t guided_batches = 0, unguided_batches = 0;

    bool freezing_respected() const { return frozen_before == frozen_after; }
    bool trainables_moved() const { return trainable_before != trainable_after; }
};

using StepLogger = std::function<void(int64_t step, double loss)>;

// one sample of the video noise-prediction loss; the motion conditioning is
// teacher forced from the frozen ground-truth embeddings
inline Tensor video_eps_loss_sample(McdmModels& m, const ClipBatch& clip,
                                    const NoiseSchedule& sched, Rng& rng) {
    Tensor Z0 = clip_to_latent(clip.target_frames);
    Tensor F_ac = m.arch.forward(clip.ref_frame, clip.archived_frames);
    MotionTokens gt = m.prior.encode_motion_ground_truth(clip.states);
    gt.landmark_guided = false;
    Tensor F_pc = MotionPrior::pack(gt);

    std::vector<MemoryState> mems;
    m.den.prime_memories(F_ac.detach(), F_pc, Z0.dim(1), mems, m.cfg.alpha,
                         TemporalMode::memory_efficient);

    int64_t t = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(sched.T_steps));
    Tensor eps = rng_tensor(rng, Z0.shape(), Dist::normal);
    Tensor z_t = q_sample(Z0, t, eps, sched);

    Denoiser::Inputs in;
    in.F_ac = F_ac;
    in.F_pc = F_pc;
    in.mems = &mems;
    return eps_loss(eps, m.den.forward(z_t, t, in));
}

namespace detail {

inline StageStats run_video_stage(McdmModels& m, const std::vector<ClipBatch>& clips,
                                  int64_t stage, const StepLogger& log) {
    if (clips.empty()) throw ConfigError("training stage " + std::to_string(stage) +
                                         ": missing dataset");
    const RunConfig& cfg = m.cfg;
    auto sched = make_schedule(cfg.T_steps, cfg.beta_start, cfg.beta_end);

    StageStats stats;
    stats.frozen_before = hash_groups(stage_frozen_groups(m, stage));
    stats.trainable_before = hash_groups(stage_trainable_groups(m, stage));

    std::vector<std::unique_ptr<AdamW>> opts;
    for (auto& [store, names] : stage_trainable_groups(m, stage))
        opts.push_back(std::make_unique<AdamW>(*const_cast<ParamStore*>(store), names, cfg.lr,
                                               cfg.weight_decay));

    Rng rng(Rng::mix(cfg.seed, 0x57A6E000ULL + static_cast<uint64_t>(stage)));
    for (int64_t step = 0; step < cfg.steps; ++step) {
        m.arch.params().zero_grad();
        m.den.params().zero_grad();
        Tensor acc = Tensor::scalar(0.0);
        for (int64_t b = 0; b < cfg.batch; ++b) {
            const ClipBatch& clip = clips[static_cast<size_t>(rng.next_u64() % clips.size())];
            acc = add(acc, video_eps_loss_sample(m, clip, sched, rng));
        }
        Tensor loss = mul_scalar(acc, 1.0 / static_cast<double>(cfg.batch));
        loss.backward();
        for (auto& o : opts) o->step();
        double lv = loss.item();
        if (!std::isfinite(lv))
            throw GradError("stage " + std::to_string(stage) + ": non-finite loss at step " +
                            std::to_string(step));
        stats.losses.push_back(lv);
        if (log) log(step, lv);
    }

    stats.frozen_after = hash_groups(stage_frozen_groups(m, stage));
    stats.trainable_after = hash_groups(stage_trainable_groups(m, stage));
    return stats;
}

}  // namespace detail

// archived-clip path + denoiser self/archived-cross against the video loss;
// present-clip cross and memory-temporal sublayers stay at initialization
inline StageStats train_stage1(McdmModels& m, const std::vector<ClipBatch>& clips,
                               const StepLogger& log = nullptr) {
    return detail::run_video_stage(m, clips, 1, log);
}

// the motion prior alone, with whole-clip landmark dropout
inline StageStats train_stage2(McdmModels& m, const std::vector<ClipBatch>& clips,
                               const StepLogger& log = nullptr) {
    if (clips.empty()) throw ConfigError("training stage 2: missing dataset");
    StageStats stats;
    stats.frozen_before = hash_groups(stage_frozen_groups(m, 2));
    stats.trainable_before = hash_groups(stage_trainable_groups(m, 2));

    PriorTrainConfig pc;
    pc.steps = m.cfg.steps;
    pc.batch = m.cfg.batch;
    pc.lr = m.cfg.lr;
    pc.weight_decay = m.cfg.weight_decay;
    pc.landmark_dropout = m.cfg.landmark_dropout;
    pc.T_steps = m.cfg.T_steps;
    pc.beta_start = m.cfg.beta_start;
    pc.beta_end = m.cfg.beta_end;
    Rng rng(Rng::mix(m.cfg.seed, 0x57A6E002ULL));
    auto pstats = train_prior(m.prior, clips, pc, rng);
    stats.losses = pstats.losses;
    stats.guided_batches = pstats.guided_batches;
    stats.unguided_batches = pstats.unguided_batches;
    if (log)
        for (size_t i = 0; i < stats.losses.size(); ++i)
            log(static_cast<int64_t>(i), stats.losses[i]);

    stats.frozen_after = hash_groups(stage_frozen_groups(m, 2));
    stats.trainable_after = hash_groups(stage_trainable_groups(m, 2));
    return stats;
}

// only the present-clip cross and memory-temporal sublayers move
inline StageStats train_stage3(McdmModels& m, const std::vector<ClipBatch>& clips,
                               const StepLogger& log = nullptr) {
    return detail::run_video_stage(m, clips, 3, log);
}

// ---------------------------------------------------------------------------
// checkpoints: one MCTS container per stage
// ---------------------------------------------------------------------------

inline std::string stage_checkpoint_path(const std::string& dir, int64_t stage) {
    return (std::filesystem::path(dir) / ("stage" + std::to_string(stage) + ".mcts")).string();
}

inline void save_stage_checkpoint(const McdmModels& m, int64_t stage, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::pair<std::string, Tensor>> named;
    auto collect = [&named](const ParamStore& store) {
        for (const auto& n : store.names()) named.emplace_back(n, store.get(n));
    };
    if (stage == 1 || stage == 3) {
        collect(m.arch.params());
        collect(m.den.params());
    } else if (stage == 2) {
        collect(m.prior.params());
    } else {
        throw ConfigError("stage must be 1, 2 or 3");
    }
    save_tensors(stage_checkpoint_path(dir, stage), named);
}

inline void load_stage_checkpoint(McdmModels& m, int64_t stage, const std::string& dir) {
    std::string path = stage_checkpoint_path(dir, stage);
    if (!std::filesystem::exists(path))
        throw IoError("missing checkpoint " + path + "; run train --stage " +
                      std::to_string(stage) + " first");
    for (auto& [name, t] : load_tensors(path)) {
        ParamStore& store = name.rfind("arch.", 0) == 0 ? m.arch.params()
                            : name.rfind("den.", 0) == 0 ? m.den.params()
                                                         : m.prior.params();
        Tensor& dst = store.get(name);
        if (dst.shape() != t.shape())
            throw IoError(path + ": shape mismatch for '" + name + "'");
        auto& d = dst.mutable_data();
        std::copy(t.data().begin(), t.data().end(), d.begin());
    }
}

// ---------------------------------------------------------------------------
// evaluations
// ---------------------------------------------------------------------------

inline Tensor clamp01(const Tensor& frame) {
    std::vector<double> v(frame.data().begin(), frame.data().end());
    for (double& x : v) x = std::clamp(x, 0.0, 1.0);
    return Tensor::from(frame.shape(), std::move(v));
}

struct EvalWorld {
    AudioTrack audio;
    std::vector<MotionState> states;
    Tensor landmarks;  // [total, 2]
    Tensor ref_frame;
    uint64_t identity = 0;
};

inline EvalWorld make_eval_world(uint64_t eval_seed, int64_t total_frames) {
    EvalWorld w;
    Rng rng(Rng::mix(eval_seed, 0xE7A1ULL));
    w.identity = 9000 + eval_seed;
    w.audio = synth_audio(total_frames, rng);
    w.states = synth_motion(w.audio, rng);
    std::vector<double> lm(static_cast<size_t>(total_frames * 2));
    for (int64_t t = 0; t < total_frames; ++t) {
        lm[static_cast<size_t>(t * 2)] = w.states[static_cast<size_t>(t)].yaw;
        lm[static_cast<size_t>(t * 2 + 1)] = w.states[static_cast<size_t>(t)].pitch;
    }
    w.landmarks = Tensor::from({total_frames, 2}, std::move(lm));
    w.ref_frame = render_avatar(MotionState::neutral(), w.identity);
    return w;
}

// 2x box downsample, repeated until the target resolution is reached
inline Tensor downsample_to(const Tensor& frame, int64_t target) {
    Tensor f = frame;
    while (f.dim(0) > target) {
        int64_t H = f.dim(0), W = f.dim(1);
        std::vector<double> out(static_cast<size_t>((H / 2) * (W / 2)));
        for (int64_t y = 0; y < H / 2; ++y)
            for (int64_t x = 0; x < W / 2; ++x)
                out[static_cast<size_t>(y * (W / 2) + x)] =
                    0.25 * (f.at({2 * y, 2 * x}) + f.at({2 * y, 2 * x + 1}) +
                            f.at({2 * y + 1, 2 * x}) + f.at({2 * y + 1, 2 * x + 1}));
        f = Tensor::from({H / 2, W / 2}, std::move(out));
    }
    return f;
}

enum class DriftVariant { full, no_fa, no_mta };

struct DriftResult {
    std::vector<double> curve;  // per-frame SSIM against the ground-truth render
    double mean_final_quarter = 0.0;
    Tensor frames;     // generated [total, H, W]
    Tensor gt_frames;  // rendered ground truth at the same resolution
};

// Head pose is conditioned on the ground-truth track during drift
// evaluation so the per-frame SSIM reads appearance drift rather than the
// (unconditioned) head-motion mismatch.
inline DriftResult eval_drift(const McdmModels& m, uint64_t eval_seed, DriftVariant variant,
                              double alpha, RolloutProbe* probe = nullptr) {
    const RunConfig& cfg = m.cfg;
    EvalWorld w = make_eval_world(eval_seed, cfg.total_frames);
    Tensor ref = downsample_to(w.ref_frame, cfg.resolution);

    RolloutConfig rc;
    rc.total_frames = cfg.total_frames;
    rc.a = cfg.a;
    rc.alpha = alpha;
    rc.video_sched = make_schedule(cfg.sample_steps, cfg.beta_start, cfg.beta_end);
    rc.motion_sched = rc.video_sched;
    rc.use_landmarks = true;
    rc.seed = Rng::mix(eval_seed, 0xD21F7ULL);
    if (variant == DriftVariant::no_fa) rc.archive_ref_only = true;
    if (variant == DriftVariant::no_mta) rc.mode = TemporalMode::present_only;

    DriftResult res;
    res.frames = long_generate(m.den, m.prior, m.arch, ref, w.audio, w.landmarks, rc, probe);

    std::vector<Tensor> gt;
    for (int64_t t = 0; t < cfg.total_frames; ++t)
        gt.push_back(downsample_to(render_avatar(w.states[static_cast<size_t>(t)], w.identity),
                                   cfg.resolution));
    res.gt_frames = stack(gt);

    int64_t H = cfg.resolution;
    for (int64_t t = 0; t < cfg.total_frames; ++t) {
        Tensor gen = clamp01(reshape(slice(res.frames, 0, t, 1), {H, H}));
        res.curve.push_back(ssim(gen, gt[static_cast<size_t>(t)]));
    }
    int64_t q = cfg.total_frames - cfg.total_frames / 4;
    double acc = 0.0;
    for (int64_t t = q; t < cfg.total_frames; ++t) acc += res.curve[static_cast<size_t>(t)];
    res.mean_final_quarter = acc / static_cast<double>(cfg.total_frames - q);
    return res;
}

struct LipsyncResult {
    double r = 0.0;
    std::vector<double> mouth;     // extracted openness per generated frame
    std::vector<double> envelope;  // audio envelope
};

// Full-pipeline lip sync: generate video on held-out audio (landmarks off,
// the default mode), extract mouth openness per frame and correlate with
// the one-frame-lagged envelope.
inline LipsyncResult eval_lipsync(const McdmModels& m, uint64_t eval_seed) {
    const RunConfig& cfg = m.cfg;
    if (cfg.resolution != kFrameSize)
        throw ConfigError("eval lipsync: mouth extraction is calibrated for 64x64 frames");
    EvalWorld w = make_eval_world(eval_seed, cfg.total_frames);

    RolloutConfig rc;
    rc.total_frames = cfg.total_frames;
    rc.a = cfg.a;
    rc.alpha = cfg.alpha;
    rc.video_sched = make_schedule(cfg.sample_steps, cfg.beta_start, cfg.beta_end);
    rc.motion_sched = rc.video_sched;
    rc.seed = Rng::mix(eval_seed, 0x11F5ULL);

    Tensor frames = long_generate(m.den, m.prior, m.arch, w.ref_frame, w.audio, std::nullopt, rc);
    LipsyncResult res;
    res.envelope = w.audio.envelope;
    for (int64_t t = 0; t < cfg.total_frames; ++t)
        res.mouth.push_back(extract_mouth_openness(
            clamp01(reshape(slice(frames, 0, t, 1), {kFrameSize, kFrameSize}))));
    std::vector<double> mo(res.mouth.begin() + 1, res.mouth.end());
    std::vector<double> env(res.envelope.begin(), res.envelope.end() - 1);
    res.r = pearson(mo, env);
    return res;
}

// Prior-route lip sync: sample motion tokens clip by clip on held-out
// audio, decode the lip stream by nearest neighbor against the frozen
// embedding, and correlate with the lagged envelope.
inline double prior_lipsync_r(const MotionPrior& prior, uint64_t eval_seed, int64_t total_frames,
                              int64_t sample_steps, double beta_start, double beta_end) {
    Rng rng(Rng::mix(eval_seed, 0x1117ULL));
    AudioTrack audio = synth_audio(total_frames, rng);
    Tensor ref = render_avatar(MotionState::neutral(), 7777);
    auto sched = make_schedule(sample_steps, beta_start, beta_end);
    int64_t T = prior.config().T;
    if (total_frames % T != 0) throw ConfigError("prior_lipsync_r: frames must be multiple of T");

    std::vector<double> mouth;
    Rng srng(Rng::mix(eval_seed, 0x1118ULL));
    for (int64_t k = 0; k < total_frames / T; ++k) {
        Tensor rows = MotionPrior::lagged_audio_rows(audio.features, k * T, T);
        ConditioningBundle F_p = prior.make_conditioning(rows, ref, std::nullopt);
        MotionTokens tok = prior.sample_motion(F_p, sched, srng);
        for (double v : prior.decode_mouth(tok.lip)) mouth.push_back(v);
    }
    std::vector<double> mo(mouth.begin() + 1, mouth.end());
    std::vector<double> env(audio.envelope.begin(), audio.envelope.end() - 1);
    return pearson(mo, env);
}

// ---------------------------------------------------------------------------
// benchmarks
// ---------------------------------------------------------------------------

struct AttentionBenchRow {
    int64_t r;
    double median_rel_err;
};
struct AttentionTimingRow {
    int64_t L;
    double sdpa_ms;
    double fast_ms;
};
struct AttentionBench {
    std::vector<AttentionBenchRow> error_rows;
    std::vector<AttentionTimingRow> timing_rows;
};

inline AttentionBench bench_attention(uint64_t seed = 0) {
    PrecisionGuard pg(Precision::f64);
    AttentionBench out;
    int64_t L = 64, d = 16;
    Rng r(Rng::mix(seed, 3));
    Tensor Q = mul_scalar(rng_tensor(r, {L, d}, Dist::normal), 0.2);
    Tensor K = mul_scalar(rng_tensor(r, {L, d}, Dist::normal), 0.2);
    Tensor V = rng_tensor(r, {L, d}, Dist::normal);
    Tensor exact = sdpa(Q, K, V);
    double sc = std::pow(static_cast<double>(d), -0.25);
    Tensor Qs = mul_scalar(Q, sc), Ks = mul_scalar(K, sc);
    auto rel = [](const Tensor& a, const Tensor& b) {
        double num = 0, den = 0;
        for (int64_t i = 0; i < a.numel(); ++i) {
            double e = a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)];
            num += e * e;
            den += b.data()[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
        }
        return std::sqrt(num / den);
    };
    for (int64_t rf : {16, 64, 256, 1024}) {
        std::vector<double> errs;
        for (uint64_t sd = 0; sd < 10; ++sd)
            errs.push_back(rel(fast_attention(Qs, Ks, V, make_favor(100 + sd, rf, d)), exact));
        std::sort(errs.begin(), errs.end());
        out.error_rows.push_back({rf, 0.5 * (errs[4] + errs[5])});
    }

    int64_t dt = 32;
    auto feats = make_favor(7, 64, dt);
    for (int64_t len : {64, 256, 1024}) {
        Rng rr(Rng::mix(seed, static_cast<uint64_t>(len)));
        Tensor q = mul_scalar(rng_tensor(rr, {len, dt}, Dist::normal), 0.25);
        Tensor v = rng_tensor(rr, {len, dt}, Dist::normal);
        auto t0 = std::chrono::steady_clock::now();
        Tensor a = sdpa(q, q, v);
        auto t1 = std::chrono::steady_clock::now();
        std::vector<double> buf(static_cast<size_t>(len * dt));
        fast_attention_stream(q.data().data(), len, q.data().data(), v.data().data(), len, dt, dt,
                              feats, buf.data());
        auto t2 = std::chrono::steady_clock::now();
        out.timing_rows.push_back(
            {len, std::chrono::duration<double, std::milli>(t1 - t0).count(),
             std::chrono::duration<double, std::milli>(t2 - t1).count()});
    }
    return out;
}

struct MemoryBenchRow {
    int64_t frames;
    int64_t memory_peak_bytes;
    int64_t full_history_peak_bytes;
};

// Peak temporal-sublayer activation bytes during rollouts at 32x32, for the
// memory-efficient path vs a variant attending over the full generated
// history.
inline std::vector<MemoryBenchRow> bench_memory(uint64_t seed = 0,
                                                std::vector<int64_t> frame_counts = {16, 128,
                                                                                     512}) {
    RunConfig cfg;
    cfg.T = 8;
    cfg.a = 8;
    cfg.n = 8;
    cfg.d = 16;
    cfg.L = 1;
    cfg.N = 1;
    cfg.d_model = 16;
    cfg.resolution = 32;
    cfg.m = 16;
    cfg.r_features = 32;
    cfg.seed = seed;
    McdmModels m(cfg);
    Rng ar(Rng::mix(seed, 0xBEEFULL));
    int64_t max_frames = *std::max_element(frame_counts.begin(), frame_counts.end());
    AudioTrack audio = synth_audio(max_frames, ar);
    Tensor ref = downsample_to(render_avatar(MotionState::neutral(), 11), 32);

    auto peak = [&](int64_t total, TemporalMode mode) {
        RolloutConfig rc;
        rc.total_frames = total;
        rc.a = cfg.a;
        rc.alpha = cfg.alpha;
        rc.video_sched = make_schedule(2, 1e-3, 0.05);
        rc.motion_sched = rc.video_sched;
        rc.mode = mode;
        rc.seed = Rng::mix(seed, static_cast<uint64_t>(total));
        RolloutProbe probe;
        long_generate(m.den, m.prior, m.arch, ref, audio, std::nullopt, rc, &probe);
        return probe.temporal_meter.peak;
    };

    std::vector<MemoryBenchRow> rows;
    for (int64_t fc : frame_counts)
        rows.push_back({fc, peak(fc, TemporalMode::memory_efficient),
                        peak(fc, TemporalMode::full_history)});
    return rows;
}

// ---------------------------------------------------------------------------
// small output helpers
// ---------------------------------------------------------------------------

inline void write_pgm(const std::string& path, const Tensor& frame) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(path + ": cannot open for writing");
    int64_t H = frame.dim(0), W = frame.dim(1);
    os << "P5\n" << W << " " << H << "\n255\n";
    for (double v : frame.data()) {
        unsigned char b = static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        os.write(reinterpret_cast<const char*>(&b), 1);
    }
}

// horizontal strip of frames at the given indices
inline Tensor frame_strip(const Tensor& frames, const std::vector<int64_t>& indices) {
    int64_t H = frames.dim(1), W = frames.dim(2);
    int64_t n = static_cast<int64_t>(indices.size());
    std::vector<double> out(static_cast<size_t>(H * W * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                out[static_cast<size_t>(y * (W * n) + i * W + x)] =
                    std::clamp(frames.at({indices[static_cast<size_t>(i)], y, x}), 0.0, 1.0);
    return Tensor::from({H, W * n}, std::move(out));
}

}  // namespace mcdm
