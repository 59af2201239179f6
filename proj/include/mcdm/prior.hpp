#pragma once

// Present-clip motion prior: a diffusion model over per-frame motion tokens
// (head, lip, expression) conditioned on audio and reference-image tokens
// fused by FiLM, with optional head-pose (landmark) guidance. When guidance
// is active the head stream moves into the conditioning and only lip and
// expression tokens are diffused.

#include <optional>
#include <string>
#include <vector>

#include "mcdm/attention.hpp"
#include "mcdm/diffusion.hpp"
#include "mcdm/optim.hpp"
#include "mcdm/world.hpp"

namespace mcdm {

struct MotionTokens {
    Tensor head;  // [T, d]; conditioning when landmark_guided
    Tensor lip;   // [T, d]
    Tensor expr;  // [T, d]
    bool landmark_guided = false;

    int64_t streams() const { return landmark_guided ? 2 : 3; }
};

// gains that bring each motion parameter to roughly unit variance before
// the frozen embeddings; diffusion targets and injected noise then live at
// the same scale, which is what makes the conditional component of the
// score worth learning
constexpr double kYawGain = 4.0;
constexpr double kPitchGain = 6.7;
constexpr double kMouthGain = 8.0;
constexpr int64_t kMouthCodeChannels = 1;
constexpr double kExprGain = 3.0;
// per-column audio standardization: the envelope sits near mean 0.5 and
// the band channels near 0.25; both are brought to roughly unit variance
constexpr double kAudioCenter[kAudioFeatures] = {0.5, 0.25, 0.25, 0.25};
constexpr double kAudioGainCol[kAudioFeatures] = {7.7, 5.0, 5.0, 5.0};

struct ConditioningBundle {
    Tensor audio_tokens;               // [T, d]
    Tensor image_tokens;               // [T, d], reference embedding replicated
    Tensor fused;                      // [T, d], FiLM of audio by image
    std::optional<Tensor> head_tokens;  // [T, d] when landmark guidance is active
};

class MotionPrior {
  public:
    struct Config {
        int64_t T = 16;
        int64_t d = 32;
        int64_t L = 4;  // pairs of (causal block, temporal block)
        int64_t ffn_mult = 4;
        int64_t heads = 4;
        bool zero_residual_init = true;
    };

    MotionPrior(Config cfg, uint64_t seed) : cfg_(cfg) {
        Rng rng(Rng::mix(seed, 0x9121ULL));
        int64_t d = cfg_.d;

        store_.add("prior.audio.w", linear_init(rng, kAudioFeatures, d));
        store_.add("prior.audio.b", Tensor::zeros({d}, true));
        store_.add("prior.image.w", linear_init(rng, 64, d));
        store_.add("prior.image.b", Tensor::zeros({d}, true));

        // motion-parameter embeddings are fixed at init: they define the
        // diffusion targets, and trainable targets admit a collapse where
        // the loss goes to zero without learning anything
        store_.add("prior.embed.head.w", normal_init(rng, {2, d}, 1.0, false));
        store_.add("prior.embed.head.b", normal_init(rng, {d}, 0.3, false));
        // The lip code is a sparse linear row over a few channels near unit
        // joint signal-to-noise. A dense row makes the channels redundant,
        // so the noised tokens pin the mouth value at every noise level and
        // the audio conditioning carries no training signal; a narrow code
        // keeps the value genuinely contested by the injected noise.
        {
            std::vector<double> lw(static_cast<size_t>(d), 0.0);
            for (int64_t c = 0; c < kMouthCodeChannels && c < d; ++c)
                lw[static_cast<size_t>(c)] = (c % 2 == 0 ? 1.0 : -1.0) * kMouthGain;
            store_.add("prior.embed.lip.w", Tensor::from({1, d}, std::move(lw)));
        }
        store_.add("prior.embed.expr.w", normal_init(rng, {kExprBasis, d}, 1.0, false));
        store_.add("prior.embed.expr.b", normal_init(rng, {d}, 0.3, false));

        // FiLM at identity: gamma = 1, beta = 0
        store_.add("prior.film.gw", Tensor::zeros({d, d}, true));
        store_.add("prior.film.gb", Tensor::full({d}, 1.0, true));
        store_.add("prior.film.bw", Tensor::zeros({d, d}, true));
        store_.add("prior.film.bb", Tensor::zeros({d}, true));

        store_.add("prior.temb.w", linear_init(rng, d, d));
        store_.add("prior.temb.b", Tensor::zeros({d}, true));

        for (int64_t l = 0; l < cfg_.L; ++l) {
            std::string p = "prior.l" + std::to_string(l) + ".";
            store_.add(p + "attn.ln.g", Tensor::full({d}, 1.0, true));
            store_.add(p + "attn.ln.b", Tensor::zeros({d}, true));
            store_.add(p + "attn.wq", linear_init(rng, d, d));
            store_.add(p + "attn.wk", linear_init(rng, d, d));
            store_.add(p + "attn.wv", linear_init(rng, d, d));
            store_.add(p + "attn.wo", cfg_.zero_residual_init ? Tensor::zeros({d, d}, true)
                                                              : linear_init(rng, d, d));
            store_.add(p + "ffn.ln.g", Tensor::full({d}, 1.0, true));
            store_.add(p + "ffn.ln.b", Tensor::zeros({d}, true));
            store_.add(p + "ffn.w1", linear_init(rng, d, d * cfg_.ffn_mult));
            store_.add(p + "ffn.b1", Tensor::zeros({d * cfg_.ffn_mult}, true));
            store_.add(p + "ffn.w2", cfg_.zero_residual_init
                                         ? Tensor::zeros({d * cfg_.ffn_mult, d}, true)
                                         : linear_init(rng, d * cfg_.ffn_mult, d));
            store_.add(p + "ffn.b2", Tensor::zeros({d}, true));
            store_.add(p + "tmp.w1", linear_init(rng, d, d * cfg_.ffn_mult));
            store_.add(p + "tmp.b1", Tensor::zeros({d * cfg_.ffn_mult}, true));
            store_.add(p + "tmp.w2", cfg_.zero_residual_init
                                         ? Tensor::zeros({d * cfg_.ffn_mult, d}, true)
                                         : linear_init(rng, d * cfg_.ffn_mult, d));
            store_.add(p + "tmp.b2", Tensor::zeros({d}, true));
        }
        // per-stream, timestep-gated injection of the frame's audio tokens
        // into the motion-token embedding. The content map starts at zero
        // and the gate is a learnable scalar profile over the timestep
        // embedding: the useful conditioning gain varies by orders of
        // magnitude across noise levels, so the shortcut must be t-aware to
        // receive a coherent gradient.
        store_.add("prior.inj.head", Tensor::zeros({d, d}, true));
        store_.add("prior.inj.lip", Tensor::zeros({d, d}, true));
        store_.add("prior.inj.expr", Tensor::zeros({d, d}, true));
        store_.add("prior.inj.gate.head", linear_init(rng, d, 1));
        store_.add("prior.inj.gate.lip", linear_init(rng, d, 1));
        store_.add("prior.inj.gate.expr", linear_init(rng, d, 1));
        // matching shortcut on the output side: the noise estimate for each
        // stream gets a timestep-gated linear term in the frame's audio
        store_.add("prior.outinj.head", Tensor::zeros({d, d}, true));
        store_.add("prior.outinj.lip", Tensor::zeros({d, d}, true));
        store_.add("prior.outinj.expr", Tensor::zeros({d, d}, true));
        store_.add("prior.outinj.gate.head", linear_init(rng, d, 1));
        store_.add("prior.outinj.gate.lip", linear_init(rng, d, 1));
        store_.add("prior.outinj.gate.expr", linear_init(rng, d, 1));

        store_.add("prior.out.w", linear_init(rng, d, d));
        store_.add("prior.out.b", Tensor::zeros({d}, true));

        // fixed token-type tags: conditioning and motion tokens of the same
        // frame share one sinusoid position code, and these tags tell them
        // apart, so cross-stream routing is a plain position match
        store_.add("prior.tag.t", normal_init(rng, {1, d}, 0.5, false));
        store_.add("prior.tag.audio", normal_init(rng, {1, d}, 0.5, false));
        store_.add("prior.tag.headc", normal_init(rng, {1, d}, 0.5, false));
        store_.add("prior.tag.head", normal_init(rng, {1, d}, 0.5, false));
        store_.add("prior.tag.lip", normal_init(rng, {1, d}, 0.5, false));
        store_.add("prior.tag.expr", normal_init(rng, {1, d}, 0.5, false));
    }

    const Config& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    std::vector<std::string> frozen_names() const {
        auto out = store_.names_with_prefix("prior.embed.");
        for (const auto& n : store_.names_with_prefix("prior.tag.")) out.push_back(n);
        return out;
    }
    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& n : store_.names())
            if (n.rfind("prior.embed.", 0) != 0 && n.rfind("prior.tag.", 0) != 0)
                out.push_back(n);
        return out;
    }

    // ---- encoders ------------------------------------------------------

    Tensor encode_audio_pre(const Tensor& features) const {
        if (features.ndim() != 2 || features.dim(1) != kAudioFeatures)
            throw ShapeError("encode_audio expects [T, " + std::to_string(kAudioFeatures) + "]");
        if (features.dim(0) < 1) throw ShapeError("encode_audio: empty sequence");
        int64_t T = features.dim(0);
        std::vector<double> scaled(static_cast<size_t>(T * kAudioFeatures));
        for (int64_t t = 0; t < T; ++t)
            for (int64_t k = 0; k < kAudioFeatures; ++k)
                scaled[static_cast<size_t>(t * kAudioFeatures + k)] =
                    (features.at({t, k}) - kAudioCenter[k]) * kAudioGainCol[k];
        return add(matmul(Tensor::from({T, kAudioFeatures}, std::move(scaled)),
                          store_.get("prior.audio.w")),
                   store_.get("prior.audio.b"));
    }
    Tensor encode_audio(const Tensor& features) const { return tanh(encode_audio_pre(features)); }

    // 8x8 grid of patch means feeds a linear projection; grid is fixed so
    // the embedding is resolution independent
    Tensor encode_image(const Tensor& frame) const {
        if (frame.ndim() != 2) throw ShapeError("encode_image expects a 2-d frame");
        int64_t H = frame.dim(0), W = frame.dim(1);
        if (H % 8 != 0 || W % 8 != 0) throw ShapeError("encode_image: frame not divisible by 8");
        int64_t ph = H / 8, pw = W / 8;
        std::vector<double> pooled(64, 0.0);
        const auto fd = frame.data();
        for (int64_t gy = 0; gy < 8; ++gy)
            for (int64_t gx = 0; gx < 8; ++gx) {
                double acc = 0.0;
                for (int64_t y = gy * ph; y < (gy + 1) * ph; ++y)
                    for (int64_t x = gx * pw; x < (gx + 1) * pw; ++x)
                        acc += fd[static_cast<size_t>(y * W + x)];
                pooled[static_cast<size_t>(gy * 8 + gx)] =
                    acc / static_cast<double>(ph * pw);
            }
        Tensor p = Tensor::from({1, 64}, std::move(pooled));
        return add(matmul(p, store_.get("prior.image.w")), store_.get("prior.image.b"));
    }

    static Tensor replicate(const Tensor& tok, int64_t T) {
        return broadcast_to(tok, {T, tok.dim(-1)});
    }

    // raw (yaw, pitch) rows; the gain is applied internally
    Tensor embed_head(const Tensor& yaw_pitch) const {
        std::vector<double> scaled(yaw_pitch.data().begin(), yaw_pitch.data().end());
        for (size_t i = 0; i < scaled.size(); ++i)
            scaled[i] *= (i % 2 == 0) ? kYawGain : kPitchGain;
        return add(matmul(Tensor::from(yaw_pitch.shape(), std::move(scaled)),
                          store_.get("prior.embed.head.w")),
                   store_.get("prior.embed.head.b"));
    }

    Tensor embed_mouth(const Tensor& mouth_col) const {
        return matmul(mouth_col, store_.get("prior.embed.lip.w"));
    }

    MotionTokens encode_motion_ground_truth(const std::vector<MotionState>& states) const {
        int64_t T = static_cast<int64_t>(states.size());
        std::vector<double> hp(static_cast<size_t>(T * 2)), mo(static_cast<size_t>(T)),
            ex(static_cast<size_t>(T * kExprBasis));
        for (int64_t t = 0; t < T; ++t) {
            hp[static_cast<size_t>(t * 2)] = states[static_cast<size_t>(t)].yaw;
            hp[static_cast<size_t>(t * 2 + 1)] = states[static_cast<size_t>(t)].pitch;
            mo[static_cast<size_t>(t)] = states[static_cast<size_t>(t)].mouth_open;
            for (int64_t e = 0; e < kExprBasis; ++e)
                ex[static_cast<size_t>(t * kExprBasis + e)] =
                    states[static_cast<size_t>(t)].expr[static_cast<size_t>(e)] * kExprGain;
        }
        MotionTokens tok;
        tok.head = embed_head(Tensor::from({T, 2}, std::move(hp)));
        tok.lip = embed_mouth(Tensor::from({T, 1}, std::move(mo)));
        tok.expr =
            add(matmul(Tensor::from({T, kExprBasis}, std::move(ex)), store_.get("prior.embed.expr.w")),
                store_.get("prior.embed.expr.b"));
        return tok;
    }

    // gamma and beta predicted from the image tokens; identity at init
    Tensor film_fuse(const Tensor& audio_tok, const Tensor& image_tok) const {
        if (audio_tok.shape() != image_tok.shape())
            throw ShapeError("film_fuse: shape mismatch");
        Tensor gamma = add(matmul(image_tok, store_.get("prior.film.gw")), store_.get("prior.film.gb"));
        Tensor beta = add(matmul(image_tok, store_.get("prior.film.bw")), store_.get("prior.film.bb"));
        return add(mul(gamma, audio_tok), beta);
    }

    ConditioningBundle make_conditioning(const Tensor& audio_features, const Tensor& ref_frame,
                                         const std::optional<Tensor>& landmarks) const {
        ConditioningBundle b;
        int64_t T = audio_features.dim(0);
        b.audio_tokens = encode_audio(audio_features);
        b.image_tokens = replicate(encode_image(ref_frame), T);
        b.fused = film_fuse(b.audio_tokens, b.image_tokens);
        if (landmarks) b.head_tokens = embed_head(*landmarks);
        return b;
    }

    // Audio rows conditioning frames [start, start + T): row t of the
    // result is the feature row of frame start + t - 1, i.e. the audio
    // context that precedes the frame (mouth motion lags the envelope by
    // one frame). The first frame of the track reuses its own row.
    static Tensor lagged_audio_rows(const Tensor& features, int64_t start, int64_t T) {
        if (start > 0) return slice(features, 0, start - 1, T);
        Tensor first = slice(features, 0, 0, 1);
        if (T == 1) return first;
        return concat({first, slice(features, 0, 0, T - 1)}, 0);
    }

    // ---- blocks ----------------------------------------------------------

    Tensor layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) const {
        Tensor mu = mean(x, -1, true);
        Tensor xc = sub(x, mu);
        Tensor var = mean(square(xc), -1, true);
        return add(mul(div(xc, sqrt(var + 1e-5)), g), b);
    }

    // multi-head attention over [S, d]; heads split the embedding evenly
    Tensor mha(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv,
               const Tensor& wo, bool causal) const {
        int64_t S = h.dim(0), d = h.dim(1), H = cfg_.heads, dh = d / H;
        auto split = [&](const Tensor& x) {
            return permute(reshape(x, {S, H, dh}), {1, 0, 2});  // [H, S, dh]
        };
        Tensor att = sdpa(split(matmul(h, wq)), split(matmul(h, wk)), split(matmul(h, wv)),
                          causal);
        return matmul(reshape(permute(att, {1, 0, 2}), {S, d}), wo);
    }

    // pre-norm causal self-attention + feed-forward; the timestep embedding
    // is added to every position
    Tensor causal_block(int64_t layer, const Tensor& tokens, const Tensor& t_embed) const {
        std::string p = "prior.l" + std::to_string(layer) + ".";
        Tensor x = add(tokens, t_embed);
        Tensor h = layer_norm(x, store_.get(p + "attn.ln.g"), store_.get(p + "attn.ln.b"));
        Tensor att = mha(h, store_.get(p + "attn.wq"), store_.get(p + "attn.wk"),
                         store_.get(p + "attn.wv"), store_.get(p + "attn.wo"), /*causal=*/true);
        x = add(x, att);
        Tensor f = layer_norm(x, store_.get(p + "ffn.ln.g"), store_.get(p + "ffn.ln.b"));
        f = matmul(gelu(add(matmul(f, store_.get(p + "ffn.w1")), store_.get(p + "ffn.b1"))),
                   store_.get(p + "ffn.w2"));
        return add(x, add(f, store_.get(p + "ffn.b2")));
    }

    // unprojected causal mixing along T independently per channel group,
    // then a feed-forward with residual; at T = 1 the mixing is the
    // identity, so the block reduces to x + ffn(x)
    Tensor temporal_block(int64_t layer, const Tensor& tokens) const {
        if (tokens.ndim() != 3) throw ShapeError("temporal_block expects [T, c, d]");
        std::string p = "prior.l" + std::to_string(layer) + ".";
        int64_t T = tokens.dim(0), d = tokens.dim(2);
        Tensor x = permute(tokens, {1, 0, 2});  // [c, T, d]
        Tensor pos = sinusoid_table(T, d);
        Tensor qk = add(x, pos);  // order signal on queries/keys only
        Tensor h = sdpa(qk, qk, x, /*causal=*/true);  // [c, T, d]
        Tensor f = matmul(gelu(add(matmul(h, store_.get(p + "tmp.w1")), store_.get(p + "tmp.b1"))),
                          store_.get(p + "tmp.w2"));
        Tensor out = add(h, add(f, store_.get(p + "tmp.b2")));
        return permute(out, {1, 0, 2});
    }

    Tensor timestep_token(int64_t t) const {
        int64_t d = cfg_.d;
        std::vector<double> row(static_cast<size_t>(d));
        for (int64_t c = 0; c < d; ++c) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(c / 2) / static_cast<double>(d));
            double arg = static_cast<double>(t) * freq;
            row[static_cast<size_t>(c)] = (c % 2 == 0) ? std::sin(arg) : std::cos(arg);
        }
        Tensor base = Tensor::from({1, d}, std::move(row));
        return add(matmul(base, store_.get("prior.temb.w")), store_.get("prior.temb.b"));
    }

    // ---- epsilon model ---------------------------------------------------

    // frame-major packing: token (t, stream) sits at row t * c + stream
    static Tensor pack(const MotionTokens& z) {
        std::vector<Tensor> streams;
        if (!z.landmark_guided) streams.push_back(reshape(z.head, {z.head.dim(0), 1, z.head.dim(1)}));
        streams.push_back(reshape(z.lip, {z.lip.dim(0), 1, z.lip.dim(1)}));
        streams.push_back(reshape(z.expr, {z.expr.dim(0), 1, z.expr.dim(1)}));
        return concat(streams, 1);  // [T, c, d]
    }

    static MotionTokens unpack(const Tensor& packed, bool landmark_guided) {
        MotionTokens z;
        z.landmark_guided = landmark_guided;
        int64_t T = packed.dim(0), d = packed.dim(2);
        int64_t i = 0;
        if (!landmark_guided) z.head = reshape(slice(packed, 1, i++, 1), {T, d});
        z.lip = reshape(slice(packed, 1, i++, 1), {T, d});
        z.expr = reshape(slice(packed, 1, i++, 1), {T, d});
        return z;
    }

    // sequence = [t-token, fused conditioning, (head tokens), noised motion
    // tokens] through L pairs of (causal block, temporal block); returns the
    // noise estimate for the motion-token positions only
    MotionTokens prior_forward(const MotionTokens& z_t, int64_t t,
                               const ConditioningBundle& F_p) const {
        if (z_t.landmark_guided != F_p.head_tokens.has_value())
            throw ConfigError("prior_forward: landmark flag of tokens and conditioning disagree");
        int64_t T = z_t.lip.dim(0), d = cfg_.d;
        int64_t c = z_t.streams();
        Tensor t_tok = timestep_token(t);

        std::vector<Tensor> parts{t_tok, F_p.fused};
        if (F_p.head_tokens) parts.push_back(*F_p.head_tokens);
        Tensor cond = concat(parts, 0);
        int64_t cond_len = cond.dim(0);

        // timestep-gated per-stream shortcut from the frame's audio tokens
        // into its motion tokens; sourced before FiLM so the film gate
        // cannot silence it
        std::vector<Tensor> inj_parts;
        const char* inj_all[3] = {"prior.inj.head", "prior.inj.lip", "prior.inj.expr"};
        const char* gate_all[3] = {"prior.inj.gate.head", "prior.inj.gate.lip",
                                   "prior.inj.gate.expr"};
        int64_t skip = z_t.landmark_guided ? 1 : 0;
        for (int64_t j = 0; j < c; ++j) {
            Tensor gate = add_scalar(matmul(t_tok, store_.get(gate_all[j + skip])), 1.0);  // [1, 1], live at init
            Tensor content = matmul(F_p.audio_tokens, store_.get(inj_all[j + skip]));
            inj_parts.push_back(reshape(mul(content, gate), {T, 1, d}));
        }
        Tensor motion = reshape(add(pack(z_t), concat(inj_parts, 1)), {T * c, d});
        Tensor seq = concat({cond, motion}, 0);

        // frame-aligned position codes plus token-type tags: conditioning
        // and motion tokens of frame t share sinusoid row t
        Tensor pos = sinusoid_table(T, d);
        std::vector<double> enc(static_cast<size_t>(seq.dim(0) * d), 0.0);
        auto put = [&](int64_t row, const Tensor& tag, int64_t frame) {
            for (int64_t k = 0; k < d; ++k)
                enc[static_cast<size_t>(row * d + k)] =
                    tag.at({0, k}) + (frame >= 0 ? pos.at({frame, k}) : 0.0);
        };
        put(0, store_.get("prior.tag.t"), -1);
        for (int64_t u = 0; u < T; ++u) put(1 + u, store_.get("prior.tag.audio"), u);
        if (F_p.head_tokens)
            for (int64_t u = 0; u < T; ++u) put(1 + T + u, store_.get("prior.tag.headc"), u);
        const char* stream_tags_all[3] = {"prior.tag.head", "prior.tag.lip", "prior.tag.expr"};
        const char** stream_tags = z_t.landmark_guided ? stream_tags_all + 1 : stream_tags_all;
        for (int64_t t_f = 0; t_f < T; ++t_f)
            for (int64_t j = 0; j < c; ++j)
                put(cond_len + t_f * c + j, store_.get(stream_tags[j]), t_f);
        seq = add(seq, Tensor::from({seq.dim(0), d}, std::move(enc)));

        for (int64_t l = 0; l < cfg_.L; ++l) {
            seq = causal_block(l, seq, t_tok);
            Tensor mt = reshape(slice(seq, 0, cond_len, T * c), {T, c, d});
            mt = temporal_block(l, mt);
            seq = concat({slice(seq, 0, 0, cond_len), reshape(mt, {T * c, d})}, 0);
        }
        Tensor out = add(matmul(slice(seq, 0, cond_len, T * c), store_.get("prior.out.w")),
                         store_.get("prior.out.b"));
        out = reshape(out, {T, c, d});

        const char* oinj_all[3] = {"prior.outinj.head", "prior.outinj.lip", "prior.outinj.expr"};
        const char* ogate_all[3] = {"prior.outinj.gate.head", "prior.outinj.gate.lip",
                                    "prior.outinj.gate.expr"};
        std::vector<Tensor> oinj_parts;
        for (int64_t j = 0; j < c; ++j) {
            Tensor gate = add_scalar(matmul(t_tok, store_.get(ogate_all[j + skip])), 1.0);
            Tensor content = matmul(F_p.audio_tokens, store_.get(oinj_all[j + skip]));
            oinj_parts.push_back(reshape(mul(content, gate), {T, 1, d}));
        }
        out = add(out, concat(oinj_parts, 1));
        return unpack(out, z_t.landmark_guided);
    }

    // ---- sampling and decoding -------------------------------------------

    MotionTokens sample_motion(const ConditioningBundle& F_p, const NoiseSchedule& sched,
                               Rng& rng) const {
        bool guided = F_p.head_tokens.has_value();
        int64_t T = F_p.fused.dim(0);
        int64_t c = guided ? 2 : 3;
        EpsModel model = [&](const Tensor& z, int64_t t) {
            MotionTokens zt = unpack(z, guided);
            if (guided) zt.head = *F_p.head_tokens;
            return pack(prior_forward(zt, t, F_p));
        };
        Tensor sample = ddpm_sample(model, sched, {T, c, cfg_.d}, rng);
        MotionTokens out = unpack(sample, guided);
        if (guided) out.head = *F_p.head_tokens;
        return out;
    }

    // nearest-neighbor decode of lip tokens against the frozen embedding of
    // a 101-point mouth-openness grid
    std::vector<double> decode_mouth(const Tensor& lip_tokens) const {
        NoGradGuard ng;
        int64_t T = lip_tokens.dim(0), d = lip_tokens.dim(1);
        const Tensor& w = store_.get("prior.embed.lip.w");
        std::vector<double> out(static_cast<size_t>(T));
        for (int64_t t = 0; t < T; ++t) {
            double best = 1e300, best_v = 0.0;
            for (int i = 0; i <= 100; ++i) {
                double v = static_cast<double>(i) / 100.0;
                double dist = 0.0;
                for (int64_t k = 0; k < d; ++k) {
                    double diff = lip_tokens.at({t, k}) - v * w.at({0, k});
                    dist += diff * diff;
                }
                if (dist < best) {
                    best = dist;
                    best_v = v;
                }
            }
            out[static_cast<size_t>(t)] = best_v;
        }
        return out;
    }

  private:
    Config cfg_;
    ParamStore store_;
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct PriorTrainConfig {
    int64_t steps = 2000;
    int64_t batch = 4;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double landmark_dropout = 0.5;
    int64_t T_steps = 50;
    double beta_start = 1e-4;
    double beta_end = 0.05;
    bool cosine_lr = true;  // warmup + cosine decay around the configured lr
};

struct PriorTrainStats {
    std::vector<double> losses;
    int64_t guided_batches = 0;
    int64_t unguided_batches = 0;
};

// Noise-prediction training with whole-clip landmark dropout: each sampled
// clip is conditioned on its head-pose track with probability
// 1 - landmark_dropout (when the track exists); dropped clips diffuse all
// three streams.
inline PriorTrainStats train_prior(MotionPrior& prior, const std::vector<ClipBatch>& clips,
                                   const PriorTrainConfig& cfg, Rng& rng) {
    if (clips.empty()) throw ConfigError("train_prior: empty dataset");
    auto sched = make_schedule(cfg.T_steps, cfg.beta_start, cfg.beta_end);
    AdamW opt(prior.params(), prior.trainable_names(), cfg.lr, cfg.weight_decay);
    PriorTrainStats stats;
    int64_t T = prior.config().T;

    for (int64_t step = 0; step < cfg.steps; ++step) {
        if (cfg.cosine_lr) opt.set_lr(warmup_cosine_lr(cfg.lr, step, cfg.steps));
        prior.params().zero_grad();
        Tensor loss_acc = Tensor::scalar(0.0);
        for (int64_t bi = 0; bi < cfg.batch; ++bi) {
            const ClipBatch& clip =
                clips[static_cast<size_t>(rng.next_u64() % clips.size())];
            int64_t a = clip.archived_frames.dim(0);
            if (clip.target_frames.dim(0) != T)
                throw ConfigError("train_prior: clip length does not match model T");

            bool guided = clip.landmarks.has_value() && rng.uniform() >= cfg.landmark_dropout;
            if (guided)
                ++stats.guided_batches;
            else
                ++stats.unguided_batches;

            Tensor audio_rows = MotionPrior::lagged_audio_rows(clip.audio.features, a, T);
            ConditioningBundle F_p = prior.make_conditioning(
                audio_rows, clip.ref_frame,
                guided ? std::optional<Tensor>(*clip.landmarks) : std::nullopt);

            MotionTokens z0 = prior.encode_motion_ground_truth(clip.states);
            z0.landmark_guided = guided;
            // diffused streams are exactly {lip, expr} when guided and
            // {head, lip, expr} otherwise
            Tensor packed0 = MotionPrior::pack(z0);
            int64_t t = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(cfg.T_steps));
            Tensor eps = rng_tensor(rng, packed0.shape(), Dist::normal);
            Tensor z_t_packed = q_sample(packed0, t, eps, sched);
            MotionTokens z_t = MotionPrior::unpack(z_t_packed, guided);
            z_t.landmark_guided = guided;
            if (guided) z_t.head = *F_p.head_tokens;

            MotionTokens eps_hat = prior.prior_forward(z_t, t, F_p);
            loss_acc = add(loss_acc, eps_loss(eps, MotionPrior::pack(eps_hat)));
        }
        Tensor loss = mul_scalar(loss_acc, 1.0 / static_cast<double>(cfg.batch));
        loss.backward();
        opt.step();
        stats.losses.push_back(loss.item());
        if (!std::isfinite(loss.item())) throw GradError("train_prior: non-finite loss");
    }
    return stats;
}

}  // namespace mcdm
