#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mcdm/metrics.hpp"
#include "mcdm/prior.hpp"

using namespace mcdm;

namespace {

MotionPrior small_prior(bool zero_residual = true, uint64_t seed = 1) {
    MotionPrior::Config cfg;
    cfg.T = 4;
    cfg.d = 8;
    cfg.L = 2;
    cfg.zero_residual_init = zero_residual;
    return MotionPrior(cfg, seed);
}

std::vector<MotionState> random_states(int64_t T, Rng& rng) {
    AudioTrack a = synth_audio(T, rng);
    return synth_motion(a, rng);
}

}  // namespace

TEST_CASE("encode_audio basics") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior();

    // zero features -> constant bias embedding
    Tensor z = prior.encode_audio(Tensor::zeros({5, kAudioFeatures}));
    for (int64_t t = 1; t < 5; ++t)
        for (int64_t c = 0; c < 8; ++c) CHECK(z.at({t, c}) == z.at({0, c}));

    // time-local: doubling T leaves per-step values unchanged
    Rng r(2);
    Tensor feats = rng_tensor(r, {4, kAudioFeatures}, Dist::uniform);
    Tensor doubled = concat({feats, feats}, 0);
    Tensor e1 = prior.encode_audio(feats);
    Tensor e2 = prior.encode_audio(doubled);
    CHECK(e2.dim(0) == 8);
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t c = 0; c < 8; ++c) {
            CHECK(e2.at({t, c}) == e1.at({t, c}));
            CHECK(e2.at({t + 4, c}) == e1.at({t, c}));
        }

    // pre-nonlinearity linearity: pre(a+b) - pre(b) = a W
    Tensor a = rng_tensor(r, {4, kAudioFeatures}, Dist::normal);
    Tensor b = rng_tensor(r, {4, kAudioFeatures}, Dist::normal);
    Tensor lhs = sub(prior.encode_audio_pre(add(a, b)), prior.encode_audio_pre(b));
    Tensor rhs = matmul(a, prior.params().get("prior.audio.w"));
    for (int64_t i = 0; i < lhs.numel(); ++i)
        CHECK(lhs.data()[static_cast<size_t>(i)] ==
              doctest::Approx(rhs.data()[static_cast<size_t>(i)]).epsilon(1e-9));

    CHECK_THROWS_AS(prior.encode_audio(Tensor::zeros({5, 7})), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, kAudioFeatures}), ShapeError);  // T = 0 is unconstructible
}

TEST_CASE("encode_image basics") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior();

    Tensor black = Tensor::zeros({64, 64});
    Tensor e = prior.encode_image(black);
    const Tensor& bias = prior.params().get("prior.image.b");
    for (int64_t c = 0; c < 8; ++c) CHECK(e.at({0, c}) == bias.data()[static_cast<size_t>(c)]);

    MotionState bright = MotionState::neutral();
    Tensor f1 = render_avatar(bright, 1);
    Tensor f2 = Tensor::full({64, 64}, 0.2);
    Tensor d1 = prior.encode_image(f1);
    Tensor d2 = prior.encode_image(f2);
    double dist = 0.0;
    for (int64_t c = 0; c < 8; ++c) dist += std::abs(d1.at({0, c}) - d2.at({0, c}));
    CHECK(dist > 1e-6);

    // replicate copies the row
    Tensor rep = MotionPrior::replicate(d1, 6);
    CHECK(rep.shape() == Shape{6, 8});
    for (int64_t t = 0; t < 6; ++t)
        for (int64_t c = 0; c < 8; ++c) CHECK(rep.at({t, c}) == d1.at({0, c}));
}

TEST_CASE("motion embeddings are frozen, separated and injective") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior();

    // zero state -> bias-only rows
    std::vector<MotionState> zero(3);
    MotionTokens tok = prior.encode_motion_ground_truth(zero);
    const Tensor& hb = prior.params().get("prior.embed.head.b");
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t c = 0; c < 8; ++c)
            CHECK(tok.head.at({t, c}) == hb.data()[static_cast<size_t>(c)]);

    // head stream ignores expression changes
    std::vector<MotionState> s1(3), s2(3);
    for (auto* sv : {&s1, &s2})
        for (auto& s : *sv) {
            s.yaw = 0.2;
            s.pitch = -0.1;
        }
    for (auto& s : s1) s.expr[1] = 1.0;
    for (auto& s : s2) s.expr[6] = 1.0;
    Tensor h1 = prior.encode_motion_ground_truth(s1).head;
    Tensor h2 = prior.encode_motion_ground_truth(s2).head;
    for (int64_t i = 0; i < h1.numel(); ++i)
        CHECK(h1.data()[static_cast<size_t>(i)] == h2.data()[static_cast<size_t>(i)]);

    // lip embedding is injective across a 100-point grid
    std::vector<MotionState> grid(100);
    for (int i = 0; i < 100; ++i) grid[static_cast<size_t>(i)].mouth_open = i / 99.0;
    Tensor lips = prior.encode_motion_ground_truth(grid).lip;
    for (int64_t i = 0; i < 100; ++i)
        for (int64_t j = i + 1; j < 100; ++j) {
            double dist = 0.0;
            for (int64_t c = 0; c < 8; ++c) dist += std::abs(lips.at({i, c}) - lips.at({j, c}));
            CHECK(dist > 1e-9);
        }

    // frozen group excluded from trainables
    for (const auto& n : prior.trainable_names()) CHECK(n.rfind("prior.embed.", 0) != 0);
    CHECK(prior.frozen_names().size() == 6);
}

TEST_CASE("film_fuse identity and gating") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior();
    Rng r(3);
    Tensor audio = rng_tensor(r, {5, 8}, Dist::normal);
    Tensor image = rng_tensor(r, {5, 8}, Dist::normal);

    // identity init: gamma = 1, beta = 0 -> output == audio
    Tensor fused = prior.film_fuse(audio, image);
    for (int64_t i = 0; i < fused.numel(); ++i)
        CHECK(fused.data()[static_cast<size_t>(i)] == audio.data()[static_cast<size_t>(i)]);

    // force gamma = 0: output equals beta regardless of audio
    auto& gb = prior.params().get("prior.film.gb").mutable_data();
    std::fill(gb.begin(), gb.end(), 0.0);
    auto& bw = prior.params().get("prior.film.bw").mutable_data();
    Rng r2(4);
    for (auto& v : bw) v = r2.normal();
    Tensor beta = add(matmul(image, prior.params().get("prior.film.bw")),
                      prior.params().get("prior.film.bb"));
    Tensor fused0 = prior.film_fuse(audio, image);
    Tensor fused1 = prior.film_fuse(mul_scalar(audio, -7.0), image);
    for (int64_t i = 0; i < fused0.numel(); ++i) {
        CHECK(fused0.data()[static_cast<size_t>(i)] == beta.data()[static_cast<size_t>(i)]);
        CHECK(fused1.data()[static_cast<size_t>(i)] == beta.data()[static_cast<size_t>(i)]);
    }
}

TEST_CASE("film_fuse gradients pass grad_check") {
    auto prior = small_prior(false, 7);
    Rng r(5);
    Tensor image = rng_tensor(r, {4, 8}, Dist::normal);
    auto fa = [&](const Tensor& a) { return sum(square(prior.film_fuse(a, image))); };
    CHECK(grad_check(fa, rng_tensor(r, {4, 8}, Dist::normal), 1e-6) < 1e-4);
    Tensor audio = rng_tensor(r, {4, 8}, Dist::normal);
    auto fi = [&](const Tensor& im) { return sum(square(prior.film_fuse(audio, im))); };
    CHECK(grad_check(fi, image, 1e-6) < 1e-4);
}

TEST_CASE("causal block is causal at the bit level") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior(false, 9);
    Rng r(6);
    int64_t S = 7, d = 8;
    Tensor x = rng_tensor(r, {S, d}, Dist::normal);
    Tensor temb = prior.timestep_token(3);
    Tensor base = prior.causal_block(0, x, temb);
    for (int64_t j = 1; j < S; ++j) {
        std::vector<double> xd(x.data().begin(), x.data().end());
        for (int64_t c = 0; c < d; ++c) xd[static_cast<size_t>(j * d + c)] += 1.75;
        Tensor out = prior.causal_block(0, Tensor::from({S, d}, xd), temb);
        for (int64_t i = 0; i < j; ++i)
            for (int64_t c = 0; c < d; ++c) CHECK(out.at({i, c}) == base.at({i, c}));
    }
}

TEST_CASE("causal block zero-residual identity and single-token composition") {
    PrecisionGuard pg(Precision::f64);
    auto zero = small_prior(true, 10);
    Rng r(7);
    Tensor x = rng_tensor(r, {5, 8}, Dist::normal);
    Tensor temb = zero.timestep_token(11);
    Tensor out = zero.causal_block(1, x, temb);
    Tensor expect = add(x, temb);
    for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[static_cast<size_t>(i)] == expect.data()[static_cast<size_t>(i)]);

    // S = 1: the block is a per-token feed-forward composition
    auto live = small_prior(false, 11);
    Tensor single = rng_tensor(r, {1, 8}, Dist::normal);
    Tensor got = live.causal_block(0, single, temb);
    auto& P = live.params();
    Tensor xt = add(single, temb);
    Tensor h = live.layer_norm(xt, P.get("prior.l0.attn.ln.g"), P.get("prior.l0.attn.ln.b"));
    // softmax over one key is exactly one -> attention passes W_v h
    Tensor att = matmul(matmul(h, P.get("prior.l0.attn.wv")), P.get("prior.l0.attn.wo"));
    Tensor y = add(xt, att);
    Tensor f = live.layer_norm(y, P.get("prior.l0.ffn.ln.g"), P.get("prior.l0.ffn.ln.b"));
    f = matmul(gelu(add(matmul(f, P.get("prior.l0.ffn.w1")), P.get("prior.l0.ffn.b1"))),
               P.get("prior.l0.ffn.w2"));
    Tensor expect1 = add(y, add(f, P.get("prior.l0.ffn.b2")));
    for (int64_t i = 0; i < got.numel(); ++i)
        CHECK(got.data()[static_cast<size_t>(i)] ==
              doctest::Approx(expect1.data()[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("temporal block basics") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior(false, 12);
    Rng r(8);

    // T = 1: mixing is identity, block reduces to x + ffn(x)
    Tensor x1 = rng_tensor(r, {1, 3, 8}, Dist::normal);
    Tensor got = prior.temporal_block(0, x1);
    auto& P = prior.params();
    Tensor flat = reshape(x1, {3, 8});
    Tensor f = matmul(gelu(add(matmul(flat, P.get("prior.l0.tmp.w1")), P.get("prior.l0.tmp.b1"))),
                      P.get("prior.l0.tmp.w2"));
    Tensor expect = add(flat, add(f, P.get("prior.l0.tmp.b2")));
    for (int64_t i = 0; i < got.numel(); ++i)
        CHECK(got.data()[static_cast<size_t>(i)] ==
              doctest::Approx(expect.data()[static_cast<size_t>(i)]).epsilon(1e-12));

    // permuting channel groups permutes outputs identically
    Tensor x = rng_tensor(r, {4, 3, 8}, Dist::normal);
    Tensor base = prior.temporal_block(1, x);
    std::vector<int64_t> perm{2, 0, 1};
    std::vector<double> pd(static_cast<size_t>(x.numel()));
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t g = 0; g < 3; ++g)
            for (int64_t c = 0; c < 8; ++c)
                pd[static_cast<size_t>((t * 3 + g) * 8 + c)] =
                    x.at({t, perm[static_cast<size_t>(g)], c});
    Tensor pout = prior.temporal_block(1, Tensor::from({4, 3, 8}, pd));
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t g = 0; g < 3; ++g)
            for (int64_t c = 0; c < 8; ++c)
                CHECK(pout.at({t, g, c}) == base.at({t, perm[static_cast<size_t>(g)], c}));

    // matches a per-group loop
    Tensor pos = sinusoid_table(4, 8);
    for (int64_t g = 0; g < 3; ++g) {
        std::vector<double> gd(static_cast<size_t>(4 * 8));
        for (int64_t t = 0; t < 4; ++t)
            for (int64_t c = 0; c < 8; ++c) gd[static_cast<size_t>(t * 8 + c)] = x.at({t, g, c});
        Tensor xg = Tensor::from({4, 8}, gd);
        Tensor qk = add(xg, pos);
        Tensor h = sdpa(qk, qk, xg, true);
        Tensor fg =
            matmul(gelu(add(matmul(h, P.get("prior.l1.tmp.w1")), P.get("prior.l1.tmp.b1"))),
                   P.get("prior.l1.tmp.w2"));
        Tensor eg = add(h, add(fg, P.get("prior.l1.tmp.b2")));
        for (int64_t t = 0; t < 4; ++t)
            for (int64_t c = 0; c < 8; ++c)
                CHECK(base.at({t, g, c}) == doctest::Approx(eg.at({t, c})).epsilon(1e-6));
    }
}

TEST_CASE("prior_forward shape, landmark dichotomy and flag check") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior(true, 13);
    Rng r(9);
    int64_t T = 4;
    AudioTrack audio = synth_audio(T, r);
    auto states = random_states(T, r);
    Tensor landmarks = Tensor::from({T, 2}, {0.1, 0.0, 0.2, -0.1, 0.1, 0.05, 0.0, 0.0});

    // unguided: three diffused streams
    ConditioningBundle Fp = prior.make_conditioning(audio.features, render_avatar(states[0], 1),
                                                    std::nullopt);
    MotionTokens z = prior.encode_motion_ground_truth(states);
    z.landmark_guided = false;
    MotionTokens eh = prior.prior_forward(z, 3, Fp);
    CHECK(eh.streams() == 3);
    CHECK(eh.head.shape() == z.head.shape());
    CHECK(eh.lip.shape() == z.lip.shape());
    CHECK(eh.expr.shape() == z.expr.shape());

    // guided: diffused streams are exactly {lip, expr}
    ConditioningBundle Fg = prior.make_conditioning(audio.features, render_avatar(states[0], 1),
                                                    landmarks);
    MotionTokens zg = prior.encode_motion_ground_truth(states);
    zg.landmark_guided = true;
    zg.head = *Fg.head_tokens;
    MotionTokens ehg = prior.prior_forward(zg, 3, Fg);
    CHECK(ehg.streams() == 2);
    CHECK(!ehg.head.defined());

    // inconsistent flag errors
    zg.landmark_guided = false;
    CHECK_THROWS_AS(prior.prior_forward(zg, 3, Fg), ConfigError);
}

TEST_CASE("prior_forward is causal over motion positions") {
    PrecisionGuard pg(Precision::f64);
    auto prior = small_prior(false, 14);
    Rng r(10);
    int64_t T = 4, d = 8, c = 3;
    AudioTrack audio = synth_audio(T, r);
    auto states = random_states(T, r);
    ConditioningBundle Fp =
        prior.make_conditioning(audio.features, render_avatar(states[0], 2), std::nullopt);

    Tensor packed = MotionPrior::pack(prior.encode_motion_ground_truth(states));
    Tensor base = MotionPrior::pack(prior.prior_forward(MotionPrior::unpack(packed, false), 5, Fp));

    // perturb frame t', stream j'; everything strictly earlier in the
    // frame-major order must be bit-identical
    for (auto [tp, jp] : std::vector<std::pair<int64_t, int64_t>>{{1, 0}, {2, 2}, {3, 1}}) {
        std::vector<double> pd(packed.data().begin(), packed.data().end());
        for (int64_t k = 0; k < d; ++k) pd[static_cast<size_t>(((tp * c) + jp) * d + k)] += 2.0;
        Tensor out = MotionPrior::pack(
            prior.prior_forward(MotionPrior::unpack(Tensor::from({T, c, d}, pd), false), 5, Fp));
        for (int64_t t = 0; t < T; ++t)
            for (int64_t j = 0; j < c; ++j) {
                if (t * c + j >= tp * c + jp) continue;
                for (int64_t k = 0; k < d; ++k) CHECK(out.at({t, j, k}) == base.at({t, j, k}));
            }
    }
}

TEST_CASE("prior_forward passes grad_check on a small instance") {
    auto prior = small_prior(false, 15);
    Rng r(11);
    int64_t T = 4, d = 8, c = 3;
    AudioTrack audio = synth_audio(T, r);
    auto states = random_states(T, r);
    ConditioningBundle Fp =
        prior.make_conditioning(audio.features, render_avatar(states[0], 3), std::nullopt);
    Tensor probe = rng_tensor(r, {T, c, d}, Dist::normal);
    auto f = [&](const Tensor& x) {
        MotionTokens z = MotionPrior::unpack(x, false);
        return sum(square(MotionPrior::pack(prior.prior_forward(z, 2, Fp))));
    };
    CHECK(grad_check(f, probe, 1e-6) < 1e-4);
}

TEST_CASE("train_prior respects landmark dropout and rejects empty data") {
    MotionPrior::Config cfg;
    cfg.T = 8;
    cfg.d = 16;
    cfg.L = 2;
    MotionPrior prior(cfg, 20);
    Rng r(12);
    std::vector<ClipBatch> clips;
    for (int64_t i = 0; i < 4; ++i) clips.push_back(make_clip(i, 1, 4, 8, r));

    PriorTrainConfig tc;
    tc.steps = 5;
    tc.batch = 2;
    tc.landmark_dropout = 1.0;
    Rng tr(13);
    auto stats = train_prior(prior, clips, tc, tr);
    CHECK(stats.guided_batches == 0);  // head tokens never conditioned
    CHECK(stats.unguided_batches == 10);
    for (double l : stats.losses) CHECK(std::isfinite(l));

    CHECK_THROWS_AS(train_prior(prior, {}, tc, tr), ConfigError);
}

TEST_CASE("short training run reduces the loss") {
    MotionPrior::Config cfg;
    cfg.T = 8;
    cfg.d = 16;
    cfg.L = 2;
    MotionPrior prior(cfg, 21);
    Rng r(14);
    std::vector<ClipBatch> clips;
    for (int64_t i = 0; i < 8; ++i) clips.push_back(make_clip(i, 1 + (i % 2), 4, 8, r));

    PriorTrainConfig tc;
    tc.steps = 240;
    tc.batch = 2;
    tc.lr = 2e-3;
    Rng tr(15);
    auto stats = train_prior(prior, clips, tc, tr);
    auto median_of = [&](int64_t from, int64_t count) {
        std::vector<double> v(stats.losses.begin() + from, stats.losses.begin() + from + count);
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    CHECK(median_of(180, 60) < median_of(0, 60));
}

TEST_CASE("sample_motion is deterministic and decodable") {
    MotionPrior::Config cfg;
    cfg.T = 8;
    cfg.d = 16;
    cfg.L = 2;
    MotionPrior prior(cfg, 22);
    Rng r(16);
    AudioTrack audio = synth_audio(8, r);
    ConditioningBundle Fp =
        prior.make_conditioning(audio.features, render_avatar(MotionState::neutral(), 1),
                                std::nullopt);
    auto sched = make_schedule(10, 1e-3, 0.1);
    Rng s1(17), s2(17);
    MotionTokens a = prior.sample_motion(Fp, sched, s1);
    MotionTokens b = prior.sample_motion(Fp, sched, s2);
    for (int64_t i = 0; i < a.lip.numel(); ++i)
        CHECK(a.lip.data()[static_cast<size_t>(i)] == b.lip.data()[static_cast<size_t>(i)]);
    CHECK(a.streams() == 3);

    // nearest-neighbor decode round-trips the frozen lip embedding
    std::vector<MotionState> grid(11);
    for (int i = 0; i <= 10; ++i) grid[static_cast<size_t>(i)].mouth_open = i / 10.0;
    Tensor lips = prior.encode_motion_ground_truth(grid).lip;
    auto decoded = prior.decode_mouth(lips);
    for (int i = 0; i <= 10; ++i)
        CHECK(decoded[static_cast<size_t>(i)] == doctest::Approx(i / 10.0).epsilon(1e-6));
}
