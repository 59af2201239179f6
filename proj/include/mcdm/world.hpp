#pragma once

// Procedural stand-in for talking-face data: a deterministic avatar raster
// driven by MotionState, an audio synthesizer whose envelope drives mouth
// openness with a one-frame lag, trajectory generation, and the on-disk
// dataset container.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mcdm/io.hpp"
#include "mcdm/tensor.hpp"

namespace mcdm {

constexpr int64_t kExprBasis = 8;

struct MotionState {
    double yaw = 0.0;    // [-0.5, 0.5] radians
    double pitch = 0.0;  // [-0.3, 0.3] radians
    double mouth_open = 0.0;  // [0, 1]
    std::array<double, kExprBasis> expr{};  // simplex weights

    static MotionState neutral() {
        MotionState s;
        s.mouth_open = 0.2;
        s.expr[0] = 1.0;
        return s;
    }
};

struct AudioTrack {
    std::vector<double> envelope;  // [T] in [0, 1]
    Tensor features;               // [T, k]: envelope plus k-1 band channels
    int64_t frames() const { return static_cast<int64_t>(envelope.size()); }
};

constexpr int64_t kAudioFeatures = 4;

// Smoothed random envelope (moving average of uniform noise, window 5) plus
// seed-phased band channels modulated by the envelope.
inline AudioTrack synth_audio(int64_t T, Rng& rng) {
    if (T < 1) throw ConfigError("synth_audio needs T >= 1");
    std::vector<double> raw(static_cast<size_t>(T + 4));
    for (double& v : raw) v = rng.uniform();
    AudioTrack track;
    track.envelope.resize(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
        double acc = 0.0;
        for (int64_t w = 0; w < 5; ++w) acc += raw[static_cast<size_t>(t + w)];
        track.envelope[static_cast<size_t>(t)] = acc / 5.0;
    }
    std::array<double, kAudioFeatures - 1> phase{};
    for (auto& p : phase) p = rng.uniform() * 6.283185307179586;
    std::vector<double> feat(static_cast<size_t>(T * kAudioFeatures));
    for (int64_t t = 0; t < T; ++t) {
        feat[static_cast<size_t>(t * kAudioFeatures)] = track.envelope[static_cast<size_t>(t)];
        for (int64_t j = 1; j < kAudioFeatures; ++j) {
            double omega = 6.283185307179586 / (8.0 * static_cast<double>(j));
            double band = 0.5 + 0.5 * std::sin(omega * static_cast<double>(t) +
                                               phase[static_cast<size_t>(j - 1)]);
            feat[static_cast<size_t>(t * kAudioFeatures + j)] =
                track.envelope[static_cast<size_t>(t)] * band;
        }
    }
    track.features = Tensor::from({T, kAudioFeatures}, std::move(feat));
    return track;
}

// mouth_open[t] = clamp(envelope[t-1]); yaw/pitch are reflected random
// walks; expression is piecewise-constant one-hot with mean segment length
// 32 frames.
inline std::vector<MotionState> synth_motion(const AudioTrack& audio, Rng& rng) {
    int64_t T = audio.frames();
    std::vector<MotionState> states(static_cast<size_t>(T));
    auto reflect = [](double v, double bound) {
        while (v > bound || v < -bound) {
            if (v > bound) v = 2.0 * bound - v;
            if (v < -bound) v = -2.0 * bound - v;
        }
        return v;
    };
    double yaw = (rng.uniform() - 0.5) * 0.4;
    double pitch = (rng.uniform() - 0.5) * 0.2;
    size_t expr_idx = static_cast<size_t>(rng.next_u64() % kExprBasis);
    for (int64_t t = 0; t < T; ++t) {
        MotionState& s = states[static_cast<size_t>(t)];
        yaw = reflect(yaw + 0.03 * rng.normal(), 0.5);
        pitch = reflect(pitch + 0.02 * rng.normal(), 0.3);
        if (rng.uniform() < 1.0 / 32.0) expr_idx = static_cast<size_t>(rng.next_u64() % kExprBasis);
        s.yaw = yaw;
        s.pitch = pitch;
        s.mouth_open =
            t == 0 ? 0.0
                   : std::clamp(audio.envelope[static_cast<size_t>(t - 1)], 0.0, 1.0);
        s.expr[expr_idx] = 1.0;
    }
    return states;
}

// ---------------------------------------------------------------------------
// renderer
// ---------------------------------------------------------------------------

constexpr int64_t kFrameSize = 64;

namespace detail {

struct Identity {
    double face_ry, face_rx;
    double eye_dx;
    double shade_slope;
    double base;
};

inline Identity identity_geometry(uint64_t seed) {
    Rng r(Rng::mix(seed, 0xFACEULL));
    Identity id;
    id.face_ry = 19.0 + 4.0 * r.uniform();
    id.face_rx = 15.0 + 3.0 * r.uniform();
    id.eye_dx = 5.0 + 2.5 * r.uniform();
    id.shade_slope = (r.uniform() - 0.5) * 0.24;
    id.base = 0.56 + 0.10 * r.uniform();
    return id;
}

}  // namespace detail

// Deterministic 64x64 grayscale raster in [0, 1]. The face ellipse shifts
// with (yaw, pitch); the mouth ellipse height tracks mouth_open; the brow
// angle tracks the dominant expression basis; the identity seed fixes base
// geometry and shading. Intensities keep the mouth (0.04) as the only region
// below the darkness threshold used by extract_mouth_openness.
inline Tensor render_avatar(const MotionState& st, uint64_t identity) {
    auto id = detail::identity_geometry(identity);
    const int64_t N = kFrameSize;
    double cy = 32.0 + st.pitch * 20.0;
    double cx = 32.0 + st.yaw * 20.0;
    double mouth_rh = 1.0 + 5.0 * std::clamp(st.mouth_open, 0.0, 1.0);
    const double mouth_rw = 8.0;
    double mouth_cy = cy + 10.0, mouth_cx = cx;
    double eye_cy = cy - 8.0;
    int64_t dominant = 0;
    for (int64_t e = 1; e < kExprBasis; ++e)
        if (st.expr[static_cast<size_t>(e)] > st.expr[static_cast<size_t>(dominant)]) dominant = e;
    double brow_slope = (static_cast<double>(dominant) / 7.0 - 0.5) * 0.8;

    std::vector<double> px(static_cast<size_t>(N * N), 0.85);
    for (int64_t y = 0; y < N; ++y)
        for (int64_t x = 0; x < N; ++x) {
            double fy = (static_cast<double>(y) - cy) / id.face_ry;
            double fx = (static_cast<double>(x) - cx) / id.face_rx;
            if (fy * fy + fx * fx > 1.0) continue;  // background
            double v = id.base + id.shade_slope * fy;

            // eyes
            for (double sgn : {-1.0, 1.0}) {
                double dy = (static_cast<double>(y) - eye_cy) / 1.6;
                double dx = (static_cast<double>(x) - (cx + sgn * id.eye_dx)) / 2.2;
                if (dy * dy + dx * dx <= 1.0) v = 0.30;
            }
            // brows: short angled bands above the eyes
            for (double sgn : {-1.0, 1.0}) {
                double bx = static_cast<double>(x) - (cx + sgn * id.eye_dx);
                double by = static_cast<double>(y) - (eye_cy - 4.0 + sgn * brow_slope * bx);
                if (std::abs(bx) <= 3.0 && std::abs(by) <= 0.9) v = 0.30;
            }
            // mouth
            double my = (static_cast<double>(y) - mouth_cy) / mouth_rh;
            double mx = (static_cast<double>(x) - mouth_cx) / mouth_rw;
            if (my * my + mx * mx <= 1.0) v = 0.04;

            px[static_cast<size_t>(y * N + x)] = v;
        }
    return Tensor::from({N, N}, std::move(px));
}

// Dark-pixel ratio inside the fixed search box (rows 30..56, cols 10..53,
// covering the mouth across the full pose range), affinely rescaled so that
// the canonical closed/open renders map to 0 and 1.
inline double extract_mouth_openness(const Tensor& frame) {
    if (frame.shape() != Shape{kFrameSize, kFrameSize})
        throw ShapeError("extract_mouth_openness expects a 64x64 frame");
    auto ratio = [](const Tensor& f) {
        int64_t dark = 0, total = 0;
        for (int64_t y = 30; y <= 56; ++y)
            for (int64_t x = 10; x <= 53; ++x) {
                ++total;
                if (f.at({y, x}) < 0.15) ++dark;
            }
        return static_cast<double>(dark) / static_cast<double>(total);
    };
    static const double r0 = [] {
        MotionState s;
        s.expr[0] = 1.0;
        s.mouth_open = 0.0;
        int64_t dark = 0, total = 0;
        Tensor f = render_avatar(s, 0);
        for (int64_t y = 30; y <= 56; ++y)
            for (int64_t x = 10; x <= 53; ++x) {
                ++total;
                if (f.at({y, x}) < 0.15) ++dark;
            }
        return static_cast<double>(dark) / static_cast<double>(total);
    }();
    static const double r1 = [] {
        MotionState s;
        s.expr[0] = 1.0;
        s.mouth_open = 1.0;
        int64_t dark = 0, total = 0;
        Tensor f = render_avatar(s, 0);
        for (int64_t y = 30; y <= 56; ++y)
            for (int64_t x = 10; x <= 53; ++x) {
                ++total;
                if (f.at({y, x}) < 0.15) ++dark;
            }
        return static_cast<double>(dark) / static_cast<double>(total);
    }();
    return std::clamp((ratio(frame) - r0) / (r1 - r0), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// clip batches and the dataset container
// ---------------------------------------------------------------------------

struct ClipBatch {
    int64_t id = 0;
    uint64_t identity = 0;
    Tensor ref_frame;        // [H, W]
    Tensor archived_frames;  // [a, H, W]
    Tensor target_frames;    // [T, H, W]
    AudioTrack audio;        // a + T frames; rows [a, a+T) belong to the target clip
    std::vector<MotionState> states;  // target clip, length T
    std::optional<Tensor> landmarks;  // [T, 2] head-pose track (yaw, pitch)
};

inline Tensor states_tensor(const std::vector<MotionState>& states) {
    int64_t T = static_cast<int64_t>(states.size());
    std::vector<double> data(static_cast<size_t>(T * (3 + kExprBasis)));
    for (int64_t t = 0; t < T; ++t) {
        const MotionState& s = states[static_cast<size_t>(t)];
        double* row = &data[static_cast<size_t>(t * (3 + kExprBasis))];
        row[0] = s.yaw;
        row[1] = s.pitch;
        row[2] = s.mouth_open;
        for (int64_t e = 0; e < kExprBasis; ++e) row[3 + e] = s.expr[static_cast<size_t>(e)];
    }
    return Tensor::from({T, 3 + kExprBasis}, std::move(data));
}

inline std::vector<MotionState> states_from_tensor(const Tensor& t) {
    if (t.ndim() != 2 || t.dim(1) != 3 + kExprBasis)
        throw IoError("malformed motion-state tensor " + shape_str(t.shape()));
    std::vector<MotionState> out(static_cast<size_t>(t.dim(0)));
    for (int64_t i = 0; i < t.dim(0); ++i) {
        MotionState& s = out[static_cast<size_t>(i)];
        s.yaw = t.at({i, 0});
        s.pitch = t.at({i, 1});
        s.mouth_open = t.at({i, 2});
        for (int64_t e = 0; e < kExprBasis; ++e) s.expr[static_cast<size_t>(e)] = t.at({i, 3 + e});
    }
    return out;
}

// One training unit: a contiguous trajectory of a + T frames rendered for
// one identity; the first a frames form the archived window and the last T
// the target clip, so the target continues the archived motion.
inline ClipBatch make_clip(int64_t id, uint64_t identity, int64_t a, int64_t T, Rng& rng) {
    ClipBatch clip;
    clip.id = id;
    clip.identity = identity;
    clip.audio = synth_audio(a + T, rng);
    auto all_states = synth_motion(clip.audio, rng);

    clip.ref_frame = render_avatar(MotionState::neutral(), identity);
    std::vector<Tensor> arch, targ;
    for (int64_t t = 0; t < a; ++t)
        arch.push_back(render_avatar(all_states[static_cast<size_t>(t)], identity));
    for (int64_t t = a; t < a + T; ++t)
        targ.push_back(render_avatar(all_states[static_cast<size_t>(t)], identity));
    clip.archived_frames = stack(arch);
    clip.target_frames = stack(targ);
    clip.states.assign(all_states.begin() + a, all_states.end());

    // push scalar state through the tensor path so in-memory values carry
    // the active precision exactly like their on-disk form
    clip.states = states_from_tensor(states_tensor(clip.states));
    for (int64_t t = 0; t < a + T; ++t)
        clip.audio.envelope[static_cast<size_t>(t)] = clip.audio.features.at({t, 0});

    std::vector<double> lm(static_cast<size_t>(T * 2));
    for (int64_t t = 0; t < T; ++t) {
        lm[static_cast<size_t>(t * 2)] = clip.states[static_cast<size_t>(t)].yaw;
        lm[static_cast<size_t>(t * 2 + 1)] = clip.states[static_cast<size_t>(t)].pitch;
    }
    clip.landmarks = Tensor::from({T, 2}, std::move(lm));
    return clip;
}

inline void write_dataset(const std::vector<ClipBatch>& clips, const std::string& path) {
    namespace fs = std::filesystem;
    fs::create_directories(path);
    std::ofstream manifest(fs::path(path) / "manifest.txt");
    if (!manifest) throw IoError(path + ": cannot write manifest");
    manifest << "# mcdm dataset\n";
    manifest << "# clip <id> identity=<seed> archived=<a> target=<T>\n";
    for (const ClipBatch& c : clips) {
        manifest << "clip " << c.id << " identity=" << c.identity
                 << " archived=" << c.archived_frames.dim(0)
                 << " target=" << c.target_frames.dim(0) << "\n";
        std::string stem = (fs::path(path) / ("clip_" + std::to_string(c.id))).string();
        save_tensor(stem + "_ref.mct", c.ref_frame);
        save_tensor(stem + "_arch.mct", c.archived_frames);
        save_tensor(stem + "_target.mct", c.target_frames);
        save_tensor(stem + "_audio.mct", c.audio.features);
        save_tensor(stem + "_states.mct", states_tensor(c.states));
        if (c.landmarks) save_tensor(stem + "_landmarks.mct", *c.landmarks);
    }
}

inline std::vector<ClipBatch> read_dataset(const std::string& path) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(path) / "manifest.txt");
    if (!manifest) throw IoError(path + ": missing manifest.txt");
    std::vector<ClipBatch> clips;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word != "clip") throw IoError(path + ": malformed manifest line '" + line + "'");
        ClipBatch c;
        ls >> c.id;
        std::string kv;
        while (ls >> kv) {
            auto eq = kv.find('=');
            if (eq == std::string::npos) continue;
            if (kv.substr(0, eq) == "identity") c.identity = std::stoull(kv.substr(eq + 1));
        }
        std::string stem = (fs::path(path) / ("clip_" + std::to_string(c.id))).string();
        c.ref_frame = load_tensor(stem + "_ref.mct");
        c.archived_frames = load_tensor(stem + "_arch.mct");
        c.target_frames = load_tensor(stem + "_target.mct");
        Tensor audio_feat = load_tensor(stem + "_audio.mct");
        c.states = states_from_tensor(load_tensor(stem + "_states.mct"));
        if (fs::exists(stem + "_landmarks.mct")) c.landmarks = load_tensor(stem + "_landmarks.mct");

        c.audio.features = audio_feat;
        c.audio.envelope.resize(static_cast<size_t>(audio_feat.dim(0)));
        for (int64_t t = 0; t < audio_feat.dim(0); ++t)
            c.audio.envelope[static_cast<size_t>(t)] = audio_feat.at({t, 0});

        // validate documented ranges
        for (const Tensor* t : {&c.ref_frame, &c.archived_frames, &c.target_frames})
            for (double v : t->data())
                if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                    throw IoError(stem + ": frame value out of [0,1]");
        for (double v : c.audio.envelope)
            if (!std::isfinite(v) || v < 0.0 || v > 1.0)
                throw IoError(stem + ": envelope value out of [0,1]");
        for (const MotionState& s : c.states) {
            double sum = 0.0;
            for (double e : s.expr) sum += e;
            if (std::abs(sum - 1.0) > 1e-6) throw IoError(stem + ": expression weights off simplex");
        }
        clips.push_back(std::move(c));
    }
    return clips;
}

}  // namespace mcdm
