#pragma once

// Archived-clip pipeline: a frozen seed-derived strided convolution stands
// in for the latent encoder (4 channels at 1/8 resolution, never trained),
// followed by a learnable 1x1 patchify projection and frame-aligned
// attention against the reference frame.

#include <string>
#include <vector>

#include "mcdm/attention.hpp"
#include "mcdm/optim.hpp"

namespace mcdm {

class ArchivedPrior {
  public:
    struct Config {
        int64_t d = 32;  // token embedding dim
        int64_t n = 16;  // learnable query count
    };

    ArchivedPrior(Config cfg, uint64_t seed) : cfg_(cfg) {
        Rng rng(Rng::mix(seed, 0xA3C4ULL));
        // frozen latent transform: 8x8 stride-8 kernels, 1 -> 4 channels
        store_.add("arch.latent.w", normal_init(rng, {4, 8, 8}, 1.0 / 8.0, false));
        store_.add("arch.latent.b", normal_init(rng, {4}, 0.05, false));
        store_.add("arch.patch.w", linear_init(rng, 4, cfg_.d));
        store_.add("arch.patch.b", Tensor::zeros({cfg_.d}, true));
        auto fa = make_frame_aligned(rng, cfg_.n, cfg_.d, true);
        store_.add("arch.fa.wk", fa.W_K);
        store_.add("arch.fa.wv", fa.W_V);
        store_.add("arch.fa.q", fa.Q);
    }

    const Config& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    std::vector<std::string> frozen_names() const { return store_.names_with_prefix("arch.latent."); }
    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& n : store_.names())
            if (n.rfind("arch.latent.", 0) != 0) out.push_back(n);
        return out;
    }

    FrameAlignedParams frame_aligned() const {
        return FrameAlignedParams{store_.get("arch.fa.wk"), store_.get("arch.fa.wv"),
                                  store_.get("arch.fa.q")};
    }

    // [f, H, W] -> [f, 4, H/8, W/8]; deterministic, never trained
    Tensor latent_encode(const Tensor& frames) const {
        if (frames.ndim() != 3) throw ShapeError("latent_encode expects [frames, H, W]");
        int64_t f = frames.dim(0), H = frames.dim(1), W = frames.dim(2);
        if (H % 8 != 0 || W % 8 != 0)
            throw ShapeError("latent_encode: resolution " + shape_str(frames.shape()) +
                             " not divisible by 8");
        int64_t hh = H / 8, ww = W / 8;
        const Tensor& w = store_.get("arch.latent.w");
        const Tensor& b = store_.get("arch.latent.b");
        std::vector<double> out(static_cast<size_t>(f * 4 * hh * ww));
        const auto fd = frames.data();
        for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t c = 0; c < 4; ++c)
                for (int64_t gy = 0; gy < hh; ++gy)
                    for (int64_t gx = 0; gx < ww; ++gx) {
                        double acc = b.data()[static_cast<size_t>(c)];
                        for (int64_t dy = 0; dy < 8; ++dy)
                            for (int64_t dx = 0; dx < 8; ++dx)
                                acc += w.at({c, dy, dx}) *
                                       fd[static_cast<size_t>((fi * H + gy * 8 + dy) * W +
                                                              gx * 8 + dx)];
                        out[static_cast<size_t>(((fi * 4 + c) * hh + gy) * ww + gx)] = acc;
                    }
        return Tensor::from({f, 4, hh, ww}, std::move(out));
    }

    // learnable 1x1 projection then row-major flatten: token index is
    // row * (W/8) + col
    Tensor patchify(const Tensor& latents) const {
        if (latents.ndim() != 4 || latents.dim(1) != 4)
            throw ShapeError("patchify expects [frames, 4, h, w]");
        int64_t f = latents.dim(0), hh = latents.dim(2), ww = latents.dim(3);
        Tensor channels_last = permute(latents, {0, 2, 3, 1});       // [f, h, w, 4]
        Tensor flat = reshape(channels_last, {f, hh * ww, 4});       // [f, m, 4]
        return add(matmul(flat, store_.get("arch.patch.w")), store_.get("arch.patch.b"));
    }

    // reference frame [H, W] + archived frames [a, H, W] -> F_ac [a, n, d]
    Tensor forward(const Tensor& ref_frame, const Tensor& archived) const {
        if (archived.ndim() != 3) throw ShapeError("archived clip must be [a, H, W]");
        Tensor ref3 = reshape(ref_frame, {1, ref_frame.dim(0), ref_frame.dim(1)});
        Tensor F_x = patchify(latent_encode(ref3));       // [1, m, d]
        Tensor F_a = patchify(latent_encode(archived));   // [a, m, d]
        int64_t a = F_a.dim(0), m = F_a.dim(1);
        Tensor out = frame_aligned_attention(reshape(F_x, {1, 1, m, cfg_.d}),
                                             reshape(F_a, {1, a, m, cfg_.d}), frame_aligned());
        return reshape(out, {a, cfg_.n, cfg_.d});
    }

    Tensor forward(const Tensor& ref_frame, const std::vector<Tensor>& archived) const {
        if (archived.empty()) throw ShapeError("empty archived clip");
        return forward(ref_frame, stack(archived));
    }

  private:
    Config cfg_;
    ParamStore store_;
};

}  // namespace mcdm
