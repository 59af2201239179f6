#pragma once

// Named parameter store, trainable-group selection by name prefix, AdamW
// with decoupled weight decay, and FNV-1a hashing of parameter groups (the
// stage-freezing contract is verified by comparing these hashes).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mcdm/io.hpp"
#include "mcdm/tensor.hpp"

namespace mcdm {

class ParamStore {
  public:
    Tensor& add(const std::string& name, Tensor t) {
        if (params_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
        order_.push_back(name);
        return params_.emplace(name, std::move(t)).first->second;
    }

    Tensor& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& n : order_)
            if (n.rfind(prefix, 0) == 0) out.push_back(n);
        return out;
    }

    void zero_grad() {
        for (auto& [n, t] : params_) t.zero_grad();
    }

    // FNV-1a over the raw bytes of every tensor in the group, in name order.
    uint64_t hash_group(const std::vector<std::string>& names) const {
        uint64_t h = 1469598103934665603ULL;
        auto mix_bytes = [&h](const void* p, size_t len) {
            const unsigned char* b = static_cast<const unsigned char*>(p);
            for (size_t i = 0; i < len; ++i) {
                h ^= b[i];
                h *= 1099511628211ULL;
            }
        };
        for (const auto& n : names) {
            mix_bytes(n.data(), n.size());
            auto d = get(n).data();
            mix_bytes(d.data(), d.size() * sizeof(double));
        }
        return h;
    }
    uint64_t hash_all() const { return hash_group(order_); }

    void save(const std::string& path) const {
        std::vector<std::pair<std::string, Tensor>> named;
        named.reserve(order_.size());
        for (const auto& n : order_) named.emplace_back(n, get(n));
        save_tensors(path, named);
    }

    // Loads values into existing parameters; shapes must match.
    void load(const std::string& path) {
        for (auto& [name, t] : load_tensors(path)) {
            Tensor& dst = get(name);
            if (dst.shape() != t.shape())
                throw IoError(path + ": shape mismatch for '" + name + "': file " +
                              shape_str(t.shape()) + " vs model " + shape_str(dst.shape()));
            auto& d = dst.mutable_data();
            std::copy(t.data().begin(), t.data().end(), d.begin());
        }
    }

  private:
    std::map<std::string, Tensor> params_;
    std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// AdamW.  p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
// ---------------------------------------------------------------------------

class AdamW {
  public:
    AdamW(ParamStore& store, std::vector<std::string> trainable, double lr,
          double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : store_(store),
          names_(std::move(trainable)),
          lr_(lr),
          wd_(weight_decay),
          b1_(beta1),
          b2_(beta2),
          eps_(eps) {
        for (const auto& n : names_) {
            const Tensor& t = store_.get(n);
            m_.emplace_back(t.numel(), 0.0);
            v_.emplace_back(t.numel(), 0.0);
        }
    }

    const std::vector<std::string>& trainable() const { return names_; }
    int64_t step_count() const { return step_; }
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void step() {
        ++step_;
        double bc1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
        for (size_t pi = 0; pi < names_.size(); ++pi) {
            Tensor& t = store_.get(names_[pi]);
            if (!t.has_grad()) continue;
            auto g = t.grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            auto& d = t.mutable_data();
            for (size_t i = 0; i < d.size(); ++i) {
                m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
                v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
                double mh = m[i] / bc1;
                double vh = v[i] / bc2;
                d[i] -= lr_ * mh / (std::sqrt(vh) + eps_) + lr_ * wd_ * d[i];
            }
        }
        for (size_t pi = 0; pi < names_.size(); ++pi) {
            auto& d = store_.get(names_[pi]).mutable_data();
            quantize_inplace(d);
        }
    }

  private:
    ParamStore& store_;
    std::vector<std::string> names_;
    double lr_, wd_, b1_, b2_, eps_;
    int64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// linear warmup then cosine decay to one tenth of the peak
inline double warmup_cosine_lr(double peak, int64_t step, int64_t total, int64_t warmup = 100) {
    if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    double frac = static_cast<double>(step - warmup) / static_cast<double>(std::max<int64_t>(1, total - warmup));
    return peak * (0.1 + 0.45 * (1.0 + std::cos(3.141592653589793 * frac)));
}

// ---------------------------------------------------------------------------
// Common initializers
// ---------------------------------------------------------------------------

inline Tensor normal_init(Rng& rng, Shape shape, double stddev, bool requires_grad = true) {
    Tensor t = rng_tensor(rng, shape, Dist::normal, requires_grad);
    if (stddev != 1.0) {
        auto& d = t.mutable_data();
        for (double& v : d) v *= stddev;
        quantize_inplace(d);
    }
    return t;
}

// Fan-in scaled init for linear layers [in, out].
inline Tensor linear_init(Rng& rng, int64_t in, int64_t out, bool requires_grad = true) {
    return normal_init(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), requires_grad);
}

}  // namespace mcdm
