// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen encoder: a small vision transformer pretrained as a shape
// classifier. After freezing, the classification head is dropped and only
// patch embeddings and per-layer attention maps are exposed.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/ops.hpp"
#include "aligndesk/ndgrad/params.hpp"
#include "aligndesk/nn.hpp"
#include "aligndesk/optim.hpp"
#include "aligndesk/synthdata.hpp"

namespace aligndesk {

struct TeacherConfig {
    std::size_t depth = 6;
    std::size_t width = 96;
    std::size_t heads = 4;
    std::size_t patch = 4;
    std::size_t image_size = 16;
    std::size_t classes = 8;
    std::size_t mlp_ratio = 4;

    std::size_t grid() const { return image_size / patch; }
    std::size_t tokens() const { return grid() * grid(); }

    void validate() const {
        if (depth == 0 || width == 0 || heads == 0 || patch == 0 || classes == 0 || mlp_ratio == 0) {
            throw ConfigError("teacher: all sizes must be positive");
        }
        if (width % heads != 0) throw ConfigError("teacher: width must be divisible by heads");
        if (image_size % patch != 0) throw ConfigError("teacher: image size must be divisible by patch");
    }
};

template <class T>
struct BasicTeacherOutputs {
    BasicArray<T> y;                  // [B, N, d_T]
    std::vector<BasicArray<T>> attn;  // per layer, [B, M_T, N, N]

    std::size_t size() const { return y.shape().empty() ? 0 : y.dim(0); }

    template <class U>
    BasicTeacherOutputs<U> cast() const {
        BasicTeacherOutputs<U> out{y.template cast<U>(), {}};
        for (const auto& a : attn) out.attn.push_back(a.template cast<U>());
        return out;
    }
};

using TeacherOutputs = BasicTeacherOutputs<float>;

/// Rows `indices` of a batch of teacher outputs.
inline TeacherOutputs select(const TeacherOutputs& src, const std::vector<std::size_t>& indices) {
    auto take = [&](const Array& a) {
        Shape s = a.shape();
        const std::size_t per = a.size() / s[0];
        s[0] = indices.size();
        Array out(s);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy_n(a.data() + indices[i] * per, per, out.data() + i * per);
        }
        return out;
    };
    TeacherOutputs out{take(src.y), {}};
    for (const auto& a : src.attn) out.attn.push_back(take(a));
    return out;
}

template <class T>
class BasicTeacher {
public:
    using Params = BasicParamSet<T>;

    BasicTeacher(TeacherConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng = Rng(seed).split("teacher-init");
        const std::size_t d = cfg_.width;
        nn::add_linear(params_, "patch_embed", cfg_.patch * cfg_.patch, d, rng);
        params_.add("pos_embed", normal_array<T>({cfg_.tokens(), d}, 0.02, rng));
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string b = block_prefix(l);
            nn::add_affine_norm(params_, b + "norm1", d);
            nn::add_attention(params_, b + "attn", d, rng);
            nn::add_affine_norm(params_, b + "norm2", d);
            nn::add_mlp(params_, b + "mlp", d, d * cfg_.mlp_ratio, rng);
        }
        nn::add_affine_norm(params_, "norm", d);
        nn::add_linear(params_, "head", d, cfg_.classes, rng);
    }

    BasicTeacher(TeacherConfig cfg, Params params, bool frozen) : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate();
        if (frozen) freeze();
    }

    static std::string block_prefix(std::size_t l) { return "blocks." + std::to_string(l) + "."; }

    const TeacherConfig& config() const noexcept { return cfg_; }
    const Params& params() const noexcept { return params_; }
    Params& params() noexcept { return params_; }
    bool frozen() const noexcept { return frozen_; }

    /// Drops the classification head and stops all gradient flow into the
    /// encoder. Irreversible.
    void freeze() {
        params_.erase_prefix("head.");
        params_.set_requires_grad(false);
        params_.zero_grad();
        frozen_ = true;
        checksum_ = params_.checksum();
    }

    std::uint64_t checksum() const {
        if (!frozen_) throw ContractError("teacher checksum requested before freezing");
        return checksum_;
    }

    struct Forward {
        VarT<T> tokens;               // [B, N, d_T] after the final norm
        std::vector<VarT<T>> attn;    // per layer
    };

    Forward forward(const BasicArray<T>& x) const {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != cfg_.image_size || s[2] != cfg_.image_size || s[3] != 1) {
            throw ShapeError("teacher: expected [B," + std::to_string(cfg_.image_size) + "," +
                             std::to_string(cfg_.image_size) + ",1], got " + to_string(s));
        }
        VarT<T> h = add(nn::apply_linear(params_, "patch_embed", nn::patchify(constant(x), cfg_.patch)),
                        params_.at("pos_embed"));
        Forward out;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string b = block_prefix(l);
            auto a = nn::attention(params_, b + "attn", nn::affine_norm(params_, b + "norm1", h), cfg_.heads);
            h = add(h, a.out);
            h = add(h, nn::mlp(params_, b + "mlp", nn::affine_norm(params_, b + "norm2", h)));
            out.attn.push_back(std::move(a.attn));
        }
        out.tokens = nn::affine_norm(params_, "norm", h);
        return out;
    }

    /// Class logits [B, C] from the mean-pooled tokens; pretraining only.
    VarT<T> logits(const BasicArray<T>& x) const {
        if (frozen_) throw ContractError("teacher: classification head was dropped at freeze");
        return nn::apply_linear(params_, "head", mean_axis(forward(x).tokens, 1));
    }

    TeacherOutputs encode(const BasicArray<T>& x) const {
        if (!frozen_) throw ContractError("teacher: encode requires a frozen teacher");
        NoGradGuard guard;
        Forward f = forward(x);
        TeacherOutputs out{f.tokens->value.template cast<float>(), {}};
        for (const auto& a : f.attn) out.attn.push_back(a->value.template cast<float>());
        return out;
    }

    /// Encodes in chunks to bound peak memory.
    TeacherOutputs encode_all(const BasicArray<T>& x, std::size_t chunk = 256) const {
        const std::size_t n = x.dim(0);
        const std::size_t per = x.size() / n;
        TeacherOutputs out;
        for (std::size_t start = 0; start < n; start += chunk) {
            const std::size_t len = std::min(chunk, n - start);
            Shape s = x.shape();
            s[0] = len;
            BasicArray<T> part(s, std::vector<T>(x.data() + start * per, x.data() + (start + len) * per));
            TeacherOutputs o = encode(part);
            if (start == 0) {
                Shape ys = o.y.shape();
                ys[0] = n;
                out.y = Array(ys);
                for (const auto& a : o.attn) {
                    Shape as = a.shape();
                    as[0] = n;
                    out.attn.emplace_back(as);
                }
            }
            std::copy_n(o.y.data(), o.y.size(), out.y.data() + start * (o.y.size() / len));
            for (std::size_t l = 0; l < o.attn.size(); ++l) {
                std::copy_n(o.attn[l].data(), o.attn[l].size(),
                            out.attn[l].data() + start * (o.attn[l].size() / len));
            }
        }
        return out;
    }

private:
    TeacherConfig cfg_;
    Params params_;
    bool frozen_ = false;
    std::uint64_t checksum_ = 0;
};

using Teacher = BasicTeacher<float>;

// ---------------------------------------------------------------- pretraining

struct TeacherTrainConfig {
    std::size_t steps = 1500;
    std::size_t batch = 64;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

struct TeacherTrainReport {
    std::vector<double> losses;
    bool divergence_warning = false;
};

/// Mean cross-entropy of class logits [B, C] against integer labels.
template <class T>
VarT<T> classification_loss(const VarT<T>& logits, const std::vector<int>& labels) {
    const std::size_t c = logits->shape().back();
    BasicArray<T> onehot(logits->shape());
    for (std::size_t i = 0; i < labels.size(); ++i) onehot[i * c + static_cast<std::size_t>(labels[i])] = T(1);
    return mean(row_cross_entropy(onehot, softmax_lastdim(logits)));
}

/// Supervised pretraining followed by freeze(). The divergence warning is set
/// when the mean loss over steps 90..99 is not below that of steps 0..9.
inline TeacherTrainReport pretrain_teacher(Teacher& teacher, const ImageBatch& data,
                                           const TeacherTrainConfig& cfg,
                                           const std::function<void(std::size_t, double)>& log = {}) {
    if (teacher.frozen()) throw ContractError("pretrain_teacher: teacher already frozen");
    if (data.size() == 0) throw DomainError("pretrain_teacher: empty dataset");
    AdamW opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    Rng base = Rng(cfg.seed).split("teacher-train");
    TeacherTrainReport report;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Rng rng = base.split("step", step);
        std::vector<std::size_t> idx(cfg.batch);
        for (auto& i : idx) i = rng.below(data.size());
        const ImageBatch b = select(data, idx);
        teacher.params().zero_grad();
        VarT<float> loss = classification_loss(teacher.logits(b.images), b.labels);
        report.losses.push_back(loss->value.item());
        backward(loss);
        opt.step(teacher.params());
        if (log) log(step, loss->value.item());
    }
    if (report.losses.size() >= 100) {
        double first = 0, last = 0;
        for (int i = 0; i < 10; ++i) {
            first += report.losses[static_cast<std::size_t>(i)];
            last += report.losses[static_cast<std::size_t>(90 + i)];
        }
        report.divergence_warning = !(last < first);
    }
    teacher.freeze();
    return report;
}

/// Holdout classification accuracy; must be called before freezing.
inline double teacher_accuracy(const Teacher& teacher, const ImageBatch& data, std::size_t chunk = 256) {
    NoGradGuard guard;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
        const ImageBatch b = select(data, idx);
        const Array lg = teacher.logits(b.images)->value;
        const std::size_t c = lg.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const float* row = lg.data() + i * c;
            const auto arg = static_cast<int>(std::max_element(row, row + c) - row);
            correct += arg == b.labels[i];
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------- low-pass

/// Largest radial frequency index on an h x w grid (the corner frequency).
inline double max_radial_frequency(std::size_t h, std::size_t w) {
    return std::hypot(static_cast<double>(h / 2), static_cast<double>(w / 2));
}

/// Zeroes every 2-D DFT coefficient whose radial index sqrt(fy^2 + fx^2)
/// exceeds k (signed frequencies), per image and channel. x is [B, H, W, C].
inline Array low_pass(const Array& x, double k) {
    if (!(k >= 0.0)) throw DomainError("low_pass: cutoff must be >= 0");
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("low_pass: expected [B,H,W,C], got " + to_string(s));
    const std::size_t B = s[0], H = s[1], W = s[2], C = s[3];
    using Cx = std::complex<double>;
    using CMat = Eigen::Matrix<Cx, Eigen::Dynamic, Eigen::Dynamic>;
    auto dft = [](std::size_t n, double sign) {
        CMat f(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b)
                f(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                    std::polar(1.0, sign * 2.0 * M_PI * static_cast<double>((a * b) % n) / static_cast<double>(n));
        return f;
    };
    const CMat fh = dft(H, -1.0), fw = dft(W, -1.0), ih = dft(H, 1.0), iw = dft(W, 1.0);
    auto signed_freq = [](std::size_t u, std::size_t n) {
        return u <= n / 2 ? static_cast<double>(u) : static_cast<double>(u) - static_cast<double>(n);
    };
    Eigen::MatrixXd mask(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(W));
    for (std::size_t u = 0; u < H; ++u)
        for (std::size_t v = 0; v < W; ++v)
            mask(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v)) =
                std::hypot(signed_freq(u, H), signed_freq(v, W)) <= k ? 1.0 : 0.0;

    Array out(s);
    CMat img(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(W));
    const double norm = 1.0 / static_cast<double>(H * W);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    img(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                        x[((b * H + i) * W + j) * C + c];
            CMat spec = fh * img * fw;  // DFT matrices are symmetric
            spec = spec.cwiseProduct(mask.cast<Cx>());
            const CMat back = ih * spec * iw * norm;
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    out[((b * H + i) * W + j) * C + c] =
                        static_cast<float>(back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)).real());
        }
    }
    return out;
}

}  // namespace aligndesk
