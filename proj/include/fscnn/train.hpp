#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fscnn/backbone.hpp"
#include "fscnn/scene.hpp"

namespace fscnn {

// Raised when a training step produces a non-finite loss; the CLI maps it to
// its numerical-abort exit code.
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    std::int64_t steps = 200;
    std::int32_t batch_size = 1;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps <= 0) throw std::invalid_argument("train: steps must be positive");
        if (batch_size <= 0) throw std::invalid_argument("train: batch size must be positive");
        if (!(lr >= 0)) throw std::invalid_argument("train: negative learning rate");
    }
};

// Plain SGD or Adam over a fixed parameter list (state keyed by list order).
template <class S>
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

    void step(const std::vector<ParamRef<S>>& params) {
        if (kind_ == OptimizerKind::sgd) {
            for (auto& p : params)
                for (std::size_t i = 0; i < p.value->size(); ++i)
                    (*p.value)[i] -= S(lr_) * (*p.grad)[i];
            return;
        }
        if (m_.empty()) {
            for (auto& p : params) {
                m_.emplace_back(p.value->size(), S(0));
                v_.emplace_back(p.value->size(), S(0));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k];
            for (std::size_t i = 0; i < p.value->size(); ++i) {
                const double g = double((*p.grad)[i]);
                m_[k][i] = S(beta1_ * double(m_[k][i]) + (1 - beta1_) * g);
                v_[k][i] = S(beta2_ * double(v_[k][i]) + (1 - beta2_) * g * g);
                const double mhat = double(m_[k][i]) / bc1;
                const double vhat = double(v_[k][i]) / bc2;
                (*p.value)[i] -= S(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    OptimizerKind kind_;
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<std::vector<S>> m_, v_;
};

// 1x1 per-voxel binary classifier on the backbone output (the task proxy
// that closes the end-to-end training loop).
template <class S>
struct ProxyHead {
    Matrix<S> w;
    std::vector<S> b;
    Matrix<S> d_w;
    std::vector<S> d_b;

    ProxyHead() = default;
    ProxyHead(std::int32_t c_in, std::mt19937_64& rng) : w(c_in, 1), d_w(c_in, 1) {
        b.assign(1, S(0));
        d_b.assign(1, S(0));
        detail::init_uniform(rng, w.v, double(c_in));
        detail::init_uniform(rng, b, double(c_in));
    }

    void collect_params(std::vector<ParamRef<S>>& out) {
        out.push_back({"head.w", &w.v, &d_w.v, {std::uint64_t(w.rows), std::uint64_t(w.cols)}});
        out.push_back({"head.b", &b, &d_b, {b.size()}});
    }

    void zero_grad() {
        for (auto& g : d_w.v) g = S(0);
        for (auto& g : d_b) g = S(0);
    }
};

// Mean binary cross-entropy of sigmoid(logit) against 0/1 targets; the
// returned gradient is with respect to the logits.
template <class S>
std::pair<double, Matrix<S>> bce_with_logits(const Matrix<S>& logits, const std::vector<std::uint8_t>& targets) {
    if (logits.cols != 1 || std::size_t(logits.rows) != targets.size())
        throw std::invalid_argument("bce: logits/target shape mismatch");
    Matrix<S> d(logits.rows, 1);
    if (logits.rows == 0) return {0.0, d};
    constexpr double eps = 1e-7;
    double total = 0;
    for (std::int64_t i = 0; i < logits.rows; ++i) {
        const double p = std::clamp(double(sigmoid(logits(i, 0))), eps, 1.0 - eps);
        const double y = targets[std::size_t(i)] ? 1.0 : 0.0;
        total += -(y * std::log(p) + (1 - y) * std::log(1 - p));
        d(i, 0) = S((p - y) / double(logits.rows));
    }
    return {total / double(logits.rows), d};
}

template <class S>
struct TrainScene {
    SparseTensor<S> tensor;
    std::vector<GtBox> boxes;
};

struct MetricsRow {
    std::int64_t step = 0;
    double loss = 0;
    double obj_loss = 0;
    double recall = 0;
    std::vector<std::int64_t> layer_n_out;
};

namespace detail {

inline std::string format_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace detail

// CSV schema: step,loss,obj_loss,recall,layer_<i>_n_out,...
inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << "step,loss,obj_loss,recall";
    if (!rows.empty())
        for (std::size_t i = 0; i < rows.front().layer_n_out.size(); ++i) os << ",layer_" << i << "_n_out";
    os << '\n';
    for (const auto& r : rows) {
        os << r.step << ',' << detail::format_real(r.loss) << ',' << detail::format_real(r.obj_loss) << ','
           << detail::format_real(r.recall);
        for (std::int64_t n : r.layer_n_out) os << ',' << n;
        os << '\n';
    }
}

// End-to-end training: proxy BCE on stride-8 voxel targets plus the focal
// layers' objective losses; scenes are consumed round-robin in batches.
template <class S>
std::vector<MetricsRow> train(Backbone<S>& bb, ProxyHead<S>& head, const std::vector<TrainScene<S>>& scenes,
                              const TrainConfig& cfg, const std::array<double, 3>& voxel_size,
                              const std::array<double, 3>& origin,
                              const std::vector<std::vector<RawImageView<S>>>* views = nullptr) {
    cfg.validate();
    if (scenes.empty()) throw std::invalid_argument("train: no scenes");
    Optimizer<S> opt(cfg.optimizer, cfg.lr);
    auto params = bb.params();
    head.collect_params(params);

    std::vector<MetricsRow> log;
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        std::vector<SparseTensor<S>> batch_tensors;
        std::vector<std::vector<GtBox>> batch_boxes;
        for (std::int32_t i = 0; i < cfg.batch_size; ++i) {
            const std::size_t idx = std::size_t((step * cfg.batch_size + i) % std::int64_t(scenes.size()));
            batch_tensors.push_back(scenes[idx].tensor);
            batch_boxes.push_back(scenes[idx].boxes);
        }
        auto merged = merge_batch(batch_tensors);

        ForwardContext<S> ctx;
        ctx.boxes = &batch_boxes;
        ctx.voxel_size = voxel_size;
        ctx.origin = origin;
        ctx.views = views;
        auto out = bb.forward(merged, ctx);

        auto logits = mlp(out, head.w, head.b);
        const auto targets = voxel_targets_batched(out, batch_boxes, voxel_size, origin);
        auto [bce, d_logits] = bce_with_logits(logits.features, targets);
        const double total = bce + ctx.objective_loss;
        if (!std::isfinite(total)) throw numerical_error("training diverged: non-finite loss");

        bb.zero_grad();
        head.zero_grad();
        auto hg = mlp_backward(out, head.w, d_logits);
        for (std::size_t i = 0; i < head.w.v.size(); ++i) head.d_w.v[i] += hg.d_w.v[i];
        for (std::size_t i = 0; i < head.b.size(); ++i) head.d_b[i] += hg.d_bias[i];
        bb.backward(hg.d_input);
        opt.step(params);

        MetricsRow row;
        row.step = step;
        row.loss = total;
        row.obj_loss = ctx.objective_loss;
        row.recall = ctx.first_focal_recall < 0 ? 0.0 : ctx.first_focal_recall;
        for (const auto& d : ctx.diags) row.layer_n_out.push_back(d.n_out);
        log.push_back(std::move(row));
    }
    return log;
}

// Fraction of rows whose voxel center lies inside any ground-truth box.
template <class S>
double foreground_share(const SparseTensor<S>& t, const std::vector<std::vector<GtBox>>& boxes_per_batch,
                        const std::array<double, 3>& voxel_size, const std::array<double, 3>& origin) {
    if (t.size() == 0) return 0.0;
    const auto labels = voxel_targets_batched(t, boxes_per_batch, voxel_size, origin);
    std::int64_t fg = 0;
    for (auto l : labels) fg += l;
    return double(fg) / double(t.size());
}

// The focal network's plain counterpart: same architecture with every focal
// substitution removed.
inline BackboneSpec strip_focal(BackboneSpec spec) {
    for (auto& st : spec.stages) {
        st.focal_at_last_layer = false;
        st.fusion_at_last_layer = false;
    }
    return spec;
}

} // namespace fscnn
