#include "refold/gate.hpp"

#include <cmath>
#include <iostream>

#include "refold/autodiff.hpp"
#include "refold/eval.hpp"

namespace refold {

namespace {
constexpr double kProbFloor = 1e-12;
}

Eigen::Matrix<double, kGateFeatureDim, 1> GateFeatures::vector() const {
    Eigen::Matrix<double, kGateFeatureDim, 1> v;
    v << coverage, mean_tm, max_tm, k_valid, mean_kl, mean_base_entropy, flip_rate;
    return v;
}

GateFeatures extract_features(const ProbMatrix& p_base, const ProbMatrix& p_fused,
                              const StackedAlignment& a) {
    if (p_base.rows() != p_fused.rows() || p_base.rows() != a.cols())
        throw std::invalid_argument("extract_features: length mismatch");
    const int L = static_cast<int>(p_base.rows());
    GateFeatures f;
    int covered = 0, flips = 0;
    double kl = 0.0, ent = 0.0;
    for (int j = 0; j < L; ++j) {
        if (a.covered(j)) ++covered;
        double kl_j = 0.0, ent_j = 0.0;
        int amax_b = 0, amax_f = 0;
        for (int c = 0; c < kNumResidues; ++c) {
            const double pb = std::max(p_base(j, c), kProbFloor);
            const double pf = std::max(p_fused(j, c), kProbFloor);
            kl_j += pf * std::log(pf / pb);
            ent_j -= pb * std::log(pb);
            if (p_base(j, c) > p_base(j, amax_b)) amax_b = c;
            if (p_fused(j, c) > p_fused(j, amax_f)) amax_f = c;
        }
        kl += kl_j;
        ent += ent_j;
        if (amax_b != amax_f) ++flips;
    }
    f.coverage = static_cast<double>(covered) / L;
    f.k_valid = static_cast<double>(a.num_neighbors());
    if (!a.tm_scores.empty()) {
        double sum = 0.0, mx = a.tm_scores[0];
        for (double s : a.tm_scores) {
            sum += s;
            mx = std::max(mx, s);
        }
        f.mean_tm = sum / static_cast<double>(a.tm_scores.size());
        f.max_tm = mx;
    }
    f.mean_kl = kl / L;
    f.mean_base_entropy = ent / L;
    f.flip_rate = static_cast<double>(flips) / L;
    return f;
}

int gate_label(const ProbMatrix& p_base, const ProbMatrix& p_fused, const Sequence& y) {
    if (p_base.rows() != y.length() || p_fused.rows() != y.length())
        throw std::invalid_argument("gate_label: length mismatch");
    double ce_base = 0.0, ce_fused = 0.0;
    for (int j = 0; j < y.length(); ++j) {
        const int t = y.tokens[static_cast<size_t>(j)];
        ce_base -= std::log(std::max(p_base(j, t), kProbFloor));
        ce_fused -= std::log(std::max(p_fused(j, t), kProbFloor));
    }
    return ce_fused < ce_base ? 1 : 0;
}

double GateModel::score(const GateFeatures& f) const {
    const Eigen::Matrix<double, kGateFeatureDim, 1> x =
        ((f.vector() - feat_mean).array() / feat_std.array()).matrix();
    const double z = weights.dot(x) + bias;
    return 1.0 / (1.0 + std::exp(-z));
}

void GateModel::save(Checkpoint& ckpt, const std::string& prefix) const {
    std::vector<double> w(weights.data(), weights.data() + kGateFeatureDim);
    ckpt.add(prefix + "weights", {kGateFeatureDim}, w);
    ckpt.add(prefix + "bias", {1}, {bias});
    ckpt.add(prefix + "tau", {1}, {tau});
    ckpt.add(prefix + "feat_mean", {kGateFeatureDim},
             std::vector<double>(feat_mean.data(), feat_mean.data() + kGateFeatureDim));
    ckpt.add(prefix + "feat_std", {kGateFeatureDim},
             std::vector<double>(feat_std.data(), feat_std.data() + kGateFeatureDim));
    ckpt.add(prefix + "degenerate", {1}, {degenerate ? 1.0 : 0.0});
}

void GateModel::load(const Checkpoint& ckpt, const std::string& prefix) {
    const auto& w = ckpt.get(prefix + "weights");
    for (int i = 0; i < kGateFeatureDim; ++i) weights(i) = w.data[static_cast<size_t>(i)];
    bias = ckpt.get(prefix + "bias").data[0];
    tau = ckpt.get(prefix + "tau").data[0];
    const auto& fm = ckpt.get(prefix + "feat_mean");
    const auto& fs = ckpt.get(prefix + "feat_std");
    for (int i = 0; i < kGateFeatureDim; ++i) {
        feat_mean(i) = fm.data[static_cast<size_t>(i)];
        feat_std(i) = fs.data[static_cast<size_t>(i)];
    }
    degenerate = ckpt.get(prefix + "degenerate").data[0] != 0.0;
}

GateModel train_stage2(const std::vector<GateFeatures>& features, const std::vector<int>& labels,
                       unsigned seed, int steps) {
    if (features.size() != labels.size() || features.empty())
        throw std::invalid_argument("train_stage2: dataset mismatch");
    GateModel model;
    const int n = static_cast<int>(features.size());

    Eigen::Matrix<double, kGateFeatureDim, 1> sum = Eigen::Matrix<double, kGateFeatureDim, 1>::Zero();
    Eigen::Matrix<double, kGateFeatureDim, 1> sumsq = Eigen::Matrix<double, kGateFeatureDim, 1>::Zero();
    for (const auto& f : features) {
        auto v = f.vector();
        sum += v;
        sumsq += v.array().square().matrix();
    }
    model.feat_mean = sum / n;
    model.feat_std = ((sumsq / n - model.feat_mean.array().square().matrix()).array().max(0.0).sqrt().max(1e-8)).matrix();

    int positives = 0;
    for (int l : labels) positives += l;
    if (positives == 0 || positives == n) {
        std::cerr << "warning: train_stage2: single-class label set, gate is constant\n";
        model.degenerate = true;
        model.bias = positives == n ? 10.0 : -10.0;
        return model;
    }

    ad::Tensor x = ad::Tensor::zeros({n, kGateFeatureDim});
    std::vector<double> y(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Eigen::Matrix<double, kGateFeatureDim, 1> v =
            ((features[static_cast<size_t>(i)].vector() - model.feat_mean).array() /
             model.feat_std.array()).matrix();
        for (int k = 0; k < kGateFeatureDim; ++k)
            x.data(static_cast<long>(i) * kGateFeatureDim + k) = v(k);
        y[static_cast<size_t>(i)] = static_cast<double>(labels[static_cast<size_t>(i)]);
    }
    ad::Var xs = ad::constant(std::move(x));
    (void)seed;  // logistic fit is deterministic; seed kept for interface stability
    ad::Var w = ad::parameter(ad::Tensor::zeros({kGateFeatureDim, 1}));
    ad::Var b = ad::parameter(ad::Tensor::zeros({1}));
    ad::AdamConfig cfg;
    cfg.lr = 0.05;
    cfg.warmup_steps = 10;
    ad::Adam opt({w, b}, cfg);
    for (int s = 0; s < steps; ++s) {
        opt.zero_grad();
        ad::Var z = ad::add_scalar_var(ad::reshape(ad::matmul(xs, w), {n}), b);
        ad::Var loss = ad::bce_with_logits(z, y);
        ad::backward(loss);
        opt.step();
    }
    for (int k = 0; k < kGateFeatureDim; ++k) model.weights(k) = w->value.data(k);
    model.bias = b->value.at(0);
    return model;
}

double tune_tau(const GateModel& gate, const std::vector<GateValidationItem>& validation) {
    if (validation.empty()) throw std::invalid_argument("tune_tau: empty validation set");
    double best_tau = 0.05, best_rec = -1.0;
    for (int step = 1; step <= 19; ++step) {
        const double tau = 0.05 * step;
        GateModel g = gate;
        g.tau = tau;
        double total = 0.0;
        for (const auto& item : validation) {
            ProbMatrix out = gated_infer(item.p_base, item.p_fused, item.z_ref, g, item.features);
            total += recovery(out, item.truth);
        }
        const double mean_rec = total / static_cast<double>(validation.size());
        if (mean_rec > best_rec + 1e-12) {
            best_rec = mean_rec;
            best_tau = tau;
        }
    }
    return best_tau;
}

ProbMatrix gated_infer(const ProbMatrix& p_base, const ProbMatrix& p_fused,
                       const LogitMatrix& z_ref, const GateModel& gate,
                       const GateFeatures& features) {
    if (p_base.rows() != p_fused.rows() || p_base.rows() != z_ref.rows())
        throw std::invalid_argument("gated_infer: shape mismatch");
    if (gate.score(features) < gate.tau) return p_base;
    ProbMatrix out = p_fused;
    for (Eigen::Index j = 0; j < z_ref.rows(); ++j)
        if (z_ref.row(j).isZero(0.0)) out.row(j) = p_base.row(j);
    return out;
}

}  // namespace refold
