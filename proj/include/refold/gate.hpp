// Dynamic utility gate: inference-time statistics, usefulness labels,
// logistic gate training, threshold tuning, and gated inference with
// position-wise fallback.
#pragma once

#include "refold/io.hpp"
#include "refold/stacker.hpp"
#include "refold/types.hpp"

namespace refold {

inline constexpr int kGateFeatureDim = 7;

struct GateFeatures {
    double coverage = 0.0;           // fraction of positions with >= 1 valid neighbor
    double mean_tm = 0.0;
    double max_tm = 0.0;
    double k_valid = 0.0;            // neighbor row count
    double mean_kl = 0.0;            // mean KL(p_fused || p_base), natural log
    double mean_base_entropy = 0.0;  // nats
    double flip_rate = 0.0;          // fraction of argmax flips

    Eigen::Matrix<double, kGateFeatureDim, 1> vector() const;
};

GateFeatures extract_features(const ProbMatrix& p_base, const ProbMatrix& p_fused,
                              const StackedAlignment& a);

// 1 iff total cross-entropy of p_fused is strictly below that of p_base.
int gate_label(const ProbMatrix& p_base, const ProbMatrix& p_fused, const Sequence& y);

struct GateModel {
    Eigen::Matrix<double, kGateFeatureDim, 1> weights = Eigen::Matrix<double, kGateFeatureDim, 1>::Zero();
    double bias = 0.0;
    double tau = 0.5;
    // Standardization statistics fit on the training features.
    Eigen::Matrix<double, kGateFeatureDim, 1> feat_mean = Eigen::Matrix<double, kGateFeatureDim, 1>::Zero();
    Eigen::Matrix<double, kGateFeatureDim, 1> feat_std = Eigen::Matrix<double, kGateFeatureDim, 1>::Ones();
    bool degenerate = false;  // single-class training set

    double score(const GateFeatures& f) const;

    void save(Checkpoint& ckpt, const std::string& prefix) const;
    void load(const Checkpoint& ckpt, const std::string& prefix);
};

// Logistic fit by Adam on BCE over standardized features. A single-class
// label set yields a constant gate with a warning.
GateModel train_stage2(const std::vector<GateFeatures>& features, const std::vector<int>& labels,
                       unsigned seed = 0, int steps = 400);

struct GateValidationItem {
    GateFeatures features;
    ProbMatrix p_base;
    ProbMatrix p_fused;
    LogitMatrix z_ref;
    Sequence truth;
};

// Grid search tau in {0.05,...,0.95} maximizing mean per-protein recovery
// of the gated output; ties take the smallest tau.
double tune_tau(const GateModel& gate, const std::vector<GateValidationItem>& validation);

// Global fallback below tau; otherwise base rows wherever the reference
// logits are exactly zero.
ProbMatrix gated_infer(const ProbMatrix& p_base, const ProbMatrix& p_fused,
                       const LogitMatrix& z_ref, const GateModel& gate,
                       const GateFeatures& features);

}  // namespace refold
