// Similarity-weighted fusion: embed the stacked alignment, smooth rows,
// aggregate across neighbors with reliability-biased attention, project to
// reference logits, and residually fuse with the base logits.
#pragma once

#include "refold/autodiff.hpp"
#include "refold/io.hpp"
#include "refold/stacker.hpp"
#include "refold/toybase.hpp"
#include "refold/types.hpp"

namespace refold {

struct FusionConfig {
    int d = 64;
    int heads = 4;
    int d_ff = 128;
    bool no_tm_bias = false;     // force alpha = 0
    bool row_only = false;       // skip neighbor-axis attention
    bool all_rows_query = false; // every valid row queries; outputs averaged
    // Anchor becomes a placeholder excluded from attention values and the
    // prediction comes from z_ref alone (z_fused == z_ref).
    bool priors_only = false;

    int d_head() const { return d / heads; }
};

class FusionModel {
public:
    explicit FusionModel(FusionConfig cfg = {}, unsigned seed = 0);

    const FusionConfig& config() const { return cfg_; }
    FusionConfig& config() { return cfg_; }

    std::vector<ad::Var> params() const;
    double beta0() const { return beta0_->value.at(0); }
    double lambda() const { return lambda_->value.at(0); }
    double alpha() const;  // softplus of the stored raw scalar
    ad::Var beta0_var() const { return beta0_; }

    void save(Checkpoint& ckpt, const std::string& prefix) const;
    void load(const Checkpoint& ckpt, const std::string& prefix);

    struct Graph {
        ad::Var z_ref;    // (L,20), zeroed at uncovered positions
        ad::Var z_fused;  // (L,20)
        ad::Var p_fused;  // (L,20) row-stochastic
        std::vector<ad::Var> attention;  // per head (L, K+1), empty when row-only/K=0
    };

    // Builds the differentiable forward graph. z_base may be a constant
    // (Frozen) or the toy-base graph output (Joint).
    Graph forward_graph(const StackedAlignment& a, const ad::Var& z_base) const;

    ad::Var embedding() const { return embedding_; }

private:
    FusionConfig cfg_;
    ad::Var embedding_;             // 21 x d
    ad::Var conv_dw_;               // d x 5
    ad::Var conv_pw_, conv_pw_b_;   // d x d, d
    std::vector<ad::Var> wq_, wk_, wv_;  // per head d x d_h
    ad::Var wo_, wo_b_;             // d x d, d
    ad::Var ff_w1_, ff_b1_;         // d x d_ff, d_ff
    ad::Var ff_w2_, ff_b2_;         // d_ff x 20, 20
    ad::Var alpha_raw_, lambda_, beta0_;
};

struct FusionOutput {
    LogitMatrix z_ref;
    LogitMatrix z_fused;
    ProbMatrix p_fused;
    // Per head, per position: attention over the K+1 rows (diagnostic).
    std::vector<Matrix> attention;
};

FusionOutput fusion_forward(const FusionModel& model, const StackedAlignment& a,
                            const LogitMatrix& z_base);

enum class TrainMode { Frozen, Joint };

struct FusionTrainSample {
    StackedAlignment stack;
    LogitMatrix z_base;     // fixed logits (Frozen); recomputed when Joint
    Matrix base_features;   // standardized L x f_in (Joint only)
    std::vector<int> targets;
};

struct StageOneConfig {
    TrainMode mode = TrainMode::Frozen;
    int epochs = 30;
    int batch = 8;
    unsigned seed = 0;
    ad::AdamConfig adam = {};
};

// Optimizes the fusion parameters (plus the toy base in Joint mode) by
// Adam on the fused cross-entropy; the gate is bypassed. Returns the
// per-epoch mean cross-entropy.
std::vector<double> train_stage1(std::vector<FusionTrainSample>& data, FusionModel& model,
                                 ToyBaseModel* base, const StageOneConfig& cfg);

}  // namespace refold
