// Small structure-conditioned logit predictor (two-layer perceptron over
// local CA geometry) plus the synthetic family generator used for
// self-contained end-to-end runs.
#pragma once

#include <map>
#include <random>

#include "refold/autodiff.hpp"
#include "refold/io.hpp"
#include "refold/types.hpp"

namespace refold {

// 8 nearest-CA distances + 8 presence flags + virtual angle/dihedral at j.
inline constexpr int kToyBaseFeatureDim = 18;

// Raw (unstandardized) L x 18 feature matrix.
Matrix featurize(const Backbone& b);

class ToyBaseModel {
public:
    explicit ToyBaseModel(int hidden = 64, unsigned seed = 0);

    LogitMatrix base_forward(const Backbone& b) const;
    // Graph over standardized features (L x f_in constant); used for Joint mode.
    ad::Var forward_graph(const Matrix& std_features) const;
    Matrix standardized_features(const Backbone& b) const;

    // Fits standardization statistics from the training set, then Adam + CE.
    std::vector<double> train(const std::vector<Backbone>& backbones,
                              const std::vector<Sequence>& sequences, int epochs, unsigned seed,
                              const ad::AdamConfig& adam = {});

    std::vector<ad::Var> params() const { return {w1_, b1_, w2_, b2_}; }
    void fit_feature_stats(const std::vector<Backbone>& backbones);

    void save(Checkpoint& ckpt, const std::string& prefix) const;
    void load(const Checkpoint& ckpt, const std::string& prefix);

    int hidden() const { return hidden_; }

private:
    int hidden_;
    ad::Var w1_, b1_, w2_, b2_;
    Vector feat_mean_, feat_std_;
};

struct SynthDataset {
    std::vector<Backbone> backbones;
    std::vector<Sequence> sequences;  // same order/ids as backbones
    std::vector<int> family;          // family index per member

    std::map<std::string, Sequence> sequence_index() const;
};

// Families of smoothed 3D random walks; members are prototype + coordinate
// noise; ground-truth sequences follow a per-family state->residue table
// evaluated on the prototype trace, with independent mutations.
SynthDataset synth_family(int n, int length, double mutation_rate, unsigned seed,
                          int num_families = 4, double noise_sigma = 0.5);

}  // namespace refold
