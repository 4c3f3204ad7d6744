#include "refold/toybase.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "refold/matcher.hpp"

namespace refold {

Matrix featurize(const Backbone& b) {
    const int L = b.length();
    Matrix f = Matrix::Zero(L, kToyBaseFeatureDim);
    for (int j = 0; j < L; ++j) {
        std::vector<double> dists;
        dists.reserve(static_cast<size_t>(L) - 1);
        for (int i = 0; i < L; ++i)
            if (i != j) dists.push_back((b.ca(i) - b.ca(j)).norm());
        std::sort(dists.begin(), dists.end());
        const int have = std::min<int>(8, static_cast<int>(dists.size()));
        for (int k = 0; k < have; ++k) {
            f(j, k) = dists[static_cast<size_t>(k)];
            f(j, 8 + k) = 1.0;  // presence flag
        }
        if (j >= 1 && j + 1 < L) f(j, 16) = virtual_angle(b.ca(j - 1), b.ca(j), b.ca(j + 1));
        if (j >= 1 && j + 2 < L)
            f(j, 17) = virtual_dihedral(b.ca(j - 1), b.ca(j), b.ca(j + 1), b.ca(j + 2));
    }
    return f;
}

namespace {

ad::Var init_mat(int rows, int cols, double scale, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    ad::Tensor t = ad::Tensor::zeros({rows, cols});
    for (int i = 0; i < t.size(); ++i) t.at(i) = dist(rng);
    return ad::parameter(std::move(t));
}

}  // namespace

ToyBaseModel::ToyBaseModel(int hidden, unsigned seed) : hidden_(hidden) {
    std::mt19937_64 rng(seed);
    w1_ = init_mat(kToyBaseFeatureDim, hidden, 1.0 / std::sqrt(static_cast<double>(kToyBaseFeatureDim)), rng);
    b1_ = ad::parameter(ad::Tensor::zeros({hidden}));
    w2_ = init_mat(hidden, kNumResidues, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    b2_ = ad::parameter(ad::Tensor::zeros({kNumResidues}));
    feat_mean_ = Vector::Zero(kToyBaseFeatureDim);
    feat_std_ = Vector::Ones(kToyBaseFeatureDim);
}

void ToyBaseModel::fit_feature_stats(const std::vector<Backbone>& backbones) {
    Vector sum = Vector::Zero(kToyBaseFeatureDim);
    Vector sumsq = Vector::Zero(kToyBaseFeatureDim);
    long count = 0;
    for (const auto& b : backbones) {
        Matrix f = featurize(b);
        for (Eigen::Index i = 0; i < f.rows(); ++i) {
            sum += f.row(i).transpose();
            sumsq += f.row(i).array().square().matrix().transpose();
            ++count;
        }
    }
    if (count == 0) throw std::invalid_argument("fit_feature_stats: empty dataset");
    feat_mean_ = sum / static_cast<double>(count);
    Vector var = sumsq / static_cast<double>(count) - feat_mean_.array().square().matrix();
    feat_std_ = var.array().max(0.0).sqrt().max(1e-8).matrix();
}

Matrix ToyBaseModel::standardized_features(const Backbone& b) const {
    Matrix f = featurize(b);
    for (Eigen::Index i = 0; i < f.rows(); ++i)
        f.row(i) = ((f.row(i).transpose() - feat_mean_).array() / feat_std_.array()).matrix().transpose();
    return f;
}

LogitMatrix ToyBaseModel::base_forward(const Backbone& b) const {
    Matrix f = standardized_features(b);
    using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RM> w1(w1_->value.data.data(), kToyBaseFeatureDim, hidden_);
    Eigen::Map<const RM> w2(w2_->value.data.data(), hidden_, kNumResidues);
    Matrix h = (f * w1).rowwise() + b1_->value.data.transpose();
    h = h.array().tanh().matrix();
    Matrix z = (h * w2).rowwise() + b2_->value.data.transpose();
    return z;
}

ad::Var ToyBaseModel::forward_graph(const Matrix& std_features) const {
    const int L = static_cast<int>(std_features.rows());
    ad::Tensor f = ad::Tensor::zeros({L, kToyBaseFeatureDim});
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < kToyBaseFeatureDim; ++j)
            f.data(static_cast<long>(i) * kToyBaseFeatureDim + j) = std_features(i, j);
    ad::Var h = ad::tanh_op(ad::add_rowvec(ad::matmul(ad::constant(std::move(f)), w1_), b1_));
    return ad::add_rowvec(ad::matmul(h, w2_), b2_);
}

std::vector<double> ToyBaseModel::train(const std::vector<Backbone>& backbones,
                                        const std::vector<Sequence>& sequences, int epochs,
                                        unsigned seed, const ad::AdamConfig& adam) {
    if (backbones.size() != sequences.size() || backbones.empty())
        throw std::invalid_argument("ToyBaseModel::train: dataset mismatch");
    fit_feature_stats(backbones);
    std::vector<Matrix> feats;
    feats.reserve(backbones.size());
    for (const auto& b : backbones) feats.push_back(standardized_features(b));

    auto ps = params();
    ad::Adam opt(ps, adam);
    std::mt19937_64 rng(seed);
    std::vector<size_t> order(backbones.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> losses;
    const int batch = 8;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        size_t pos = 0;
        while (pos < order.size()) {
            const size_t end = std::min(order.size(), pos + batch);
            opt.zero_grad();
            for (size_t i = pos; i < end; ++i) {
                ad::Var z = forward_graph(feats[order[i]]);
                ad::Var loss = ad::cross_entropy(z, sequences[order[i]].tokens);
                total += loss->value.at(0);
                ad::backward(loss);
            }
            for (const auto& p : ps) p->grad /= static_cast<double>(end - pos);
            opt.step();
            pos = end;
        }
        losses.push_back(total / static_cast<double>(backbones.size()));
    }
    return losses;
}

void ToyBaseModel::save(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.add(prefix + "config", {1}, {static_cast<double>(hidden_)});
    auto dump = [&](const std::string& name, const ad::Var& v) {
        std::vector<double> d(v->value.data.data(), v->value.data.data() + v->value.size());
        ckpt.add(prefix + name, v->value.shape, d);
    };
    dump("w1", w1_);
    dump("b1", b1_);
    dump("w2", w2_);
    dump("b2", b2_);
    ckpt.add(prefix + "feat_mean", {kToyBaseFeatureDim},
             std::vector<double>(feat_mean_.data(), feat_mean_.data() + kToyBaseFeatureDim));
    ckpt.add(prefix + "feat_std", {kToyBaseFeatureDim},
             std::vector<double>(feat_std_.data(), feat_std_.data() + kToyBaseFeatureDim));
}

void ToyBaseModel::load(const Checkpoint& ckpt, const std::string& prefix) {
    const int hidden = static_cast<int>(ckpt.get(prefix + "config").data[0]);
    *this = ToyBaseModel(hidden, 0);
    auto fill = [&](const std::string& name, const ad::Var& v) {
        const auto& a = ckpt.get(prefix + name);
        if (static_cast<int>(a.data.size()) != v->value.size())
            throw ParseError("checkpoint array '" + prefix + name + "': size mismatch");
        for (size_t i = 0; i < a.data.size(); ++i)
            v->value.data(static_cast<Eigen::Index>(i)) = a.data[i];
    };
    fill("w1", w1_);
    fill("b1", b1_);
    fill("w2", w2_);
    fill("b2", b2_);
    const auto& fm = ckpt.get(prefix + "feat_mean");
    const auto& fs = ckpt.get(prefix + "feat_std");
    for (int i = 0; i < kToyBaseFeatureDim; ++i) {
        feat_mean_(i) = fm.data[static_cast<size_t>(i)];
        feat_std_(i) = fs.data[static_cast<size_t>(i)];
    }
}

std::map<std::string, Sequence> SynthDataset::sequence_index() const {
    std::map<std::string, Sequence> out;
    for (const auto& s : sequences) out[s.id] = s;
    return out;
}

SynthDataset synth_family(int n, int length, double mutation_rate, unsigned seed, int num_families,
                          double noise_sigma) {
    if (n < 2) throw std::invalid_argument("synth_family: need n >= 2");
    if (length < 5) throw std::invalid_argument("synth_family: need length >= 5");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> residue_pick(0, kNumResidues - 1);

    // Smoothed CA random-walk prototypes, one per family.
    std::vector<std::vector<Vec3>> proto_ca(static_cast<size_t>(num_families));
    for (int f = 0; f < num_families; ++f) {
        Vec3 pos = Vec3::Zero();
        Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
        dir.normalize();
        auto& trace = proto_ca[static_cast<size_t>(f)];
        trace.push_back(pos);
        for (int i = 1; i < length; ++i) {
            Vec3 kick(gauss(rng), gauss(rng), gauss(rng));
            dir = (dir + 0.55 * kick).normalized();
            pos += 3.8 * dir;
            trace.push_back(pos);
        }
    }

    // Per-family state -> residue tables drive the ground-truth sequences.
    std::vector<std::array<int, 16>> tables(static_cast<size_t>(num_families));
    for (int f = 0; f < num_families; ++f)
        for (int s = 0; s < 16; ++s) tables[static_cast<size_t>(f)][static_cast<size_t>(s)] = residue_pick(rng);

    auto ca_to_backbone = [](const std::string& id, const std::vector<Vec3>& ca) {
        Backbone b;
        b.id = id;
        const int L = static_cast<int>(ca.size());
        for (int i = 0; i < L; ++i) {
            Vec3 u_next = (i + 1 < L) ? (ca[static_cast<size_t>(i + 1)] - ca[static_cast<size_t>(i)]).normalized()
                                      : (ca[static_cast<size_t>(i)] - ca[static_cast<size_t>(i - 1)]).normalized();
            Vec3 u_prev = (i > 0) ? (ca[static_cast<size_t>(i)] - ca[static_cast<size_t>(i - 1)]).normalized()
                                  : u_next;
            BackboneResidue r;
            r.ca = ca[static_cast<size_t>(i)];
            r.n = ca[static_cast<size_t>(i)] - 0.5 * u_prev;
            r.c = ca[static_cast<size_t>(i)] + 0.5 * u_next;
            b.residues.push_back(r);
        }
        return b;
    };

    // Prototype state strings fix each family's archetype sequence.
    std::vector<std::vector<int>> proto_states(static_cast<size_t>(num_families));
    for (int f = 0; f < num_families; ++f)
        proto_states[static_cast<size_t>(f)] =
            discretize(ca_to_backbone("proto", proto_ca[static_cast<size_t>(f)])).states;

    SynthDataset ds;
    for (int i = 0; i < n; ++i) {
        const int f = i % num_families;
        std::vector<Vec3> ca = proto_ca[static_cast<size_t>(f)];
        for (auto& p : ca)
            p += noise_sigma * Vec3(gauss(rng), gauss(rng), gauss(rng));
        const std::string id = "f" + std::to_string(f) + "_m" + std::to_string(i);
        ds.backbones.push_back(ca_to_backbone(id, ca));
        Sequence seq;
        seq.id = id;
        for (int j = 0; j < length; ++j) {
            int tok = tables[static_cast<size_t>(f)][static_cast<size_t>(
                proto_states[static_cast<size_t>(f)][static_cast<size_t>(j)])];
            if (unif(rng) < mutation_rate) tok = residue_pick(rng);
            seq.tokens.push_back(tok);
        }
        ds.sequences.push_back(std::move(seq));
        ds.family.push_back(f);
    }
    return ds;
}

}  // namespace refold
