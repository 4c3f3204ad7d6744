#include "refold/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace refold {

namespace {

ad::Var init_matrix(int rows, int cols, double scale, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-scale, scale);
    ad::Tensor t = ad::Tensor::zeros({rows, cols});
    for (int i = 0; i < t.size(); ++i) t.at(i) = dist(rng);
    return ad::parameter(std::move(t));
}

ad::Var init_vector(int n, double value = 0.0) {
    return ad::parameter(ad::Tensor({n}, Eigen::VectorXd::Constant(n, value)));
}

void load_into(const Checkpoint& ckpt, const std::string& name, const ad::Var& v) {
    const auto& a = ckpt.get(name);
    if (static_cast<int>(a.data.size()) != v->value.size())
        throw ParseError("checkpoint array '" + name + "': size mismatch");
    for (size_t i = 0; i < a.data.size(); ++i)
        v->value.data(static_cast<Eigen::Index>(i)) = a.data[i];
}

void save_array(Checkpoint& ckpt, const std::string& name, const ad::Var& v) {
    std::vector<double> data(v->value.data.data(), v->value.data.data() + v->value.size());
    ckpt.add(name, v->value.shape, data);
}

}  // namespace

FusionModel::FusionModel(FusionConfig cfg, unsigned seed) : cfg_(cfg) {
    if (cfg_.d % cfg_.heads != 0)
        throw std::invalid_argument("FusionModel: d must be divisible by heads");
    std::mt19937_64 rng(seed);
    const int d = cfg_.d, dh = cfg_.d_head();
    embedding_ = init_matrix(kVocabSize, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    conv_dw_ = init_matrix(d, 5, 1.0 / std::sqrt(5.0), rng);
    conv_pw_ = init_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    conv_pw_b_ = init_vector(d);
    for (int h = 0; h < cfg_.heads; ++h) {
        wq_.push_back(init_matrix(d, dh, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        wk_.push_back(init_matrix(d, dh, 1.0 / std::sqrt(static_cast<double>(d)), rng));
        wv_.push_back(init_matrix(d, dh, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    }
    wo_ = init_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    wo_b_ = init_vector(d);
    ff_w1_ = init_matrix(d, cfg_.d_ff, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    ff_b1_ = init_vector(cfg_.d_ff);
    ff_w2_ = init_matrix(cfg_.d_ff, kNumResidues, 1.0 / std::sqrt(static_cast<double>(cfg_.d_ff)), rng);
    ff_b2_ = init_vector(kNumResidues);
    // alpha = softplus(raw) with alpha init 1.0; lambda starts small so the
    // fusion begins as a near-identity residual.
    alpha_raw_ = ad::parameter(ad::Tensor::scalar(std::log(std::exp(1.0) - 1.0)));
    lambda_ = ad::parameter(ad::Tensor::scalar(0.1));
    beta0_ = ad::parameter(ad::Tensor::scalar(0.1));
}

double FusionModel::alpha() const {
    const double z = alpha_raw_->value.at(0);
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

std::vector<ad::Var> FusionModel::params() const {
    std::vector<ad::Var> out = {embedding_, conv_dw_, conv_pw_, conv_pw_b_};
    for (int h = 0; h < cfg_.heads; ++h) {
        out.push_back(wq_[static_cast<size_t>(h)]);
        out.push_back(wk_[static_cast<size_t>(h)]);
        out.push_back(wv_[static_cast<size_t>(h)]);
    }
    out.insert(out.end(), {wo_, wo_b_, ff_w1_, ff_b1_, ff_w2_, ff_b2_, alpha_raw_, lambda_, beta0_});
    return out;
}

void FusionModel::save(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.add(prefix + "config", {7},
             {static_cast<double>(cfg_.d), static_cast<double>(cfg_.heads),
              static_cast<double>(cfg_.d_ff), cfg_.no_tm_bias ? 1.0 : 0.0,
              cfg_.row_only ? 1.0 : 0.0, cfg_.all_rows_query ? 1.0 : 0.0,
              cfg_.priors_only ? 1.0 : 0.0});
    save_array(ckpt, prefix + "embedding", embedding_);
    save_array(ckpt, prefix + "conv_dw", conv_dw_);
    save_array(ckpt, prefix + "conv_pw", conv_pw_);
    save_array(ckpt, prefix + "conv_pw_b", conv_pw_b_);
    for (int h = 0; h < cfg_.heads; ++h) {
        const std::string s = std::to_string(h);
        save_array(ckpt, prefix + "wq" + s, wq_[static_cast<size_t>(h)]);
        save_array(ckpt, prefix + "wk" + s, wk_[static_cast<size_t>(h)]);
        save_array(ckpt, prefix + "wv" + s, wv_[static_cast<size_t>(h)]);
    }
    save_array(ckpt, prefix + "wo", wo_);
    save_array(ckpt, prefix + "wo_b", wo_b_);
    save_array(ckpt, prefix + "ff_w1", ff_w1_);
    save_array(ckpt, prefix + "ff_b1", ff_b1_);
    save_array(ckpt, prefix + "ff_w2", ff_w2_);
    save_array(ckpt, prefix + "ff_b2", ff_b2_);
    save_array(ckpt, prefix + "alpha_raw", alpha_raw_);
    save_array(ckpt, prefix + "lambda", lambda_);
    save_array(ckpt, prefix + "beta0", beta0_);
}

void FusionModel::load(const Checkpoint& ckpt, const std::string& prefix) {
    const auto& c = ckpt.get(prefix + "config");
    FusionConfig cfg;
    cfg.d = static_cast<int>(c.data[0]);
    cfg.heads = static_cast<int>(c.data[1]);
    cfg.d_ff = static_cast<int>(c.data[2]);
    cfg.no_tm_bias = c.data[3] != 0.0;
    cfg.row_only = c.data[4] != 0.0;
    cfg.all_rows_query = c.data[5] != 0.0;
    cfg.priors_only = c.data.size() > 6 && c.data[6] != 0.0;
    *this = FusionModel(cfg, 0);
    load_into(ckpt, prefix + "embedding", embedding_);
    load_into(ckpt, prefix + "conv_dw", conv_dw_);
    load_into(ckpt, prefix + "conv_pw", conv_pw_);
    load_into(ckpt, prefix + "conv_pw_b", conv_pw_b_);
    for (int h = 0; h < cfg_.heads; ++h) {
        const std::string s = std::to_string(h);
        load_into(ckpt, prefix + "wq" + s, wq_[static_cast<size_t>(h)]);
        load_into(ckpt, prefix + "wk" + s, wk_[static_cast<size_t>(h)]);
        load_into(ckpt, prefix + "wv" + s, wv_[static_cast<size_t>(h)]);
    }
    load_into(ckpt, prefix + "wo", wo_);
    load_into(ckpt, prefix + "wo_b", wo_b_);
    load_into(ckpt, prefix + "ff_w1", ff_w1_);
    load_into(ckpt, prefix + "ff_b1", ff_b1_);
    load_into(ckpt, prefix + "ff_w2", ff_w2_);
    load_into(ckpt, prefix + "ff_b2", ff_b2_);
    load_into(ckpt, prefix + "alpha_raw", alpha_raw_);
    load_into(ckpt, prefix + "lambda", lambda_);
    load_into(ckpt, prefix + "beta0", beta0_);
}

FusionModel::Graph FusionModel::forward_graph(const StackedAlignment& a,
                                              const ad::Var& z_base) const {
    const int R = a.rows(), L = a.cols(), K = a.num_neighbors();
    if (z_base->value.rank() != 2 || z_base->value.dim(0) != L ||
        z_base->value.dim(1) != kNumResidues)
        throw std::invalid_argument("fusion forward: z_base shape mismatch with alignment");
    const int d = cfg_.d, dh = cfg_.d_head();

    Graph g;
    if (K == 0) {
        // No neighbors: the reference branch is deactivated everywhere.
        g.z_ref = ad::constant(ad::Tensor::zeros({L, kNumResidues}));
        g.z_fused = ad::add(z_base, ad::scale(g.z_ref, lambda_));
        g.p_fused = ad::softmax_lastdim(g.z_fused);
        return g;
    }

    // Embed tokens and smooth each row with the masked depthwise-separable conv.
    std::vector<int> flat_tokens(static_cast<size_t>(R) * static_cast<size_t>(L));
    std::vector<char> flat_mask(static_cast<size_t>(R) * static_cast<size_t>(L));
    for (int r = 0; r < R; ++r)
        for (int j = 0; j < L; ++j) {
            flat_tokens[static_cast<size_t>(r * L + j)] = a.tokens[static_cast<size_t>(r)][static_cast<size_t>(j)];
            flat_mask[static_cast<size_t>(r * L + j)] =
                a.valid[static_cast<size_t>(r)][static_cast<size_t>(j)] ? 1 : 0;
        }
    ad::Var x0 = ad::embedding_lookup(embedding_, flat_tokens);  // (R*L, d)
    ad::Var x3 = ad::reshape(x0, {R, L, d});
    ad::Var smoothed = ad::masked_depthwise_conv1d(x3, conv_dw_, flat_mask);
    ad::Var pw = ad::add_rowvec(ad::matmul(ad::reshape(smoothed, {R * L, d}), conv_pw_), conv_pw_b_);
    pw = ad::mask_rows(pw, flat_mask);
    ad::Var feats = ad::reshape(pw, {R, L, d});  // (R, L, d)

    ad::Var h_agg;
    if (cfg_.row_only) {
        h_agg = ad::select_axis0(feats, 0);  // (L, d) anchor features only
    } else {
        // Reliability bias beta: beta[0] = beta0 (learned), beta[1..K] fixed.
        std::vector<double> beta_fixed = reliability_bias(a.tm_scores, 0.0);
        ad::Var beta_const = ad::constant(ad::Tensor::from({R}, beta_fixed));
        std::vector<double> e0(static_cast<size_t>(R), 0.0);
        e0[0] = 1.0;
        ad::Var beta_vec =
            ad::add(beta_const, ad::scale(ad::constant(ad::Tensor::from({R}, e0)), beta0_));
        ad::Var alpha = ad::softplus(alpha_raw_);
        ad::Var bias_vec = ad::scale(beta_vec, alpha);  // (R)

        ad::Var x = ad::transpose01(feats);             // (L, R, d)
        ad::Var xflat = ad::reshape(x, {L * R, d});
        // Key/value validity per (position, row); row 0 is always valid.
        std::vector<char> kv_keep(static_cast<size_t>(L) * static_cast<size_t>(R));
        for (int j = 0; j < L; ++j)
            for (int r = 0; r < R; ++r)
                kv_keep[static_cast<size_t>(j * R + r)] =
                    a.valid[static_cast<size_t>(r)][static_cast<size_t>(j)] ? 1 : 0;
        if (cfg_.priors_only) {
            // The anchor placeholder only backstops columns with no neighbor
            // (those rows of z_ref are zeroed anyway).
            for (int j = 0; j < L; ++j)
                kv_keep[static_cast<size_t>(j * R)] = a.covered(j) ? 0 : 1;
        }

        std::vector<ad::Var> head_outputs;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int h = 0; h < cfg_.heads; ++h) {
            ad::Var kh = ad::reshape(ad::matmul(xflat, wk_[static_cast<size_t>(h)]), {L, R, dh});
            ad::Var vh = ad::reshape(ad::matmul(xflat, wv_[static_cast<size_t>(h)]), {L, R, dh});
            if (!cfg_.all_rows_query) {
                ad::Var q = ad::matmul(ad::select_axis0(feats, 0), wq_[static_cast<size_t>(h)]);
                ad::Var scores = ad::reshape(ad::bmm(kh, ad::reshape(q, {L, dh, 1})), {L, R});
                scores = ad::scale_const(scores, inv_sqrt_dh);
                if (!cfg_.no_tm_bias) scores = ad::add_rowvec(scores, bias_vec);
                ad::Var attn = ad::softmax_lastdim(scores, &kv_keep);
                g.attention.push_back(attn);
                head_outputs.push_back(
                    ad::reshape(ad::bmm(ad::reshape(attn, {L, 1, R}), vh), {L, dh}));
            } else {
                ad::Var qh = ad::reshape(ad::matmul(xflat, wq_[static_cast<size_t>(h)]), {L, R, dh});
                ad::Var scores = ad::bmm(qh, ad::transpose12(kh));  // (L, R, R)
                scores = ad::scale_const(scores, inv_sqrt_dh);
                if (!cfg_.no_tm_bias)
                    scores = ad::reshape(ad::add_rowvec(ad::reshape(scores, {L * R, R}), bias_vec),
                                         {L, R, R});
                std::vector<char> keep3(static_cast<size_t>(L) * R * R);
                for (int j = 0; j < L; ++j)
                    for (int rq = 0; rq < R; ++rq)
                        for (int rk = 0; rk < R; ++rk)
                            keep3[static_cast<size_t>((j * R + rq) * R + rk)] =
                                kv_keep[static_cast<size_t>(j * R + rk)];
                ad::Var attn = ad::softmax_lastdim(scores, &keep3);
                ad::Var per_row = ad::bmm(attn, vh);  // (L, R, dh)
                // Average outputs over rows valid at each position.
                std::vector<double> w(static_cast<size_t>(L) * R, 0.0);
                for (int j = 0; j < L; ++j) {
                    int cnt = 0;
                    for (int r = 0; r < R; ++r)
                        if (kv_keep[static_cast<size_t>(j * R + r)]) ++cnt;
                    for (int r = 0; r < R; ++r)
                        if (kv_keep[static_cast<size_t>(j * R + r)])
                            w[static_cast<size_t>(j * R + r)] = 1.0 / cnt;
                }
                ad::Var wvar = ad::constant(ad::Tensor::from({L, 1, R}, w));
                head_outputs.push_back(ad::reshape(ad::bmm(wvar, per_row), {L, dh}));
            }
        }
        ad::Var concat = ad::concat_lastdim(head_outputs);  // (L, d)
        h_agg = ad::add_rowvec(ad::matmul(concat, wo_), wo_b_);
    }

    ad::Var ff = ad::tanh_op(ad::add_rowvec(ad::matmul(h_agg, ff_w1_), ff_b1_));
    ad::Var z_ref_raw = ad::add_rowvec(ad::matmul(ff, ff_w2_), ff_b2_);  // (L, 20)

    std::vector<char> covered(static_cast<size_t>(L));
    for (int j = 0; j < L; ++j) covered[static_cast<size_t>(j)] = a.covered(j) ? 1 : 0;
    g.z_ref = ad::mask_rows(z_ref_raw, covered);
    g.z_fused = cfg_.priors_only ? g.z_ref : ad::add(z_base, ad::scale(g.z_ref, lambda_));
    g.p_fused = ad::softmax_lastdim(g.z_fused);
    return g;
}

FusionOutput fusion_forward(const FusionModel& model, const StackedAlignment& a,
                            const LogitMatrix& z_base) {
    ad::Tensor zb = ad::Tensor::zeros({static_cast<int>(z_base.rows()), kNumResidues});
    for (Eigen::Index i = 0; i < z_base.rows(); ++i)
        for (Eigen::Index j = 0; j < z_base.cols(); ++j)
            zb.data(i * kNumResidues + j) = z_base(i, j);
    FusionModel::Graph g = model.forward_graph(a, ad::constant(std::move(zb)));

    const int L = a.cols();
    auto to_matrix = [L](const ad::Var& v, int cols) {
        Matrix m(L, cols);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < cols; ++j)
                m(i, j) = v->value.data(static_cast<long>(i) * cols + j);
        return m;
    };
    FusionOutput out;
    out.z_ref = to_matrix(g.z_ref, kNumResidues);
    out.z_fused = to_matrix(g.z_fused, kNumResidues);
    out.p_fused = to_matrix(g.p_fused, kNumResidues);
    for (const auto& attn : g.attention) out.attention.push_back(to_matrix(attn, a.rows()));
    return out;
}

std::vector<double> train_stage1(std::vector<FusionTrainSample>& data, FusionModel& model,
                                 ToyBaseModel* base, const StageOneConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_stage1: empty dataset");
    if (cfg.mode == TrainMode::Joint && base == nullptr)
        throw std::invalid_argument("train_stage1: Joint mode requires a trainable base model");

    std::vector<ad::Var> params = model.params();
    if (cfg.mode == TrainMode::Joint) {
        auto bp = base->params();
        params.insert(params.end(), bp.begin(), bp.end());
    }
    ad::Adam opt(params, cfg.adam);
    std::mt19937_64 rng(cfg.seed);

    std::vector<double> epoch_losses;
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        size_t pos = 0;
        while (pos < order.size()) {
            const size_t batch_end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch));
            opt.zero_grad();
            const int count = static_cast<int>(batch_end - pos);
            for (size_t b = pos; b < batch_end; ++b) {
                FusionTrainSample& s = data[order[b]];
                ad::Var zb;
                if (cfg.mode == TrainMode::Joint) {
                    zb = base->forward_graph(s.base_features);
                    // The anchor tracks the current base prediction.
                    LogitMatrix z(s.stack.cols(), kNumResidues);
                    for (int i = 0; i < s.stack.cols(); ++i)
                        for (int j = 0; j < kNumResidues; ++j)
                            z(i, j) = zb->value.data(static_cast<long>(i) * kNumResidues + j);
                    s.stack.tokens[0] = anchor_row(z);
                } else {
                    ad::Tensor t = ad::Tensor::zeros({s.stack.cols(), kNumResidues});
                    for (int i = 0; i < s.stack.cols(); ++i)
                        for (int j = 0; j < kNumResidues; ++j)
                            t.data(static_cast<long>(i) * kNumResidues + j) = s.z_base(i, j);
                    zb = ad::constant(std::move(t));
                }
                FusionModel::Graph g = model.forward_graph(s.stack, zb);
                ad::Var loss = ad::cross_entropy(g.z_fused, s.targets);
                total += loss->value.at(0);
                ad::backward(loss);
            }
            for (const auto& p : params) p->grad /= static_cast<double>(count);
            opt.step();
            pos = batch_end;
        }
        epoch_losses.push_back(total / static_cast<double>(data.size()));
    }
    return epoch_losses;
}

}  // namespace refold
