// End-to-end acceptance gate. Each criterion prints exactly one line:
//   PASS  <n>  <summary>      or      FAIL  <n>  <summary>
// and the process exits nonzero if any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>

#include "refold/pipeline.hpp"

using namespace refold;
using clock_type = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int n, bool ok, const std::string& summary) {
    std::cout << (ok ? "PASS" : "FAIL") << "  " << n << "  " << summary << "\n";
    if (!ok) ++g_failures;
}

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

StackedAlignment random_stack(std::mt19937_64& rng, int L, int K) {
    StackedAlignment a;
    std::uniform_real_distribution<double> u(0.2, 0.9);
    a.tokens.assign(static_cast<size_t>(K + 1), std::vector<int>(static_cast<size_t>(L), 0));
    a.valid.assign(static_cast<size_t>(K + 1), std::vector<bool>(static_cast<size_t>(L), true));
    for (int j = 0; j < L; ++j)
        a.tokens[0][static_cast<size_t>(j)] = static_cast<int>(rng() % kNumResidues);
    for (int r = 1; r <= K; ++r) {
        a.tm_scores.push_back(u(rng));
        for (int j = 0; j < L; ++j) {
            if (rng() % 4 == 0) {
                a.tokens[static_cast<size_t>(r)][static_cast<size_t>(j)] = kGapIndex;
                a.valid[static_cast<size_t>(r)][static_cast<size_t>(j)] = false;
            } else {
                a.tokens[static_cast<size_t>(r)][static_cast<size_t>(j)] =
                    static_cast<int>(rng() % kNumResidues);
            }
        }
    }
    a.beta = reliability_bias(a.tm_scores, 0.1);
    return a;
}

LogitMatrix random_logits(std::mt19937_64& rng, int L) {
    std::normal_distribution<double> g(0.0, 1.5);
    LogitMatrix z(L, kNumResidues);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < kNumResidues; ++j) z(i, j) = g(rng);
    return z;
}

Backbone random_backbone(std::mt19937_64& rng, int length, const std::string& id) {
    std::normal_distribution<double> g(0.0, 1.0);
    Backbone b;
    b.id = id;
    Vec3 pos = Vec3::Zero();
    Vec3 dir = Vec3::UnitX();
    for (int i = 0; i < length; ++i) {
        dir += 0.6 * Vec3(g(rng), g(rng), g(rng));
        dir.normalize();
        pos += 3.8 * dir;
        BackboneResidue r;
        r.ca = pos;
        r.n = pos - 0.5 * dir;
        r.c = pos + 0.5 * dir;
        b.residues.push_back(r);
    }
    return b;
}

// Criterion 1: gradient fidelity of the full fusion forward + loss.
void criterion_gradients() {
    auto t0 = clock_type::now();
    FusionConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.d_ff = 12;
    double worst = 0.0;
    int instances = 0;
    std::mt19937_64 rng(2024);
    for (unsigned seed = 0; seed < 24; ++seed) {
        const int L = 2 + static_cast<int>(rng() % 5);   // <= 6
        const int K = 1 + static_cast<int>(rng() % 3);   // <= 3
        FusionModel model(cfg, seed);
        StackedAlignment a = random_stack(rng, L, K);
        LogitMatrix z = random_logits(rng, L);
        std::vector<int> targets;
        for (int j = 0; j < L; ++j) targets.push_back(static_cast<int>(rng() % kNumResidues));
        auto loss = [&]() {
            ad::Tensor zb = ad::Tensor::zeros({L, kNumResidues});
            for (int i = 0; i < L; ++i)
                for (int c = 0; c < kNumResidues; ++c)
                    zb.at(i * kNumResidues + c) = z(i, c);
            FusionModel::Graph g = model.forward_graph(a, ad::constant(std::move(zb)));
            return ad::cross_entropy(g.z_fused, targets);
        };
        worst = std::max(worst, ad::grad_check(loss, model.params(), 1e-5, 6, seed));
        ++instances;
    }
    const double dt = seconds_since(t0);
    std::ostringstream os;
    os << "gradient fidelity: max rel err " << worst << " over " << instances << " instances, "
       << dt << "s";
    report(1, worst < 1e-4 && instances >= 20 && dt < 60.0, os.str());
}

// Criterion 2: fallback exactness for lambda=0, K=0, and a closed gate.
void criterion_fallbacks() {
    std::mt19937_64 rng(77);
    FusionConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.d_ff = 12;
    bool ok = true;

    FusionModel m(cfg, 1);
    LogitMatrix z = random_logits(rng, 9);
    StackedAlignment empty = random_stack(rng, 9, 0);
    ok &= (fusion_forward(m, empty, z).z_fused - z).cwiseAbs().maxCoeff() == 0.0;

    Checkpoint ckpt;
    m.save(ckpt, "");
    for (auto& a : ckpt.arrays)
        if (a.name == "lambda") a.data[0] = 0.0;
    m.load(ckpt, "");
    StackedAlignment full = random_stack(rng, 9, 3);
    ok &= (fusion_forward(m, full, z).z_fused - z).cwiseAbs().maxCoeff() == 0.0;

    ProbMatrix p_base = softmax_rows(random_logits(rng, 9));
    ProbMatrix p_fused = softmax_rows(random_logits(rng, 9));
    GateModel gate;  // constant score 0.5
    gate.tau = 0.9;
    LogitMatrix z_ref = LogitMatrix::Ones(9, kNumResidues);
    ok &= (gated_infer(p_base, p_fused, z_ref, gate, GateFeatures{}) - p_base)
              .cwiseAbs()
              .maxCoeff() == 0.0;
    report(2, ok, "fallback exactness: lambda=0, K=0, closed gate all bit-equal to base");
}

// Criterion 3: matcher oracles.
void criterion_matcher() {
    std::mt19937_64 rng(88);
    std::normal_distribution<double> g;
    bool ok = true;

    // Kabsch on exact rigid transforms.
    for (int trial = 0; trial < 10; ++trial) {
        Eigen::Matrix3d A;
        for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = g(rng);
        Eigen::Matrix3d R = Eigen::HouseholderQR<Eigen::Matrix3d>(A).householderQ();
        if (R.determinant() < 0) R.col(0) *= -1.0;
        Vec3 t(g(rng), g(rng), g(rng));
        std::vector<Vec3> q, p;
        for (int i = 0; i < 6; ++i) {
            Vec3 x(g(rng) * 4, g(rng) * 4, g(rng) * 4);
            q.push_back(x);
            p.push_back(R * x + t);
        }
        ok &= kabsch(p, q).rmsd < 1e-9;
    }

    // Self TM-score is exactly 1.
    Backbone self = random_backbone(rng, 30, "self");
    std::vector<std::pair<int, int>> selfpairs;
    for (int i = 0; i < 30; ++i) selfpairs.emplace_back(i, i);
    ok &= tm_score(self, self, selfpairs) == 1.0;

    // Smith-Waterman against an independent O(n^2 m^2) oracle.
    AlignScores sc;
    auto gap_cost = [&](int gap) {
        return gap <= 0 ? 0.0 : sc.gap_open + (gap - 1) * sc.gap_extend;
    };
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 12);
        const int m2 = 1 + static_cast<int>(rng() % 12);
        StateString a, b;
        a.states.resize(static_cast<size_t>(n));
        b.states.resize(static_cast<size_t>(m2));
        for (auto& s : a.states) s = static_cast<int>(rng() % 4);
        for (auto& s : b.states) s = static_cast<int>(rng() % 4);
        Matrix best(n, m2);
        double want = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m2; ++j) {
                double sub = a.states[static_cast<size_t>(i)] == b.states[static_cast<size_t>(j)]
                                 ? sc.match
                                 : sc.mismatch;
                double prev = 0.0;
                for (int pi = 0; pi < i; ++pi)
                    for (int pj = 0; pj < j; ++pj)
                        prev = std::max(prev, best(pi, pj) + gap_cost(i - pi - 1) +
                                                  gap_cost(j - pj - 1));
                best(i, j) = sub + prev;
                want = std::max(want, best(i, j));
            }
        ok &= std::abs(local_align(a, b, sc).score - want) < 1e-12;
        ++checked;
    }

    // TM formula against direct evaluation through the same superposition.
    Backbone q = random_backbone(rng, 20, "q");
    Backbone t = q;
    t.id = "t";
    t.residues[5].ca += Vec3(1.5, 0, 0);
    std::vector<Vec3> pp, qq;
    for (int i = 0; i < 20; ++i) {
        pp.push_back(q.ca(i));
        qq.push_back(t.ca(i));
    }
    Superposition s = kabsch(pp, qq);
    const double d0 = tm_d0(20);
    double want = 0.0;
    for (int i = 0; i < 20; ++i)
        want += 1.0 / (1.0 + (pp[static_cast<size_t>(i)] - s.apply(qq[static_cast<size_t>(i)]))
                                     .squaredNorm() /
                                 (d0 * d0));
    want /= 20.0;
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 20; ++i) pairs.emplace_back(i, i);
    ok &= std::abs(tm_score(q, t, pairs) - want) < 1e-10;

    std::ostringstream os;
    os << "matcher oracles: kabsch rigid, self TM=1, " << checked
       << " alignment oracle pairs, TM formula";
    report(3, ok, os.str());
}

}  // namespace

int main() {
    criterion_gradients();
    criterion_fallbacks();
    criterion_matcher();

    // Shared end-to-end run for criteria 4-7.
    auto t0 = clock_type::now();
    SynthDataset ds = synth_family(64, 60, 0.15, 7);
    Split split = split_dataset(64);
    PipelineConfig cfg;  // Frozen mode, k=10, gate on
    TrainedPipeline pipe = train_pipeline(ds, split, cfg);
    EvalSummary gated = evaluate_pipeline(pipe, ds, split.test);
    const double train_dt = seconds_since(t0);

    {  // 4: end-to-end gain.
        const double gain = gated.refold_recovery - gated.base_recovery;
        std::ostringstream os;
        os << "synthetic gain: base " << gated.base_recovery << " refold "
           << gated.refold_recovery << " (gain " << gain << "), " << train_dt << "s";
        report(4, gain >= 0.05 && train_dt < 600.0, os.str());
    }

    {  // 5: entropy stratification margin.
        const double d_low = gated.stratified.regimes[0].delta();
        const double d_high = gated.stratified.regimes[2].delta();
        std::ostringstream os;
        os << "entropy stratification: delta(low) " << d_low << " delta(high) " << d_high;
        report(5, d_high >= d_low + 0.05, os.str());
    }

    {  // 6: gate safety under a corrupted neighbor pool.
        TrainedPipeline adversarial = pipe;
        adversarial.db_seqs = randomize_sequences(pipe.db_seqs, 99);
        EvalSummary safe = evaluate_pipeline(adversarial, ds, split.test);
        TrainedPipeline open = adversarial;
        open.use_gate = false;
        EvalSummary unsafe = evaluate_pipeline(open, ds, split.test);
        std::ostringstream os;
        os << "gate safety: base " << safe.base_recovery << " gated " << safe.refold_recovery
           << " ungated " << unsafe.refold_recovery;
        const bool ok = safe.refold_recovery >= safe.base_recovery - 0.01 &&
                        unsafe.refold_recovery <= safe.refold_recovery - 0.01;
        report(6, ok, os.str());
    }

    {  // 7: K saturation.
        auto points = sweep_k(pipe, ds, split.test, {1, 2, 5, 10, 20});
        double rec10 = 0.0, rec20 = 0.0;
        std::ostringstream os;
        os << "K sweep:";
        for (const auto& pt : points) {
            os << " K" << pt.k << "=" << pt.recovery;
            if (pt.k == 10) rec10 = pt.recovery;
            if (pt.k == 20) rec20 = pt.recovery;
        }
        report(7, rec10 >= rec20 - 0.02, os.str());
    }

    {  // 8: bit-identical reruns for a fixed seed.
        TrainedPipeline again = train_pipeline(ds, split, cfg);
        const Backbone& q = ds.backbones[static_cast<size_t>(split.test[0])];
        Inference a = infer_one(pipe, q);
        Inference b = infer_one(again, q);
        EvalSummary s2 = evaluate_pipeline(again, ds, split.test);
        const bool ok = (a.p_out - b.p_out).cwiseAbs().maxCoeff() == 0.0 &&
                        a.gate_score == b.gate_score &&
                        s2.refold_recovery == gated.refold_recovery &&
                        s2.refold_perplexity == gated.refold_perplexity;
        report(8, ok, "determinism: retrained pipeline reproduces outputs bit-exactly");
    }

    {  // 9: structural invariants on live inference outputs.
        bool ok = true;
        for (int i : split.test) {
            Inference inf = infer_one(pipe, ds.backbones[static_cast<size_t>(i)]);
            for (int j = 0; j < inf.p_out.rows(); ++j) {
                ok &= std::abs(inf.p_out.row(j).sum() - 1.0) < 1e-9;
                ok &= inf.p_out.row(j).minCoeff() >= 0.0;
            }
            double nb = 0.0;
            for (size_t r = 1; r < inf.stack.beta.size(); ++r) nb += inf.stack.beta[r];
            if (inf.stack.num_neighbors() > 0) ok &= std::abs(nb - 1.0) < 1e-9;
            for (int r = 0; r < inf.stack.rows(); ++r)
                for (int j = 0; j < inf.stack.cols(); ++j)
                    ok &= inf.stack.valid[static_cast<size_t>(r)][static_cast<size_t>(j)] ==
                          (inf.stack.tokens[static_cast<size_t>(r)][static_cast<size_t>(j)] !=
                           kGapIndex);
            for (const Matrix& att : inf.fused.attention)
                for (int j = 0; j < att.rows(); ++j)
                    ok &= std::abs(att.row(j).sum() - 1.0) < 1e-9 && att.row(j).minCoeff() >= 0.0;
            for (int j = 0; j < inf.fused.z_ref.rows(); ++j)
                if (!inf.stack.covered(j)) ok &= inf.fused.z_ref.row(j).cwiseAbs().maxCoeff() == 0.0;
        }
        report(9, ok, "invariants: distributions, beta softmax, GAP mask, attention, z_ref mask");
    }

    std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED" : "CRITERIA FAILED") << "\n";
    return g_failures == 0 ? 0 : 1;
}
