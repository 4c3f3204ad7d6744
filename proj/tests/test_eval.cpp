#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "refold/eval.hpp"
#include "refold/tokens.hpp"

using namespace refold;

namespace {

ProbMatrix uniform_probs(int L) {
    return ProbMatrix::Constant(L, kNumResidues, 1.0 / kNumResidues);
}

ProbMatrix peaked(const std::vector<int>& peaks, double mass) {
    ProbMatrix p(peaks.size(), kNumResidues);
    const double rest = (1.0 - mass) / (kNumResidues - 1);
    for (size_t i = 0; i < peaks.size(); ++i) {
        p.row(static_cast<long>(i)).setConstant(rest);
        p(static_cast<long>(i), peaks[i]) = mass;
    }
    return p;
}

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest index") {
    ProbMatrix p = ProbMatrix::Zero(2, kNumResidues);
    p(0, 3) = 0.5;
    p(0, 9) = 0.5;
    p.row(1).setConstant(1.0 / kNumResidues);
    CHECK(argmax_row(p, 0) == 3);
    CHECK(argmax_row(p, 1) == 0);
}

TEST_CASE("recovery counts exact argmax matches") {
    Sequence y;
    y.tokens = {0, 5, 7, 2};
    ProbMatrix p = peaked({0, 5, 1, 2}, 0.9);
    CHECK(recovery(p, y) == doctest::Approx(0.75).epsilon(1e-15));
    Sequence wrong;
    wrong.tokens = {0, 5};
    CHECK_THROWS(recovery(p, wrong));
}

TEST_CASE("perplexity of the uniform distribution is exactly the vocabulary size") {
    Sequence y;
    y.tokens = {0, 1, 2, 3, 4, 5};
    CHECK(perplexity(uniform_probs(6), y) == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("perplexity matches hand-computed values") {
    Sequence y;
    y.tokens = {4, 4};
    ProbMatrix p = ProbMatrix::Zero(2, kNumResidues);
    p(0, 4) = 0.5;
    p(1, 4) = 0.5;  // other columns carry the rest; only the target matters
    p(0, 0) = 0.5;
    p(1, 0) = 0.5;
    CHECK(perplexity(p, y) == doctest::Approx(2.0).epsilon(1e-12));
    // Probability zero at the target hits the floor instead of inf.
    ProbMatrix z = ProbMatrix::Zero(1, kNumResidues);
    z(0, 0) = 1.0;
    Sequence miss;
    miss.tokens = {7};
    CHECK(perplexity(z, miss) == doctest::Approx(1e12).epsilon(1e-6));
}

TEST_CASE("shannon entropy in nats") {
    ProbMatrix p = uniform_probs(1);
    CHECK(shannon_entropy(p, 0) == doctest::Approx(std::log(20.0)).epsilon(1e-12));
    ProbMatrix d = ProbMatrix::Zero(1, kNumResidues);
    d(0, 3) = 1.0;
    CHECK(shannon_entropy(d, 0) == 0.0);
    ProbMatrix h = ProbMatrix::Zero(1, kNumResidues);
    h(0, 0) = 0.5;
    h(0, 1) = 0.5;
    CHECK(shannon_entropy(h, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("entropy regimes split at 1.5 and 2.3 nats") {
    // Construct rows with entropy below 1.5, between, and above 2.3.
    ProbMatrix p = ProbMatrix::Zero(3, kNumResidues);
    p(0, 0) = 0.99;  // ~0.08 nats after spreading the remainder
    for (int c = 1; c < kNumResidues; ++c) p(0, c) = 0.01 / 19;
    for (int c = 0; c < 8; ++c) p(1, c) = 1.0 / 8;   // ln 8 ~ 2.08
    for (int c = 0; c < kNumResidues; ++c) p(2, c) = 1.0 / 20;  // ln 20 ~ 3.0
    Sequence y;
    y.tokens = {0, 0, 0};
    StratifiedReport rep = entropy_stratify(p, p, y);
    CHECK(rep.regimes[0].tokens == 1);
    CHECK(rep.regimes[1].tokens == 1);
    CHECK(rep.regimes[2].tokens == 1);
    CHECK(rep.total_tokens() == 3);
    CHECK(rep.regimes[0].base_recovery() == 1.0);
    CHECK(rep.regimes[1].base_recovery() == 1.0);  // uniform-8 ties to index 0
    CHECK(rep.regimes[0].delta() == 0.0);
}

TEST_CASE("stratified accumulation equals per-protein stratification summed") {
    std::mt19937_64 rng(501);
    std::uniform_int_distribution<int> tok(0, kNumResidues - 1);
    StratifiedReport whole;
    std::array<long, 3> tokens{0, 0, 0};
    for (int prot = 0; prot < 5; ++prot) {
        int L = 4 + static_cast<int>(rng() % 5);
        std::vector<int> peaks_b, peaks_r;
        Sequence y;
        for (int j = 0; j < L; ++j) {
            peaks_b.push_back(tok(rng));
            peaks_r.push_back(tok(rng));
            y.tokens.push_back(tok(rng));
        }
        ProbMatrix pb = peaked(peaks_b, 0.5 + 0.4 * (prot % 2));
        ProbMatrix pr = peaked(peaks_r, 0.9);
        whole.accumulate(pb, pr, y);
        StratifiedReport one = entropy_stratify(pb, pr, y);
        for (int r = 0; r < 3; ++r) tokens[static_cast<size_t>(r)] += one.regimes[static_cast<size_t>(r)].tokens;
    }
    for (int r = 0; r < 3; ++r) CHECK(whole.regimes[static_cast<size_t>(r)].tokens == tokens[static_cast<size_t>(r)]);
}

TEST_CASE("transition map classifies all four site states") {
    Sequence y;
    y.tokens = {1, 1, 1, 1};
    std::vector<int> base = {1, 0, 1, 0};
    std::vector<int> refined = {1, 1, 0, 0};
    TransitionMap tm = transition_map(base, refined, y);
    CHECK(tm.pos == 1);
    CHECK(tm.neg_to_pos == 1);
    CHECK(tm.pos_to_neg == 1);
    CHECK(tm.neg == 1);
    CHECK(tm.grid() == "#+-.");
    CHECK(tm.grid(2) == "#+");
    CHECK(tm.states.size() == 4);
}

TEST_CASE("transition counts match an exhaustive check on random cases") {
    std::mt19937_64 rng(503);
    std::uniform_int_distribution<int> tok(0, 3);
    for (int trial = 0; trial < 50; ++trial) {
        const int L = 1 + static_cast<int>(rng() % 8);
        Sequence y;
        std::vector<int> b(L), r(L);
        for (int j = 0; j < L; ++j) {
            y.tokens.push_back(tok(rng));
            b[static_cast<size_t>(j)] = tok(rng);
            r[static_cast<size_t>(j)] = tok(rng);
        }
        TransitionMap tm = transition_map(b, r, y);
        long neg = 0, pos = 0, np = 0, pn = 0;
        for (int j = 0; j < L; ++j) {
            const bool cb = b[static_cast<size_t>(j)] == y.tokens[static_cast<size_t>(j)];
            const bool cr = r[static_cast<size_t>(j)] == y.tokens[static_cast<size_t>(j)];
            if (cb && cr) ++pos;
            else if (!cb && !cr) ++neg;
            else if (!cb) ++np;
            else ++pn;
        }
        CHECK(tm.neg == neg);
        CHECK(tm.pos == pos);
        CHECK(tm.neg_to_pos == np);
        CHECK(tm.pos_to_neg == pn);
        CHECK(tm.neg + tm.pos + tm.neg_to_pos + tm.pos_to_neg == L);
    }
}
