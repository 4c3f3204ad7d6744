// Metrics and stratified analysis: recovery, perplexity, entropy regimes,
// and site-wise transition maps.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "refold/types.hpp"

namespace refold {

int argmax_row(const ProbMatrix& p, int row);

// Fraction of positions where argmax(p_j) == y_j (ties to lowest index).
double recovery(const ProbMatrix& p, const Sequence& y);

// exp of mean per-token negative log-likelihood, probabilities floored.
double perplexity(const ProbMatrix& p, const Sequence& y);

double shannon_entropy(const ProbMatrix& p, int row);

// Entropy regimes in nats: H < 1.5, 1.5 <= H < 2.3, H >= 2.3.
inline constexpr double kEntropyLow = 1.5;
inline constexpr double kEntropyHigh = 2.3;

struct StratifiedReport {
    struct Regime {
        long tokens = 0;
        long base_correct = 0;
        long refined_correct = 0;
        double base_recovery() const { return tokens ? static_cast<double>(base_correct) / tokens : 0.0; }
        double refined_recovery() const { return tokens ? static_cast<double>(refined_correct) / tokens : 0.0; }
        double delta() const { return refined_recovery() - base_recovery(); }
    };
    std::array<Regime, 3> regimes;  // low, mid, high

    long total_tokens() const { return regimes[0].tokens + regimes[1].tokens + regimes[2].tokens; }
    void accumulate(const ProbMatrix& p_base, const ProbMatrix& refined, const Sequence& y);
    std::string summary() const;
};

StratifiedReport entropy_stratify(const ProbMatrix& p_base, const ProbMatrix& refined,
                                  const Sequence& y);

enum class SiteState { Neg, Pos, NegToPos, PosToNeg };

struct TransitionMap {
    std::vector<SiteState> states;
    long neg = 0, pos = 0, neg_to_pos = 0, pos_to_neg = 0;

    // Single-character grid for the first `limit` residues.
    std::string grid(int limit = 50) const;
};

TransitionMap transition_map(const std::vector<int>& base_pred, const std::vector<int>& refined_pred,
                             const Sequence& y);

}  // namespace refold
