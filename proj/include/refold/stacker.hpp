// Stacked neighbor alignment: anchor row from greedy-decoded base logits,
// aligned neighbor tokens with GAP fill, and the reliability bias.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "refold/types.hpp"

namespace refold {

struct StackedAlignment {
    // (K+1) x L tokens; row 0 is the anchor and contains no GAP.
    std::vector<std::vector<int>> tokens;
    // valid[r][j] == (tokens[r][j] != GAP)
    std::vector<std::vector<bool>> valid;
    std::vector<double> tm_scores;  // K entries
    std::vector<double> beta;       // K+1 entries; beta[0] is the model's beta0

    int rows() const { return static_cast<int>(tokens.size()); }
    int cols() const { return tokens.empty() ? 0 : static_cast<int>(tokens[0].size()); }
    int num_neighbors() const { return rows() - 1; }
    // True if any neighbor row (r >= 1) is valid at column j.
    bool covered(int j) const {
        for (int r = 1; r < rows(); ++r)
            if (valid[static_cast<size_t>(r)][static_cast<size_t>(j)]) return true;
        return false;
    }
};

// Per position, the canonical token with maximal logit; ties to lowest index.
std::vector<int> anchor_row(const LogitMatrix& z_base);

// beta[0] = beta0; beta[1..K] = softmax of the TM-scores.
std::vector<double> reliability_bias(const std::vector<double>& tm_scores, double beta0);

// Builds the (K+1) x L matrix from the top-K hits. Fewer hits shrink K.
StackedAlignment build_stack(const LogitMatrix& z_base, const std::vector<NeighborHit>& hits,
                             const std::map<std::string, Sequence>& target_seqs, int k,
                             double beta0);

std::string format_stack(const StackedAlignment& a);

}  // namespace refold
