#include "refold/stacker.hpp"

#include <cmath>
#include <sstream>

namespace refold {

std::vector<int> anchor_row(const LogitMatrix& z_base) {
    std::vector<int> out(static_cast<size_t>(z_base.rows()));
    for (Eigen::Index i = 0; i < z_base.rows(); ++i) {
        int best = 0;
        for (Eigen::Index j = 1; j < z_base.cols(); ++j)
            if (z_base(i, j) > z_base(i, best)) best = static_cast<int>(j);
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

std::vector<double> reliability_bias(const std::vector<double>& tm_scores, double beta0) {
    std::vector<double> beta;
    beta.push_back(beta0);
    if (tm_scores.empty()) return beta;
    double m = tm_scores[0];
    for (double s : tm_scores) m = std::max(m, s);
    double sum = 0.0;
    for (double s : tm_scores) sum += std::exp(s - m);
    for (double s : tm_scores) beta.push_back(std::exp(s - m) / sum);
    return beta;
}

StackedAlignment build_stack(const LogitMatrix& z_base, const std::vector<NeighborHit>& hits,
                             const std::map<std::string, Sequence>& target_seqs, int k,
                             double beta0) {
    const int L = static_cast<int>(z_base.rows());
    const int used = std::min<int>(k, static_cast<int>(hits.size()));
    StackedAlignment a;
    a.tokens.emplace_back(anchor_row(z_base));
    a.valid.emplace_back(static_cast<size_t>(L), true);
    for (int r = 0; r < used; ++r) {
        const NeighborHit& hit = hits[static_cast<size_t>(r)];
        auto it = target_seqs.find(hit.target_id);
        if (it == target_seqs.end())
            throw std::invalid_argument("build_stack: missing target sequence '" + hit.target_id + "'");
        const Sequence& seq = it->second;
        std::vector<int> row(static_cast<size_t>(L), kGapIndex);
        std::vector<bool> mask(static_cast<size_t>(L), false);
        for (const auto& [q, t] : hit.pairs) {
            if (q < 0 || q >= L)
                throw std::invalid_argument("build_stack: query index out of range");
            if (t < 0 || t >= seq.length())
                throw std::invalid_argument("build_stack: target index out of range for '" +
                                            hit.target_id + "'");
            row[static_cast<size_t>(q)] = seq.tokens[static_cast<size_t>(t)];
            mask[static_cast<size_t>(q)] = true;
        }
        a.tokens.push_back(std::move(row));
        a.valid.push_back(std::move(mask));
        a.tm_scores.push_back(hit.tm_score);
    }
    a.beta = reliability_bias(a.tm_scores, beta0);
    return a;
}

std::string format_stack(const StackedAlignment& a) {
    std::ostringstream os;
    os << "rows " << a.rows() << " cols " << a.cols() << "\n";
    for (int r = 0; r < a.rows(); ++r) {
        os << (r == 0 ? "anchor " : "nbr    ");
        for (int j = 0; j < a.cols(); ++j)
            os << token_to_char(a.tokens[static_cast<size_t>(r)][static_cast<size_t>(j)]);
        os << "\n";
    }
    os << "beta";
    for (double b : a.beta) os << " " << b;
    os << "\n";
    return os.str();
}

}  // namespace refold
