#include "refold/eval.hpp"

#include <cmath>
#include <sstream>

namespace refold {

int argmax_row(const ProbMatrix& p, int row) {
    int best = 0;
    for (Eigen::Index c = 1; c < p.cols(); ++c)
        if (p(row, c) > p(row, best)) best = static_cast<int>(c);
    return best;
}

double recovery(const ProbMatrix& p, const Sequence& y) {
    if (p.rows() != y.length()) throw std::invalid_argument("recovery: length mismatch");
    int hits = 0;
    for (int j = 0; j < y.length(); ++j)
        if (argmax_row(p, j) == y.tokens[static_cast<size_t>(j)]) ++hits;
    return static_cast<double>(hits) / y.length();
}

double perplexity(const ProbMatrix& p, const Sequence& y) {
    if (p.rows() != y.length()) throw std::invalid_argument("perplexity: length mismatch");
    double nll = 0.0;
    for (int j = 0; j < y.length(); ++j)
        nll -= std::log(std::max(p(j, y.tokens[static_cast<size_t>(j)]), 1e-12));
    return std::exp(nll / y.length());
}

double shannon_entropy(const ProbMatrix& p, int row) {
    double h = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const double v = p(row, c);
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

void StratifiedReport::accumulate(const ProbMatrix& p_base, const ProbMatrix& refined,
                                  const Sequence& y) {
    if (p_base.rows() != y.length() || refined.rows() != y.length())
        throw std::invalid_argument("entropy_stratify: length mismatch");
    for (int j = 0; j < y.length(); ++j) {
        const double h = shannon_entropy(p_base, j);
        const int regime = h < kEntropyLow ? 0 : (h < kEntropyHigh ? 1 : 2);
        auto& r = regimes[static_cast<size_t>(regime)];
        ++r.tokens;
        const int t = y.tokens[static_cast<size_t>(j)];
        if (argmax_row(p_base, j) == t) ++r.base_correct;
        if (argmax_row(refined, j) == t) ++r.refined_correct;
    }
}

std::string StratifiedReport::summary() const {
    static const char* names[3] = {"low", "mid", "high"};
    std::ostringstream os;
    for (int i = 0; i < 3; ++i) {
        const auto& r = regimes[static_cast<size_t>(i)];
        os << names[i] << " tokens=" << r.tokens << " base=" << r.base_recovery()
           << " refined=" << r.refined_recovery() << " delta=" << r.delta() << "\n";
    }
    return os.str();
}

StratifiedReport entropy_stratify(const ProbMatrix& p_base, const ProbMatrix& refined,
                                  const Sequence& y) {
    StratifiedReport rep;
    rep.accumulate(p_base, refined, y);
    return rep;
}

TransitionMap transition_map(const std::vector<int>& base_pred, const std::vector<int>& refined_pred,
                             const Sequence& y) {
    if (base_pred.size() != refined_pred.size() ||
        static_cast<int>(base_pred.size()) != y.length())
        throw std::invalid_argument("transition_map: length mismatch");
    TransitionMap tm;
    for (int j = 0; j < y.length(); ++j) {
        const int t = y.tokens[static_cast<size_t>(j)];
        const bool b = base_pred[static_cast<size_t>(j)] == t;
        const bool r = refined_pred[static_cast<size_t>(j)] == t;
        SiteState s;
        if (b && r)
            s = SiteState::Pos;
        else if (!b && !r)
            s = SiteState::Neg;
        else if (!b && r)
            s = SiteState::NegToPos;
        else
            s = SiteState::PosToNeg;
        tm.states.push_back(s);
        switch (s) {
            case SiteState::Neg: ++tm.neg; break;
            case SiteState::Pos: ++tm.pos; break;
            case SiteState::NegToPos: ++tm.neg_to_pos; break;
            case SiteState::PosToNeg: ++tm.pos_to_neg; break;
        }
    }
    return tm;
}

std::string TransitionMap::grid(int limit) const {
    std::string out;
    const int n = std::min<int>(limit, static_cast<int>(states.size()));
    for (int j = 0; j < n; ++j) {
        switch (states[static_cast<size_t>(j)]) {
            case SiteState::Neg: out += '.'; break;
            case SiteState::Pos: out += '#'; break;
            case SiteState::NegToPos: out += '+'; break;
            case SiteState::PosToNeg: out += '-'; break;
        }
    }
    return out;
}

}  // namespace refold
