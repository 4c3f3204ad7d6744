// Core domain types shared by every module.
#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "refold/tokens.hpp"

namespace refold {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;

// L x 20 unnormalized residue scores.
using LogitMatrix = Matrix;
// L x 20 row-stochastic residue distributions.
using ProbMatrix = Matrix;

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Sequence {
    std::string id;
    std::vector<int> tokens;  // canonical tokens only, no GAP

    int length() const { return static_cast<int>(tokens.size()); }
    std::string str() const {
        std::string s;
        s.reserve(tokens.size());
        for (int t : tokens) s.push_back(token_to_char(t));
        return s;
    }
};

struct BackboneResidue {
    Vec3 n, ca, c;  // Angstrom
};

struct Backbone {
    std::string id;
    std::vector<BackboneResidue> residues;

    int length() const { return static_cast<int>(residues.size()); }
    Vec3 ca(int i) const { return residues[static_cast<size_t>(i)].ca; }
};

struct NeighborHit {
    std::string target_id;
    double tm_score = 0.0;  // in (0,1]
    // (query_index, target_index), strictly increasing in both coordinates
    std::vector<std::pair<int, int>> pairs;
};

inline ProbMatrix softmax_rows(const LogitMatrix& z) {
    ProbMatrix p(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        Eigen::RowVectorXd e = (z.row(i).array() - m).exp();
        p.row(i) = e / e.sum();
    }
    return p;
}

}  // namespace refold
