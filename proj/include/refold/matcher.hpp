// Desk-scale structural search: CA-trace discretization into a 16-state
// alphabet, Smith-Waterman over state strings, Kabsch superposition,
// TM-score, and top-K retrieval.
#pragma once

#include <vector>

#include "refold/types.hpp"

namespace refold {

struct StateString {
    std::string id;
    std::vector<int> states;  // in [0,16); state 0 reserved for undefined ends
};

struct Superposition {
    Eigen::Matrix3d rotation;
    Vec3 translation;
    double rmsd = 0.0;

    Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
};

// Virtual CA bond angle at b of (a,b,c), in [0,pi].
double virtual_angle(const Vec3& a, const Vec3& b, const Vec3& c);
// Virtual dihedral of (a,b,c,d), in [-pi,pi].
double virtual_dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

// theta binned into 4 equal bins over [0,pi], tau into 4 over [-pi,pi];
// state = 4*bin_theta + bin_tau. Positions without both descriptors get 0.
StateString discretize(const Backbone& b);

struct AlignScores {
    double match = 2.0;
    double mismatch = -1.0;
    double gap_open = -3.0;
    double gap_extend = -1.0;
};

struct LocalAlignment {
    std::vector<std::pair<int, int>> pairs;  // strictly increasing in both
    double score = 0.0;
};

// Smith-Waterman with affine gaps; best-scoring local alignment.
LocalAlignment local_align(const StateString& a, const StateString& b,
                           const AlignScores& scores = {});

// Least-squares rigid superposition of q onto p (reflection-corrected).
Superposition kabsch(const std::vector<Vec3>& p, const std::vector<Vec3>& q);

// d0 = max(1.24*(Lq-15)^(1/3) - 1.8, 0.5).
double tm_d0(int query_length);

// Single Kabsch on the paired CAs, then TM = (1/Lq) * sum 1/(1+(d/d0)^2).
// Fewer than 3 pairs scores 0.
double tm_score(const Backbone& query, const Backbone& target,
                const std::vector<std::pair<int, int>>& pairs);

// discretize -> local_align -> tm_score per entry; top-K by TM, descending.
// The query is excluded from the database by exact id equality.
std::vector<NeighborHit> search(const Backbone& query, const std::vector<Backbone>& db, int k,
                                const AlignScores& scores = {}, int threads = 1);

}  // namespace refold
