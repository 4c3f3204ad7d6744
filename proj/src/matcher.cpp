#include "refold/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <thread>

#include <Eigen/SVD>

namespace refold {

double virtual_angle(const Vec3& a, const Vec3& b, const Vec3& c) {
    Vec3 u = a - b, v = c - b;
    double cosang = u.dot(v) / (u.norm() * v.norm());
    cosang = std::clamp(cosang, -1.0, 1.0);
    return std::acos(cosang);
}

double virtual_dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    Vec3 b1 = b - a, b2 = c - b, b3 = d - c;
    Vec3 n1 = b1.cross(b2), n2 = b2.cross(b3);
    Vec3 m1 = n1.cross(b2.normalized());
    double x = n1.dot(n2);
    double y = m1.dot(n2);
    return std::atan2(y, x);
}

StateString discretize(const Backbone& b) {
    const int L = b.length();
    if (L < 1) throw std::invalid_argument("discretize: empty backbone");
    StateString s;
    s.id = b.id;
    s.states.assign(static_cast<size_t>(L), 0);
    constexpr double pi = 3.14159265358979323846;
    for (int i = 1; i + 2 < L; ++i) {
        double theta = virtual_angle(b.ca(i - 1), b.ca(i), b.ca(i + 1));
        double tau = virtual_dihedral(b.ca(i - 1), b.ca(i), b.ca(i + 1), b.ca(i + 2));
        int bt = std::min(3, static_cast<int>(theta / (pi / 4.0)));
        int bd = std::min(3, static_cast<int>((tau + pi) / (pi / 2.0)));
        s.states[static_cast<size_t>(i)] = 4 * bt + bd;
    }
    return s;
}

LocalAlignment local_align(const StateString& a, const StateString& b, const AlignScores& sc) {
    const int n = static_cast<int>(a.states.size());
    const int m = static_cast<int>(b.states.size());
    if (n == 0 || m == 0) throw std::invalid_argument("local_align: empty state string");
    constexpr double NEG = -1e18;
    // Gotoh with three matrices; first gap residue costs gap_open.
    Matrix M = Matrix::Zero(n + 1, m + 1);
    Matrix Ix = Matrix::Constant(n + 1, m + 1, NEG);  // gap in b (consumes a)
    Matrix Iy = Matrix::Constant(n + 1, m + 1, NEG);  // gap in a (consumes b)
    double best = 0.0;
    int bi = 0, bj = 0;
    for (int i = 1; i <= n; ++i) {
        for (int j = 1; j <= m; ++j) {
            Ix(i, j) = std::max(M(i - 1, j) + sc.gap_open, Ix(i - 1, j) + sc.gap_extend);
            Iy(i, j) = std::max(M(i, j - 1) + sc.gap_open, Iy(i, j - 1) + sc.gap_extend);
            double sub = (a.states[static_cast<size_t>(i - 1)] == b.states[static_cast<size_t>(j - 1)])
                             ? sc.match
                             : sc.mismatch;
            double diag = std::max({M(i - 1, j - 1), Ix(i - 1, j - 1), Iy(i - 1, j - 1)});
            M(i, j) = std::max(0.0, diag + sub);
            if (M(i, j) > best) {
                best = M(i, j);
                bi = i;
                bj = j;
            }
        }
    }
    LocalAlignment out;
    out.score = best;
    if (best <= 0.0) return out;
    // Traceback from the best M cell.
    int i = bi, j = bj;
    int state = 0;  // 0 = M, 1 = Ix, 2 = Iy
    while (i > 0 && j > 0) {
        if (state == 0) {
            if (M(i, j) == 0.0) break;
            out.pairs.emplace_back(i - 1, j - 1);
            double sub = (a.states[static_cast<size_t>(i - 1)] == b.states[static_cast<size_t>(j - 1)])
                             ? sc.match
                             : sc.mismatch;
            double need = M(i, j) - sub;
            if (M(i - 1, j - 1) == need)
                state = 0;
            else if (Ix(i - 1, j - 1) == need)
                state = 1;
            else
                state = 2;
            --i;
            --j;
            if (i == 0 || j == 0) break;
            if (state == 0 && M(i, j) == 0.0) break;
        } else if (state == 1) {
            if (Ix(i, j) == M(i - 1, j) + sc.gap_open)
                state = 0;
            else
                state = 1;
            --i;
        } else {
            if (Iy(i, j) == M(i, j - 1) + sc.gap_open)
                state = 0;
            else
                state = 2;
            --j;
        }
    }
    std::reverse(out.pairs.begin(), out.pairs.end());
    return out;
}

Superposition kabsch(const std::vector<Vec3>& p, const std::vector<Vec3>& q) {
    if (p.size() != q.size())
        throw std::invalid_argument("kabsch: point count mismatch");
    if (p.size() < 3) throw std::invalid_argument("kabsch: need at least 3 points");
    const auto n = static_cast<Eigen::Index>(p.size());
    Vec3 pc = Vec3::Zero(), qc = Vec3::Zero();
    for (Eigen::Index i = 0; i < n; ++i) {
        pc += p[static_cast<size_t>(i)];
        qc += q[static_cast<size_t>(i)];
    }
    pc /= static_cast<double>(n);
    qc /= static_cast<double>(n);
    Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
    for (Eigen::Index i = 0; i < n; ++i)
        h += (q[static_cast<size_t>(i)] - qc) * (p[static_cast<size_t>(i)] - pc).transpose();
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    d(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
    Superposition s;
    s.rotation = v * d * u.transpose();
    s.translation = pc - s.rotation * qc;
    double ss = 0.0;
    for (size_t i = 0; i < p.size(); ++i)
        ss += (p[i] - s.apply(q[i])).squaredNorm();
    s.rmsd = std::sqrt(ss / static_cast<double>(p.size()));
    return s;
}

double tm_d0(int query_length) {
    double d0 = 1.24 * std::cbrt(static_cast<double>(query_length) - 15.0) - 1.8;
    return std::max(d0, 0.5);
}

double tm_score(const Backbone& query, const Backbone& target,
                const std::vector<std::pair<int, int>>& pairs) {
    if (pairs.size() < 3) {
        std::cerr << "warning: tm_score: fewer than 3 aligned pairs, scoring 0\n";
        return 0.0;
    }
    std::vector<Vec3> p, q;
    p.reserve(pairs.size());
    q.reserve(pairs.size());
    for (const auto& [qi, ti] : pairs) {
        if (qi < 0 || qi >= query.length() || ti < 0 || ti >= target.length())
            throw std::invalid_argument("tm_score: pair index out of range");
        p.push_back(query.ca(qi));
        q.push_back(target.ca(ti));
    }
    Superposition s = kabsch(p, q);
    const double d0 = tm_d0(query.length());
    double sum = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        double d2 = (p[i] - s.apply(q[i])).squaredNorm();
        sum += 1.0 / (1.0 + d2 / (d0 * d0));
    }
    return sum / static_cast<double>(query.length());
}

std::vector<NeighborHit> search(const Backbone& query, const std::vector<Backbone>& db, int k,
                                const AlignScores& scores, int threads) {
    StateString qs = discretize(query);
    // One optional slot per entry keeps results deterministic across thread counts.
    std::vector<NeighborHit> slots(db.size());
    std::vector<char> filled(db.size(), 0);
    auto scan = [&](size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            const Backbone& entry = db[i];
            if (entry.id == query.id) continue;
            StateString ts = discretize(entry);
            LocalAlignment aln = local_align(qs, ts, scores);
            if (aln.pairs.size() < 3) continue;
            double tm = tm_score(query, entry, aln.pairs);
            if (tm <= 0.0) continue;
            slots[i] = NeighborHit{entry.id, tm, aln.pairs};
            filled[i] = 1;
        }
    };
    if (threads <= 1 || db.size() < 2) {
        scan(0, db.size());
    } else {
        const size_t nt = std::min<size_t>(static_cast<size_t>(threads), db.size());
        std::vector<std::thread> workers;
        const size_t chunk = (db.size() + nt - 1) / nt;
        for (size_t t = 0; t < nt; ++t) {
            const size_t begin = t * chunk;
            const size_t end = std::min(db.size(), begin + chunk);
            if (begin < end) workers.emplace_back(scan, begin, end);
        }
        for (auto& w : workers) w.join();
    }
    std::vector<NeighborHit> hits;
    for (size_t i = 0; i < db.size(); ++i)
        if (filled[i]) hits.push_back(std::move(slots[i]));
    std::sort(hits.begin(), hits.end(), [](const NeighborHit& a, const NeighborHit& b) {
        if (a.tm_score != b.tm_score) return a.tm_score > b.tm_score;
        return a.target_id < b.target_id;
    });
    if (k >= 0 && static_cast<int>(hits.size()) > k) hits.resize(static_cast<size_t>(k));
    return hits;
}

}  // namespace refold
