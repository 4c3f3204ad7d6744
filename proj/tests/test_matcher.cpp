#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "refold/matcher.hpp"

using namespace refold;

namespace {

constexpr double kPi = 3.14159265358979323846;

Backbone random_backbone(std::mt19937_64& rng, int length, const std::string& id = "r") {
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

// Independent affine-gap cost of a gap of g skipped residues.
double gap_cost(int g, const AlignScores& sc) {
    if (g <= 0) return 0.0;
    return sc.gap_open + (g - 1) * sc.gap_extend;
}

// O(n^2 m^2) oracle: best local alignment as a monotone chain of pairs,
// internal gaps priced affinely, both ends free.
double oracle_local_score(const std::vector<int>& a, const std::vector<int>& b,
                          const AlignScores& sc) {
    const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
    Matrix best(n, m);
    double global = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double sub = a[i] == b[j] ? sc.match : sc.mismatch;
            double prev = 0.0;
            for (int pi = 0; pi < i; ++pi)
                for (int pj = 0; pj < j; ++pj)
                    prev = std::max(prev, best(pi, pj) + gap_cost(i - pi - 1, sc) +
                                              gap_cost(j - pj - 1, sc));
            best(i, j) = sub + prev;
            global = std::max(global, best(i, j));
        }
    }
    return global;
}

double score_of_pairs(const std::vector<std::pair<int, int>>& pairs, const std::vector<int>& a,
                      const std::vector<int>& b, const AlignScores& sc) {
    double s = 0.0;
    for (size_t k = 0; k < pairs.size(); ++k) {
        s += a[pairs[k].first] == b[pairs[k].second] ? sc.match : sc.mismatch;
        if (k > 0) {
            s += gap_cost(pairs[k].first - pairs[k - 1].first - 1, sc);
            s += gap_cost(pairs[k].second - pairs[k - 1].second - 1, sc);
        }
    }
    return s;
}

}  // namespace

TEST_CASE("virtual angle matches hand geometry") {
    CHECK(virtual_angle(Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(0, 1, 0)) ==
          doctest::Approx(kPi / 2).epsilon(1e-12));
    CHECK(virtual_angle(Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(-1, 0, 0)) ==
          doctest::Approx(kPi).epsilon(1e-12));
    CHECK(virtual_angle(Vec3(2, 0, 0), Vec3(0, 0, 0), Vec3(5, 0, 0)) ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("virtual dihedral matches hand geometry") {
    // Planar cis arrangement -> 0; trans -> pi; right-handed quarter turn -> pi/2.
    CHECK(virtual_dihedral(Vec3(1, 1, 0), Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(0, 1, 0)) ==
          doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::abs(virtual_dihedral(Vec3(1, 1, 0), Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(0, -1, 0))) ==
          doctest::Approx(kPi).epsilon(1e-12));
    CHECK(std::abs(virtual_dihedral(Vec3(1, 1, 0), Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(0, 0, 1))) ==
          doctest::Approx(kPi / 2).epsilon(1e-12));
}

TEST_CASE("discretize bins match direct trigonometry") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        Backbone b = random_backbone(rng, 12);
        StateString s = discretize(b);
        REQUIRE(static_cast<int>(s.states.size()) == 12);
        CHECK(s.states[0] == 0);
        CHECK(s.states[10] == 0);
        CHECK(s.states[11] == 0);
        for (int i = 1; i + 2 < 12; ++i) {
            double theta = virtual_angle(b.ca(i - 1), b.ca(i), b.ca(i + 1));
            double tau = virtual_dihedral(b.ca(i - 1), b.ca(i), b.ca(i + 1), b.ca(i + 2));
            int bt = std::min(3, static_cast<int>(theta / (kPi / 4)));
            int bd = std::min(3, static_cast<int>((tau + kPi) / (kPi / 2)));
            CHECK(s.states[i] == 4 * bt + bd);
            CHECK(s.states[i] >= 0);
            CHECK(s.states[i] < 16);
        }
    }
}

TEST_CASE("local alignment equals the exhaustive oracle on 200 random pairs") {
    std::mt19937_64 rng(23);
    AlignScores sc;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 12);
        const int m = 1 + static_cast<int>(rng() % 12);
        StateString a, b;
        a.states.resize(n);
        b.states.resize(m);
        // A small alphabet forces frequent matches and gapped optima.
        for (auto& s : a.states) s = static_cast<int>(rng() % 4);
        for (auto& s : b.states) s = static_cast<int>(rng() % 4);
        LocalAlignment aln = local_align(a, b, sc);
        const double want = oracle_local_score(a.states, b.states, sc);
        CHECK(aln.score == doctest::Approx(want).epsilon(1e-12));
        if (!aln.pairs.empty()) {
            CHECK(score_of_pairs(aln.pairs, a.states, b.states, sc) ==
                  doctest::Approx(aln.score).epsilon(1e-12));
            for (size_t k = 1; k < aln.pairs.size(); ++k) {
                CHECK(aln.pairs[k].first > aln.pairs[k - 1].first);
                CHECK(aln.pairs[k].second > aln.pairs[k - 1].second);
            }
        }
    }
}

TEST_CASE("kabsch recovers an exact rigid transform") {
    std::mt19937_64 rng(29);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 25; ++trial) {
        // Random rotation via QR of a Gaussian matrix.
        Eigen::Matrix3d A;
        for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = g(rng);
        Eigen::HouseholderQR<Eigen::Matrix3d> qr(A);
        Eigen::Matrix3d R = qr.householderQ();
        if (R.determinant() < 0) R.col(0) *= -1.0;
        Vec3 t(g(rng), g(rng), g(rng));
        std::vector<Vec3> q, p;
        for (int i = 0; i < 8; ++i) {
            Vec3 x(g(rng) * 5, g(rng) * 5, g(rng) * 5);
            q.push_back(x);
            p.push_back(R * x + t);
        }
        Superposition s = kabsch(p, q);
        CHECK(s.rmsd < 1e-9);
        CHECK((s.rotation - R).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(s.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-12));
        for (size_t i = 0; i < p.size(); ++i) CHECK((p[i] - s.apply(q[i])).norm() < 1e-9);
    }
}

TEST_CASE("kabsch never returns a reflection") {
    // Mirrored points cannot be superposed by a rotation; det must stay +1.
    std::vector<Vec3> q = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}};
    std::vector<Vec3> p = q;
    for (auto& x : p) x.z() *= -1.0;
    Superposition s = kabsch(p, q);
    CHECK(s.rotation.determinant() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.rmsd > 0.1);
}

TEST_CASE("kabsch input validation") {
    std::vector<Vec3> two = {{0, 0, 0}, {1, 0, 0}};
    CHECK_THROWS_AS(kabsch(two, two), std::invalid_argument);
    std::vector<Vec3> three = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    CHECK_THROWS_AS(kabsch(three, two), std::invalid_argument);
}

TEST_CASE("tm_d0 formula and floor") {
    CHECK(tm_d0(120) == doctest::Approx(1.24 * std::cbrt(105.0) - 1.8).epsilon(1e-15));
    // L=20 gives 1.24*5^(1/3)-1.8 ~ 0.32, clamped to the floor.
    CHECK(tm_d0(20) == 0.5);
    CHECK(tm_d0(15) == 0.5);
}

TEST_CASE("tm_score of a structure against itself is exactly 1") {
    std::mt19937_64 rng(31);
    Backbone b = random_backbone(rng, 40);
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 40; ++i) pairs.emplace_back(i, i);
    CHECK(tm_score(b, b, pairs) == 1.0);
}

TEST_CASE("tm_score matches the closed form on a known displacement") {
    // Target equals query shifted along x; Kabsch removes the shift entirely,
    // so every pair lands at distance 0 except the ones we perturb.
    std::mt19937_64 rng(37);
    Backbone q = random_backbone(rng, 20);
    Backbone t = q;
    t.id = "t";
    // Perturb one CA by a known distance after superposition-neutral setup:
    // moving a single point changes the optimal superposition, so instead
    // verify the formula directly through kabsch on the same pairs.
    t.residues[5].ca += Vec3(1.0, 0.0, 0.0);
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 20; ++i) pairs.emplace_back(i, i);
    std::vector<Vec3> pp, qq;
    for (auto& [a, b2] : pairs) {
        pp.push_back(q.ca(a));
        qq.push_back(t.ca(b2));
    }
    Superposition s = kabsch(pp, qq);
    const double d0 = tm_d0(20);
    double want = 0.0;
    for (size_t i = 0; i < pp.size(); ++i) {
        double d2 = (pp[i] - s.apply(qq[i])).squaredNorm();
        want += 1.0 / (1.0 + d2 / (d0 * d0));
    }
    want /= 20.0;
    CHECK(tm_score(q, t, pairs) == doctest::Approx(want).epsilon(1e-10));
    CHECK(want < 1.0);
    CHECK(want > 0.8);
}

TEST_CASE("tm_score is invariant under rigid motion of the target") {
    std::mt19937_64 rng(41);
    Backbone q = random_backbone(rng, 25);
    Backbone t = random_backbone(rng, 25, "t");
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 25; ++i) pairs.emplace_back(i, i);
    const double before = tm_score(q, t, pairs);
    Eigen::AngleAxisd rot(0.7, Vec3(1, 2, 3).normalized());
    for (auto& r : t.residues) {
        r.n = rot * r.n + Vec3(4, -2, 9);
        r.ca = rot * r.ca + Vec3(4, -2, 9);
        r.c = rot * r.c + Vec3(4, -2, 9);
    }
    CHECK(tm_score(q, t, pairs) == doctest::Approx(before).epsilon(1e-9));
}

TEST_CASE("tm_score scores 0 with fewer than 3 pairs") {
    std::mt19937_64 rng(43);
    Backbone b = random_backbone(rng, 10);
    CHECK(tm_score(b, b, {{0, 0}, {1, 1}}) == 0.0);
}

TEST_CASE("search matches a sequential brute force and excludes the query") {
    std::mt19937_64 rng(47);
    std::vector<Backbone> db;
    for (int i = 0; i < 12; ++i) db.push_back(random_backbone(rng, 20, "e" + std::to_string(i)));
    Backbone query = db[3];
    auto hits = search(query, db, 5);
    REQUIRE(!hits.empty());
    for (const auto& h : hits) CHECK(h.target_id != "e3");
    CHECK(hits.size() <= 5);
    for (size_t i = 1; i < hits.size(); ++i) CHECK(hits[i - 1].tm_score >= hits[i].tm_score);
    // Every hit must re-derive from its own alignment.
    StateString qs = discretize(query);
    for (const auto& h : hits) {
        const Backbone* entry = nullptr;
        for (const auto& e : db)
            if (e.id == h.target_id) entry = &e;
        REQUIRE(entry != nullptr);
        LocalAlignment aln = local_align(qs, discretize(*entry));
        CHECK(aln.pairs == h.pairs);
        CHECK(tm_score(query, *entry, aln.pairs) == h.tm_score);
    }
}

TEST_CASE("search is identical across thread counts") {
    std::mt19937_64 rng(53);
    std::vector<Backbone> db;
    for (int i = 0; i < 16; ++i) db.push_back(random_backbone(rng, 18, "e" + std::to_string(i)));
    Backbone query = random_backbone(rng, 18, "q");
    auto h1 = search(query, db, 8, {}, 1);
    auto h4 = search(query, db, 8, {}, 4);
    REQUIRE(h1.size() == h4.size());
    for (size_t i = 0; i < h1.size(); ++i) {
        CHECK(h1[i].target_id == h4[i].target_id);
        CHECK(h1[i].tm_score == h4[i].tm_score);
        CHECK(h1[i].pairs == h4[i].pairs);
    }
}
