#pragma once

#include <cstdint>
#include <vector>

#include "csmp/rng.hpp"
#include "csmp/tensor.hpp"

namespace csmp {

// Diagonal quadratic form on R^d. signature[i] is q(e_i); all experiments use
// the Euclidean form (all +1), but any nondegenerate diagonal form works for
// the algebra itself.
struct Metric {
    int d = 0;
    std::vector<double> signature;

    Metric() = default;
    Metric(int dim, std::vector<double> sig);
    static Metric euclidean(int dim);

    bool operator==(const Metric& o) const {
        return d == o.d && signature == o.signature;
    }
    bool operator!=(const Metric& o) const { return !(*this == o); }

    // 2^d basis blades.
    std::size_t blade_count() const { return std::size_t{1} << d; }
    bool is_euclidean() const;
    bool is_degenerate() const;
};

// Basis blades are indexed by a d-bit mask: bit i set means e_i is a factor.
inline int blade_grade(std::uint32_t mask) { return __builtin_popcount(mask); }

// Sign from sorting the concatenated factor lists of e_a · e_b into canonical
// order (counting transpositions), without the metric contraction factors.
int blade_reorder_sign(std::uint32_t a, std::uint32_t b);

// Full structure coefficient: e_a · e_b = blade_product_coeff(a,b,m) · e_{a^b}.
double blade_product_coeff(std::uint32_t a, std::uint32_t b, const Metric& m);

// Precomputed structure constants, used by the neural layers where table
// lookup dominates throughput. coeff is a dense 2^d x 2^d array.
struct CayleyTable {
    Metric metric;
    std::vector<double> coeff;  // coeff[a * B + b]

    explicit CayleyTable(const Metric& m);
    double at(std::uint32_t a, std::uint32_t b) const {
        return coeff[(std::size_t{a} << metric.d) + b];
    }
};

// Element of Cl(R^d, q): dense coefficient vector over basis blades,
// coeffs[mask] in mask order (mask 0 = scalar part first).
struct Multivector {
    Metric metric;
    std::vector<double> coeffs;

    Multivector() = default;
    explicit Multivector(const Metric& m) : metric(m), coeffs(m.blade_count(), 0.0) {}
    Multivector(const Metric& m, std::vector<double> c);

    double& operator[](std::size_t mask) { return coeffs[mask]; }
    double operator[](std::size_t mask) const { return coeffs[mask]; }
};

Multivector operator+(const Multivector& a, const Multivector& b);
Multivector operator-(const Multivector& a, const Multivector& b);
Multivector operator*(double s, const Multivector& x);

Multivector geometric_product(const Multivector& a, const Multivector& b);
Multivector grade_projection(const Multivector& x, int k);

Multivector embed_scalar(double s, const Metric& m);
Multivector embed_vector(const std::vector<double>& v, const Metric& m);
double extract_scalar(const Multivector& x);
std::vector<double> extract_vector(const Multivector& x);

// Per-grade invariant norms; entry k covers the grade-k coefficients weighted
// by |e_mask . reverse(e_mask)|. Length d+1.
std::vector<double> grade_norms(const Multivector& x);

double max_abs_diff(const Multivector& a, const Multivector& b);

// d x d matrix R orthogonal w.r.t. the bilinear form: R^T D R = D with
// D = diag(signature). Stands in for the orthogonal automorphisms rho(w).
struct OrthogonalMap {
    int d = 0;
    std::vector<double> mat;  // row-major, mat[r * d + c]

    OrthogonalMap() = default;
    // Validates R^T D R = D against the metric; throws on failure.
    OrthogonalMap(const Metric& m, std::vector<double> matrix, double tol = 1e-10);

    double at(int r, int c) const { return mat[static_cast<std::size_t>(r) * d + c]; }
    double det() const;
};

// The algebra automorphism induced by R: basis vectors map through R and
// blades through the geometric-product chain of their mapped factors.
// Materialized as a 2^d x 2^d matrix acting on coefficient vectors.
struct Outermorphism {
    Metric metric;
    Tensor mat;  // [B, B]; column `mask` holds the image of blade `mask`

    Outermorphism(const Metric& m, const OrthogonalMap& r);

    Multivector apply(const Multivector& x) const;
    // Applies to a stack of multivector channels laid out as [..., B].
    Tensor apply_last_dim(const Tensor& x) const;
};

Multivector apply_orthogonal(const OrthogonalMap& r, const Multivector& x);

// Orthonormalized seeded Gaussian matrix; hits both components of O(d)
// (det +1 and -1 each with probability ~1/2).
OrthogonalMap random_orthogonal(const Metric& m, Rng& rng);
OrthogonalMap random_orthogonal(int d, std::uint64_t seed);

}  // namespace csmp
