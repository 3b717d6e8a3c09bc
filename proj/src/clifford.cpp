#include "csmp/clifford.hpp"

#include <cmath>
#include <stdexcept>

namespace csmp {

namespace {
constexpr int kMaxDim = 16;  // dense 2^d storage; experiments use d <= 5
}

Metric::Metric(int dim, std::vector<double> sig) : d(dim), signature(std::move(sig)) {
    if (d < 1 || d > kMaxDim)
        throw std::invalid_argument("metric: dimension must be in [1, 16]");
    if (static_cast<int>(signature.size()) != d)
        throw std::invalid_argument("metric: signature must have d entries");
    for (double s : signature)
        if (!std::isfinite(s))
            throw std::invalid_argument("metric: signature entries must be finite");
}

Metric Metric::euclidean(int dim) {
    return Metric(dim, std::vector<double>(static_cast<std::size_t>(dim), 1.0));
}

bool Metric::is_euclidean() const {
    for (double s : signature)
        if (s != 1.0) return false;
    return true;
}

bool Metric::is_degenerate() const {
    for (double s : signature)
        if (s == 0.0) return true;
    return false;
}

int blade_reorder_sign(std::uint32_t a, std::uint32_t b) {
    // Each step counts the factors of b that a's remaining factors must jump
    // over, i.e. the transpositions sorting the concatenated index list.
    int swaps = 0;
    a >>= 1;
    while (a != 0) {
        swaps += __builtin_popcount(a & b);
        a >>= 1;
    }
    return (swaps & 1) ? -1 : 1;
}

double blade_product_coeff(std::uint32_t a, std::uint32_t b, const Metric& m) {
    double c = blade_reorder_sign(a, b);
    std::uint32_t common = a & b;
    while (common != 0) {
        int i = __builtin_ctz(common);
        c *= m.signature[i];
        common &= common - 1;
    }
    return c;
}

CayleyTable::CayleyTable(const Metric& m) : metric(m) {
    if (m.d > 8)
        throw std::invalid_argument("cayley table: dense table limited to d <= 8");
    std::size_t b = m.blade_count();
    coeff.resize(b * b);
    for (std::uint32_t i = 0; i < b; ++i)
        for (std::uint32_t j = 0; j < b; ++j)
            coeff[(std::size_t{i} << m.d) + j] = blade_product_coeff(i, j, m);
}

Multivector::Multivector(const Metric& m, std::vector<double> c)
    : metric(m), coeffs(std::move(c)) {
    if (coeffs.size() != m.blade_count())
        throw std::invalid_argument("multivector: expected 2^d coefficients");
}

static void check_same_metric(const Multivector& a, const Multivector& b) {
    if (a.metric != b.metric)
        throw std::invalid_argument("multivector: metric mismatch");
}

Multivector operator+(const Multivector& a, const Multivector& b) {
    check_same_metric(a, b);
    Multivector out = a;
    for (std::size_t i = 0; i < out.coeffs.size(); ++i) out.coeffs[i] += b.coeffs[i];
    return out;
}

Multivector operator-(const Multivector& a, const Multivector& b) {
    check_same_metric(a, b);
    Multivector out = a;
    for (std::size_t i = 0; i < out.coeffs.size(); ++i) out.coeffs[i] -= b.coeffs[i];
    return out;
}

Multivector operator*(double s, const Multivector& x) {
    Multivector out = x;
    for (double& c : out.coeffs) c *= s;
    return out;
}

Multivector geometric_product(const Multivector& a, const Multivector& b) {
    check_same_metric(a, b);
    Multivector out(a.metric);
    std::size_t n = a.coeffs.size();
    for (std::uint32_t i = 0; i < n; ++i) {
        double ai = a.coeffs[i];
        if (ai == 0.0) continue;
        for (std::uint32_t j = 0; j < n; ++j) {
            double bj = b.coeffs[j];
            if (bj == 0.0) continue;
            out.coeffs[i ^ j] += ai * bj * blade_product_coeff(i, j, a.metric);
        }
    }
    return out;
}

Multivector grade_projection(const Multivector& x, int k) {
    if (k < 0 || k > x.metric.d)
        throw std::invalid_argument("grade projection: k out of range");
    Multivector out(x.metric);
    for (std::uint32_t m = 0; m < x.coeffs.size(); ++m)
        if (blade_grade(m) == k) out.coeffs[m] = x.coeffs[m];
    return out;
}

Multivector embed_scalar(double s, const Metric& m) {
    Multivector out(m);
    out.coeffs[0] = s;
    return out;
}

Multivector embed_vector(const std::vector<double>& v, const Metric& m) {
    if (static_cast<int>(v.size()) != m.d)
        throw std::invalid_argument("embed_vector: length must equal d");
    Multivector out(m);
    for (int i = 0; i < m.d; ++i) out.coeffs[std::size_t{1} << i] = v[i];
    return out;
}

double extract_scalar(const Multivector& x) { return x.coeffs[0]; }

std::vector<double> extract_vector(const Multivector& x) {
    std::vector<double> v(x.metric.d);
    for (int i = 0; i < x.metric.d; ++i) v[i] = x.coeffs[std::size_t{1} << i];
    return v;
}

std::vector<double> grade_norms(const Multivector& x) {
    std::vector<double> out(static_cast<std::size_t>(x.metric.d) + 1, 0.0);
    for (std::uint32_t m = 0; m < x.coeffs.size(); ++m) {
        double w = 1.0;
        std::uint32_t bits = m;
        while (bits != 0) {
            w *= x.metric.signature[__builtin_ctz(bits)];
            bits &= bits - 1;
        }
        out[blade_grade(m)] += x.coeffs[m] * x.coeffs[m] * std::fabs(w);
    }
    for (double& v : out) v = std::sqrt(v);
    return out;
}

double max_abs_diff(const Multivector& a, const Multivector& b) {
    check_same_metric(a, b);
    double m = 0.0;
    for (std::size_t i = 0; i < a.coeffs.size(); ++i)
        m = std::max(m, std::fabs(a.coeffs[i] - b.coeffs[i]));
    return m;
}

OrthogonalMap::OrthogonalMap(const Metric& m, std::vector<double> matrix, double tol)
    : d(m.d), mat(std::move(matrix)) {
    if (mat.size() != static_cast<std::size_t>(d) * d)
        throw std::invalid_argument("orthogonal map: expected d x d matrix");
    // R^T D R == D, entrywise.
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k) acc += at(k, i) * m.signature[k] * at(k, j);
            double want = (i == j) ? m.signature[i] : 0.0;
            if (std::fabs(acc - want) > tol)
                throw std::invalid_argument("orthogonal map: R^T D R != D");
        }
    }
}

double OrthogonalMap::det() const {
    // Gaussian elimination with partial pivoting on a copy.
    std::vector<double> a = mat;
    double det = 1.0;
    for (int c = 0; c < d; ++c) {
        int p = c;
        for (int r = c + 1; r < d; ++r)
            if (std::fabs(a[r * d + c]) > std::fabs(a[p * d + c])) p = r;
        if (a[p * d + c] == 0.0) return 0.0;
        if (p != c) {
            for (int k = 0; k < d; ++k) std::swap(a[p * d + k], a[c * d + k]);
            det = -det;
        }
        det *= a[c * d + c];
        for (int r = c + 1; r < d; ++r) {
            double f = a[r * d + c] / a[c * d + c];
            for (int k = c; k < d; ++k) a[r * d + k] -= f * a[c * d + k];
        }
    }
    return det;
}

Outermorphism::Outermorphism(const Metric& m, const OrthogonalMap& r)
    : metric(m), mat({m.blade_count(), m.blade_count()}) {
    if (r.d != m.d)
        throw std::invalid_argument("outermorphism: dimension mismatch");
    std::size_t b = m.blade_count();
    // Images of the basis vectors, then of every blade by appending the
    // highest remaining factor: e_{i1..ik} -> img(e_{i1..i(k-1)}) . (R e_ik).
    std::vector<Multivector> img;
    img.reserve(b);
    img.push_back(embed_scalar(1.0, m));
    std::vector<Multivector> rv;
    for (int i = 0; i < m.d; ++i) {
        std::vector<double> col(m.d);
        for (int row = 0; row < m.d; ++row) col[row] = r.at(row, i);
        rv.push_back(embed_vector(col, m));
    }
    for (std::uint32_t mask = 1; mask < b; ++mask) {
        int hi = 31 - __builtin_clz(mask);
        img.push_back(geometric_product(img[mask ^ (1u << hi)], rv[hi]));
    }
    for (std::uint32_t mask = 0; mask < b; ++mask)
        for (std::uint32_t row = 0; row < b; ++row)
            mat[row * b + mask] = img[mask].coeffs[row];
}

Multivector Outermorphism::apply(const Multivector& x) const {
    if (x.metric != metric)
        throw std::invalid_argument("outermorphism: metric mismatch");
    std::size_t b = metric.blade_count();
    Multivector out(metric);
    for (std::uint32_t mask = 0; mask < b; ++mask) {
        double c = x.coeffs[mask];
        if (c == 0.0) continue;
        for (std::uint32_t row = 0; row < b; ++row)
            out.coeffs[row] += c * mat[row * b + mask];
    }
    return out;
}

Tensor Outermorphism::apply_last_dim(const Tensor& x) const {
    std::size_t b = metric.blade_count();
    if (x.rank() == 0 || x.shape.back() != b)
        throw std::invalid_argument("outermorphism: trailing dim must be 2^d");
    Tensor out(x.shape);
    std::size_t rows = x.size() / b;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data.data() + r * b;
        double* o = out.data.data() + r * b;
        for (std::uint32_t row = 0; row < b; ++row) {
            double acc = 0.0;
            for (std::uint32_t col = 0; col < b; ++col)
                acc += mat[row * b + col] * in[col];
            o[row] = acc;
        }
    }
    return out;
}

Multivector apply_orthogonal(const OrthogonalMap& r, const Multivector& x) {
    return Outermorphism(x.metric, r).apply(x);
}

OrthogonalMap random_orthogonal(const Metric& m, Rng& rng) {
    if (!m.is_euclidean())
        throw std::invalid_argument("random_orthogonal: only Euclidean signature supported");
    int d = m.d;
    std::vector<double> a(static_cast<std::size_t>(d) * d);
    for (double& v : a) v = rng.gaussian();
    // Modified Gram-Schmidt on columns, two passes for orthogonality ~1e-15.
    for (int pass = 0; pass < 2; ++pass) {
        for (int c = 0; c < d; ++c) {
            for (int p = 0; p < c; ++p) {
                double dot = 0.0;
                for (int r = 0; r < d; ++r) dot += a[r * d + c] * a[r * d + p];
                for (int r = 0; r < d; ++r) a[r * d + c] -= dot * a[r * d + p];
            }
            double norm = 0.0;
            for (int r = 0; r < d; ++r) norm += a[r * d + c] * a[r * d + c];
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                // Degenerate draw; replace the column and redo it.
                for (int r = 0; r < d; ++r) a[r * d + c] = rng.gaussian();
                --c;
                continue;
            }
            for (int r = 0; r < d; ++r) a[r * d + c] /= norm;
        }
    }
    return OrthogonalMap(m, a);
}

OrthogonalMap random_orthogonal(int d, std::uint64_t seed) {
    Rng rng(seed);
    return random_orthogonal(Metric::euclidean(d), rng);
}

}  // namespace csmp
