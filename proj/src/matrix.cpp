#include "tkfac/matrix.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <string>

namespace tkfac {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " +
                             std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                             std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
}

} // namespace

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::diagonal(const Vector& d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
}

Matrix& Matrix::operator+=(const Matrix& o) {
    check_same_shape(*this, o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    check_same_shape(*this, o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

bool Matrix::is_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Vector Matrix::col(std::size_t j) const {
    Vector v(rows_);
    for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
    return v;
}

void Matrix::set_col(std::size_t j, std::span<const double> v) {
    if (v.size() != rows_) throw DimensionError("set_col: length mismatch");
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
}

Matrix operator+(Matrix a, const Matrix& b) { a += b; return a; }
Matrix operator-(Matrix a, const Matrix& b) { a -= b; return a; }
Matrix operator*(Matrix a, double s) { a *= s; return a; }
Matrix operator*(double s, Matrix a) { a *= s; return a; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    if (c.empty() || a.cols() == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans,
                (int)a.rows(), (int)b.cols(), (int)a.cols(),
                1.0, a.raw(), (int)a.cols(), b.raw(), (int)b.cols(),
                0.0, c.raw(), (int)c.cols());
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw DimensionError("matmul_nt: inner dimensions differ");
    Matrix c(a.rows(), b.rows());
    if (c.empty() || a.cols() == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans,
                (int)a.rows(), (int)b.rows(), (int)a.cols(),
                1.0, a.raw(), (int)a.cols(), b.raw(), (int)b.cols(),
                0.0, c.raw(), (int)c.cols());
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw DimensionError("matmul_tn: inner dimensions differ");
    Matrix c(a.cols(), b.cols());
    if (c.empty() || a.rows() == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans,
                (int)a.cols(), (int)b.cols(), (int)a.rows(),
                1.0, a.raw(), (int)a.cols(), b.raw(), (int)b.cols(),
                0.0, c.raw(), (int)c.cols());
    return c;
}

void add_matmul_nt(Matrix& acc, const Matrix& a, const Matrix& b, double alpha) {
    if (a.cols() != b.cols() || acc.rows() != a.rows() || acc.cols() != b.rows())
        throw DimensionError("add_matmul_nt: shape mismatch");
    if (acc.empty() || a.cols() == 0) return;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans,
                (int)a.rows(), (int)b.rows(), (int)a.cols(),
                alpha, a.raw(), (int)a.cols(), b.raw(), (int)b.cols(),
                1.0, acc.raw(), (int)acc.cols());
}

Vector matvec(const Matrix& a, std::span<const double> x) {
    if (a.cols() != x.size()) throw DimensionError("matvec: length mismatch");
    Vector y(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
        y[i] = s;
    }
    return y;
}

Matrix outer(std::span<const double> u, std::span<const double> v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
}

double trace(const Matrix& a) {
    if (a.rows() != a.cols()) throw DimensionError("trace: matrix not square");
    double t = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) t += a(i, i);
    return t;
}

double frob_norm(const Matrix& a) {
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    return std::sqrt(s);
}

double frob_dot(const Matrix& a, const Matrix& b) {
    check_same_shape(a, b, "frob_dot");
    double s = 0.0;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) s += da[i] * db[i];
    return s;
}

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw DimensionError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows() * b.rows(), a.cols() * b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            if (aij == 0.0) continue;
            for (std::size_t p = 0; p < b.rows(); ++p)
                for (std::size_t q = 0; q < b.cols(); ++q)
                    c(i * b.rows() + p, j * b.cols() + q) = aij * b(p, q);
        }
    return c;
}

Vector vec(const Matrix& a) {
    Vector v(a.size());
    std::size_t k = 0;
    for (std::size_t j = 0; j < a.cols(); ++j)
        for (std::size_t i = 0; i < a.rows(); ++i) v[k++] = a(i, j);
    return v;
}

Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) throw DimensionError("unvec: length mismatch");
    Matrix a(rows, cols);
    std::size_t k = 0;
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t i = 0; i < rows; ++i) a(i, j) = v[k++];
    return a;
}

Matrix partial_trace(const Matrix& a, std::size_t q) {
    if (q == 0 || a.rows() % q != 0 || a.cols() % q != 0)
        throw DimensionError("partial_trace: block size does not divide dimensions");
    const std::size_t m = a.rows() / q;
    const std::size_t n = a.cols() / q;
    Matrix out(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double t = 0.0;
            for (std::size_t k = 0; k < q; ++k) t += a(i * q + k, j * q + k);
            out(i, j) = t;
        }
    return out;
}

namespace {

// Lower-triangular Cholesky in place; returns false on a non-positive pivot.
bool cholesky(Matrix& a) {
    const std::size_t n = a.rows();
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) return false;
        const double l = std::sqrt(d);
        a(j, j) = l;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / l;
        }
    }
    return true;
}

} // namespace

Matrix sym_inverse(const Matrix& a, double jitter) {
    if (a.rows() != a.cols()) throw DimensionError("sym_inverse: matrix not square");
    if (jitter < 0.0) throw std::invalid_argument("sym_inverse: negative jitter");
    const std::size_t n = a.rows();
    Matrix l = a;
    for (std::size_t i = 0; i < n; ++i) l(i, i) += jitter;
    if (!cholesky(l))
        throw SingularMatrixError("sym_inverse: Cholesky factorization failed");

    // Solve L L^T X = I column by column.
    Matrix inv(n, n);
    Vector y(n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = (i == c) ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
            y[i] = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * inv(k, c);
            inv(ii, c) = s / l(ii, ii);
        }
    }
    // Symmetrize to kill the asymmetric part of solve rounding.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = v;
            inv(j, i) = v;
        }
    return inv;
}

Vector sym_eigenvalues(Matrix a) {
    if (a.rows() != a.cols()) throw DimensionError("sym_eigenvalues: matrix not square");
    const std::size_t n = a.rows();
    // Cyclic Jacobi; fine for the small factor matrices used here.
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
    }
    Vector ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

double min_sym_eigenvalue(const Matrix& a) {
    return sym_eigenvalues(a).front();
}

Vector CommutationMatrix::apply(std::span<const double> v) const {
    if (v.size() != m * n) throw DimensionError("commutation_apply: length mismatch");
    // vec(A) index j*m+i maps to vec(A^T) index i*n+j.
    Vector out(m * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) out[i * n + j] = v[j * m + i];
    return out;
}

Matrix CommutationMatrix::dense() const {
    Matrix k(m * n, m * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) k(i * n + j, j * m + i) = 1.0;
    return k;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (double& x : m.data()) x = dist(rng);
    return m;
}

Matrix random_spd(std::size_t n, std::mt19937_64& rng) {
    Matrix b = random_matrix(n, n, rng);
    Matrix s = matmul_nt(b, b);
    for (std::size_t i = 0; i < n; ++i) s(i, i) += 0.5;
    return s;
}

} // namespace tkfac
