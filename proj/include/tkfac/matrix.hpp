#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace tkfac {

using Vector = std::vector<double>;

class SingularMatrixError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles. The vec() convention below is
/// column-major (column stacking), so that vec(g a^T) == kron(a, g).
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n);
    static Matrix diagonal(const Vector& d);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* raw() { return data_.data(); }
    const double* raw() const { return data_.data(); }

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double s);

    Matrix transposed() const;
    bool is_finite() const;

    /// Column j as a vector.
    Vector col(std::size_t j) const;
    void set_col(std::size_t j, std::span<const double> v);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

/// C = A * B (cblas dgemm).
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// acc += alpha * A * B^T, shapes must already agree.
void add_matmul_nt(Matrix& acc, const Matrix& a, const Matrix& b, double alpha);

Vector matvec(const Matrix& a, std::span<const double> x);
Matrix outer(std::span<const double> u, std::span<const double> v);

double trace(const Matrix& a);
double frob_norm(const Matrix& a);
/// Frobenius inner product <A, B> = sum_ij a_ij b_ij.
double frob_dot(const Matrix& a, const Matrix& b);
double dot(std::span<const double> u, std::span<const double> v);

/// Kronecker product, block (i,j) of the result equals a(i,j) * b.
Matrix kron(const Matrix& a, const Matrix& b);

/// Column-stacking vectorization (column-major).
Vector vec(const Matrix& a);
Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols);

/// Blockwise trace: maps an (m q) x (n q) matrix to the m x n matrix of
/// traces of its q x q blocks. PTr(kron(A, B)) == tr(B) * A for B q x q.
Matrix partial_trace(const Matrix& a, std::size_t q);

/// Inverse of a symmetric positive definite matrix via Cholesky, with
/// `jitter` added to the diagonal before factorization.
Matrix sym_inverse(const Matrix& a, double jitter);

/// Cholesky-based SPD check / smallest eigenvalue via cyclic Jacobi.
Vector sym_eigenvalues(Matrix a);
double min_sym_eigenvalue(const Matrix& a);

/// The permutation K_{mn} with K_{mn} vec(A) = vec(A^T) for m x n A.
/// Stored implicitly; dense() is for tests only.
struct CommutationMatrix {
    std::size_t m = 0;
    std::size_t n = 0;

    Vector apply(std::span<const double> v) const;
    Matrix dense() const;
};

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0);
Matrix random_spd(std::size_t n, std::mt19937_64& rng);

} // namespace tkfac
