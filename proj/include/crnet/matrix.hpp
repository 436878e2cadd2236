#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace crnet {

// Dense row-major matrix of doubles. All model math runs on this type.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }
    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// Number of worker threads matmul may use. 1 = serial. Row-partitioned, so the
// result is bitwise identical for every thread count.
void set_matmul_threads(int n);
int matmul_threads();

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_transposed_b(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_transposed_a(const Matrix& a, const Matrix& b);  // a^T * b
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
void axpy_inplace(Matrix& a, double s, const Matrix& b);  // a += s*b

double frob_norm(const Matrix& a);
double frob_norm_sq(const Matrix& a);
double frob_inner(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
// max_ij |a-b| / max(|a_ij|,|b_ij|,floor)
double max_rel_entry_diff(const Matrix& a, const Matrix& b, double floor = 1e-8);

Matrix col_slice(const Matrix& a, std::size_t c0, std::size_t c1);  // columns [c0, c1)
void col_write(Matrix& a, std::size_t c0, const Matrix& block);

// Row-wise softmax with max subtraction. When causal is true, entries with
// column > row are masked out before normalization (rows and cols must match
// per-head score shape, i.e. square).
Matrix softmax_rows(const Matrix& a, bool causal = false);

double silu(double x);
double silu_prime(double x);
Matrix silu(const Matrix& a);

// "CRMX" | u32 version=1 | u64 rows | u64 cols | row-major little-endian f64.
void save_matrix(const Matrix& m, const std::string& path);
Matrix load_matrix(const std::string& path);
void write_matrix(const Matrix& m, std::string& out);                      // append
Matrix read_matrix(const std::string& in, std::size_t& off, const std::string& what);

}  // namespace crnet
