#include "crnet/matrix.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace crnet {

namespace {

std::atomic<int> g_threads{1};

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                std::to_string(a.rows) + "x" + std::to_string(a.cols) + " and " +
                                std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

// One row strip of c = a*b. Kernel shared by the serial and threaded paths so
// the result does not depend on the thread count.
void matmul_rows(const Matrix& a, const Matrix& b, Matrix& c, std::size_t r0, std::size_t r1) {
    const std::size_t n = b.cols, k = a.cols;
    for (std::size_t i = r0; i < r1; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ar[p];
            if (av == 0.0) continue;
            const double* br = b.row(p);
            for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace

void set_matmul_threads(int n) { g_threads.store(n < 1 ? 1 : n); }
int matmul_threads() { return g_threads.load(); }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) shape_error("matmul", a, b);
    Matrix c(a.rows, b.cols);
    const int nt = matmul_threads();
    if (nt > 1 && a.rows >= 2 * static_cast<std::size_t>(nt) && a.size() * b.cols >= (1u << 18)) {
        std::vector<std::thread> pool;
        const std::size_t chunk = (a.rows + nt - 1) / nt;
        for (int t = 0; t < nt; ++t) {
            const std::size_t r0 = t * chunk;
            const std::size_t r1 = std::min(a.rows, r0 + chunk);
            if (r0 >= r1) break;
            pool.emplace_back(matmul_rows, std::cref(a), std::cref(b), std::ref(c), r0, r1);
        }
        for (auto& th : pool) th.join();
    } else {
        matmul_rows(a, b, c, 0, a.rows);
    }
    return c;
}

Matrix matmul_transposed_b(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) shape_error("matmul_transposed_b", a, b);
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ar = a.row(i);
        double* cr = c.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (std::size_t p = 0; p < a.cols; ++p) s += ar[p] * br[p];
            cr[j] = s;
        }
    }
    return c;
}

Matrix matmul_transposed_a(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) shape_error("matmul_transposed_a", a, b);
    Matrix c(a.cols, b.cols);
    for (std::size_t p = 0; p < a.rows; ++p) {
        const double* ar = a.row(p);
        const double* br = b.row(p);
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* cr = c.row(i);
            for (std::size_t j = 0; j < b.cols; ++j) cr[j] += av * br[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("add", a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += b.data[i];
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("sub", a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

Matrix scale(const Matrix& a, double s) {
    Matrix c = a;
    for (double& v : c.data) v *= s;
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("hadamard", a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("add_inplace", a, b);
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

void axpy_inplace(Matrix& a, double s, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("axpy_inplace", a, b);
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += s * b.data[i];
}

double frob_norm_sq(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return s;
}

double frob_norm(const Matrix& a) { return std::sqrt(frob_norm_sq(a)); }

double frob_inner(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("frob_inner", a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

double max_rel_entry_diff(const Matrix& a, const Matrix& b, double floor) {
    if (!a.same_shape(b)) shape_error("max_rel_entry_diff", a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data[i], y = b.data[i];
        const double den = std::max({std::fabs(x), std::fabs(y), floor});
        worst = std::max(worst, std::fabs(x - y) / den);
    }
    return worst;
}

Matrix col_slice(const Matrix& a, std::size_t c0, std::size_t c1) {
    if (c0 > c1 || c1 > a.cols)
        throw std::invalid_argument("col_slice: bad range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") for " + std::to_string(a.cols) +
                                    " columns");
    Matrix out(a.rows, c1 - c0);
    for (std::size_t i = 0; i < a.rows; ++i)
        std::memcpy(out.row(i), a.row(i) + c0, (c1 - c0) * sizeof(double));
    return out;
}

void col_write(Matrix& a, std::size_t c0, const Matrix& block) {
    if (c0 + block.cols > a.cols || block.rows != a.rows)
        throw std::invalid_argument("col_write: block does not fit");
    for (std::size_t i = 0; i < a.rows; ++i)
        std::memcpy(a.row(i) + c0, block.row(i), block.cols * sizeof(double));
}

Matrix softmax_rows(const Matrix& a, bool causal) {
    if (causal && a.rows != a.cols)
        throw std::invalid_argument("softmax_rows: causal mask needs a square matrix, got " +
                                    std::to_string(a.rows) + "x" + std::to_string(a.cols));
    Matrix p(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const std::size_t lim = causal ? i + 1 : a.cols;
        const double* ar = a.row(i);
        double* pr = p.row(i);
        double mx = ar[0];
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, ar[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
            pr[j] = std::exp(ar[j] - mx);
            z += pr[j];
        }
        for (std::size_t j = 0; j < lim; ++j) pr[j] /= z;
        // masked tail stays exactly zero
    }
    return p;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_prime(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

Matrix silu(const Matrix& a) {
    Matrix c = a;
    for (double& v : c.data) v = silu(v);
    return c;
}

namespace {

constexpr char kMagic[4] = {'C', 'R', 'M', 'X'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& off, const std::string& what) {
    if (off + sizeof(T) > in.size())
        throw std::runtime_error("matrix read: truncated at offset " + std::to_string(off) +
                                 " while reading " + what);
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void write_matrix(const Matrix& m, std::string& out) {
    out.append(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, m.rows);
    put<std::uint64_t>(out, m.cols);
    for (double v : m.data) put<double>(out, v);
}

Matrix read_matrix(const std::string& in, std::size_t& off, const std::string& what) {
    if (off + 4 > in.size())
        throw std::runtime_error("matrix read: truncated at offset " + std::to_string(off) +
                                 " while reading magic of " + what);
    if (std::memcmp(in.data() + off, kMagic, 4) != 0)
        throw std::runtime_error("matrix read: bad magic at offset " + std::to_string(off) +
                                 " for " + what);
    off += 4;
    const auto ver = get<std::uint32_t>(in, off, what + " version");
    if (ver != kVersion)
        throw std::runtime_error("matrix read: unsupported version " + std::to_string(ver) +
                                 " for " + what);
    const auto rows = get<std::uint64_t>(in, off, what + " rows");
    const auto cols = get<std::uint64_t>(in, off, what + " cols");
    Matrix m(rows, cols);
    if (off + 8 * m.size() > in.size())
        throw std::runtime_error("matrix read: truncated at offset " + std::to_string(off) +
                                 " while reading payload of " + what);
    std::memcpy(m.data.data(), in.data() + off, 8 * m.size());
    off += 8 * m.size();
    return m;
}

void save_matrix(const Matrix& m, const std::string& path) {
    std::string buf;
    buf.reserve(24 + 8 * m.size());
    write_matrix(m, buf);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

Matrix load_matrix(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    Matrix m = read_matrix(buf, off, path);
    if (off != buf.size())
        throw std::runtime_error("matrix read: " + std::to_string(buf.size() - off) +
                                 " trailing bytes in " + path);
    return m;
}

}  // namespace crnet
