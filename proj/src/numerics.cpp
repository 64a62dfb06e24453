#include "twin/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace twin {

namespace {
thread_local FlopLedger* tls_ledger = nullptr;
}  // namespace

FlopLedger* active_ledger() { return tls_ledger; }

ScopedFlopLedger::ScopedFlopLedger(FlopLedger& ledger) : previous_(tls_ledger) {
    tls_ledger = &ledger;
}

ScopedFlopLedger::~ScopedFlopLedger() { tls_ledger = previous_; }

void count_mul_adds(std::uint64_t n) {
    if (tls_ledger != nullptr) tls_ledger->mul_adds += n;
}

void count_mem_reads(std::uint64_t n) {
    if (tls_ledger != nullptr) tls_ledger->mem_reads += n;
}

Matrix::Matrix(Index r, Index c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols) {
        throw std::invalid_argument("Matrix: data length " +
                                    std::to_string(data.size()) +
                                    " != rows*cols");
    }
}

Matrix Matrix::identity(Index n) {
    Matrix m(n, n);
    for (Index i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

void Matrix::check_finite(const char* what) const {
    for (double x : data) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument(std::string(what) +
                                        ": non-finite entry");
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument(
            "matmul: inner dimensions differ (" + std::to_string(a.cols) +
            " vs " + std::to_string(b.rows) + ")");
    }
    Matrix out(a.rows, b.cols);
    // i-k-j order keeps both inner streams contiguous.
    for (Index i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double* orow = out.data.data() + i * out.cols;
        for (Index k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.data.data() + k * b.cols;
            for (Index j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    count_mul_adds(static_cast<std::uint64_t>(a.rows) * a.cols * b.cols);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("dot: length mismatch");
    }
    double acc = 0.0;
    for (Index i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    count_mul_adds(a.size());
    return acc;
}

Vector matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols != x.size()) {
        throw std::invalid_argument("matvec: dimension mismatch");
    }
    Vector out(m.rows, 0.0);
    for (Index i = 0; i < m.rows; ++i) {
        const double* row = m.data.data() + i * m.cols;
        double acc = 0.0;
        for (Index j = 0; j < m.cols; ++j) acc += row[j] * x[j];
        out[i] = acc;
    }
    count_mul_adds(static_cast<std::uint64_t>(m.rows) * m.cols);
    return out;
}

Vector softmax(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    double mx = v[0];
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument("softmax: non-finite input");
        }
        mx = std::max(mx, x);
    }
    Vector out(v.size());
    double sum = 0.0;
    for (Index i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

std::vector<Index> topk_indices(std::span<const double> scores, Index k) {
    if (k == 0) throw std::invalid_argument("topk_indices: k must be >= 1");
    std::vector<Index> idx(scores.size());
    std::iota(idx.begin(), idx.end(), Index{0});
    const Index take = std::min<Index>(k, scores.size());
    auto better = [&](Index a, Index b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + take, idx.end(), better);
    idx.resize(take);
    return idx;
}

}  // namespace twin
