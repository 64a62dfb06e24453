#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

// Dense row-major matrices, a numerically stable softmax and deterministic
// top-k selection. Everything here is a pure function over immutable inputs
// and safe to call from any number of threads; the optional FLOP ledger is
// thread-local.

namespace twin {

using Index = std::size_t;
using Vector = std::vector<double>;

// Multiply-add accounting for the cost-model experiments. Kernels in this
// file (matmul, dot) bump the active ledger; elementwise tails (scalar
// scaling, additions, exp) and gathers are deliberately not counted as
// multiply-adds. Gathers are tracked as mem_reads by the cache lookup.
struct FlopLedger {
    std::uint64_t mul_adds = 0;
    std::uint64_t mem_reads = 0;
    std::uint64_t miss_mul_adds = 0;  // on-the-fly projection of cache misses
};

// Returns the ledger installed on this thread, or nullptr when accounting
// is off (the default).
FlopLedger* active_ledger();

// Installs `ledger` for the current scope; restores the previous one on
// destruction.
class ScopedFlopLedger {
  public:
    explicit ScopedFlopLedger(FlopLedger& ledger);
    ~ScopedFlopLedger();
    ScopedFlopLedger(const ScopedFlopLedger&) = delete;
    ScopedFlopLedger& operator=(const ScopedFlopLedger&) = delete;

  private:
    FlopLedger* previous_;
};

void count_mul_adds(std::uint64_t n);
void count_mem_reads(std::uint64_t n);

struct Matrix {
    Index rows = 0;
    Index cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(Index r, Index c) : rows(r), cols(c), data(r * c, 0.0) {}
    Matrix(Index r, Index c, std::vector<double> d);

    double& at(Index r, Index c) { return data[r * cols + c]; }
    double at(Index r, Index c) const { return data[r * cols + c]; }

    std::span<double> row(Index r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(Index r) const {
        return {data.data() + r * cols, cols};
    }

    static Matrix identity(Index n);

    // Throws std::invalid_argument if any entry is not finite.
    void check_finite(const char* what) const;
};

struct ScoredIndex {
    Index index = 0;
    double score = 0.0;
};

// Standard product a*b. Throws std::invalid_argument on inner-dimension
// mismatch. Counts a.rows*a.cols*b.cols multiply-adds.
Matrix matmul(const Matrix& a, const Matrix& b);

// Inner product; counts n multiply-adds.
double dot(std::span<const double> a, std::span<const double> b);

// y = M*x for a row-major M; counts rows*cols multiply-adds.
Vector matvec(const Matrix& m, std::span<const double> x);

// Max-subtraction stabilized softmax. Entries positive, sum 1 within 1e-12.
// Throws std::invalid_argument on an empty or non-finite input.
Vector softmax(std::span<const double> v);

// Indices of the min(k, len) largest scores in descending score order,
// ties broken by the smaller index. Throws std::invalid_argument for k == 0.
std::vector<Index> topk_indices(std::span<const double> scores, Index k);

}  // namespace twin
