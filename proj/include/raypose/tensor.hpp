#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "raypose/error.hpp"

namespace raypose::ad {

// Rank-1 or rank-2 dense shape.
struct Shape {
    std::int64_t rows = 0;
    std::int64_t cols = 1;
    int rank = 1;

    static Shape vec(std::int64_t n) { return Shape{n, 1, 1}; }
    static Shape mat(std::int64_t r, std::int64_t c) { return Shape{r, c, 2}; }
    static Shape scalar() { return Shape{1, 1, 1}; }

    std::int64_t numel() const { return rows * cols; }
    bool operator==(const Shape& o) const {
        return rows == o.rows && cols == o.cols && rank == o.rank;
    }
    std::string str() const;
};

class Tape;

// Handle to a node on a tape. Values are computed eagerly; gradients are
// populated by backward().
class Tensor {
  public:
    Tensor() = default;

    const Shape& shape() const;
    const std::vector<double>& value() const;
    const std::vector<double>& grad() const;
    bool requires_grad() const;
    double scalar() const;
    double at(std::int64_t r, std::int64_t c) const;
    bool defined() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }

  private:
    friend class Tape;
    friend struct OpAccess;
    Tensor(Tape* tape, std::int64_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::int64_t id_ = -1;
};

// Reverse-mode tape. Nodes are appended in construction order; backward
// traverses them exactly once in reverse. Single-threaded per tape.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Tensor constant(const Shape& s, std::vector<double> value);
    Tensor constant_scalar(double v);
    Tensor leaf(const Shape& s, std::vector<double> value);

    // Accumulates gradients for every requires_grad node reachable from loss.
    void backward(const Tensor& loss);

    std::size_t size() const;
    void reset();

  private:
    friend class Tensor;
    friend struct OpAccess;
    std::vector<struct Node> nodes_;
};

// ---- Forward ops. Each records a tape node when any input requires grad. ----

// General matrix product with optional operand transposes. Rank-2 only.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// Elementwise; shapes must match exactly, or one operand may be a scalar
// (numel 1), which broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);   // relu'(0) = 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);    // abs'(0) = 0

// Full reductions to a scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor l1_norm(const Tensor& a);
Tensor l2_norm(const Tensor& a);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1);
Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1);
Tensor transpose(const Tensor& a);

// Row-wise helpers for [r,c] against [r,1] / [1,c] operands.
Tensor row_sum(const Tensor& a);                        // [r,c] -> [r,1]
Tensor row_mul(const Tensor& a, const Tensor& s);       // [r,c] * [r,1]
Tensor row_div(const Tensor& a, const Tensor& s);       // [r,c] / [r,1]
Tensor add_rowvec(const Tensor& a, const Tensor& b);    // [r,c] + [1,c]
Tensor repeat_rows(const Tensor& a, std::int64_t n);    // [1,c] -> [n,c]

// [3] or [3,1] twist rotation part -> 3x3 skew-symmetric matrix.
Tensor skew3(const Tensor& w);

// Number of worker threads for the large-matrix kernels. Results are
// bit-identical for any setting (fixed block partitioning).
void set_num_threads(int n);
int num_threads();

}  // namespace raypose::ad
