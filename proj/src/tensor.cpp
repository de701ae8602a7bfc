#include "raypose/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <mutex>
#include <thread>

namespace raypose::ad {

std::string Shape::str() const {
    if (rank == 1) return "[" + std::to_string(rows) + "]";
    return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
}

namespace {

enum class Op : std::uint8_t {
    kConstant,
    kLeaf,
    kMatmul,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kAddScalar,
    kMulScalar,
    kRelu,
    kExp,
    kLog,
    kSqrt,
    kSin,
    kCos,
    kSigmoid,
    kAbs,
    kSum,
    kMean,
    kL1Norm,
    kL2Norm,
    kConcatRows,
    kConcatCols,
    kSliceRows,
    kSliceCols,
    kTranspose,
    kRowSum,
    kRowMul,
    kRowDiv,
    kAddRowvec,
    kRepeatRows,
    kSkew3,
};

// ---------------------------------------------------------------------------
// Deterministic fork-join pool. Work is split into fixed-size blocks so the
// computed values do not depend on the number of worker threads.

class WorkerPool {
  public:
    static WorkerPool& instance() {
        static WorkerPool pool;
        return pool;
    }

    void set_threads(int n) {
        std::lock_guard<std::mutex> guard(api_mutex_);
        n = std::max(1, n);
        if (n == threads_requested_) return;
        shutdown_workers();
        threads_requested_ = n;
        for (int i = 0; i < n - 1; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    int threads() const { return threads_requested_; }

    // fn(block) for block in [0, n_blocks); blocks may run on any worker.
    void run_blocks(std::int64_t n_blocks, const std::function<void(std::int64_t)>& fn) {
        std::lock_guard<std::mutex> guard(api_mutex_);
        if (workers_.empty() || n_blocks <= 1) {
            for (std::int64_t b = 0; b < n_blocks; ++b) fn(b);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mutex_);
            task_.store(&fn, std::memory_order_release);
            next_block_.store(0, std::memory_order_relaxed);
            total_blocks_.store(n_blocks, std::memory_order_release);
            remaining_.store(n_blocks, std::memory_order_release);
            ++generation_;
        }
        cv_.notify_all();
        drain();
        {
            std::unique_lock<std::mutex> lk(mutex_);
            done_cv_.wait(lk, [this] { return remaining_.load(std::memory_order_acquire) == 0; });
            task_.store(nullptr, std::memory_order_release);
        }
    }

  private:
    WorkerPool() { threads_requested_ = 1; }
    ~WorkerPool() { shutdown_workers(); }

    void shutdown_workers() {
        {
            std::lock_guard<std::mutex> lk(mutex_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
        workers_.clear();
        stop_ = false;
    }

    void drain() {
        const auto* fn = task_.load(std::memory_order_acquire);
        if (fn == nullptr) return;
        const std::int64_t total = total_blocks_.load(std::memory_order_acquire);
        while (true) {
            const std::int64_t b = next_block_.fetch_add(1, std::memory_order_relaxed);
            if (b >= total) break;
            (*fn)(b);
            if (remaining_.fetch_sub(1, std::memory_order_acq_rel) == 1) done_cv_.notify_all();
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            {
                std::unique_lock<std::mutex> lk(mutex_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            drain();
        }
    }

    std::mutex api_mutex_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::thread> workers_;
    std::atomic<const std::function<void(std::int64_t)>*> task_{nullptr};
    std::atomic<std::int64_t> next_block_{0};
    std::atomic<std::int64_t> total_blocks_{0};
    std::atomic<std::int64_t> remaining_{0};
    std::uint64_t generation_ = 0;
    bool stop_ = false;
    int threads_requested_ = 1;
};

constexpr std::int64_t kRowBlock = 256;        // rows per block, NN kernel
constexpr std::int64_t kReduceBlock = 1024;    // rows per partial, TN kernel
constexpr std::int64_t kParallelFlops = 1 << 21;

// C[M,N] += or = A[M,K] * B[K,N], all row-major.
void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
    auto block_fn = [&](std::int64_t blk) {
        const std::int64_t r0 = blk * kRowBlock;
        const std::int64_t r1 = std::min(m, r0 + kRowBlock);
        for (std::int64_t i = r0; i < r1; ++i) {
            double* ci = c + i * n;
            if (!accumulate) std::memset(ci, 0, sizeof(double) * n);
            const double* ai = a + i * k;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = ai[l];
                const double* bl = b + l * n;
                for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
            }
        }
    };
    const std::int64_t blocks = (m + kRowBlock - 1) / kRowBlock;
    if (m * k * n >= kParallelFlops && blocks > 1)
        WorkerPool::instance().run_blocks(blocks, block_fn);
    else
        for (std::int64_t b = 0; b < blocks; ++b) block_fn(b);
}

// C[K,N] = A[M,K]^T * B[M,N]. Reduction over M runs in fixed kReduceBlock
// chunks summed in block order, so results are thread-count independent.
void gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
    const std::int64_t blocks = (m + kReduceBlock - 1) / kReduceBlock;
    std::vector<std::vector<double>> partials(static_cast<std::size_t>(blocks));

    auto block_fn = [&](std::int64_t blk) {
        auto& part = partials[static_cast<std::size_t>(blk)];
        part.assign(static_cast<std::size_t>(k * n), 0.0);
        const std::int64_t r0 = blk * kReduceBlock;
        const std::int64_t r1 = std::min(m, r0 + kReduceBlock);
        for (std::int64_t i = r0; i < r1; ++i) {
            const double* ai = a + i * k;
            const double* bi = b + i * n;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = ai[l];
                double* pl = part.data() + l * n;
                for (std::int64_t j = 0; j < n; ++j) pl[j] += av * bi[j];
            }
        }
    };
    if (m * k * n >= kParallelFlops && blocks > 1)
        WorkerPool::instance().run_blocks(blocks, block_fn);
    else
        for (std::int64_t b = 0; b < blocks; ++b) block_fn(b);

    if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(k * n));
    for (const auto& part : partials)
        for (std::int64_t i = 0; i < k * n; ++i) c[i] += part[static_cast<std::size_t>(i)];
}

std::vector<double> transpose_copy(const double* a, std::int64_t r, std::int64_t c) {
    std::vector<double> out(static_cast<std::size_t>(r * c));
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(j * r + i)] = a[i * c + j];
    return out;
}

// General row-major matmul with transpose flags; dispatches to the two tuned
// kernels, materializing transposed copies where that is the cheaper path.
void gemm(const double* a, std::int64_t ar, std::int64_t ac, bool ta, const double* b,
          std::int64_t br, std::int64_t bc, bool tb, double* c, bool accumulate) {
    const std::int64_t m = ta ? ac : ar;
    const std::int64_t k = ta ? ar : ac;
    const std::int64_t n = tb ? br : bc;

    if (!ta && !tb) {
        gemm_nn(a, b, c, m, k, n, accumulate);
    } else if (ta && !tb) {
        gemm_tn(a, b, c, m, k, n, accumulate);
    } else if (!ta && tb) {
        const auto bt = transpose_copy(b, br, bc);
        gemm_nn(a, bt.data(), c, m, k, n, accumulate);
    } else {
        const auto at = transpose_copy(a, ar, ac);
        const auto bt = transpose_copy(b, br, bc);
        gemm_nn(at.data(), bt.data(), c, m, k, n, accumulate);
    }
}

}  // namespace

// ---------------------------------------------------------------------------

struct Node {
    Op op = Op::kConstant;
    std::int64_t a = -1;
    std::int64_t b = -1;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    double c0 = 0.0;              // scalar op parameter
    std::int64_t i0 = 0, i1 = 0;  // slice bounds / transpose flags
};

struct OpAccess {
    static std::vector<Node>& nodes(Tape& t) { return t.nodes_; }
    static const std::vector<Node>& nodes(const Tape& t) { return t.nodes_; }

    static Tensor make(Tape& t, Node&& node) {
        t.nodes_.push_back(std::move(node));
        return Tensor(&t, static_cast<std::int64_t>(t.nodes_.size()) - 1);
    }

    static std::int64_t t_id(const Tensor& t) { return t.id_; }
};

// Tensor accessors go through the friend path.
namespace {
std::int64_t id_of(const Tensor& t) { return OpAccess::t_id(t); }
const Node& node_of(const Tensor& t) { return OpAccess::nodes(*t.tape())[id_of(t)]; }
}  // namespace

const Shape& Tensor::shape() const { return node_of(*this).shape; }
const std::vector<double>& Tensor::value() const { return node_of(*this).value; }
const std::vector<double>& Tensor::grad() const { return node_of(*this).grad; }
bool Tensor::requires_grad() const { return node_of(*this).requires_grad; }

double Tensor::scalar() const {
    const Node& n = node_of(*this);
    if (n.shape.numel() != 1) throw ShapeMismatch("scalar() on tensor of shape " + n.shape.str());
    return n.value[0];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
    const Node& n = node_of(*this);
    return n.value[static_cast<std::size_t>(r * n.shape.cols + c)];
}

Tape::Tape() = default;
Tape::~Tape() = default;

Tensor Tape::constant(const Shape& s, std::vector<double> value) {
    if (static_cast<std::int64_t>(value.size()) != s.numel())
        throw ShapeMismatch("constant: data length does not match shape " + s.str());
    Node n;
    n.op = Op::kConstant;
    n.shape = s;
    n.value = std::move(value);
    return OpAccess::make(*this, std::move(n));
}

Tensor Tape::constant_scalar(double v) { return constant(Shape::scalar(), {v}); }

Tensor Tape::leaf(const Shape& s, std::vector<double> value) {
    if (static_cast<std::int64_t>(value.size()) != s.numel())
        throw ShapeMismatch("leaf: data length does not match shape " + s.str());
    Node n;
    n.op = Op::kLeaf;
    n.shape = s;
    n.value = std::move(value);
    n.requires_grad = true;
    return OpAccess::make(*this, std::move(n));
}

std::size_t Tape::size() const { return nodes_.size(); }
void Tape::reset() { nodes_.clear(); }

namespace {

Tape& same_tape(const Tensor& a, const Tensor& b) {
    if (a.tape() != b.tape()) throw ShapeMismatch("operands live on different tapes");
    return *a.tape();
}

Node unary_node(Op op, const Tensor& a, const Shape& out_shape) {
    Node n;
    n.op = op;
    n.a = id_of(a);
    n.shape = out_shape;
    n.requires_grad = a.requires_grad();
    return n;
}

Node binary_node(Op op, const Tensor& a, const Tensor& b, const Shape& out_shape) {
    Node n;
    n.op = op;
    n.a = id_of(a);
    n.b = id_of(b);
    n.shape = out_shape;
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return n;
}

// Elementwise with scalar broadcast: result shape is the non-scalar side.
Shape broadcast_shape(const char* what, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) return sa;
    if (sa.numel() == 1) return sb;
    if (sb.numel() == 1) return sa;
    throw ShapeMismatch(std::string(what) + ": " + sa.str() + " vs " + sb.str());
}

template <typename F>
Tensor pointwise2(Op op, const char* what, const Tensor& a, const Tensor& b, F f) {
    Tape& tape = same_tape(a, b);
    const Shape out_shape = broadcast_shape(what, a, b);
    Node n = binary_node(op, a, b, out_shape);
    const auto& va = a.value();
    const auto& vb = b.value();
    const std::size_t count = static_cast<std::size_t>(out_shape.numel());
    n.value.resize(count);
    const bool a_scalar = va.size() == 1 && count != 1;
    const bool b_scalar = vb.size() == 1 && count != 1;
    for (std::size_t i = 0; i < count; ++i)
        n.value[i] = f(va[a_scalar ? 0 : i], vb[b_scalar ? 0 : i]);
    return OpAccess::make(tape, std::move(n));
}

template <typename F>
Tensor pointwise1(Op op, const Tensor& a, F f) {
    Node n = unary_node(op, a, a.shape());
    const auto& va = a.value();
    n.value.resize(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) n.value[i] = f(va[i]);
    return OpAccess::make(*a.tape(), std::move(n));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    Tape& tape = same_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank != 2 || sb.rank != 2)
        throw ShapeMismatch("matmul requires rank-2 operands, got " + sa.str() + " and " + sb.str());
    const std::int64_t m = trans_a ? sa.cols : sa.rows;
    const std::int64_t k = trans_a ? sa.rows : sa.cols;
    const std::int64_t kb = trans_b ? sb.cols : sb.rows;
    const std::int64_t n = trans_b ? sb.rows : sb.cols;
    if (k != kb)
        throw ShapeMismatch("matmul inner dimensions: " + sa.str() + (trans_a ? "^T" : "") + " * " +
                            sb.str() + (trans_b ? "^T" : ""));

    Node node = binary_node(Op::kMatmul, a, b, Shape::mat(m, n));
    node.i0 = trans_a ? 1 : 0;
    node.i1 = trans_b ? 1 : 0;
    node.value.resize(static_cast<std::size_t>(m * n));
    gemm(a.value().data(), sa.rows, sa.cols, trans_a, b.value().data(), sb.rows, sb.cols, trans_b,
         node.value.data(), false);
    return OpAccess::make(tape, std::move(node));
}

Tensor add(const Tensor& a, const Tensor& b) {
    return pointwise2(Op::kAdd, "add", a, b, [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return pointwise2(Op::kSub, "sub", a, b, [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return pointwise2(Op::kMul, "mul", a, b, [](double x, double y) { return x * y; });
}
Tensor div(const Tensor& a, const Tensor& b) {
    return pointwise2(Op::kDiv, "div", a, b, [](double x, double y) { return x / y; });
}

Tensor add_scalar(const Tensor& a, double c) {
    Node n = unary_node(Op::kAddScalar, a, a.shape());
    n.c0 = c;
    n.value.resize(a.value().size());
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = a.value()[i] + c;
    return OpAccess::make(*a.tape(), std::move(n));
}

Tensor mul_scalar(const Tensor& a, double c) {
    Node n = unary_node(Op::kMulScalar, a, a.shape());
    n.c0 = c;
    n.value.resize(a.value().size());
    for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = a.value()[i] * c;
    return OpAccess::make(*a.tape(), std::move(n));
}

Tensor relu(const Tensor& a) {
    return pointwise1(Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}
Tensor exp(const Tensor& a) {
    return pointwise1(Op::kExp, a, [](double x) { return std::exp(x); });
}
Tensor log(const Tensor& a) {
    return pointwise1(Op::kLog, a, [](double x) { return std::log(x); });
}
Tensor sqrt(const Tensor& a) {
    return pointwise1(Op::kSqrt, a, [](double x) { return std::sqrt(x); });
}
Tensor sin(const Tensor& a) {
    return pointwise1(Op::kSin, a, [](double x) { return std::sin(x); });
}
Tensor cos(const Tensor& a) {
    return pointwise1(Op::kCos, a, [](double x) { return std::cos(x); });
}
Tensor sigmoid(const Tensor& a) {
    return pointwise1(Op::kSigmoid, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}
Tensor abs(const Tensor& a) {
    return pointwise1(Op::kAbs, a, [](double x) { return std::abs(x); });
}

namespace {
template <typename F>
Tensor reduce_op(Op op, const Tensor& a, F f) {
    Node n = unary_node(op, a, Shape::scalar());
    n.value = {f(a.value())};
    return OpAccess::make(*a.tape(), std::move(n));
}
}  // namespace

Tensor sum(const Tensor& a) {
    return reduce_op(Op::kSum, a, [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    });
}
Tensor mean(const Tensor& a) {
    return reduce_op(Op::kMean, a, [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    });
}
Tensor l1_norm(const Tensor& a) {
    return reduce_op(Op::kL1Norm, a, [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += std::abs(x);
        return s;
    });
}
Tensor l2_norm(const Tensor& a) {
    return reduce_op(Op::kL2Norm, a, [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    Tape& tape = same_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.cols != sb.cols || sa.rank != 2 || sb.rank != 2)
        throw ShapeMismatch("concat_rows: " + sa.str() + " vs " + sb.str());
    Node n = binary_node(Op::kConcatRows, a, b, Shape::mat(sa.rows + sb.rows, sa.cols));
    n.value.reserve(static_cast<std::size_t>(n.shape.numel()));
    n.value.insert(n.value.end(), a.value().begin(), a.value().end());
    n.value.insert(n.value.end(), b.value().begin(), b.value().end());
    return OpAccess::make(tape, std::move(n));
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    Tape& tape = same_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rows != sb.rows || sa.rank != 2 || sb.rank != 2)
        throw ShapeMismatch("concat_cols: " + sa.str() + " vs " + sb.str());
    Node n = binary_node(Op::kConcatCols, a, b, Shape::mat(sa.rows, sa.cols + sb.cols));
    n.value.resize(static_cast<std::size_t>(n.shape.numel()));
    for (std::int64_t r = 0; r < sa.rows; ++r) {
        std::memcpy(n.value.data() + r * n.shape.cols, a.value().data() + r * sa.cols,
                    sizeof(double) * static_cast<std::size_t>(sa.cols));
        std::memcpy(n.value.data() + r * n.shape.cols + sa.cols, b.value().data() + r * sb.cols,
                    sizeof(double) * static_cast<std::size_t>(sb.cols));
    }
    return OpAccess::make(tape, std::move(n));
}

Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1) {
    const Shape& s = a.shape();
    if (r0 < 0 || r1 > s.rows || r0 >= r1)
        throw ShapeMismatch("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                            ") of " + s.str());
    Node n = unary_node(Op::kSliceRows, a, Shape::mat(r1 - r0, s.cols));
    n.i0 = r0;
    n.i1 = r1;
    n.value.assign(a.value().begin() + r0 * s.cols, a.value().begin() + r1 * s.cols);
    return OpAccess::make(*a.tape(), std::move(n));
}

Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
    const Shape& s = a.shape();
    if (c0 < 0 || c1 > s.cols || c0 >= c1)
        throw ShapeMismatch("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                            ") of " + s.str());
    Node n = unary_node(Op::kSliceCols, a, Shape::mat(s.rows, c1 - c0));
    n.i0 = c0;
    n.i1 = c1;
    n.value.resize(static_cast<std::size_t>(n.shape.numel()));
    for (std::int64_t r = 0; r < s.rows; ++r)
        for (std::int64_t c = c0; c < c1; ++c)
            n.value[static_cast<std::size_t>(r * (c1 - c0) + (c - c0))] = a.value()[r * s.cols + c];
    return OpAccess::make(*a.tape(), std::move(n));
}

Tensor transpose(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.rank != 2) throw ShapeMismatch("transpose requires rank-2, got " + s.str());
    Node n = unary_node(Op::kTranspose, a, Shape::mat(s.cols, s.rows));
    n.value = transpose_copy(a.value().data(), s.rows, s.cols);
    return OpAccess::make(*a.tape(), std::move(n));
}

Tensor row_sum(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.rank != 2) throw ShapeMismatch("row_sum requires rank-2, got " + s.str());
    Node n = unary_node(Op::kRowSum, a, Shape::mat(s.rows, 1));
    n.value.resize(static_cast<std::size_t>(s.rows));
    for (std::int64_t r = 0; r < s.rows; ++r) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < s.cols; ++c) acc += a.value()[r * s.cols + c];
        n.value[static_cast<std::size_t>(r)] = acc;
    }
    return OpAccess::make(*a.tape(), std::move(n));
}

namespace {
Tensor rowwise(Op op, const char* what, const Tensor& a, const Tensor& s, bool divide) {
    Tape& tape = same_tape(a, s);
    const Shape& sa = a.shape();
    const Shape& ss = s.shape();
    if (sa.rank != 2 || ss.rows != sa.rows || ss.cols != 1)
        throw ShapeMismatch(std::string(what) + ": " + sa.str() + " vs " + ss.str());
    Node n = binary_node(op, a, s, sa);
    n.value.resize(a.value().size());
    for (std::int64_t r = 0; r < sa.rows; ++r) {
        const double f = divide ? 1.0 / s.value()[static_cast<std::size_t>(r)]
                                : s.value()[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < sa.cols; ++c)
            n.value[static_cast<std::size_t>(r * sa.cols + c)] = a.value()[r * sa.cols + c] * f;
    }
    return OpAccess::make(tape, std::move(n));
}
}  // namespace

Tensor row_mul(const Tensor& a, const Tensor& s) { return rowwise(Op::kRowMul, "row_mul", a, s, false); }
Tensor row_div(const Tensor& a, const Tensor& s) { return rowwise(Op::kRowDiv, "row_div", a, s, true); }

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    Tape& tape = same_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.rank != 2 || sb.rows != 1 || sb.cols != sa.cols)
        throw ShapeMismatch("add_rowvec: " + sa.str() + " vs " + sb.str());
    Node n = binary_node(Op::kAddRowvec, a, b, sa);
    n.value.resize(a.value().size());
    for (std::int64_t r = 0; r < sa.rows; ++r)
        for (std::int64_t c = 0; c < sa.cols; ++c)
            n.value[static_cast<std::size_t>(r * sa.cols + c)] =
                a.value()[r * sa.cols + c] + b.value()[static_cast<std::size_t>(c)];
    return OpAccess::make(tape, std::move(n));
}

Tensor repeat_rows(const Tensor& a, std::int64_t count) {
    const Shape& s = a.shape();
    if (s.rank != 2 || s.rows != 1 || count < 1)
        throw ShapeMismatch("repeat_rows requires a [1,c] operand, got " + s.str());
    Node n = unary_node(Op::kRepeatRows, a, Shape::mat(count, s.cols));
    n.value.resize(static_cast<std::size_t>(count * s.cols));
    for (std::int64_t r = 0; r < count; ++r)
        std::memcpy(n.value.data() + r * s.cols, a.value().data(),
                    sizeof(double) * static_cast<std::size_t>(s.cols));
    return OpAccess::make(*a.tape(), std::move(n));
}

Tensor skew3(const Tensor& w) {
    const Shape& s = w.shape();
    if (s.numel() != 3) throw ShapeMismatch("skew3 requires 3 elements, got " + s.str());
    Node n = unary_node(Op::kSkew3, w, Shape::mat(3, 3));
    const double x = w.value()[0], y = w.value()[1], z = w.value()[2];
    n.value = {0, -z, y, z, 0, -x, -y, x, 0};
    return OpAccess::make(*w.tape(), std::move(n));
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void ensure_grad(Node& n) {
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.shape.numel()), 0.0);
}

// addend may be scalar-broadcast: accumulate respecting target size.
void accum_elementwise(Node& target, const std::vector<double>& g,
                       const std::function<double(std::size_t)>& f) {
    ensure_grad(target);
    if (target.grad.size() == g.size()) {
        for (std::size_t i = 0; i < g.size(); ++i) target.grad[i] += f(i);
    } else {
        // target is the broadcast scalar side
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += f(i);
        target.grad[0] += acc;
    }
}

}  // namespace

void Tape::backward(const Tensor& loss) {
    if (loss.tape() != this) throw NotScalarLoss("loss lives on a different tape");
    const std::int64_t loss_id = OpAccess::t_id(loss);
    Node& loss_node = nodes_[static_cast<std::size_t>(loss_id)];
    if (loss_node.shape.numel() != 1)
        throw NotScalarLoss("loss has shape " + loss_node.shape.str());
    if (!loss_node.requires_grad) return;

    for (auto& n : nodes_) n.grad.clear();
    ensure_grad(loss_node);
    loss_node.grad[0] = 1.0;

    for (std::int64_t idx = loss_id; idx >= 0; --idx) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        if (!n.requires_grad || n.grad.empty()) continue;
        const std::vector<double>& g = n.grad;
        Node* na = n.a >= 0 ? &nodes_[static_cast<std::size_t>(n.a)] : nullptr;
        Node* nb = n.b >= 0 ? &nodes_[static_cast<std::size_t>(n.b)] : nullptr;
        const bool need_a = na != nullptr && na->requires_grad;
        const bool need_b = nb != nullptr && nb->requires_grad;
        if (!need_a && !need_b) continue;

        switch (n.op) {
            case Op::kConstant:
            case Op::kLeaf:
                break;
            case Op::kMatmul: {
                const bool ta = n.i0 != 0, tb = n.i1 != 0;
                // c = opA(a) * opB(b); m x n with inner k
                if (need_a) {
                    ensure_grad(*na);
                    if (!ta)
                        gemm(g.data(), n.shape.rows, n.shape.cols, false, nb->value.data(),
                             nb->shape.rows, nb->shape.cols, !tb, na->grad.data(), true);
                    else
                        gemm(nb->value.data(), nb->shape.rows, nb->shape.cols, tb, g.data(),
                             n.shape.rows, n.shape.cols, true, na->grad.data(), true);
                }
                if (need_b) {
                    ensure_grad(*nb);
                    if (!tb)
                        gemm(na->value.data(), na->shape.rows, na->shape.cols, !ta, g.data(),
                             n.shape.rows, n.shape.cols, false, nb->grad.data(), true);
                    else
                        gemm(g.data(), n.shape.rows, n.shape.cols, true, na->value.data(),
                             na->shape.rows, na->shape.cols, ta, nb->grad.data(), true);
                }
                break;
            }
            case Op::kAdd:
                if (need_a) accum_elementwise(*na, g, [&](std::size_t i) { return g[i]; });
                if (need_b) accum_elementwise(*nb, g, [&](std::size_t i) { return g[i]; });
                break;
            case Op::kSub:
                if (need_a) accum_elementwise(*na, g, [&](std::size_t i) { return g[i]; });
                if (need_b) accum_elementwise(*nb, g, [&](std::size_t i) { return -g[i]; });
                break;
            case Op::kMul: {
                const bool sa = na->value.size() == 1 && g.size() != 1;
                const bool sb = nb->value.size() == 1 && g.size() != 1;
                if (need_a)
                    accum_elementwise(*na, g,
                                      [&](std::size_t i) { return g[i] * nb->value[sb ? 0 : i]; });
                if (need_b)
                    accum_elementwise(*nb, g,
                                      [&](std::size_t i) { return g[i] * na->value[sa ? 0 : i]; });
                break;
            }
            case Op::kDiv: {
                const bool sa = na->value.size() == 1 && g.size() != 1;
                const bool sb = nb->value.size() == 1 && g.size() != 1;
                if (need_a)
                    accum_elementwise(*na, g,
                                      [&](std::size_t i) { return g[i] / nb->value[sb ? 0 : i]; });
                if (need_b)
                    accum_elementwise(*nb, g, [&](std::size_t i) {
                        const double bv = nb->value[sb ? 0 : i];
                        return -g[i] * na->value[sa ? 0 : i] / (bv * bv);
                    });
                break;
            }
            case Op::kAddScalar:
                accum_elementwise(*na, g, [&](std::size_t i) { return g[i]; });
                break;
            case Op::kMulScalar:
                accum_elementwise(*na, g, [&](std::size_t i) { return g[i] * n.c0; });
                break;
            case Op::kRelu:
                accum_elementwise(*na, g, [&](std::size_t i) {
                    return na->value[i] > 0.0 ? g[i] : 0.0;
                });
                break;
            case Op::kExp:
                accum_elementwise(*na, g, [&](std::size_t i) { return g[i] * n.value[i]; });
                break;
            case Op::kLog:
                accum_elementwise(*na, g, [&](std::size_t i) { return g[i] / na->value[i]; });
                break;
            case Op::kSqrt:
                accum_elementwise(*na, g, [&](std::size_t i) { return g[i] * 0.5 / n.value[i]; });
                break;
            case Op::kSin:
                accum_elementwise(*na, g,
                                  [&](std::size_t i) { return g[i] * std::cos(na->value[i]); });
                break;
            case Op::kCos:
                accum_elementwise(*na, g,
                                  [&](std::size_t i) { return -g[i] * std::sin(na->value[i]); });
                break;
            case Op::kSigmoid:
                accum_elementwise(*na, g, [&](std::size_t i) {
                    return g[i] * n.value[i] * (1.0 - n.value[i]);
                });
                break;
            case Op::kAbs:
                accum_elementwise(*na, g, [&](std::size_t i) {
                    const double x = na->value[i];
                    return x > 0.0 ? g[i] : (x < 0.0 ? -g[i] : 0.0);
                });
                break;
            case Op::kSum:
                accum_elementwise(*na, na->value, [&](std::size_t) { return g[0]; });
                break;
            case Op::kMean: {
                const double inv = 1.0 / static_cast<double>(na->value.size());
                accum_elementwise(*na, na->value, [&](std::size_t) { return g[0] * inv; });
                break;
            }
            case Op::kL1Norm:
                accum_elementwise(*na, na->value, [&](std::size_t i) {
                    const double x = na->value[i];
                    return x > 0.0 ? g[0] : (x < 0.0 ? -g[0] : 0.0);
                });
                break;
            case Op::kL2Norm: {
                const double denom = n.value[0];
                accum_elementwise(*na, na->value, [&](std::size_t i) {
                    return denom > 0.0 ? g[0] * na->value[i] / denom : 0.0;
                });
                break;
            }
            case Op::kConcatRows: {
                const std::size_t na_count = na->value.size();
                if (need_a)
                    accum_elementwise(*na, na->value, [&](std::size_t i) { return g[i]; });
                if (need_b)
                    accum_elementwise(*nb, nb->value,
                                      [&](std::size_t i) { return g[na_count + i]; });
                break;
            }
            case Op::kConcatCols: {
                const std::int64_t ca = na->shape.cols;
                const std::int64_t cb = nb->shape.cols;
                const std::int64_t cc = n.shape.cols;
                if (need_a) {
                    ensure_grad(*na);
                    for (std::int64_t r = 0; r < n.shape.rows; ++r)
                        for (std::int64_t c = 0; c < ca; ++c)
                            na->grad[static_cast<std::size_t>(r * ca + c)] +=
                                g[static_cast<std::size_t>(r * cc + c)];
                }
                if (need_b) {
                    ensure_grad(*nb);
                    for (std::int64_t r = 0; r < n.shape.rows; ++r)
                        for (std::int64_t c = 0; c < cb; ++c)
                            nb->grad[static_cast<std::size_t>(r * cb + c)] +=
                                g[static_cast<std::size_t>(r * cc + ca + c)];
                }
                break;
            }
            case Op::kSliceRows: {
                ensure_grad(*na);
                const std::int64_t cols = na->shape.cols;
                for (std::size_t i = 0; i < g.size(); ++i)
                    na->grad[static_cast<std::size_t>(n.i0 * cols) + i] += g[i];
                break;
            }
            case Op::kSliceCols: {
                ensure_grad(*na);
                const std::int64_t cols = na->shape.cols;
                const std::int64_t width = n.i1 - n.i0;
                for (std::int64_t r = 0; r < n.shape.rows; ++r)
                    for (std::int64_t c = 0; c < width; ++c)
                        na->grad[static_cast<std::size_t>(r * cols + n.i0 + c)] +=
                            g[static_cast<std::size_t>(r * width + c)];
                break;
            }
            case Op::kTranspose: {
                ensure_grad(*na);
                const std::int64_t r_out = n.shape.rows, c_out = n.shape.cols;
                for (std::int64_t r = 0; r < r_out; ++r)
                    for (std::int64_t c = 0; c < c_out; ++c)
                        na->grad[static_cast<std::size_t>(c * r_out + r)] +=
                            g[static_cast<std::size_t>(r * c_out + c)];
                break;
            }
            case Op::kRowSum: {
                ensure_grad(*na);
                const std::int64_t cols = na->shape.cols;
                for (std::int64_t r = 0; r < na->shape.rows; ++r)
                    for (std::int64_t c = 0; c < cols; ++c)
                        na->grad[static_cast<std::size_t>(r * cols + c)] +=
                            g[static_cast<std::size_t>(r)];
                break;
            }
            case Op::kRowMul:
            case Op::kRowDiv: {
                const bool is_div = n.op == Op::kRowDiv;
                const std::int64_t cols = n.shape.cols;
                if (need_a) {
                    ensure_grad(*na);
                    for (std::int64_t r = 0; r < n.shape.rows; ++r) {
                        const double sv = nb->value[static_cast<std::size_t>(r)];
                        const double f = is_div ? 1.0 / sv : sv;
                        for (std::int64_t c = 0; c < cols; ++c)
                            na->grad[static_cast<std::size_t>(r * cols + c)] +=
                                g[static_cast<std::size_t>(r * cols + c)] * f;
                    }
                }
                if (need_b) {
                    ensure_grad(*nb);
                    for (std::int64_t r = 0; r < n.shape.rows; ++r) {
                        double acc = 0.0;
                        for (std::int64_t c = 0; c < cols; ++c)
                            acc += g[static_cast<std::size_t>(r * cols + c)] *
                                   na->value[static_cast<std::size_t>(r * cols + c)];
                        const double sv = nb->value[static_cast<std::size_t>(r)];
                        nb->grad[static_cast<std::size_t>(r)] +=
                            is_div ? -acc / (sv * sv) : acc;
                    }
                }
                break;
            }
            case Op::kAddRowvec: {
                const std::int64_t cols = n.shape.cols;
                if (need_a)
                    accum_elementwise(*na, g, [&](std::size_t i) { return g[i]; });
                if (need_b) {
                    ensure_grad(*nb);
                    for (std::int64_t r = 0; r < n.shape.rows; ++r)
                        for (std::int64_t c = 0; c < cols; ++c)
                            nb->grad[static_cast<std::size_t>(c)] +=
                                g[static_cast<std::size_t>(r * cols + c)];
                }
                break;
            }
            case Op::kRepeatRows: {
                ensure_grad(*na);
                const std::int64_t cols = n.shape.cols;
                for (std::int64_t r = 0; r < n.shape.rows; ++r)
                    for (std::int64_t c = 0; c < cols; ++c)
                        na->grad[static_cast<std::size_t>(c)] +=
                            g[static_cast<std::size_t>(r * cols + c)];
                break;
            }
            case Op::kSkew3: {
                ensure_grad(*na);
                na->grad[0] += g[7] - g[5];
                na->grad[1] += g[2] - g[6];
                na->grad[2] += g[3] - g[1];
                break;
            }
        }
    }
}

void set_num_threads(int n) { WorkerPool::instance().set_threads(n); }
int num_threads() { return WorkerPool::instance().threads(); }

}  // namespace raypose::ad
