#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wsclip {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;
struct OpAccess;

// Dense 64-bit float tensor, row-major. Values are immutable once the
// tensor participates in a tape; parameter buffers are mutated only by the
// optimizer between steps, when no tape references them.
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor full(Shape shape, double v);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    std::int64_t size() const;
    bool defined() const { return static_cast<bool>(data_); }
    double item() const;  // scalar tensors only

    const std::vector<double>& values() const { return *data_; }
    std::vector<double>& mutable_values();

    bool requires_grad() const { return requires_grad_; }
    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::int64_t node() const { return node_; }

   private:
    friend class Tape;
    friend struct OpAccess;

    std::shared_ptr<std::vector<double>> data_;
    Shape shape_;
    Tape* tape_ = nullptr;
    std::int64_t node_ = -1;
    bool requires_grad_ = false;
};

// Define-by-run gradient tape. Nodes are appended in creation order, which
// is therefore a topological order; backward walks the list once in
// reverse. A tape is confined to one thread and rebuilt every forward pass.
class Tape {
   public:
    using BackwardFn = std::function<void(const double* grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a leaf. The returned tensor shares the input's storage and
    // is differentiable; gradients are read back with grad().
    Tensor watch(const Tensor& t);

    // Accumulates dL/dx into every node reachable from root. Root must be a
    // scalar living on this tape.
    void backward(const Tensor& root);

    // Gradient of a tensor on this tape (zeros if backward never reached it).
    Tensor grad(const Tensor& t) const;

    std::size_t node_count() const { return nodes_.size(); }

    // --- op plumbing ---
    std::int64_t add_node(std::int64_t out_numel, BackwardFn fn);
    double* grad_accum(std::int64_t node);  // zero-initialized on first use

   private:
    struct Node {
        std::int64_t count;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Inputs may live off-tape (constants) or on a
// single shared tape. Broadcasting is restricted to trailing dimensions:
// the second operand's shape must equal a suffix of the first's.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double scale, double shift);  // scale*x + shift

// x: [..., K] (leading dims folded), w: [K, N] -> [..., N]
Tensor linear_matmul(const Tensor& x, const Tensor& w);
// a: [..., M, K], b: [..., K, N] -> [..., M, N]; leading dims must match
Tensor bmm_nn(const Tensor& a, const Tensor& b);
// a: [..., M, K], b: [..., N, K] -> [..., M, N]
Tensor bmm_nt(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& x);

Tensor softmax_last(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);       // -> scalar
Tensor mean(const Tensor& x);      // -> scalar
Tensor sum_last(const Tensor& x);  // [..., d] -> [...]

Tensor reshape(const Tensor& x, Shape shape);
// [b, n, h, d] -> [b, h, n, d]
Tensor swap_dims12(const Tensor& x);

// table: [rows, d]; out[i] = table[ids[i]]; out shape = ids_shape + [d]
Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids,
                 Shape ids_shape);
// x: [n, d] -> [k, d], differentiable row gather
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
// x: [b, n, d] -> [b, k, d], same row subset in every batch entry
Tensor select_tokens(const Tensor& x, const std::vector<std::int64_t>& idx);
// x: [b, n, d], pos[b] in [0, n) -> [b, d]
Tensor select_position(const Tensor& x, const std::vector<std::int64_t>& pos);
// x: [b, n, d], tok: [d] -> [b, n+1, d] with tok at position 0
Tensor prepend_token(const Tensor& x, const Tensor& tok);

// L2-normalizes the last dimension. Zero-norm rows raise NumericError.
Tensor l2_normalize_last(const Tensor& x);

// logits: [b, b], targets = diagonal; mean cross-entropy over rows
Tensor cross_entropy_diag(const Tensor& logits);

// q,k: [b, h, n, dh], v: [b, h, n, dh]; optional additive mask broadcast
// over trailing dims of the [b, h, n, n] score tensor.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor* mask = nullptr);

// ---------------------------------------------------------------------------
// Instrumentation: multiply-accumulate counter over the matmul kernels,
// used as an independent check of analytic FLOP estimates.
// ---------------------------------------------------------------------------
void mac_counter_enable(bool on);
void mac_counter_reset();
std::int64_t mac_counter_value();

}  // namespace wsclip
