#include "wsclip/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

#include "wsclip/errors.hpp"
#include "wsclip/threading.hpp"

namespace wsclip {

std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape)
    : data_(std::make_shared<std::vector<double>>(numel(shape), 0.0)),
      shape_(std::move(shape)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (numel(shape_) != static_cast<std::int64_t>(values.size()))
        throw DimensionError("tensor: " + shape_str(shape_) + " cannot hold " +
                             std::to_string(values.size()) + " values");
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
}

std::int64_t Tensor::size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

double Tensor::item() const {
    if (!data_ || data_->size() != 1)
        throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape_));
    return (*data_)[0];
}

std::vector<double>& Tensor::mutable_values() {
    if (on_tape())
        throw ContractError("mutable_values(): tensor is bound to a tape");
    return *data_;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::watch(const Tensor& t) {
    Tensor out = t;
    out.tape_ = this;
    out.node_ = add_node(t.size(), nullptr);
    out.requires_grad_ = true;
    return out;
}

std::int64_t Tape::add_node(std::int64_t out_numel, BackwardFn fn) {
    nodes_.push_back(Node{out_numel, std::move(fn)});
    grads_.emplace_back();
    return static_cast<std::int64_t>(nodes_.size()) - 1;
}

double* Tape::grad_accum(std::int64_t node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].count), 0.0);
    return g.data();
}

void Tape::backward(const Tensor& root) {
    if (root.tape_ != this || root.node_ < 0)
        throw ContractError("backward: root is not on this tape");
    if (root.size() != 1)
        throw ContractError("backward: root must be scalar, shape " + shape_str(root.shape()));
    for (auto& g : grads_) g.clear();
    grads_[static_cast<size_t>(root.node_)] = {1.0};
    for (std::int64_t i = root.node_; i >= 0; --i) {
        auto& node = nodes_[static_cast<size_t>(i)];
        auto& g = grads_[static_cast<size_t>(i)];
        if (!g.empty() && node.backward) node.backward(g.data());
    }
}

Tensor Tape::grad(const Tensor& t) const {
    if (t.tape_ != this || t.node_ < 0)
        throw ContractError("grad: tensor is not on this tape");
    const auto& g = grads_[static_cast<size_t>(t.node_)];
    if (g.empty()) return Tensor(t.shape());
    return Tensor(t.shape(), g);
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

struct OpAccess {
    static void bind(Tensor& t, Tape* tape, std::int64_t node) {
        t.tape_ = tape;
        t.node_ = node;
        t.requires_grad_ = true;
    }
    static std::shared_ptr<std::vector<double>> data(const Tensor& t) { return t.data_; }
};

namespace {

bool diff(const Tensor& t) { return t.on_tape() && t.requires_grad(); }

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!diff(*t)) continue;
        if (tape && t->tape() != tape)
            throw ContractError("operation mixes tensors from two tapes");
        tape = t->tape();
    }
    return tape;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

// trailing broadcast: b's shape must equal a suffix of a's shape
void check_suffix(const Tensor& a, const Tensor& b, const char* op) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sb.size() > sa.size())
        throw DimensionError(std::string(op) + ": " + shape_str(sb) +
                             " does not broadcast onto " + shape_str(sa));
    for (size_t i = 0; i < sb.size(); ++i)
        if (sb[sb.size() - 1 - i] != sa[sa.size() - 1 - i])
            throw DimensionError(std::string(op) + ": " + shape_str(sb) +
                                 " is not a trailing suffix of " + shape_str(sa));
}

// -------------------------- matmul kernels ---------------------------------

std::atomic<bool> g_mac_on{false};
std::atomic<std::int64_t> g_macs{0};

inline void count_macs(std::int64_t n) {
    if (g_mac_on.load(std::memory_order_relaxed))
        g_macs.fetch_add(n, std::memory_order_relaxed);
}

enum class MM { nn, nt, tn };

// One batched multiply-accumulate kernel; per batch entry l:
//   nn: C[l] += A[l] (MxK)   * B[l] (KxN)
//   nt: C[l] += A[l] (MxK)   * B[l] (NxK)^T
//   tn: C[l] += A[l] (KxM)^T * B[l] (KxN)
// C is always [L, M, N]. One parallel_for spans all L*M output rows, each
// row written by exactly one worker, so results are thread-count invariant.
void batched_mm_acc(MM mode, const double* a, const double* b, double* c, std::int64_t L,
                    std::int64_t m, std::int64_t k, std::int64_t n) {
    count_macs(L * m * k * n);
    const std::int64_t a_stride = m * k;
    const std::int64_t b_stride = k * n;
    parallel_for(L * m, [=](std::int64_t r0, std::int64_t r1) {
        for (std::int64_t r = r0; r < r1; ++r) {
            const std::int64_t l = r / m, i = r % m;
            const double* pa = a + l * a_stride;
            const double* pb = b + l * b_stride;
            double* crow = c + r * n;
            switch (mode) {
                case MM::nn: {
                    const double* arow = pa + i * k;
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double av = arow[p];
                        const double* brow = pb + p * n;
                        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                    }
                    break;
                }
                case MM::nt: {
                    const double* arow = pa + i * k;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double* brow = pb + j * k;
                        double acc = 0.0;
                        for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                        crow[j] += acc;
                    }
                    break;
                }
                case MM::tn: {
                    for (std::int64_t p = 0; p < k; ++p) {
                        const double av = pa[p * m + i];
                        const double* brow = pb + p * n;
                        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                    }
                    break;
                }
            }
        }
    });
}

struct BatchDims {
    std::int64_t batch, m, k, n;
};

BatchDims bmm_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
    require(a.rank() >= 2 && b.rank() >= 2,
            std::string(op) + ": operands must have rank >= 2");
    require(a.rank() == b.rank(), std::string(op) + ": rank mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::int64_t batch = 1;
    for (int i = 0; i + 2 < a.rank(); ++i) {
        require(a.dim(i) == b.dim(i), std::string(op) + ": leading dims differ");
        batch *= a.dim(i);
    }
    const std::int64_t m = a.dim(a.rank() - 2);
    const std::int64_t k = a.dim(a.rank() - 1);
    const std::int64_t kb = b_transposed ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
    const std::int64_t n = b_transposed ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
    require(k == kb, std::string(op) + ": inner dims differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    require(k > 0, std::string(op) + ": zero inner dimension");
    return {batch, m, k, n};
}

}  // namespace

void mac_counter_enable(bool on) { g_mac_on.store(on); }
void mac_counter_reset() { g_macs.store(0); }
std::int64_t mac_counter_value() { return g_macs.load(); }

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_suffix(a, b, "add");
    const std::int64_t total = a.size(), inner = b.size();
    std::vector<double> out(static_cast<size_t>(total));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = av[i] + bv[i % inner];
    Tensor y(a.shape(), std::move(out));
    Tape* tp = common_tape({&a, &b});
    if (tp) {
        const std::int64_t na = diff(a) ? a.node() : -1;
        const std::int64_t nb = diff(b) ? b.node() : -1;
        auto node = tp->add_node(total, [tp, na, nb, total, inner](const double* go) {
            if (na >= 0) {
                double* ga = tp->grad_accum(na);
                for (std::int64_t i = 0; i < total; ++i) ga[i] += go[i];
            }
            if (nb >= 0) {
                double* gb = tp->grad_accum(nb);
                for (std::int64_t i = 0; i < total; ++i) gb[i % inner] += go[i];
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_suffix(a, b, "sub");
    const std::int64_t total = a.size(), inner = b.size();
    std::vector<double> out(static_cast<size_t>(total));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = av[i] - bv[i % inner];
    Tensor y(a.shape(), std::move(out));
    Tape* tp = common_tape({&a, &b});
    if (tp) {
        const std::int64_t na = diff(a) ? a.node() : -1;
        const std::int64_t nb = diff(b) ? b.node() : -1;
        auto node = tp->add_node(total, [tp, na, nb, total, inner](const double* go) {
            if (na >= 0) {
                double* ga = tp->grad_accum(na);
                for (std::int64_t i = 0; i < total; ++i) ga[i] += go[i];
            }
            if (nb >= 0) {
                double* gb = tp->grad_accum(nb);
                for (std::int64_t i = 0; i < total; ++i) gb[i % inner] -= go[i];
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_suffix(a, b, "mul");
    const std::int64_t total = a.size(), inner = b.size();
    std::vector<double> out(static_cast<size_t>(total));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = av[i] * bv[i % inner];
    Tensor y(a.shape(), std::move(out));
    Tape* tp = common_tape({&a, &b});
    if (tp) {
        const std::int64_t na = diff(a) ? a.node() : -1;
        const std::int64_t nb = diff(b) ? b.node() : -1;
        auto da = OpAccess::data(a);
        auto db = OpAccess::data(b);
        auto node = tp->add_node(total, [tp, na, nb, total, inner, da, db](const double* go) {
            if (na >= 0) {
                double* ga = tp->grad_accum(na);
                const double* bv2 = db->data();
                for (std::int64_t i = 0; i < total; ++i) ga[i] += go[i] * bv2[i % inner];
            }
            if (nb >= 0) {
                double* gb = tp->grad_accum(nb);
                const double* av2 = da->data();
                for (std::int64_t i = 0; i < total; ++i) gb[i % inner] += go[i] * av2[i];
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor affine(const Tensor& x, double scale, double shift) {
    const std::int64_t total = x.size();
    std::vector<double> out(static_cast<size_t>(total));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = scale * xv[i] + shift;
    Tensor y(x.shape(), std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(total, [tp, nx, total, scale](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t i = 0; i < total; ++i) gx[i] += scale * go[i];
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

Tensor linear_matmul(const Tensor& x, const Tensor& w) {
    require(x.rank() >= 1 && w.rank() == 2, "linear_matmul: expects x[...,K], w[K,N]");
    const std::int64_t k = x.dim(x.rank() - 1);
    require(k == w.dim(0), "linear_matmul: inner dims differ, " + shape_str(x.shape()) +
                               " vs " + shape_str(w.shape()));
    const std::int64_t m = x.size() / k;
    const std::int64_t n = w.dim(1);
    Shape out_shape(x.shape().begin(), x.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    batched_mm_acc(MM::nn, x.values().data(), w.values().data(), out.data(), 1, m, k, n);
    Tensor y(std::move(out_shape), std::move(out));
    Tape* tp = common_tape({&x, &w});
    if (tp) {
        const std::int64_t nx = diff(x) ? x.node() : -1;
        const std::int64_t nw = diff(w) ? w.node() : -1;
        auto dx = OpAccess::data(x);
        auto dw = OpAccess::data(w);
        auto node = tp->add_node(m * n, [tp, nx, nw, dx, dw, m, k, n](const double* go) {
            if (nx >= 0)
                batched_mm_acc(MM::nt, go, dw->data(), tp->grad_accum(nx), 1, m, n, k);
            if (nw >= 0)
                batched_mm_acc(MM::tn, dx->data(), go, tp->grad_accum(nw), 1, k, m, n);
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
    const BatchDims d = bmm_dims(a, b, false, "bmm_nn");
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.back() = d.m;
    out_shape.push_back(d.n);
    std::vector<double> out(static_cast<size_t>(d.batch * d.m * d.n), 0.0);
    batched_mm_acc(MM::nn, a.values().data(), b.values().data(), out.data(), d.batch, d.m, d.k,
                   d.n);
    Tensor y(std::move(out_shape), std::move(out));
    Tape* tp = common_tape({&a, &b});
    if (tp) {
        const std::int64_t na = diff(a) ? a.node() : -1;
        const std::int64_t nb = diff(b) ? b.node() : -1;
        auto da = OpAccess::data(a);
        auto db = OpAccess::data(b);
        auto node = tp->add_node(d.batch * d.m * d.n, [tp, na, nb, da, db, d](const double* go) {
            if (na >= 0)
                batched_mm_acc(MM::nt, go, db->data(), tp->grad_accum(na), d.batch, d.m, d.n,
                               d.k);
            if (nb >= 0)
                batched_mm_acc(MM::tn, da->data(), go, tp->grad_accum(nb), d.batch, d.k, d.m,
                               d.n);
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    const BatchDims d = bmm_dims(a, b, true, "bmm_nt");
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.back() = d.m;
    out_shape.push_back(d.n);
    std::vector<double> out(static_cast<size_t>(d.batch * d.m * d.n), 0.0);
    batched_mm_acc(MM::nt, a.values().data(), b.values().data(), out.data(), d.batch, d.m, d.k,
                   d.n);
    Tensor y(std::move(out_shape), std::move(out));
    Tape* tp = common_tape({&a, &b});
    if (tp) {
        const std::int64_t na = diff(a) ? a.node() : -1;
        const std::int64_t nb = diff(b) ? b.node() : -1;
        auto da = OpAccess::data(a);
        auto db = OpAccess::data(b);
        auto node = tp->add_node(d.batch * d.m * d.n, [tp, na, nb, da, db, d](const double* go) {
            // y = a b^T  =>  da = g b ; db = g^T a
            if (na >= 0)
                batched_mm_acc(MM::nn, go, db->data(), tp->grad_accum(na), d.batch, d.m, d.n,
                               d.k);
            if (nb >= 0)
                batched_mm_acc(MM::tn, go, da->data(), tp->grad_accum(nb), d.batch, d.n, d.m,
                               d.k);
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor transpose2d(const Tensor& x) {
    require(x.rank() == 2, "transpose2d: expects rank 2, got " + shape_str(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[static_cast<size_t>(j * m + i)] = xv[i * n + j];
    Tensor y({n, m}, std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(m * n, [tp, nx, m, n](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t j = 0; j < n; ++j)
                for (std::int64_t i = 0; i < m; ++i) gx[i * n + j] += go[j * m + i];
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

// ---------------------------------------------------------------------------
// normalization / activation
// ---------------------------------------------------------------------------

Tensor softmax_last(const Tensor& x) {
    require(x.rank() >= 1, "softmax_last: scalar input");
    const std::int64_t d = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(static_cast<size_t>(x.size()));
    const auto& xv = x.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double* o = out.data() + r * d;
        double mx = row[0];
        for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            o[i] = std::exp(row[i] - mx);
            z += o[i];
        }
        for (std::int64_t i = 0; i < d; ++i) o[i] /= z;
    }
    Tensor y(x.shape(), std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto dy = OpAccess::data(y);
        auto node = tp->add_node(x.size(), [tp, nx, dy, rows, d](const double* go) {
            double* gx = tp->grad_accum(nx);
            const double* yv = dy->data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = yv + r * d;
                const double* gr = go + r * d;
                double dot = 0.0;
                for (std::int64_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
                double* gxr = gx + r * d;
                for (std::int64_t i = 0; i < d; ++i) gxr[i] += yr[i] * (gr[i] - dot);
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps) {
    require(x.rank() >= 1 && gamma.rank() == 1, "rms_norm: expects x[...,d], gamma[d]");
    const std::int64_t d = x.dim(x.rank() - 1);
    require(d == gamma.dim(0), "rms_norm: last dim " + std::to_string(d) +
                                   " != gamma length " + std::to_string(gamma.dim(0)));
    if (eps < 0.0) throw ConfigError("rms_norm: eps must be >= 0");
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(static_cast<size_t>(x.size()));
    std::vector<double> rstd(static_cast<size_t>(rows));
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double ms = 0.0;
        for (std::int64_t i = 0; i < d; ++i) ms += row[i] * row[i];
        ms = ms / static_cast<double>(d) + eps;
        const double inv = 1.0 / std::sqrt(ms);
        rstd[static_cast<size_t>(r)] = inv;
        double* o = out.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) o[i] = gv[i] * row[i] * inv;
    }
    Tensor y(x.shape(), std::move(out));
    Tape* tp = common_tape({&x, &gamma});
    if (tp) {
        const std::int64_t nx = diff(x) ? x.node() : -1;
        const std::int64_t ng = diff(gamma) ? gamma.node() : -1;
        auto dx = OpAccess::data(x);
        auto dg = OpAccess::data(gamma);
        auto node = tp->add_node(
            x.size(), [tp, nx, ng, dx, dg, rstd, rows, d](const double* go) {
                const double* xv2 = dx->data();
                const double* gv2 = dg->data();
                double* gx = nx >= 0 ? tp->grad_accum(nx) : nullptr;
                double* gg = ng >= 0 ? tp->grad_accum(ng) : nullptr;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* row = xv2 + r * d;
                    const double* gr = go + r * d;
                    const double inv = rstd[static_cast<size_t>(r)];
                    if (gx) {
                        double s = 0.0;
                        for (std::int64_t i = 0; i < d; ++i) s += gr[i] * gv2[i] * row[i];
                        const double c = inv * inv * inv * s / static_cast<double>(d);
                        double* gxr = gx + r * d;
                        for (std::int64_t i = 0; i < d; ++i)
                            gxr[i] += inv * gv2[i] * gr[i] - c * row[i];
                    }
                    if (gg)
                        for (std::int64_t i = 0; i < d; ++i) gg[i] += gr[i] * row[i] * inv;
                }
            });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.rank() >= 1 && gamma.rank() == 1 && beta.rank() == 1,
            "layer_norm: expects x[...,d], gamma[d], beta[d]");
    const std::int64_t d = x.dim(x.rank() - 1);
    require(d == gamma.dim(0) && d == beta.dim(0),
            "layer_norm: dim mismatch between x " + shape_str(x.shape()) + ", gamma, beta");
    if (eps < 0.0) throw ConfigError("layer_norm: eps must be >= 0");
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(static_cast<size_t>(x.size()));
    std::vector<double> xhat(static_cast<size_t>(x.size()));
    std::vector<double> rstd(static_cast<size_t>(rows));
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double mu = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mu += row[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<size_t>(r)] = inv;
        double* xh = xhat.data() + r * d;
        double* o = out.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) {
            xh[i] = (row[i] - mu) * inv;
            o[i] = gv[i] * xh[i] + bv[i];
        }
    }
    Tensor y(x.shape(), std::move(out));
    Tape* tp = common_tape({&x, &gamma, &beta});
    if (tp) {
        const std::int64_t nx = diff(x) ? x.node() : -1;
        const std::int64_t ng = diff(gamma) ? gamma.node() : -1;
        const std::int64_t nb = diff(beta) ? beta.node() : -1;
        auto dg = OpAccess::data(gamma);
        auto node = tp->add_node(
            x.size(), [tp, nx, ng, nb, dg, xhat, rstd, rows, d](const double* go) {
                const double* gv2 = dg->data();
                double* gx = nx >= 0 ? tp->grad_accum(nx) : nullptr;
                double* gg = ng >= 0 ? tp->grad_accum(ng) : nullptr;
                double* gb = nb >= 0 ? tp->grad_accum(nb) : nullptr;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* xh = xhat.data() + r * d;
                    const double* gr = go + r * d;
                    if (gx) {
                        const double inv = rstd[static_cast<size_t>(r)];
                        double mean_g = 0.0, mean_gx = 0.0;
                        for (std::int64_t i = 0; i < d; ++i) {
                            const double gi = gr[i] * gv2[i];
                            mean_g += gi;
                            mean_gx += gi * xh[i];
                        }
                        mean_g /= static_cast<double>(d);
                        mean_gx /= static_cast<double>(d);
                        double* gxr = gx + r * d;
                        for (std::int64_t i = 0; i < d; ++i)
                            gxr[i] += inv * (gr[i] * gv2[i] - mean_g - xh[i] * mean_gx);
                    }
                    if (gg)
                        for (std::int64_t i = 0; i < d; ++i) gg[i] += gr[i] * xh[i];
                    if (gb)
                        for (std::int64_t i = 0; i < d; ++i) gb[i] += gr[i];
                }
            });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor gelu(const Tensor& x) {
    const std::int64_t total = x.size();
    std::vector<double> out(static_cast<size_t>(total));
    const auto& xv = x.values();
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    parallel_for(total, [&](std::int64_t i0, std::int64_t i1) {
        for (std::int64_t i = i0; i < i1; ++i)
            out[static_cast<size_t>(i)] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
    });
    Tensor y(x.shape(), std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto dx = OpAccess::data(x);
        auto node = tp->add_node(total, [tp, nx, dx, total](const double* go) {
            double* gx = tp->grad_accum(nx);
            const double* xv2 = dx->data();
            constexpr double kInvSqrt2Pi = 0.3989422804014326779;
            parallel_for(total, [&](std::int64_t i0, std::int64_t i1) {
                for (std::int64_t i = i0; i < i1; ++i) {
                    const double v = xv2[i];
                    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    gx[i] += go[i] * (cdf + v * pdf);
                }
            });
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor y = Tensor::scalar(acc);
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        const std::int64_t total = x.size();
        auto node = tp->add_node(1, [tp, nx, total](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t i = 0; i < total; ++i) gx[i] += go[0];
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor mean(const Tensor& x) {
    require(x.size() > 0, "mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(x.size());
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor y = Tensor::scalar(acc * inv);
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        const std::int64_t total = x.size();
        auto node = tp->add_node(1, [tp, nx, total, inv](const double* go) {
            double* gx = tp->grad_accum(nx);
            const double g = go[0] * inv;
            for (std::int64_t i = 0; i < total; ++i) gx[i] += g;
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor sum_last(const Tensor& x) {
    require(x.rank() >= 1, "sum_last: scalar input");
    const std::int64_t d = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    const auto& xv = x.values();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t i = 0; i < d; ++i) out[static_cast<size_t>(r)] += xv[r * d + i];
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    Tensor y(std::move(shape), std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(rows, [tp, nx, rows, d](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t i = 0; i < d; ++i) gx[r * d + i] += go[r];
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
    require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " +
                                          shape_str(shape) + " changes element count");
    Tensor y(std::move(shape), x.values());
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        const std::int64_t total = x.size();
        auto node = tp->add_node(total, [tp, nx, total](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t i = 0; i < total; ++i) gx[i] += go[i];
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor swap_dims12(const Tensor& x) {
    require(x.rank() == 4, "swap_dims12: expects rank 4, got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), n = x.dim(1), h = x.dim(2), d = x.dim(3);
    std::vector<double> out(static_cast<size_t>(x.size()));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t p = 0; p < h; ++p)
                std::memcpy(out.data() + ((i * h + p) * n + j) * d,
                            xv.data() + ((i * n + j) * h + p) * d,
                            static_cast<size_t>(d) * sizeof(double));
    Tensor y({b, h, n, d}, std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(x.size(), [tp, nx, b, n, h, d](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t p = 0; p < h; ++p)
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double* src = go + ((i * h + p) * n + j) * d;
                        double* dst = gx + ((i * n + j) * h + p) * d;
                        for (std::int64_t q = 0; q < d; ++q) dst[q] += src[q];
                    }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<std::int64_t>& ids, Shape ids_shape) {
    require(table.rank() == 2, "embedding: table must be [rows, d]");
    require(numel(ids_shape) == static_cast<std::int64_t>(ids.size()),
            "embedding: ids_shape does not match id count");
    const std::int64_t rows = table.dim(0), d = table.dim(1);
    for (auto id : ids)
        if (id < 0 || id >= rows)
            throw ContractError("embedding: id " + std::to_string(id) + " out of range [0," +
                                std::to_string(rows) + ")");
    std::vector<double> out(ids.size() * static_cast<size_t>(d));
    const auto& tv = table.values();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + i * static_cast<size_t>(d), tv.data() + ids[i] * d,
                    static_cast<size_t>(d) * sizeof(double));
    Shape out_shape = std::move(ids_shape);
    out_shape.push_back(d);
    Tensor y(std::move(out_shape), std::move(out));
    if (Tape* tp = common_tape({&table})) {
        const std::int64_t nt = table.node();
        auto node = tp->add_node(y.size(), [tp, nt, ids, d](const double* go) {
            double* gt = tp->grad_accum(nt);
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = gt + ids[i] * d;
                const double* src = go + i * static_cast<size_t>(d);
                for (std::int64_t q = 0; q < d; ++q) dst[q] += src[q];
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
    require(x.rank() == 2, "gather_rows: expects [n, d]");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    for (auto i : idx)
        if (i < 0 || i >= n)
            throw DimensionError("gather_rows: index " + std::to_string(i) + " out of range");
    std::vector<double> out(idx.size() * static_cast<size_t>(d));
    const auto& xv = x.values();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * static_cast<size_t>(d), xv.data() + idx[r] * d,
                    static_cast<size_t>(d) * sizeof(double));
    Tensor y({static_cast<std::int64_t>(idx.size()), d}, std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(y.size(), [tp, nx, idx, d](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (size_t r = 0; r < idx.size(); ++r) {
                double* dst = gx + idx[r] * d;
                const double* src = go + r * static_cast<size_t>(d);
                for (std::int64_t q = 0; q < d; ++q) dst[q] += src[q];
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor select_tokens(const Tensor& x, const std::vector<std::int64_t>& idx) {
    require(x.rank() == 3, "select_tokens: expects [b, n, d]");
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    for (auto i : idx)
        if (i < 0 || i >= n)
            throw DimensionError("select_tokens: index " + std::to_string(i) + " out of range");
    const std::int64_t k = static_cast<std::int64_t>(idx.size());
    std::vector<double> out(static_cast<size_t>(b * k * d));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t r = 0; r < k; ++r)
            std::memcpy(out.data() + (i * k + r) * d, xv.data() + (i * n + idx[static_cast<size_t>(r)]) * d,
                        static_cast<size_t>(d) * sizeof(double));
    Tensor y({b, k, d}, std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(y.size(), [tp, nx, idx, b, n, d, k](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t i = 0; i < b; ++i)
                for (std::int64_t r = 0; r < k; ++r) {
                    double* dst = gx + (i * n + idx[static_cast<size_t>(r)]) * d;
                    const double* src = go + (i * k + r) * d;
                    for (std::int64_t q = 0; q < d; ++q) dst[q] += src[q];
                }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor select_position(const Tensor& x, const std::vector<std::int64_t>& pos) {
    require(x.rank() == 3, "select_position: expects [b, n, d]");
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    require(static_cast<std::int64_t>(pos.size()) == b, "select_position: need one position per batch row");
    for (auto p : pos)
        if (p < 0 || p >= n)
            throw DimensionError("select_position: position " + std::to_string(p) + " out of range");
    std::vector<double> out(static_cast<size_t>(b * d));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < b; ++i)
        std::memcpy(out.data() + i * d, xv.data() + (i * n + pos[static_cast<size_t>(i)]) * d,
                    static_cast<size_t>(d) * sizeof(double));
    Tensor y({b, d}, std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto node = tp->add_node(b * d, [tp, nx, pos, n, d, b](const double* go) {
            double* gx = tp->grad_accum(nx);
            for (std::int64_t i = 0; i < b; ++i) {
                double* dst = gx + (i * n + pos[static_cast<size_t>(i)]) * d;
                const double* src = go + i * d;
                for (std::int64_t q = 0; q < d; ++q) dst[q] += src[q];
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor prepend_token(const Tensor& x, const Tensor& tok) {
    require(x.rank() == 3 && tok.rank() == 1, "prepend_token: expects x[b,n,d], tok[d]");
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    require(tok.dim(0) == d, "prepend_token: token width mismatch");
    std::vector<double> out(static_cast<size_t>(b * (n + 1) * d));
    const auto& xv = x.values();
    const auto& tv = tok.values();
    for (std::int64_t i = 0; i < b; ++i) {
        std::memcpy(out.data() + i * (n + 1) * d, tv.data(), static_cast<size_t>(d) * sizeof(double));
        std::memcpy(out.data() + (i * (n + 1) + 1) * d, xv.data() + i * n * d,
                    static_cast<size_t>(n * d) * sizeof(double));
    }
    Tensor y({b, n + 1, d}, std::move(out));
    Tape* tp = common_tape({&x, &tok});
    if (tp) {
        const std::int64_t nx = diff(x) ? x.node() : -1;
        const std::int64_t nt = diff(tok) ? tok.node() : -1;
        auto node = tp->add_node(y.size(), [tp, nx, nt, b, n, d](const double* go) {
            if (nt >= 0) {
                double* gt = tp->grad_accum(nt);
                for (std::int64_t i = 0; i < b; ++i) {
                    const double* src = go + i * (n + 1) * d;
                    for (std::int64_t q = 0; q < d; ++q) gt[q] += src[q];
                }
            }
            if (nx >= 0) {
                double* gx = tp->grad_accum(nx);
                for (std::int64_t i = 0; i < b; ++i) {
                    const double* src = go + (i * (n + 1) + 1) * d;
                    double* dst = gx + i * n * d;
                    for (std::int64_t q = 0; q < n * d; ++q) dst[q] += src[q];
                }
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor l2_normalize_last(const Tensor& x) {
    require(x.rank() >= 1, "l2_normalize_last: scalar input");
    const std::int64_t d = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(static_cast<size_t>(x.size()));
    std::vector<double> norms(static_cast<size_t>(rows));
    const auto& xv = x.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * d;
        double sq = 0.0;
        for (std::int64_t i = 0; i < d; ++i) sq += row[i] * row[i];
        const double nrm = std::sqrt(sq);
        if (!(nrm > 0.0) || !std::isfinite(nrm))
            throw NumericError("l2_normalize_last: zero or non-finite norm in row " +
                               std::to_string(r));
        norms[static_cast<size_t>(r)] = nrm;
        double* o = out.data() + r * d;
        for (std::int64_t i = 0; i < d; ++i) o[i] = row[i] / nrm;
    }
    Tensor y(x.shape(), std::move(out));
    if (Tape* tp = common_tape({&x})) {
        const std::int64_t nx = x.node();
        auto dy = OpAccess::data(y);
        auto node = tp->add_node(x.size(), [tp, nx, dy, norms, rows, d](const double* go) {
            double* gx = tp->grad_accum(nx);
            const double* yv = dy->data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = yv + r * d;
                const double* gr = go + r * d;
                double dot = 0.0;
                for (std::int64_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
                const double inv = 1.0 / norms[static_cast<size_t>(r)];
                double* gxr = gx + r * d;
                for (std::int64_t i = 0; i < d; ++i) gxr[i] += inv * (gr[i] - dot * yr[i]);
            }
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor cross_entropy_diag(const Tensor& logits) {
    require(logits.rank() == 2 && logits.dim(0) == logits.dim(1),
            "cross_entropy_diag: expects square [b, b] logits, got " + shape_str(logits.shape()));
    const std::int64_t b = logits.dim(0);
    const auto& lv = logits.values();
    std::vector<double> probs(static_cast<size_t>(b * b));
    double loss = 0.0;
    for (std::int64_t r = 0; r < b; ++r) {
        const double* row = lv.data() + r * b;
        double mx = row[0];
        for (std::int64_t i = 1; i < b; ++i) mx = std::max(mx, row[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < b; ++i) {
            probs[static_cast<size_t>(r * b + i)] = std::exp(row[i] - mx);
            z += probs[static_cast<size_t>(r * b + i)];
        }
        for (std::int64_t i = 0; i < b; ++i) probs[static_cast<size_t>(r * b + i)] /= z;
        loss -= row[r] - mx - std::log(z);
    }
    Tensor y = Tensor::scalar(loss / static_cast<double>(b));
    if (Tape* tp = common_tape({&logits})) {
        const std::int64_t nl = logits.node();
        auto node = tp->add_node(1, [tp, nl, probs, b](const double* go) {
            double* gl = tp->grad_accum(nl);
            const double scale = go[0] / static_cast<double>(b);
            for (std::int64_t r = 0; r < b; ++r)
                for (std::int64_t i = 0; i < b; ++i)
                    gl[r * b + i] +=
                        scale * (probs[static_cast<size_t>(r * b + i)] - (r == i ? 1.0 : 0.0));
        });
        OpAccess::bind(y, tp, node);
    }
    return y;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* mask) {
    require(q.rank() == 4 && k.rank() == 4 && v.rank() == 4,
            "attention: q,k,v must be [b,h,n,dh]");
    require(q.shape() == k.shape() && k.shape() == v.shape(),
            "attention: q,k,v shapes differ: " + shape_str(q.shape()) + " vs " +
                shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    const std::int64_t dh = q.dim(3);
    require(dh > 0, "attention: zero head dimension");
    Tensor scores = affine(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
    if (mask) scores = add(scores, *mask);
    Tensor probs = softmax_last(scores);
    return bmm_nn(probs, v);
}

}  // namespace wsclip
