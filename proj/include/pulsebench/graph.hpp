#pragma once

// Reverse-mode autodiff over a flat, eagerly-evaluated node list.
// Nodes reference strictly earlier nodes, so creation order doubles as
// topological order for forward() and its reverse for backward().

#include <array>
#include <cmath>
#include <map>
#include <optional>

#include "tensor.hpp"

namespace pulse {

namespace detail {

// C[M,N] += A[M,K] * B[K,N], saxpy ordering (inner loop over N vectorizes).
inline void gemm_acc(const float* A, const float* B, float* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const float* a = A + static_cast<size_t>(m) * K;
        float* c = C + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const float av = a[k];
            const float* b = B + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

inline std::vector<float> transposed(const float* A, int rows, int cols) {
    std::vector<float> out(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<size_t>(c) * rows + r] = A[static_cast<size_t>(r) * cols + c];
    return out;
}

// One image [C,H,W] -> col [C*k*k, oh*ow] with zero padding.
inline void im2col(const float* x, int C, int H, int W, int k, int stride, int pad,
                   int oh, int ow, float* col) {
    const int P = oh * ow;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                float* dst = col + static_cast<size_t>((c * k + ky) * k + kx) * P;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        dst[oy * ow + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                                ? x[(static_cast<size_t>(c) * H + iy) * W + ix]
                                                : 0.0f;
                    }
                }
            }
}

// Same layout transposed: colT [oh*ow, C*k*k]; lets dW accumulate in saxpy order.
inline void im2col_t(const float* x, int C, int H, int W, int k, int stride, int pad,
                     int oh, int ow, float* colT) {
    const int ckk = C * k * k;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const int row = (c * k + ky) * k + kx;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        colT[static_cast<size_t>(oy * ow + ox) * ckk + row] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(static_cast<size_t>(c) * H + iy) * W + ix]
                                : 0.0f;
                    }
                }
            }
}

inline void col2im_acc(const float* col, int C, int H, int W, int k, int stride, int pad,
                       int oh, int ow, float* dx) {
    const int P = oh * ow;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const float* src = col + static_cast<size_t>((c * k + ky) * k + kx) * P;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        dx[(static_cast<size_t>(c) * H + iy) * W + ix] += src[oy * ow + ox];
                    }
                }
            }
}

}  // namespace detail

enum class Op {
    Input,
    Param,
    Identity,
    Add,
    Sub,
    Mul,
    ScalarMul,
    ScalarAdd,
    SubScalar,   // tensor minus a 1-element node, broadcast
    DivScalar,   // tensor divided by a 1-element node, broadcast
    Sum,
    Mean,
    Sqrt,
    Tanh,
    Sigmoid,
    Conv2d,
    Dense,
    AvgPool2d,
    TemporalShift,
    MulMask,        // [T,C,h,w] * [T,1,h,w]
    FrameMeanNorm,  // divide each [h,w] plane by its mean
    Dropout,
    Reshape,
    MseLoss,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Identity: return "identity";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ScalarMul: return "scalar_mul";
        case Op::ScalarAdd: return "scalar_add";
        case Op::SubScalar: return "sub_scalar";
        case Op::DivScalar: return "div_scalar";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Sqrt: return "sqrt";
        case Op::Tanh: return "tanh";
        case Op::Sigmoid: return "sigmoid";
        case Op::Conv2d: return "conv2d";
        case Op::Dense: return "dense";
        case Op::AvgPool2d: return "avg_pool2d";
        case Op::TemporalShift: return "temporal_shift";
        case Op::MulMask: return "mul_mask";
        case Op::FrameMeanNorm: return "frame_mean_norm";
        case Op::Dropout: return "dropout";
        case Op::Reshape: return "reshape";
        case Op::MseLoss: return "mse_loss";
    }
    return "?";
}

struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    Tensor value;
    Tensor aux;  // dropout keep-mask
    std::string name;
    bool trainable = false;
    float scalar = 0.0f;
    int stride = 1, pad = 0, pool_k = 2;
    int shift_ch = 0;  // channels per shifted group
    float drop_rate = 0.0f;
    double dvalue = 0.0;  // full-precision result for scalar reductions
};

class Graph {
public:
    bool train_mode = false;
    uint64_t dropout_seed = 0;

    int input(const std::string& name, Tensor v) {
        Node n;
        n.op = Op::Input;
        n.name = name;
        n.value = std::move(v);
        return push(std::move(n));
    }

    int param(const std::string& name, Tensor v, bool trainable = true) {
        Node n;
        n.op = Op::Param;
        n.name = name;
        n.trainable = trainable;
        n.value = std::move(v);
        return push(std::move(n));
    }

    int identity(int a) { return unary(Op::Identity, a); }
    int add(int a, int b) { return binary_same(Op::Add, a, b); }
    int sub(int a, int b) { return binary_same(Op::Sub, a, b); }
    int mul(int a, int b) { return binary_same(Op::Mul, a, b); }

    int scalar_mul(int a, float c) {
        Node n = make(Op::ScalarMul, a);
        n.scalar = c;
        return push_compute(std::move(n));
    }

    int scalar_add(int a, float c) {
        Node n = make(Op::ScalarAdd, a);
        n.scalar = c;
        return push_compute(std::move(n));
    }

    int sub_scalar(int a, int s) {
        require_scalar(s, "sub_scalar");
        Node n = make(Op::SubScalar, a, s);
        return push_compute(std::move(n));
    }

    int div_scalar(int a, int s) {
        require_scalar(s, "div_scalar");
        Node n = make(Op::DivScalar, a, s);
        return push_compute(std::move(n));
    }

    int sum(int a) { return unary(Op::Sum, a); }
    int mean(int a) { return unary(Op::Mean, a); }
    int sqrt_node(int a) { return unary(Op::Sqrt, a); }
    int tanh_node(int a) { return unary(Op::Tanh, a); }
    int sigmoid(int a) { return unary(Op::Sigmoid, a); }

    // x [N,Cin,H,W], w [Cout,Cin,k,k], optional bias [Cout]; explicit zero pad.
    int conv2d(int x, int w, int bias, int stride, int pad) {
        Node n = make(Op::Conv2d, x, w, bias);
        n.stride = stride;
        n.pad = pad;
        return push_compute(std::move(n));
    }

    // x [N,D], w [D,M], bias [M].
    int dense(int x, int w, int bias) { return push_compute(make(Op::Dense, x, w, bias)); }

    int avg_pool2d(int x, int k) {
        Node n = make(Op::AvgPool2d, x);
        n.pool_k = k;
        return push_compute(std::move(n));
    }

    int temporal_shift(int x, float fraction) {
        if (!(fraction > 0.0f && fraction <= 0.5f))
            detail::fail("temporal_shift: fraction must be in (0, 1/2], got " + std::to_string(fraction));
        const Tensor& v = node(x).value;
        require_rank(x, 4, "temporal_shift");
        Node n = make(Op::TemporalShift, x);
        n.shift_ch = static_cast<int>(std::floor(static_cast<double>(v.dim(1)) * fraction));
        return push_compute(std::move(n));
    }

    int mul_mask(int x, int mask) { return push_compute(make(Op::MulMask, x, mask)); }
    int frame_mean_norm(int x) { return push_compute(make(Op::FrameMeanNorm, x)); }

    int dropout(int x, float rate) {
        if (!(rate >= 0.0f && rate < 1.0f))
            detail::fail("dropout: rate must be in [0, 1), got " + std::to_string(rate));
        Node n = make(Op::Dropout, x);
        n.drop_rate = rate;
        return push_compute(std::move(n));
    }

    int reshape(int x, std::vector<int> shape) {
        if (shape_numel(shape) != node(x).value.numel())
            detail::fail(std::string("reshape: element count mismatch, ") +
                         detail::shape_str(node(x).value.shape) + " -> " + detail::shape_str(shape));
        Node n = make(Op::Reshape, x);
        n.value.shape = std::move(shape);
        return push_compute(std::move(n));
    }

    int mse_loss(int a, int b) { return binary_same(Op::MseLoss, a, b); }

    // (x - mean) / (std + eps), all differentiable.
    int standardize(int x, float eps = 1e-6f) {
        int m = mean(x);
        int centered = sub_scalar(x, m);
        int var = mean(mul(centered, centered));
        int sd = scalar_add(sqrt_node(var), eps);
        return div_scalar(centered, sd);
    }

    const Tensor& value(int id) const { return node(id).value; }
    Tensor& mutable_value(int id) { return nodes_[check_id(id)].value; }

    // Scalar reductions keep their double accumulator; useful where the
    // float32 cast would dominate (finite-difference probes).
    double scalar_double(int id) const {
        const Node& n = node(id);
        if (n.value.numel() != 1)
            detail::fail("scalar_double: node " + std::to_string(id) + " is not scalar");
        if (n.op == Op::Sum || n.op == Op::Mean || n.op == Op::MseLoss) return n.dvalue;
        return static_cast<double>(n.value.data[0]);
    }
    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[check_id(id)]; }

    int find(const std::string& name) const {
        for (int i = 0; i < size(); ++i)
            if (nodes_[i].name == name && (nodes_[i].op == Op::Input || nodes_[i].op == Op::Param))
                return i;
        detail::fail("graph: no input/param named '" + name + "'");
    }

    // Rebind named inputs, then recompute every node in order.
    void forward(const std::map<std::string, Tensor>& inputs = {}) {
        for (const auto& [name, t] : inputs) {
            Node& n = nodes_[check_id(find(name))];
            if (!n.value.same_shape(t))
                detail::fail("forward: input '" + name + "' expects shape " +
                             detail::shape_str(n.value.shape) + ", got " + detail::shape_str(t.shape));
            n.value = t;
        }
        for (int i = 0; i < size(); ++i)
            if (nodes_[i].op != Op::Input && nodes_[i].op != Op::Param) compute(i);
    }

    // Gradients of a scalar loss with respect to every trainable param, by name.
    std::map<std::string, Tensor> backward(int loss) const {
        if (node(loss).value.numel() != 1)
            detail::fail(std::string("backward: loss node must be scalar, has shape ") +
                         detail::shape_str(node(loss).value.shape));
        std::vector<Tensor> grad(nodes_.size());
        std::vector<char> has(nodes_.size(), 0);
        auto slot = [&](int id) -> Tensor& {
            if (!has[id]) {
                grad[id] = Tensor(nodes_[id].value.shape);
                has[id] = 1;
            }
            return grad[id];
        };
        slot(loss).data[0] = 1.0f;
        for (int id = loss; id >= 0; --id) {
            if (!has[id]) continue;
            accumulate(id, grad[id], slot);
        }
        std::map<std::string, Tensor> out;
        for (int i = 0; i < size(); ++i)
            if (nodes_[i].op == Op::Param && nodes_[i].trainable)
                out[nodes_[i].name] = has[i] ? std::move(grad[i]) : Tensor(nodes_[i].value.shape);
        return out;
    }

private:
    std::vector<Node> nodes_;

    int check_id(int id) const {
        if (id < 0 || id >= size()) detail::fail("graph: node id " + std::to_string(id) + " out of range");
        return id;
    }

    Node& node(int id) { return nodes_[check_id(id)]; }

    Node make(Op op, int a, int b = -1, int c = -1) {
        Node n;
        n.op = op;
        n.a = check_id(a);
        if (b >= 0) n.b = check_id(b);
        if (c >= 0) n.c = check_id(c);
        return n;
    }

    int unary(Op op, int a) { return push_compute(make(op, a)); }

    int binary_same(Op op, int a, int b) {
        if (!node(a).value.same_shape(node(b).value))
            detail::fail(std::string(op_name(op)) + ": shape mismatch " +
                         detail::shape_str(node(a).value.shape) + " vs " +
                         detail::shape_str(node(b).value.shape));
        return push_compute(make(op, a, b));
    }

    void require_scalar(int id, const char* where) {
        if (node(id).value.numel() != 1)
            detail::fail(std::string(where) + ": node " + std::to_string(id) + " must be scalar");
    }

    void require_rank(int id, int rank, const char* where) {
        if (node(id).value.rank() != rank)
            detail::fail(std::string(where) + ": node " + std::to_string(id) + " must have rank " +
                         std::to_string(rank) + ", has shape " + detail::shape_str(node(id).value.shape));
    }

    int push(Node n) {
        nodes_.push_back(std::move(n));
        return size() - 1;
    }

    int push_compute(Node n) {
        int id = push(std::move(n));
        compute(id);
        return id;
    }

    [[noreturn]] void bad_shape(int id, const std::string& why) const {
        detail::fail("node " + std::to_string(id) + " (" + op_name(nodes_[id].op) + "): " + why);
    }

    void compute(int id) {
        Node& n = nodes_[id];
        const Tensor& A = nodes_[n.a].value;
        switch (n.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Identity:
                n.value = A;
                break;
            case Op::Add:
            case Op::Sub:
            case Op::Mul: {
                const Tensor& B = nodes_[n.b].value;
                n.value = Tensor(A.shape);
                const auto sz = A.data.size();
                if (n.op == Op::Add)
                    for (size_t i = 0; i < sz; ++i) n.value.data[i] = A.data[i] + B.data[i];
                else if (n.op == Op::Sub)
                    for (size_t i = 0; i < sz; ++i) n.value.data[i] = A.data[i] - B.data[i];
                else
                    for (size_t i = 0; i < sz; ++i) n.value.data[i] = A.data[i] * B.data[i];
                break;
            }
            case Op::ScalarMul: {
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] * n.scalar;
                break;
            }
            case Op::ScalarAdd: {
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] + n.scalar;
                break;
            }
            case Op::SubScalar: {
                const float s = nodes_[n.b].value.data[0];
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] - s;
                break;
            }
            case Op::DivScalar: {
                const float s = nodes_[n.b].value.data[0];
                if (s == 0.0f) bad_shape(id, "division by zero scalar");
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] / s;
                break;
            }
            case Op::Sum:
            case Op::Mean: {
                double acc = 0.0;
                for (float v : A.data) acc += v;
                if (n.op == Op::Mean) acc /= static_cast<double>(A.numel());
                n.dvalue = acc;
                n.value = Tensor::scalar(static_cast<float>(acc));
                break;
            }
            case Op::Sqrt: {
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i) {
                    if (A.data[i] < 0.0f) bad_shape(id, "sqrt of negative value");
                    n.value.data[i] = std::sqrt(A.data[i]);
                }
                break;
            }
            case Op::Tanh: {
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = std::tanh(A.data[i]);
                break;
            }
            case Op::Sigmoid: {
                n.value = Tensor(A.shape);
                for (size_t i = 0; i < A.data.size(); ++i)
                    n.value.data[i] = 1.0f / (1.0f + std::exp(-A.data[i]));
                break;
            }
            case Op::Conv2d:
                compute_conv(id);
                break;
            case Op::Dense:
                compute_dense(id);
                break;
            case Op::AvgPool2d:
                compute_pool(id);
                break;
            case Op::TemporalShift:
                compute_shift(id);
                break;
            case Op::MulMask:
                compute_mul_mask(id);
                break;
            case Op::FrameMeanNorm:
                compute_frame_mean_norm(id);
                break;
            case Op::Dropout:
                compute_dropout(id);
                break;
            case Op::Reshape: {
                std::vector<int> shape = n.value.shape;
                n.value = Tensor::from(std::move(shape), A.data);
                break;
            }
            case Op::MseLoss: {
                const Tensor& B = nodes_[n.b].value;
                double acc = 0.0;
                for (size_t i = 0; i < A.data.size(); ++i) {
                    const double d = static_cast<double>(A.data[i]) - static_cast<double>(B.data[i]);
                    acc += d * d;
                }
                n.dvalue = acc / static_cast<double>(A.numel());
                n.value = Tensor::scalar(static_cast<float>(n.dvalue));
                break;
            }
        }
    }

    void compute_conv(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const Tensor& W = nodes_[n.b].value;
        if (X.rank() != 4) bad_shape(id, "input must be [N,C,H,W], got " + detail::shape_str(X.shape));
        if (W.rank() != 4 || W.dim(2) != W.dim(3))
            bad_shape(id, "weight must be [Cout,Cin,k,k], got " + detail::shape_str(W.shape));
        if (W.dim(1) != X.dim(1))
            bad_shape(id, "weight expects " + std::to_string(W.dim(1)) + " input channels, input has " +
                              std::to_string(X.dim(1)));
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
        const int Cout = W.dim(0), k = W.dim(2), s = n.stride, p = n.pad;
        const int oh = (H + 2 * p - k) / s + 1, ow = (Wd + 2 * p - k) / s + 1;
        if (oh < 1 || ow < 1) bad_shape(id, "kernel larger than padded input");
        if (n.c >= 0) {
            const Tensor& B = nodes_[n.c].value;
            if (B.rank() != 1 || B.dim(0) != Cout)
                bad_shape(id, "bias must be [" + std::to_string(Cout) + "], got " + detail::shape_str(B.shape));
        }
        const int P = oh * ow, ckk = C * k * k;
        n.value = Tensor({N, Cout, oh, ow});
        std::vector<float> col(static_cast<size_t>(ckk) * P);
        for (int im = 0; im < N; ++im) {
            detail::im2col(X.data.data() + static_cast<size_t>(im) * C * H * Wd, C, H, Wd, k, s, p, oh, ow,
                           col.data());
            float* out = n.value.data.data() + static_cast<size_t>(im) * Cout * P;
            if (n.c >= 0) {
                const Tensor& B = nodes_[n.c].value;
                for (int co = 0; co < Cout; ++co)
                    std::fill(out + static_cast<size_t>(co) * P, out + static_cast<size_t>(co + 1) * P,
                              B.data[co]);
            }
            detail::gemm_acc(W.data.data(), col.data(), out, Cout, ckk, P);
        }
    }

    void compute_dense(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const Tensor& W = nodes_[n.b].value;
        if (X.rank() != 2 || W.rank() != 2)
            bad_shape(id, "needs [N,D] x [D,M], got " + detail::shape_str(X.shape) + " x " +
                              detail::shape_str(W.shape));
        if (X.dim(1) != W.dim(0))
            bad_shape(id, "inner dims differ: " + std::to_string(X.dim(1)) + " vs " + std::to_string(W.dim(0)));
        const int N = X.dim(0), D = X.dim(1), M = W.dim(1);
        n.value = Tensor({N, M});
        if (n.c >= 0) {
            const Tensor& B = nodes_[n.c].value;
            if (B.rank() != 1 || B.dim(0) != M)
                bad_shape(id, "bias must be [" + std::to_string(M) + "], got " + detail::shape_str(B.shape));
            for (int r = 0; r < N; ++r)
                std::copy(B.data.begin(), B.data.end(), n.value.data.begin() + static_cast<size_t>(r) * M);
        }
        detail::gemm_acc(X.data.data(), W.data.data(), n.value.data.data(), N, D, M);
    }

    void compute_pool(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const int k = n.pool_k;
        if (X.rank() != 4) bad_shape(id, "input must be [N,C,H,W], got " + detail::shape_str(X.shape));
        if (X.dim(2) % k != 0 || X.dim(3) % k != 0)
            bad_shape(id, "spatial dims " + std::to_string(X.dim(2)) + "x" + std::to_string(X.dim(3)) +
                              " not divisible by pool size " + std::to_string(k));
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
        const int oh = H / k, ow = W / k;
        const float inv = 1.0f / static_cast<float>(k * k);
        n.value = Tensor({N, C, oh, ow});
        for (int im = 0; im < N; ++im)
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        float acc = 0.0f;
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx) acc += X(im, c, oy * k + dy, ox * k + dx);
                        n.value(im, c, oy, ox) = acc * inv;
                    }
    }

    void compute_shift(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const int T = X.dim(0), C = X.dim(1), plane = X.dim(2) * X.dim(3);
        const int g = n.shift_ch;
        n.value = Tensor(X.shape);
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c) {
                int src = t;
                if (c < g) src = t - 1;          // from the previous frame
                else if (c < 2 * g) src = t + 1; // from the next frame
                float* dst = n.value.data.data() + (static_cast<size_t>(t) * C + c) * plane;
                if (src < 0 || src >= T) {
                    std::fill(dst, dst + plane, 0.0f);
                } else {
                    const float* from = X.data.data() + (static_cast<size_t>(src) * C + c) * plane;
                    std::copy(from, from + plane, dst);
                }
            }
    }

    void compute_mul_mask(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const Tensor& M = nodes_[n.b].value;
        if (X.rank() != 4 || M.rank() != 4 || M.dim(1) != 1 || M.dim(0) != X.dim(0) ||
            M.dim(2) != X.dim(2) || M.dim(3) != X.dim(3))
            bad_shape(id, "needs x [T,C,h,w] and mask [T,1,h,w], got " + detail::shape_str(X.shape) +
                              " and " + detail::shape_str(M.shape));
        const int T = X.dim(0), C = X.dim(1), plane = X.dim(2) * X.dim(3);
        n.value = Tensor(X.shape);
        for (int t = 0; t < T; ++t) {
            const float* m = M.data.data() + static_cast<size_t>(t) * plane;
            for (int c = 0; c < C; ++c) {
                const float* x = X.data.data() + (static_cast<size_t>(t) * C + c) * plane;
                float* out = n.value.data.data() + (static_cast<size_t>(t) * C + c) * plane;
                for (int i = 0; i < plane; ++i) out[i] = x[i] * m[i];
            }
        }
    }

    void compute_frame_mean_norm(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        if (X.rank() != 4) bad_shape(id, "input must be [T,C,h,w], got " + detail::shape_str(X.shape));
        const int planes = X.dim(0) * X.dim(1), plane = X.dim(2) * X.dim(3);
        n.value = Tensor(X.shape);
        for (int pix = 0; pix < planes; ++pix) {
            const float* x = X.data.data() + static_cast<size_t>(pix) * plane;
            float* out = n.value.data.data() + static_cast<size_t>(pix) * plane;
            double acc = 0.0;
            for (int i = 0; i < plane; ++i) acc += x[i];
            float m = static_cast<float>(acc / plane);
            if (std::abs(m) < 1e-30f) m = (m < 0.0f ? -1e-30f : 1e-30f);
            for (int i = 0; i < plane; ++i) out[i] = x[i] / m;
        }
    }

    void compute_dropout(int id) {
        Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        if (!train_mode || n.drop_rate == 0.0f) {
            n.value = X;
            n.aux = Tensor();
            return;
        }
        std::mt19937_64 rng(detail::mix_stream(dropout_seed, static_cast<uint64_t>(id)));
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        const float scale = 1.0f / (1.0f - n.drop_rate);
        n.aux = Tensor(X.shape);
        n.value = Tensor(X.shape);
        for (size_t i = 0; i < X.data.size(); ++i) {
            const float keep = (u(rng) >= n.drop_rate) ? scale : 0.0f;
            n.aux.data[i] = keep;
            n.value.data[i] = X.data[i] * keep;
        }
    }

    template <typename Slot>
    void accumulate(int id, const Tensor& g, Slot&& slot) const {
        const Node& n = nodes_[id];
        switch (n.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Identity:
            case Op::Reshape: {
                Tensor& da = slot(n.a);
                for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
                break;
            }
            case Op::Add: {
                Tensor& da = slot(n.a);
                Tensor& db = slot(n.b);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    da.data[i] += g.data[i];
                    db.data[i] += g.data[i];
                }
                break;
            }
            case Op::Sub: {
                Tensor& da = slot(n.a);
                Tensor& db = slot(n.b);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    da.data[i] += g.data[i];
                    db.data[i] -= g.data[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& A = nodes_[n.a].value;
                const Tensor& B = nodes_[n.b].value;
                Tensor& da = slot(n.a);
                Tensor& db = slot(n.b);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    da.data[i] += g.data[i] * B.data[i];
                    db.data[i] += g.data[i] * A.data[i];
                }
                break;
            }
            case Op::ScalarMul: {
                Tensor& da = slot(n.a);
                for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * n.scalar;
                break;
            }
            case Op::ScalarAdd: {
                Tensor& da = slot(n.a);
                for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
                break;
            }
            case Op::SubScalar: {
                Tensor& da = slot(n.a);
                double acc = 0.0;
                for (size_t i = 0; i < g.data.size(); ++i) {
                    da.data[i] += g.data[i];
                    acc += g.data[i];
                }
                slot(n.b).data[0] -= static_cast<float>(acc);
                break;
            }
            case Op::DivScalar: {
                const Tensor& A = nodes_[n.a].value;
                const float s = nodes_[n.b].value.data[0];
                Tensor& da = slot(n.a);
                double acc = 0.0;
                for (size_t i = 0; i < g.data.size(); ++i) {
                    da.data[i] += g.data[i] / s;
                    acc += static_cast<double>(g.data[i]) * A.data[i];
                }
                slot(n.b).data[0] -= static_cast<float>(acc / (static_cast<double>(s) * s));
                break;
            }
            case Op::Sum: {
                Tensor& da = slot(n.a);
                const float gv = g.data[0];
                for (auto& v : da.data) v += gv;
                break;
            }
            case Op::Mean: {
                Tensor& da = slot(n.a);
                const float gv = g.data[0] / static_cast<float>(da.numel());
                for (auto& v : da.data) v += gv;
                break;
            }
            case Op::Sqrt: {
                Tensor& da = slot(n.a);
                for (size_t i = 0; i < g.data.size(); ++i)
                    if (n.value.data[i] > 0.0f) da.data[i] += g.data[i] * 0.5f / n.value.data[i];
                break;
            }
            case Op::Tanh: {
                Tensor& da = slot(n.a);
                for (size_t i = 0; i < g.data.size(); ++i)
                    da.data[i] += g.data[i] * (1.0f - n.value.data[i] * n.value.data[i]);
                break;
            }
            case Op::Sigmoid: {
                Tensor& da = slot(n.a);
                for (size_t i = 0; i < g.data.size(); ++i)
                    da.data[i] += g.data[i] * n.value.data[i] * (1.0f - n.value.data[i]);
                break;
            }
            case Op::Conv2d:
                conv_backward(id, g, slot);
                break;
            case Op::Dense:
                dense_backward(id, g, slot);
                break;
            case Op::AvgPool2d: {
                const Tensor& X = nodes_[n.a].value;
                Tensor& da = slot(n.a);
                const int k = n.pool_k;
                const int N = X.dim(0), C = X.dim(1), oh = X.dim(2) / k, ow = X.dim(3) / k;
                const float inv = 1.0f / static_cast<float>(k * k);
                for (int im = 0; im < N; ++im)
                    for (int c = 0; c < C; ++c)
                        for (int oy = 0; oy < oh; ++oy)
                            for (int ox = 0; ox < ow; ++ox) {
                                const float gv = g(im, c, oy, ox) * inv;
                                for (int dy = 0; dy < k; ++dy)
                                    for (int dx = 0; dx < k; ++dx)
                                        da(im, c, oy * k + dy, ox * k + dx) += gv;
                            }
                break;
            }
            case Op::TemporalShift: {
                const Tensor& X = nodes_[n.a].value;
                Tensor& da = slot(n.a);
                const int T = X.dim(0), C = X.dim(1), plane = X.dim(2) * X.dim(3);
                const int gch = n.shift_ch;
                for (int t = 0; t < T; ++t)
                    for (int c = 0; c < C; ++c) {
                        int src = t;
                        if (c < gch) src = t - 1;
                        else if (c < 2 * gch) src = t + 1;
                        if (src < 0 || src >= T) continue;
                        const float* gp = g.data.data() + (static_cast<size_t>(t) * C + c) * plane;
                        float* dp = da.data.data() + (static_cast<size_t>(src) * C + c) * plane;
                        for (int i = 0; i < plane; ++i) dp[i] += gp[i];
                    }
                break;
            }
            case Op::MulMask: {
                const Tensor& X = nodes_[n.a].value;
                const Tensor& M = nodes_[n.b].value;
                Tensor& da = slot(n.a);
                Tensor& dm = slot(n.b);
                const int T = X.dim(0), C = X.dim(1), plane = X.dim(2) * X.dim(3);
                for (int t = 0; t < T; ++t) {
                    const float* m = M.data.data() + static_cast<size_t>(t) * plane;
                    float* dmp = dm.data.data() + static_cast<size_t>(t) * plane;
                    for (int c = 0; c < C; ++c) {
                        const size_t off = (static_cast<size_t>(t) * C + c) * plane;
                        const float* x = X.data.data() + off;
                        const float* gp = g.data.data() + off;
                        float* dap = da.data.data() + off;
                        for (int i = 0; i < plane; ++i) {
                            dap[i] += gp[i] * m[i];
                            dmp[i] += gp[i] * x[i];
                        }
                    }
                }
                break;
            }
            case Op::FrameMeanNorm: {
                const Tensor& X = nodes_[n.a].value;
                Tensor& da = slot(n.a);
                const int planes = X.dim(0) * X.dim(1), plane = X.dim(2) * X.dim(3);
                for (int pix = 0; pix < planes; ++pix) {
                    const float* x = X.data.data() + static_cast<size_t>(pix) * plane;
                    const float* y = n.value.data.data() + static_cast<size_t>(pix) * plane;
                    const float* gp = g.data.data() + static_cast<size_t>(pix) * plane;
                    float* dp = da.data.data() + static_cast<size_t>(pix) * plane;
                    double macc = 0.0, dot = 0.0;
                    for (int i = 0; i < plane; ++i) {
                        macc += x[i];
                        dot += static_cast<double>(gp[i]) * y[i];
                    }
                    float m = static_cast<float>(macc / plane);
                    if (std::abs(m) < 1e-30f) m = (m < 0.0f ? -1e-30f : 1e-30f);
                    const float corr = static_cast<float>(dot / plane) / m;
                    for (int i = 0; i < plane; ++i) dp[i] += gp[i] / m - corr;
                }
                break;
            }
            case Op::Dropout: {
                Tensor& da = slot(n.a);
                if (n.aux.data.empty()) {
                    for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i];
                } else {
                    for (size_t i = 0; i < g.data.size(); ++i) da.data[i] += g.data[i] * n.aux.data[i];
                }
                break;
            }
            case Op::MseLoss: {
                const Tensor& A = nodes_[n.a].value;
                const Tensor& B = nodes_[n.b].value;
                Tensor& da = slot(n.a);
                Tensor& db = slot(n.b);
                const float c = 2.0f * g.data[0] / static_cast<float>(A.numel());
                for (size_t i = 0; i < A.data.size(); ++i) {
                    const float d = c * (A.data[i] - B.data[i]);
                    da.data[i] += d;
                    db.data[i] -= d;
                }
                break;
            }
        }
    }

    template <typename Slot>
    void conv_backward(int id, const Tensor& g, Slot&& slot) const {
        const Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const Tensor& W = nodes_[n.b].value;
        const int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
        const int Cout = W.dim(0), k = W.dim(2), s = n.stride, p = n.pad;
        const int oh = n.value.dim(2), ow = n.value.dim(3);
        const int P = oh * ow, ckk = C * k * k;
        Tensor& dx = slot(n.a);
        Tensor& dw = slot(n.b);
        const std::vector<float> wT = detail::transposed(W.data.data(), Cout, ckk);
        std::vector<float> colT(static_cast<size_t>(P) * ckk);
        std::vector<float> dcol(static_cast<size_t>(ckk) * P);
        for (int im = 0; im < N; ++im) {
            const float* gp = g.data.data() + static_cast<size_t>(im) * Cout * P;
            // dX: scatter W^T * g back through the patch layout.
            std::fill(dcol.begin(), dcol.end(), 0.0f);
            detail::gemm_acc(wT.data(), gp, dcol.data(), ckk, Cout, P);
            detail::col2im_acc(dcol.data(), C, H, Wd, k, s, p, oh, ow,
                               dx.data.data() + static_cast<size_t>(im) * C * H * Wd);
            // dW += g * col^T.
            detail::im2col_t(X.data.data() + static_cast<size_t>(im) * C * H * Wd, C, H, Wd, k, s, p, oh,
                             ow, colT.data());
            detail::gemm_acc(gp, colT.data(), dw.data.data(), Cout, P, ckk);
        }
        if (n.c >= 0) {
            Tensor& db = slot(n.c);
            for (int co = 0; co < Cout; ++co) {
                double acc = 0.0;
                for (int im = 0; im < N; ++im) {
                    const float* gp = g.data.data() + (static_cast<size_t>(im) * Cout + co) * P;
                    for (int i = 0; i < P; ++i) acc += gp[i];
                }
                db.data[co] += static_cast<float>(acc);
            }
        }
    }

    template <typename Slot>
    void dense_backward(int id, const Tensor& g, Slot&& slot) const {
        const Node& n = nodes_[id];
        const Tensor& X = nodes_[n.a].value;
        const Tensor& W = nodes_[n.b].value;
        const int N = X.dim(0), D = X.dim(1), M = W.dim(1);
        Tensor& dx = slot(n.a);
        Tensor& dw = slot(n.b);
        const std::vector<float> wT = detail::transposed(W.data.data(), D, M);
        detail::gemm_acc(g.data.data(), wT.data(), dx.data.data(), N, M, D);
        const std::vector<float> xT = detail::transposed(X.data.data(), N, D);
        detail::gemm_acc(xT.data(), g.data.data(), dw.data.data(), D, N, M);
        if (n.c >= 0) {
            Tensor& db = slot(n.c);
            for (int m = 0; m < M; ++m) {
                double acc = 0.0;
                for (int r = 0; r < N; ++r) acc += g(r, m);
                db.data[m] += static_cast<float>(acc);
            }
        }
    }
};

}  // namespace pulse
