#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// Nodes are reference counted. A node that does not require a gradient keeps
// no parents, so inference graphs release intermediates as soon as the last
// Var handle to them goes away.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "schvpp/tensor.hpp"

namespace schvpp {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    /// grad += g (allocating on first use).
    void accumulate(std::span<const T> g);
    Tensor<T>& grad_buffer();
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t dim(std::size_t i) const { return node_->value.shape.at(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Gradient after backward(); zeros when nothing reached this node.
    Tensor<T> grad() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Leaf without gradient tracking.
template <typename T>
Var<T> constant(Tensor<T> value);

/// Leaf that accumulates a gradient.
template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true);

/// Seeds d(root)/d(root) = 1 (root must be a scalar) and propagates.
template <typename T>
void backward(const Var<T>& root);

/// Same, with an explicit upstream gradient for a non-scalar root.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed);

/// While alive, folds the side of zero of every PReLU input evaluated on
/// this thread into a signature. Two evaluations with equal signatures took
/// the same branch everywhere; the gradient checker uses this to spot
/// finite-difference stencils that straddle a kink.
class KinkProbe {
public:
    KinkProbe();
    ~KinkProbe();
    KinkProbe(const KinkProbe&) = delete;
    KinkProbe& operator=(const KinkProbe&) = delete;

    std::uint64_t signature() const { return signature_; }
    void reset() { signature_ = 0; }
    void record(std::span<const bool> positive);

    static KinkProbe* active();

private:
    std::uint64_t signature_ = 0;
    KinkProbe* previous_ = nullptr;
};

namespace ops {

// Elementwise; shapes must match.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

template <typename T> Var<T> prelu(const Var<T>& x, const Var<T>& slope);  // slope has one element
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);

/// x [Cin,H,W], w [Cout,Cin,k,k], b [Cout]; zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad);

/// x [N,Cin] (or [Cin]), w [Cout,Cin], b [Cout] -> [N,Cout] (or [Cout]).
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Per-row normalization of x [N,C] with affine gamma/beta [C].
template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Softmax over every element of the tensor; shape preserved.
template <typename T> Var<T> softmax_all(const Var<T>& x);

template <typename T> Var<T> global_avg_pool(const Var<T>& x);            // [C,H,W] -> [C]
template <typename T> Var<T> channel_dot(const Var<T>& q, const Var<T>& k);  // [C] . [C,H,W] -> [H,W]
template <typename T> Var<T> mul_channel(const Var<T>& x, const Var<T>& v);  // [C,H,W] * [C]
template <typename T> Var<T> mul_spatial(const Var<T>& x, const Var<T>& m);  // [C,H,W] * [H,W]

template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t end);

template <typename T> Var<T> grid_to_rows(const Var<T>& x);  // [C,h,w] -> [h*w, C]
template <typename T> Var<T> rows_to_grid(const Var<T>& x, std::size_t h, std::size_t w);
/// out[i] = x[index[i]] along the first axis of x [N,C].
template <typename T> Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> index);

template <typename T> Var<T> pixel_shuffle(const Var<T>& x, std::size_t r);
template <typename T> Var<T> pixel_unshuffle(const Var<T>& x, std::size_t r);

/// Multi-head attention inside consecutive groups of `tokens_per_window`
/// rows. qkv is [N, 3C] laid out as [q | k | v]; returns [N, C].
template <typename T>
Var<T> window_attention(const Var<T>& qkv, std::size_t heads, std::size_t tokens_per_window);

/// Softmax probabilities of window_attention, [windows, heads, T, T].
template <typename T>
Tensor<T> window_attention_probs(const Tensor<T>& qkv, std::size_t heads, std::size_t tokens_per_window);

/// mean(sqrt((a-b)^2 + eps^2)) as a scalar.
template <typename T> Var<T> charbonnier(const Var<T>& a, const Var<T>& b, T eps);
/// sum_i w[i] * x[i] for a constant weight tensor; scalar.
template <typename T> Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w);
template <typename T> Var<T> sum_scalars(std::span<const Var<T>> terms);

} // namespace ops
} // namespace schvpp
