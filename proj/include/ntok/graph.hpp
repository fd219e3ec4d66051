#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ntok/tensor.hpp"

namespace ntok {

using VarId = int32_t;

// Reverse-mode tape. Ops append nodes in topological order; backward walks
// the tape in reverse. One graph per forward/backward pass; forward-only
// passes simply never call backward().
//
// Sequence-shaped ops below assume [B, S, D] (batch, sequence, feature) and
// attention-shaped ops assume [B, H, S, Dh].
template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad; // allocated in backward() for requires_grad nodes
        bool requires_grad = false;
        std::function<void(Graph<T>&)> back;
    };

    VarId leaf(Tensor<T> value, bool requires_grad = false);

    const Tensor<T>& val(VarId id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(VarId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    // nullptr when the node does not take gradient (or backward() not run yet)
    Tensor<T>* grad_ptr(VarId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        return n.grad.empty() ? nullptr : &n.grad;
    }
    size_t size() const { return nodes_.size(); }

    // root must be scalar; seeds d(root)/d(root) = 1 and runs the tape backward
    void backward(VarId root);

    // --- elementwise / linear algebra ---
    VarId add(VarId a, VarId b);
    VarId sub(VarId a, VarId b);
    VarId add_broadcast(VarId x, VarId p); // p.dims must be a suffix of x.dims
    VarId scale(VarId x, T c);
    VarId matmul(VarId x, VarId w); // [..., K] x [K, N] -> [..., N]
    VarId layer_norm(VarId x, VarId gamma, VarId beta, T eps);
    VarId gelu(VarId x);
    VarId sigmoid(VarId x);

    // --- shape plumbing ---
    VarId reshape(VarId x, std::vector<int> dims);
    VarId concat_seq(const std::vector<VarId>& parts); // along axis 1 of [B,S,D]
    VarId slice_seq(VarId x, int start, int len);

    // --- attention primitives ---
    VarId heads_split(VarId x, int heads); // [B,S,D] -> [B,H,S,D/H]
    VarId heads_merge(VarId x);            // [B,H,S,Dh] -> [B,S,H*Dh]
    VarId attn_scores(VarId q, VarId k, T scl); // -> [B,H,Sq,Sk]
    // forbid: optional [Sq,Sk] mask, nonzero = key masked out for that query.
    // Fully forbidden rows produce all-zero attention weights.
    VarId masked_softmax(VarId scores, const Tensor<uint8_t>* forbid);
    VarId attn_combine(VarId probs, VarId v); // [B,H,Sq,Sk] x [B,H,Sk,Dh] -> [B,H,Sq,Dh]

    // --- lookups / losses ---
    VarId embed_rows(VarId table, std::vector<int> ids, std::vector<int> out_lead_dims);
    VarId mean_all(VarId x);
    VarId mse(VarId pred, Tensor<T> target); // mean over all elements
    VarId softmax_xent(VarId logits, std::vector<int> targets); // logits [R,V], mean over R

    // --- quantizer support ---
    // value = z + offset (offset treated as constant): the straight-through
    // carrier, gradient passes to z unchanged.
    VarId add_offset_const(VarId z, Tensor<T> offset);
    // mean || cb[ids] - z_snapshot ||^2 over all elements; grads reach the codebook only
    VarId vq_codebook_loss(VarId cb, std::vector<int> ids, Tensor<T> z_snapshot);
    // beta * mean || z - zq_snapshot ||^2; grads reach z only
    VarId commit_loss(VarId z, Tensor<T> zq_snapshot, T beta);

    // --- pixel <-> patch layout ---
    VarId patchify_px(VarId img, int patch);   // [B,C,H,W] -> [B,P,C*p*p]
    VarId unpatchify_px(VarId x, int channels, int image_size, int patch);

private:
    std::vector<Node> nodes_;
    Node& node(VarId id) { return nodes_[static_cast<size_t>(id)]; }
    VarId push(Tensor<T> value, bool rg, std::function<void(Graph<T>&)> back);
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

} // namespace ntok
