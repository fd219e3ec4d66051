#include "ntok/nn.hpp"

#include <cmath>

namespace ntok {

Tensor<float> init_trunc_normal(const std::vector<int>& dims, uint64_t seed, const std::string& name) {
    Tensor<float> t(dims);
    Rng rng(seed_combine(seed, fnv1a64(name)));
    for (float& v : t.data)
        v = static_cast<float>(rng.truncated_normal(kInitStd, 2.0 * kInitStd));
    return t;
}

Tensor<float> init_zeros(const std::vector<int>& dims) { return Tensor<float>::zeros(dims); }

Tensor<float> init_ones(const std::vector<int>& dims) { return Tensor<float>::full(dims, 1.0f); }

Tensor<float> init_uniform_sym(const std::vector<int>& dims, float bound, uint64_t seed, const std::string& name) {
    Tensor<float> t(dims);
    Rng rng(seed_combine(seed, fnv1a64(name)));
    for (float& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

void add_block_params(ParamRegistry<float>& reg, const std::string& prefix, const BlockConfig& bc, uint64_t seed) {
    bc.validate();
    int d = bc.dim;
    int hid = bc.mlp_ratio * d;
    auto w = [&](const std::string& n, std::vector<int> dims) {
        reg.add(n, init_trunc_normal(dims, seed, n));
    };
    reg.add(prefix + ".ln1.g", init_ones({d}));
    reg.add(prefix + ".ln1.b", init_zeros({d}));
    w(prefix + ".attn.wq", {d, d});
    reg.add(prefix + ".attn.bq", init_zeros({d}));
    w(prefix + ".attn.wk", {d, d});
    reg.add(prefix + ".attn.bk", init_zeros({d}));
    w(prefix + ".attn.wv", {d, d});
    reg.add(prefix + ".attn.bv", init_zeros({d}));
    w(prefix + ".attn.wo", {d, d});
    reg.add(prefix + ".attn.bo", init_zeros({d}));
    reg.add(prefix + ".ln2.g", init_ones({d}));
    reg.add(prefix + ".ln2.b", init_zeros({d}));
    w(prefix + ".mlp.w1", {d, hid});
    reg.add(prefix + ".mlp.b1", init_zeros({hid}));
    w(prefix + ".mlp.w2", {hid, d});
    reg.add(prefix + ".mlp.b2", init_zeros({d}));
}

size_t block_param_count(const BlockConfig& bc) {
    size_t d = static_cast<size_t>(bc.dim);
    size_t hid = static_cast<size_t>(bc.mlp_ratio) * d;
    return 4 * d * d + 4 * d   // attention weights + biases
         + 4 * d               // two layer norms
         + d * hid + hid + hid * d + d;
}

template <typename T>
VarId attention(Graph<T>& g, Binder<T>& P, const std::string& prefix, VarId x_norm,
                int heads, const Tensor<uint8_t>* forbid) {
    int dim = g.val(x_norm).dim(2);
    VarId q = linear(g, x_norm, P(prefix + ".attn.wq"), P(prefix + ".attn.bq"));
    VarId k = linear(g, x_norm, P(prefix + ".attn.wk"), P(prefix + ".attn.bk"));
    VarId v = linear(g, x_norm, P(prefix + ".attn.wv"), P(prefix + ".attn.bv"));
    T scl = T(1) / std::sqrt(static_cast<T>(dim / heads));
    VarId qs = g.heads_split(q, heads);
    VarId ks = g.heads_split(k, heads);
    VarId vs = g.heads_split(v, heads);
    VarId probs = g.masked_softmax(g.attn_scores(qs, ks, scl), forbid);
    VarId mixed = g.heads_merge(g.attn_combine(probs, vs));
    return linear(g, mixed, P(prefix + ".attn.wo"), P(prefix + ".attn.bo"));
}

template <typename T>
VarId transformer_block(Graph<T>& g, Binder<T>& P, const std::string& prefix, VarId x,
                        const BlockConfig& bc, const Tensor<uint8_t>* forbid) {
    VarId n1 = g.layer_norm(x, P(prefix + ".ln1.g"), P(prefix + ".ln1.b"), T(kLayerNormEps));
    VarId h = g.add(x, attention(g, P, prefix, n1, bc.heads, forbid));
    VarId n2 = g.layer_norm(h, P(prefix + ".ln2.g"), P(prefix + ".ln2.b"), T(kLayerNormEps));
    VarId m = linear(g, g.gelu(linear(g, n2, P(prefix + ".mlp.w1"), P(prefix + ".mlp.b1"))),
                     P(prefix + ".mlp.w2"), P(prefix + ".mlp.b2"));
    return g.add(h, m);
}

Tensor<uint8_t> causal_mask(int s) {
    Tensor<uint8_t> m({s, s});
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
            m.data[static_cast<size_t>(i) * s + j] = j > i ? 1 : 0;
    return m;
}

template VarId attention<float>(Graph<float>&, Binder<float>&, const std::string&, VarId, int, const Tensor<uint8_t>*);
template VarId attention<double>(Graph<double>&, Binder<double>&, const std::string&, VarId, int, const Tensor<uint8_t>*);
template VarId transformer_block<float>(Graph<float>&, Binder<float>&, const std::string&, VarId, const BlockConfig&, const Tensor<uint8_t>*);
template VarId transformer_block<double>(Graph<double>&, Binder<double>&, const std::string&, VarId, const BlockConfig&, const Tensor<uint8_t>*);

} // namespace ntok
