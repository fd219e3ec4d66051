#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ntok/graph.hpp"
#include "ntok/rng.hpp"
#include "ntok/tensor.hpp"

namespace ntok {

inline constexpr float kLayerNormEps = 1e-5f;
inline constexpr double kInitStd = 0.02;

struct BlockConfig {
    int dim = 0;
    int heads = 0;
    int mlp_ratio = 4;

    void validate() const {
        if (dim <= 0 || heads <= 0 || dim % heads != 0)
            throw ConfigError("block config: dim must be positive and divisible by heads");
    }
};

// Ordered named parameter map. Insertion order is the serialization and
// update order; trainable flags are the freeze substrate.
template <typename T>
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool trainable = true;
    };

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }

    Entry& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return entries_[it->second];
    }

    void add(const std::string& name, Tensor<T> tensor) {
        if (has(name)) throw ContractError("duplicate parameter: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(tensor), true});
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    size_t total_params() const {
        size_t n = 0;
        for (const Entry& e : entries_) n += e.tensor.numel();
        return n;
    }
    size_t trainable_params() const {
        size_t n = 0;
        for (const Entry& e : entries_)
            if (e.trainable) n += e.tensor.numel();
        return n;
    }

    void set_all_trainable(bool v) {
        for (Entry& e : entries_) e.trainable = v;
    }
    // prefixes match whole dotted segments: "experts.1." freezes experts.1.*
    // but not experts.10.*
    void freeze_prefixes(const std::vector<std::string>& prefixes) {
        for (Entry& e : entries_)
            for (const std::string& p : prefixes)
                if (e.name.compare(0, p.size(), p) == 0) e.trainable = false;
    }

    template <typename U>
    ParamRegistry<U> cast() const {
        ParamRegistry<U> out;
        for (const Entry& e : entries_) {
            out.add(e.name, e.tensor.template cast<U>());
            out.entry(e.name).trainable = e.trainable;
        }
        return out;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

using ParamRegistryF = ParamRegistry<float>;
using ParamRegistryD = ParamRegistry<double>;

// Binds registry entries into a graph as leaves, once per name per graph.
// After backward(), grads are collected through the same binding table.
template <typename T>
struct Binder {
    Graph<T>* g = nullptr;
    ParamRegistry<T>* reg = nullptr;
    bool grad_all = false; // gradient checks want grads regardless of freeze flags
    std::unordered_map<std::string, VarId> bound;

    Binder(Graph<T>& graph, ParamRegistry<T>& registry, bool all = false)
        : g(&graph), reg(&registry), grad_all(all) {}

    VarId operator()(const std::string& name) {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        auto& e = reg->entry(name);
        VarId id = g->leaf(e.tensor, grad_all || e.trainable);
        bound[name] = id;
        return id;
    }

    const Tensor<T>* grad_of(const std::string& name) {
        auto it = bound.find(name);
        if (it == bound.end()) return nullptr;
        return g->grad_ptr(it->second);
    }
};

// --- deterministic per-tensor initialization ---
// Each tensor is seeded by (seed, name) so values do not depend on creation
// order; a replaced submodule can be re-drawn with a new seed in isolation.

Tensor<float> init_trunc_normal(const std::vector<int>& dims, uint64_t seed, const std::string& name);
Tensor<float> init_zeros(const std::vector<int>& dims);
Tensor<float> init_ones(const std::vector<int>& dims);
Tensor<float> init_uniform_sym(const std::vector<int>& dims, float bound, uint64_t seed, const std::string& name);

// Registers ln1/attn/ln2/mlp parameters for one pre-norm block under `prefix.`
void add_block_params(ParamRegistry<float>& reg, const std::string& prefix, const BlockConfig& bc, uint64_t seed);

size_t block_param_count(const BlockConfig& bc);

// --- graph builders ---

template <typename T>
VarId linear(Graph<T>& g, VarId x, VarId w, VarId b) {
    return g.add_broadcast(g.matmul(x, w), b);
}

// Pre-norm multi-head self-attention sub-layer (returns the branch output,
// caller adds the residual).
template <typename T>
VarId attention(Graph<T>& g, Binder<T>& P, const std::string& prefix, VarId x_norm,
                int heads, const Tensor<uint8_t>* forbid);

// out = h + MLP(LN2(h)), h = x + Attn(LN1(x))
template <typename T>
VarId transformer_block(Graph<T>& g, Binder<T>& P, const std::string& prefix, VarId x,
                        const BlockConfig& bc, const Tensor<uint8_t>* forbid);

// strictly lower-triangular visibility: row i may attend to j <= i
Tensor<uint8_t> causal_mask(int s);

} // namespace ntok
