#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "vd/graph.hpp"
#include "vd/rng.hpp"
#include "vd/tensor.hpp"
#include "vd/types.hpp"

namespace vd {

// Named parameters, each tagged with exactly one LayerGroup. Insertion order
// is preserved; it defines iteration order everywhere (optimizer, checkpoint).
template <typename T>
class ParameterStore {
public:
    struct Entry {
        std::string name;
        LayerGroup group;
        Tensor<T> value;
    };

    Tensor<T>& add(const std::string& name, LayerGroup group, Tensor<T> init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back(Entry{name, group, std::move(init)});
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& value(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].value;
    }
    const Tensor<T>& value(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].value;
    }

    LayerGroup group_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].group;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& e : entries_) e.value.zero_grad();
    }

    int64_t total_count() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    std::map<LayerGroup, int64_t> group_counts() const {
        std::map<LayerGroup, int64_t> m;
        for (const auto& e : entries_) m[e.group] += e.value.numel();
        return m;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// One recorded forward pass: lazily binds store parameters into the graph so
// each parameter becomes exactly one leaf per graph (shared across flows
// recorded on the same graph).
template <typename T>
struct Pass {
    Graph<T>& g;
    ParameterStore<T>& params;
    bool train = true;

    Var p(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Tensor<T>& t = params.value(name);
        Var v = train ? g.param(t, &t) : g.ref_input(t);
        bound_.emplace(name, v);
        return v;
    }

    // Bind an arbitrary constant (context tokens, noise) without gradients.
    Var c(Tensor<T> value) { return g.input(std::move(value)); }

private:
    std::unordered_map<std::string, Var> bound_;
};

}  // namespace vd
