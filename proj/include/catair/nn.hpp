#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "catair/autodiff.hpp"
#include "catair/rng.hpp"

namespace catair {

// Ordered parameter table. Construction order is the serialization order, so
// checkpoints written from models built the same way line up name for name.
class ParamRegistry {
public:
    Var add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Var v(std::move(init), /*requires_grad=*/true);
        index_[name] = items_.size();
        items_.emplace_back(name, v);
        return v;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Var& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return items_[it->second].second;
    }

    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    int total_scalars() const {
        int n = 0;
        for (const auto& [name, v] : items_) n += v.val().numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, v] : items_) v.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Var>> items_;
    std::unordered_map<std::string, size_t> index_;
};

inline Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    const Real a = std::sqrt(Real(6) / (fan_in + fan_out));
    return Tensor::uniform(std::move(shape), rng, -a, a);
}

// ---- layer wrappers; each owns named Vars registered at construction ----

struct Dense {
    Var w, b;

    Dense() = default;
    Dense(ParamRegistry& reg, const std::string& prefix, int cin, int cout, Rng& rng,
          bool zero_init = false) {
        Tensor wt = zero_init ? Tensor({cout, cin})
                              : xavier_uniform({cout, cin}, cin, cout, rng);
        w = reg.add(prefix + ".w", std::move(wt));
        b = reg.add(prefix + ".b", Tensor({cout}));
    }

    Var operator()(const Var& x) const { return dense_lastdim(x, w, b); }
};

struct Conv2d {
    Var w, b;

    Conv2d() = default;
    Conv2d(ParamRegistry& reg, const std::string& prefix, int cin, int cout, int k, Rng& rng,
           bool zero_init = false) {
        Tensor wt = zero_init ? Tensor({cout, cin, k, k})
                              : xavier_uniform({cout, cin, k, k}, cin * k * k, cout * k * k, rng);
        w = reg.add(prefix + ".w", std::move(wt));
        b = reg.add(prefix + ".b", Tensor({cout}));
    }

    Var operator()(const Var& x) const { return conv2d(x, w, b); }
};

struct DwConv {
    Var w, b;

    DwConv() = default;
    DwConv(ParamRegistry& reg, const std::string& prefix, int c, int k, Rng& rng) {
        w = reg.add(prefix + ".w", xavier_uniform({c, k, k}, k * k, k * k, rng));
        b = reg.add(prefix + ".b", Tensor({c}));
    }

    Var operator()(const Var& x) const { return dwconv(x, w, b); }
};

struct LayerNorm {
    Var gamma, beta;
    Real eps = 1e-6;

    LayerNorm() = default;
    LayerNorm(ParamRegistry& reg, const std::string& prefix, int c) {
        gamma = reg.add(prefix + ".gamma", Tensor::full({c}, 1));
        beta = reg.add(prefix + ".beta", Tensor({c}));
    }

    Var operator()(const Var& x) const { return layer_norm(x, gamma, beta, eps); }
};

}  // namespace catair
