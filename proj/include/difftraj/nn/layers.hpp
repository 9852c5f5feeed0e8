#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "difftraj/ad/ops.hpp"
#include "difftraj/core/rng.hpp"

namespace difftraj::nn {

using ad::Value;

/// Owns all trainable leaves of a model, in creation order, each under a
/// unique name. Checkpointing and the optimizer walk this list.
template <class T>
class ParamRegistry {
  public:
    struct Entry {
        std::string name;
        Value<T> value;
    };

    Value<T> create(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto v = ad::make_leaf<T>(std::move(init), true);
        index_[name] = entries_.size();
        entries_.push_back({name, v});
        return v;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    Value<T> find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return entries_[it->second].value;
    }

    std::int64_t total_numel() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.value->val.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.value->zero_grad();
    }

  private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

namespace init {
template <class T>
Tensor<T> he_normal(std::vector<int> shape, std::int64_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * std);
    return t;
}

template <class T>
Tensor<T> normal(std::vector<int> shape, double std, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * std);
    return t;
}

template <class T>
Tensor<T> constant(std::vector<int> shape, T v) {
    return Tensor<T>(std::move(shape), v);
}
}  // namespace init

template <class T>
struct Linear {
    Value<T> w, b;

    Linear() = default;
    Linear(ParamRegistry<T>& reg, const std::string& name, int in, int out, Rng& rng) {
        w = reg.create(name + ".w", init::he_normal<T>({out, in}, in, rng));
        b = reg.create(name + ".b", init::constant<T>({out}, T(0)));
    }

    Value<T> operator()(const Value<T>& x) const { return ad::linear(x, w, b); }
};

template <class T>
struct Conv2d {
    Value<T> w, b;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamRegistry<T>& reg, const std::string& name, int in_ch, int out_ch, int k,
           int stride_, int pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = reg.create(name + ".w",
                       init::he_normal<T>({out_ch, in_ch, k, k},
                                          static_cast<std::int64_t>(in_ch) * k * k, rng));
        b = reg.create(name + ".b", init::constant<T>({out_ch}, T(0)));
    }

    Value<T> operator()(const Value<T>& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

template <class T>
struct Embedding {
    Value<T> table;

    Embedding() = default;
    Embedding(ParamRegistry<T>& reg, const std::string& name, int num, int dim, Rng& rng) {
        table = reg.create(name, init::normal<T>({num, dim}, 0.02, rng));
    }

    Value<T> operator()(const std::vector<int>& idx) const { return ad::embedding(table, idx); }
};

template <class T>
struct LayerNorm {
    Value<T> gain, bias;

    LayerNorm() = default;
    LayerNorm(ParamRegistry<T>& reg, const std::string& name, int dim) {
        gain = reg.create(name + ".g", init::constant<T>({dim}, T(1)));
        bias = reg.create(name + ".b", init::constant<T>({dim}, T(0)));
    }

    Value<T> operator()(const Value<T>& x) const { return ad::layer_norm(x, gain, bias); }
};

}  // namespace difftraj::nn
