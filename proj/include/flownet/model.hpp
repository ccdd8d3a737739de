#pragma once

#include <unordered_map>

#include "flownet/data.hpp"
#include "flownet/tensor.hpp"

namespace flownet {

struct AblationFlags {
    bool retained = true;
    bool allocation = true;
    bool conservation = true;

    bool operator==(const AblationFlags&) const = default;

    // The supported variants: the full model or exactly one term removed.
    bool valid() const {
        const int off = (!retained) + (!allocation) + (!conservation);
        return off <= 1;
    }
};

struct ModelConfig {
    std::size_t d = 64;
    std::size_t heads = 4;
    std::size_t patch_len = 4;  // M
    std::size_t stride = 4;     // S
    std::size_t fam_layers = 2;
    std::size_t experts = 16;
    std::size_t t_in = 12;
    std::size_t horizon = 12;  // tau
    std::size_t expansion = 2;  // hyper-connection streams
    std::size_t mmlp_hidden_mult = 2;
    std::string distance_metric = "euclidean";
    AblationFlags ablation;
    std::string dtype = "fp32";
    std::uint64_t seed = 0;

    std::size_t d_head() const { return d / heads; }
    std::size_t patch_count() const { return (t_in - patch_len) / stride + 1; }
    std::size_t mmlp_hidden() const { return mmlp_hidden_mult * d; }

    void validate() const {
        if (d == 0 || heads == 0 || fam_layers == 0 || experts == 0 || expansion == 0 ||
            mmlp_hidden_mult == 0 || horizon == 0)
            throw std::invalid_argument("config: extents must be positive");
        if (d % heads != 0)
            throw std::invalid_argument("config: d=" + std::to_string(d) + " not divisible by heads=" +
                                        std::to_string(heads));
        if (patch_len == 0 || stride == 0 || patch_len > t_in)
            throw std::invalid_argument("config: patch_len/stride invalid for t_in=" + std::to_string(t_in));
        if ((t_in - patch_len) % stride != 0)
            throw std::invalid_argument("config: (t_in - patch_len) must be divisible by stride; t_in=" +
                                        std::to_string(t_in) + " M=" + std::to_string(patch_len) +
                                        " S=" + std::to_string(stride));
        if (!ablation.valid())
            throw std::invalid_argument("config: unsupported ablation combination (at most one of "
                                        "retained/allocation/conservation may be disabled)");
        if (dtype != "fp32" && dtype != "fp64")
            throw std::invalid_argument("config: dtype must be fp32 or fp64, got '" + dtype + "'");
        distance_metric_from_string(distance_metric);
    }
};

// Ordered, named learnable tensors of one model instance. Order is the
// checkpoint and optimizer order, so it must be construction-deterministic.
template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw std::invalid_argument("param '" + name + "' already registered");
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        items_.back().second.set_requires_grad(true);
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<T>& at(const std::string& name) {
        const auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
        return items_[it->second].second;
    }

    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    std::vector<Tensor<T>> tensors() {
        std::vector<Tensor<T>> out;
        out.reserve(items_.size());
        for (auto& [name, t] : items_) out.push_back(t);
        return out;
    }

    void zero_grads() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.size();
        return n;
    }

    // Independent storage with identical names, shapes, and values.
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [name, t] : items_) out.add(name, t.clone());
        return out;
    }

    void copy_values_from(const ParamStore& other) {
        if (other.size() != size()) throw std::invalid_argument("param store size mismatch");
        for (std::size_t i = 0; i < items_.size(); ++i) {
            if (items_[i].first != other.items_[i].first ||
                items_[i].second.shape() != other.items_[i].second.shape())
                throw std::invalid_argument("param store layout mismatch at '" + items_[i].first + "'");
            items_[i].second.values() = other.items_[i].second.values();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
Tensor<T> xavier_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
    return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> kaiming_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
    return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace detail

// Builds all learnable tensors. MoL expert maps use Kaiming init, everything
// else Xavier; the radius predictor starts at weight zero with its bias set
// to the mean pairwise distance so every node initially sees the whole graph
// at a comparable scale.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::size_t nodes, T mean_distance) {
    cfg.validate();
    Rng rng(cfg.seed);
    ParamStore<T> ps;
    const std::size_t d = cfg.d, h = cfg.heads, dh = cfg.d_head(), M = cfg.patch_len;
    const std::size_t P = cfg.patch_count(), H = cfg.mmlp_hidden(), n = cfg.expansion;

    ps.add("embed.w", detail::xavier_uniform<T>(rng, {M, d}, M, d));
    ps.add("embed.b", Tensor<T>(Shape{d}));
    ps.add("embed.pos", detail::xavier_uniform<T>(rng, {P, d}, P, d));
    ps.add("node.embed", detail::xavier_uniform<T>(rng, {nodes, d}, nodes, d));
    ps.add("node.origin", detail::xavier_uniform<T>(rng, {nodes, dh}, nodes, dh));
    ps.add("node.dest", detail::xavier_uniform<T>(rng, {nodes, dh}, nodes, dh));
    ps.add("asm.w", Tensor<T>(Shape{2 * d, 1}));
    ps.add("asm.b", Tensor<T>(Shape{1}, std::vector<T>{mean_distance}));

    const auto hyper = [&](const std::string& prefix) {
        Tensor<T> mix(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i) mix.data()[i * n + i] = T(1);
        ps.add(prefix + ".mix", std::move(mix));
        Tensor<T> input(Shape{n});
        input.data()[0] = T(1);
        ps.add(prefix + ".input", std::move(input));
        ps.add(prefix + ".output", Tensor<T>(Shape{n}, T(1)));
    };
    const auto fem = [&](const std::string& prefix) {
        ps.add(prefix + ".in.w", detail::xavier_uniform<T>(rng, {2 * d, d}, 2 * d, d));
        ps.add(prefix + ".in.b", Tensor<T>(Shape{d}));
        ps.add(prefix + ".q", detail::xavier_uniform<T>(rng, {h, dh, dh}, dh, dh));
        ps.add(prefix + ".k", detail::xavier_uniform<T>(rng, {h, dh, dh}, dh, dh));
        ps.add(prefix + ".v", detail::xavier_uniform<T>(rng, {h, dh, dh}, dh, dh));
        ps.add(prefix + ".out.w", detail::xavier_uniform<T>(rng, {d, d}, d, d));
        ps.add(prefix + ".out.b", Tensor<T>(Shape{d}));
    };
    const auto mol = [&](const std::string& prefix, std::size_t in, std::size_t out) {
        ps.add(prefix + ".experts.w", detail::kaiming_uniform<T>(rng, {cfg.experts, in, out}, in));
        ps.add(prefix + ".experts.b", Tensor<T>(Shape{cfg.experts, out}));
        ps.add(prefix + ".gate.w", detail::xavier_uniform<T>(rng, {in, cfg.experts}, in, cfg.experts));
    };

    for (std::size_t l = 0; l < cfg.fam_layers; ++l) {
        const std::string fam = "fam" + std::to_string(l);
        fem(fam + ".femo");
        fem(fam + ".fema");
        ps.add(fam + ".od.in.w", detail::xavier_uniform<T>(rng, {2 * d, d}, 2 * d, d));
        ps.add(fam + ".od.in.b", Tensor<T>(Shape{d}));
        ps.add(fam + ".od.ln.gain", Tensor<T>(Shape{d}, T(1)));
        ps.add(fam + ".od.ln.bias", Tensor<T>(Shape{d}));
        ps.add(fam + ".od.origin.w", detail::xavier_uniform<T>(rng, {d, d}, d, d));
        ps.add(fam + ".od.dest.w", detail::xavier_uniform<T>(rng, {d, d}, d, d));
        hyper(fam + ".hyper");
        const std::string mmlp = "mmlp" + std::to_string(l);
        mol(mmlp + ".l1", d, H);
        mol(mmlp + ".l2", H, d);
        hyper(mmlp + ".hyper");
    }

    ps.add("head.w", detail::xavier_uniform<T>(rng, {P * d, cfg.horizon}, P * d, cfg.horizon));
    ps.add("head.b", Tensor<T>(Shape{cfg.horizon}));
    return ps;
}

template <typename T>
T mean_distance(const Tensor<T>& dist) {
    double s = 0;
    for (std::size_t i = 0; i < dist.size(); ++i) s += static_cast<double>(dist.data()[i]);
    return static_cast<T>(s / static_cast<double>(dist.size()));
}

}  // namespace flownet
