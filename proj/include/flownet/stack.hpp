#pragma once

#include "flownet/flowcore.hpp"

namespace flownet {

// ---------------------------------------------------------------------------
// Hyper-connections: n parallel residual streams with learnable width mixing
// (mix [n,n]), block-input weights (input [n]) and block-output weights
// (output [n]). Identity initialization reproduces a plain residual link.
// ---------------------------------------------------------------------------

template <typename T>
struct HyperParams {
    Tensor<T> mix;     // [n,n]
    Tensor<T> input;   // [n]
    Tensor<T> output;  // [n]
};

// streams [n,R] where R = numel(token_shape); block maps token_shape tensors.
template <typename T, typename Block>
Tensor<T> hyper_apply(const Tensor<T>& streams, const Shape& token_shape, Block&& block,
                      const HyperParams<T>& hp) {
    const std::size_t n = hp.input.size();
    const std::size_t R = numel(token_shape);
    if (streams.shape() != Shape{n, R})
        throw std::invalid_argument("hyper_apply: streams " + shape_str(streams.shape()) +
                                    " do not match n=" + std::to_string(n) + ", R=" + std::to_string(R));
    auto mixed = matmul(hp.mix, streams);
    auto u = reshape(matmul(reshape(hp.input, {1, n}), streams), token_shape);
    auto o = block(u);
    auto contribution = matmul(reshape(hp.output, {n, 1}), reshape(o, {1, R}));
    return add(mixed, contribution);
}

// ---------------------------------------------------------------------------
// Mixture of Linears: every linear projection is E gated affine experts.
// ---------------------------------------------------------------------------

template <typename T>
struct MolParams {
    Tensor<T> w;     // [E,in,out]
    Tensor<T> b;     // [E,out]
    Tensor<T> gate;  // [in,E]
};

template <typename T>
Tensor<T> mol_linear(const Tensor<T>& x, const MolParams<T>& mp) {
    const std::size_t E = mp.w.shape()[0], in = mp.w.shape()[1], out = mp.w.shape()[2];
    if (x.rank() < 2 || x.shape().back() != in)
        throw std::invalid_argument("mol_linear: input " + shape_str(x.shape()) + " vs experts " +
                                    shape_str(mp.w.shape()));
    if (E == 1) {
        // Degenerate mixture: the gate weight is identically 1, so this is a
        // plain affine map (and the gate parameters receive zero gradient).
        return add(matmul(x, reshape(mp.w, {in, out})), reshape(mp.b, {out}));
    }
    Shape lead(x.shape().begin(), x.shape().end() - 1);

    Shape xa_shape = lead;
    xa_shape.insert(xa_shape.end(), {1, 1, in});
    auto ya = matmul(reshape(x, xa_shape), mp.w);  // [lead...,E,1,out]
    Shape ye_shape = lead;
    ye_shape.insert(ye_shape.end(), {E, out});
    ya = add(reshape(ya, ye_shape), mp.b);

    auto g = softmax_last(matmul(x, mp.gate));  // [lead...,E]
    Shape g_shape = lead;
    g_shape.insert(g_shape.end(), {1, E});
    auto y = matmul(reshape(g, g_shape), ya);  // [lead...,1,out]
    Shape out_shape = lead;
    out_shape.push_back(out);
    return reshape(y, out_shape);
}

template <typename T>
struct MmlpParams {
    MolParams<T> l1, l2;
};

// Token-wise two-layer MLP with GeLU, both linears as expert mixtures.
template <typename T>
Tensor<T> mmlp_forward(const Tensor<T>& tokens, const MmlpParams<T>& mp) {
    return mol_linear(gelu(mol_linear(tokens, mp.l1)), mp.l2);
}

// ---------------------------------------------------------------------------
// Output head: per node, flatten patches x channels and map to the horizon.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> projection_head(const Tensor<T>& tokens, const Tensor<T>& w, const Tensor<T>& b) {
    const auto& s = tokens.shape();
    if (s.size() != 4) throw std::invalid_argument("projection_head: want [B,N,P,d], got " + shape_str(s));
    auto flat = reshape(tokens, {s[0], s[1], s[2] * s[3]});
    return add(matmul(flat, w), b);
}

// ---------------------------------------------------------------------------
// Full network
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardTrace {
    Tensor<T> radii;                      // [B,N,P]
    Tensor<T> mask;                       // [B,P,N,N]
    std::vector<Tensor<T>> allocations;   // per FAM layer, [B,h,P,N,N]
    std::vector<Tensor<T>> phi_retained;  // per FAM layer, [B,h,N,P,d']
    std::vector<Tensor<T>> phi_combined;  // per FAM layer, [B,h,N,P,d']
    Tensor<T> merged;                     // [B,N,P,d] before the output head
};

namespace detail {

template <typename T>
FemParams<T> fem_params(const ParamStore<T>& ps, const std::string& prefix) {
    return FemParams<T>{ps.at(prefix + ".in.w"), ps.at(prefix + ".in.b"), ps.at(prefix + ".q"),
                        ps.at(prefix + ".k"),    ps.at(prefix + ".v"),    ps.at(prefix + ".out.w"),
                        ps.at(prefix + ".out.b")};
}

template <typename T>
OdParams<T> od_params(const ParamStore<T>& ps, const std::string& prefix) {
    return OdParams<T>{ps.at(prefix + ".in.w"),    ps.at(prefix + ".in.b"),
                       ps.at(prefix + ".ln.gain"), ps.at(prefix + ".ln.bias"),
                       ps.at(prefix + ".origin.w"), ps.at(prefix + ".dest.w")};
}

template <typename T>
MolParams<T> mol_params(const ParamStore<T>& ps, const std::string& prefix) {
    return MolParams<T>{ps.at(prefix + ".experts.w"), ps.at(prefix + ".experts.b"),
                        ps.at(prefix + ".gate.w")};
}

template <typename T>
HyperParams<T> hyper_params(const ParamStore<T>& ps, const std::string& prefix) {
    return HyperParams<T>{ps.at(prefix + ".mix"), ps.at(prefix + ".input"), ps.at(prefix + ".output")};
}

}  // namespace detail

// Shared spatial context of one forward pass: the mask is computed once from
// the first-layer augmented features and reused by every FAM layer.
template <typename T>
struct FamContext {
    Tensor<T> mask;
    BoolMask support;
};

// One flow-allocation block: re-augment tokens with the node embedding, run
// both flow estimators, score origin/destination pairs, and redistribute the
// allocated tokens under the conservation rule.
template <typename T>
Tensor<T> fam_block(const Tensor<T>& tokens, const ParamStore<T>& ps, const ModelConfig& cfg,
                    std::size_t layer, const FamContext<T>& ctx, ForwardTrace<T>* trace = nullptr) {
    const std::string fam = "fam" + std::to_string(layer);
    auto aug = augment_features(tokens, ps.at("node.embed"));
    auto phi_o = fem_forward(aug, detail::fem_params(ps, fam + ".femo"), cfg.heads);
    Tensor<T> combined;
    if (!cfg.ablation.allocation) {
        combined = flow_combine(phi_o, phi_o, Tensor<T>(), cfg.ablation);
    } else {
        auto phi_a = fem_forward(aug, detail::fem_params(ps, fam + ".fema"), cfg.heads);
        auto [ov, dv] = od_vectors(aug, detail::od_params(ps, fam + ".od"), ps.at("node.origin"),
                                   ps.at("node.dest"), cfg.heads);
        auto lam = allocation_matrix(flow_logits(ov, dv, ctx.mask), ctx.support);
        combined = flow_combine(phi_o, phi_a, lam, cfg.ablation);
        if (trace) trace->allocations.push_back(lam);
    }
    if (trace) {
        trace->phi_retained.push_back(phi_o);
        trace->phi_combined.push_back(combined);
    }
    return unfold_heads(combined);
}

template <typename T>
Tensor<T> mmlp_block(const Tensor<T>& tokens, const ParamStore<T>& ps, std::size_t layer) {
    const std::string mmlp = "mmlp" + std::to_string(layer);
    return mmlp_forward(tokens, MmlpParams<T>{detail::mol_params(ps, mmlp + ".l1"),
                                              detail::mol_params(ps, mmlp + ".l2")});
}

// x [B,N,T_in] (normalized) -> predictions [B,N,tau] (normalized scale).
template <typename T>
Tensor<T> flownet_forward(const Tensor<T>& x, const ParamStore<T>& ps, const ModelConfig& cfg,
                          const Tensor<T>& dist, ForwardTrace<T>* trace = nullptr) {
    cfg.validate();
    if (x.rank() != 3) throw std::invalid_argument("forward: want [B,N,T], got " + shape_str(x.shape()));
    const std::size_t B = x.shape()[0], N = x.shape()[1];
    if (x.shape()[2] != cfg.t_in)
        throw std::invalid_argument("forward: input length " + std::to_string(x.shape()[2]) +
                                    " does not match configured t_in=" + std::to_string(cfg.t_in));
    if (dist.rank() != 2 || dist.shape()[0] != N || dist.shape()[1] != N)
        throw std::invalid_argument("forward: distance matrix " + shape_str(dist.shape()) +
                                    " does not match N=" + std::to_string(N));
    if (ps.at("node.embed").shape()[0] != N)
        throw std::invalid_argument("forward: parameters were built for " +
                                    std::to_string(ps.at("node.embed").shape()[0]) + " nodes, data has " +
                                    std::to_string(N));

    const std::size_t P = cfg.patch_count(), d = cfg.d, n = cfg.expansion;

    auto patches = partition_patches(x, cfg.patch_len, cfg.stride);
    auto feats = embed_patches(patches, ps.at("embed.w"), ps.at("embed.b"), ps.at("embed.pos"));

    // Adaptive spatial masking, once per forward pass.
    auto aug0 = augment_features(feats, ps.at("node.embed"));
    auto radii = compute_radius(aug0, ps.at("asm.w"), ps.at("asm.b"));
    FamContext<T> ctx;
    ctx.mask = compute_mask(radii, dist);
    ctx.support = mask_support(ctx.mask);
    if (trace) {
        trace->radii = radii;
        trace->mask = ctx.mask;
    }

    const Shape token_shape{B, N, P, d};
    const std::size_t R = numel(token_shape);
    auto streams = broadcast_to(reshape(feats, {1, R}), {n, R});

    for (std::size_t l = 0; l < cfg.fam_layers; ++l) {
        streams = hyper_apply(
            streams, token_shape, [&](const Tensor<T>& u) { return fam_block(u, ps, cfg, l, ctx, trace); },
            detail::hyper_params(ps, "fam" + std::to_string(l) + ".hyper"));
        streams = hyper_apply(
            streams, token_shape, [&](const Tensor<T>& u) { return mmlp_block(u, ps, l); },
            detail::hyper_params(ps, "mmlp" + std::to_string(l) + ".hyper"));
    }

    Tensor<T> mean_row(Shape{1, n}, T(1) / static_cast<T>(n));
    auto merged = reshape(matmul(mean_row, streams), token_shape);
    if (trace) trace->merged = merged;

    return projection_head(merged, ps.at("head.w"), ps.at("head.b"));
}

}  // namespace flownet
