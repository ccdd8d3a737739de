#pragma once

#include "flownet/model.hpp"
#include "flownet/ops.hpp"

namespace flownet {

// ---------------------------------------------------------------------------
// Head folding: [B,N,P,d] <-> [B,h,N,P,d']
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> fold_heads(const Tensor<T>& x, std::size_t heads) {
    const auto& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("fold_heads: want [B,N,P,d], got " + shape_str(s));
    if (s[3] % heads != 0) throw std::invalid_argument("fold_heads: d not divisible by heads");
    const std::size_t dh = s[3] / heads;
    return permute(reshape(x, {s[0], s[1], s[2], heads, dh}), {0, 3, 1, 2, 4});
}

template <typename T>
Tensor<T> unfold_heads(const Tensor<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 5) throw std::invalid_argument("unfold_heads: want [B,h,N,P,d'], got " + shape_str(s));
    return reshape(permute(x, {0, 2, 3, 1, 4}), {s[0], s[2], s[3], s[1] * s[4]});
}

// ---------------------------------------------------------------------------
// Tokenization and augmentation
// ---------------------------------------------------------------------------

// patches [B,N,P,M] -> tokens [B,N,P,d]; a learnable positional term is added
// so the causal attention can tell patch positions apart.
template <typename T>
Tensor<T> embed_patches(const Tensor<T>& patches, const Tensor<T>& w, const Tensor<T>& b,
                        const Tensor<T>& pos) {
    return add(add(matmul(patches, w), b), pos);
}

// Appends each node's static embedding to all of its patch tokens: [B,N,P,2d].
template <typename T>
Tensor<T> augment_features(const Tensor<T>& feats, const Tensor<T>& node_embed) {
    const auto& s = feats.shape();
    if (s.size() != 4) throw std::invalid_argument("augment_features: want [B,N,P,d], got " + shape_str(s));
    if (node_embed.rank() != 2 || node_embed.shape()[0] != s[1] || node_embed.shape()[1] != s[3])
        throw std::invalid_argument("augment_features: node embedding " + shape_str(node_embed.shape()) +
                                    " does not match features " + shape_str(s));
    auto e = broadcast_to(reshape(node_embed, {s[1], 1, s[3]}), s);
    return concat_last(feats, e);
}

// ---------------------------------------------------------------------------
// Adaptive spatial masking
// ---------------------------------------------------------------------------

// Per-node, per-patch perception radius: softplus(aug . w + b) > 0, [B,N,P].
template <typename T>
Tensor<T> compute_radius(const Tensor<T>& aug, const Tensor<T>& w, const Tensor<T>& b) {
    const auto& s = aug.shape();
    auto z = add(matmul(aug, w), b);  // [B,N,P,1]
    return softplus(reshape(z, {s[0], s[1], s[2]}));
}

// mask[b,t,i,j] = sigmoid(r_i^t - d_ij), shape [B,P,N,N].
template <typename T>
Tensor<T> compute_mask(const Tensor<T>& radii, const Tensor<T>& dist) {
    const auto& s = radii.shape();
    if (s.size() != 3) throw std::invalid_argument("compute_mask: want radii [B,N,P], got " + shape_str(s));
    if (dist.rank() != 2 || dist.shape()[0] != s[1] || dist.shape()[1] != s[1])
        throw std::invalid_argument("compute_mask: distances " + shape_str(dist.shape()) +
                                    " do not match N=" + std::to_string(s[1]));
    auto r = reshape(permute(radii, {0, 2, 1}), {s[0], s[2], s[1], 1});  // [B,P,N,1]
    return sigmoid(sub(r, dist));
}

// Hard support set: nodes within radius (mask >= 0.5, i.e. d_ij <= r_i^t).
// Shaped [B,1,P,N,N] so it broadcasts over attention heads.
template <typename T>
BoolMask mask_support(const Tensor<T>& mask) {
    const auto& s = mask.shape();
    if (s.size() != 4) throw std::invalid_argument("mask_support: want [B,P,N,N], got " + shape_str(s));
    std::vector<std::uint8_t> on(mask.size());
    const T* m = mask.data();
    for (std::size_t i = 0; i < mask.size(); ++i) on[i] = m[i] >= T(0.5);
    return BoolMask{Shape{s[0], 1, s[1], s[2], s[3]}, std::move(on)};
}

// ---------------------------------------------------------------------------
// Flow estimation (causal temporal multi-head self-attention per node)
// ---------------------------------------------------------------------------

template <typename T>
struct FemParams {
    Tensor<T> in_w, in_b;    // [2d,d], [d]
    Tensor<T> q, k, v;       // [h,d',d'] per-head maps
    Tensor<T> out_w, out_b;  // [d,d], [d]
};

inline BoolMask causal_support(std::size_t P) {
    std::vector<std::uint8_t> on(P * P, 0);
    for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = 0; j <= i; ++j) on[i * P + j] = 1;
    return BoolMask{Shape{P, P}, std::move(on)};
}

// aug [B,N,P,2d] -> flow tokens [B,h,N,P,d']. Attention runs over patch
// positions only; position p attends to positions <= p.
template <typename T>
Tensor<T> fem_forward(const Tensor<T>& aug, const FemParams<T>& fp, std::size_t heads) {
    const std::size_t d = fp.in_w.shape()[1];
    const std::size_t dh = d / heads;
    const std::size_t P = aug.shape()[2];

    auto z = fold_heads(add(matmul(aug, fp.in_w), fp.in_b), heads);  // [B,h,N,P,d']
    auto wq = reshape(fp.q, {heads, 1, dh, dh});
    auto wk = reshape(fp.k, {heads, 1, dh, dh});
    auto wv = reshape(fp.v, {heads, 1, dh, dh});
    auto q = matmul(z, wq);
    auto k = matmul(z, wk);
    auto v = matmul(z, wv);

    auto scores = scale(matmul(q, k, false, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    const BoolMask causal = causal_support(P);
    auto attn = softmax_last(scores, &causal);  // [B,h,N,P,P]
    auto ctx = matmul(attn, v);                 // [B,h,N,P,d']

    auto out = add(matmul(unfold_heads(ctx), fp.out_w), fp.out_b);  // [B,N,P,d]
    return fold_heads(out, heads);
}

// ---------------------------------------------------------------------------
// Origin / destination scoring
// ---------------------------------------------------------------------------

template <typename T>
struct OdParams {
    Tensor<T> in_w, in_b;      // [2d,d], [d]
    Tensor<T> ln_gain, ln_bias;  // [d]
    Tensor<T> origin_w, dest_w;  // [d,d], no bias
};

// Returns head-folded origin and destination vectors, each [B,h,N,P,d'],
// with the static per-node embeddings added to every head.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> od_vectors(const Tensor<T>& aug, const OdParams<T>& op,
                                           const Tensor<T>& e_origin, const Tensor<T>& e_dest,
                                           std::size_t heads) {
    auto z = layer_norm_last(add(matmul(aug, op.in_w), op.in_b), op.ln_gain, op.ln_bias);
    auto o = fold_heads(matmul(z, op.origin_w), heads);
    auto dvec = fold_heads(matmul(z, op.dest_w), heads);
    const std::size_t N = e_origin.shape()[0], dh = e_origin.shape()[1];
    auto eo = reshape(e_origin, {N, 1, dh});
    auto ed = reshape(e_dest, {N, 1, dh});
    return {add(o, eo), add(dvec, ed)};
}

// q[b,h,t,i,j] = <O_i^t, D_j^t> / sqrt(d') * mask[b,t,i,j], shape [B,h,P,N,N].
template <typename T>
Tensor<T> flow_logits(const Tensor<T>& origin, const Tensor<T>& dest, const Tensor<T>& mask) {
    const auto& s = origin.shape();
    const std::size_t dh = s[4];
    auto op = permute(origin, {0, 1, 3, 2, 4});  // [B,h,P,N,d']
    auto dp = permute(dest, {0, 1, 3, 2, 4});
    auto raw = scale(matmul(op, dp, false, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    const auto& ms = mask.shape();
    return mul(raw, reshape(mask, {ms[0], 1, ms[1], ms[2], ms[3]}));
}

// Row-stochastic transfer probabilities over each node's support set.
template <typename T>
Tensor<T> allocation_matrix(const Tensor<T>& logits, const BoolMask& support) {
    return softmax_last(logits, &support);
}

// ---------------------------------------------------------------------------
// Conservation-law flow combination
// ---------------------------------------------------------------------------

// phi_o, phi_a [B,h,N,P,d']; alloc [B,h,P,N,N].
// Full mode: phi_i = phi_o,i - phi_a,i + sum_k alloc[k,i] * phi_a,k.
template <typename T>
Tensor<T> flow_combine(const Tensor<T>& phi_o, const Tensor<T>& phi_a, const Tensor<T>& alloc,
                       const AblationFlags& flags) {
    if (!flags.valid())
        throw std::invalid_argument("flow_combine: unsupported ablation combination");
    if (!flags.allocation) return phi_o;

    auto ap = permute(phi_a, {0, 1, 3, 2, 4});            // [B,h,P,N,d']
    auto recv = permute(matmul(alloc, ap, true, false),   // alloc^T . phi_a per patch
                        {0, 1, 3, 2, 4});                 // [B,h,N,P,d']
    if (!flags.retained) return recv;
    if (!flags.conservation) return add(phi_o, recv);
    return add(sub(phi_o, phi_a), recv);
}

}  // namespace flownet
