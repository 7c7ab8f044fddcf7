#pragma once

#include <map>
#include <tuple>

#include "maskdiff/autograd.hpp"
#include "maskdiff/conditioning.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Binary masks keyed by subject identifier.
using SubjectMaskSet = std::map<int, BinaryMask>;

struct LossWeights {
    double lambda_attn = 0.01;
    double lambda_m = 1.0;

    void validate() const {
        if (lambda_attn < 0 || lambda_m < 0)
            throw config_error("loss weights must be non-negative");
    }
};

template <typename T>
struct LossBreakdown {
    T l_rec = T(0);
    T l_attn = T(0);
    T l_mask_attn = T(0);
    T l_mattn = T(0);
    T l_total = T(0);

    // l_mattn = l_attn + lambda_m * l_mask_attn
    // l_total = l_rec + lambda_attn * l_mattn
    bool arithmetic_holds(const LossWeights& w, double tol = 1e-9) const {
        const double m = static_cast<double>(l_attn) + w.lambda_m * static_cast<double>(l_mask_attn);
        const double t = static_cast<double>(l_rec) + w.lambda_attn * static_cast<double>(l_mattn);
        return std::abs(m - static_cast<double>(l_mattn)) <= tol * std::max(1.0, std::abs(m)) &&
               std::abs(t - static_cast<double>(l_total)) <= tol * std::max(1.0, std::abs(t));
    }
};

template <typename T>
Tensor<T> mask_to_tensor(const BinaryMask& m) {
    Tensor<T> t({m.h, m.w});
    for (size_t i = 0; i < m.v.size(); ++i) t[static_cast<long long>(i)] = static_cast<T>(m.v[i]);
    return t;
}

// Mask broadcast across channels: [c, h, w] with every channel equal to m.
template <typename T>
Tensor<T> mask_to_channels(const BinaryMask& m, int channels) {
    Tensor<T> t({channels, m.h, m.w});
    for (int c = 0; c < channels; ++c)
        for (size_t i = 0; i < m.v.size(); ++i)
            t.v[static_cast<size_t>(c) * m.v.size() + i] = static_cast<T>(m.v[i]);
    return t;
}

// ============================================================================
// Graph-side losses (training path)
// ============================================================================

// Mean over all elements of ((eps - eps_pred) * M)^2, M broadcast to channels.
template <typename T>
ag::Var<T> masked_diffusion_loss_graph(const Tensor<T>& eps, const ag::Var<T>& eps_pred,
                                       const BinaryMask& union_mask) {
    if (!eps.same_shape(eps_pred->val))
        throw argument_error("masked_diffusion_loss: shape mismatch between eps and prediction");
    if (eps.rank() != 3 || eps.dim(1) != union_mask.h || eps.dim(2) != union_mask.w)
        throw argument_error("masked_diffusion_loss: mask resolution mismatch");
    auto diff = ag::sub(ag::constant(eps), eps_pred);
    auto masked = ag::mul(diff, ag::constant(mask_to_channels<T>(union_mask, eps.dim(0))));
    return ag::mean_all(ag::mul(masked, masked));
}

// Mean over subjects of the MSE between each subject's aggregated attention
// map and its mask at the same resolution.
template <typename T>
ag::Var<T> cross_attention_loss_graph(const std::map<int, ag::Var<T>>& maps,
                                      const SubjectMaskSet& masks) {
    if (maps.empty()) throw argument_error("cross_attention_loss: no subject maps");
    ag::Var<T> acc;
    for (const auto& [subject, m] : maps) {
        auto it = masks.find(subject);
        if (it == masks.end())
            throw validation_error("cross_attention_loss: subject " + std::to_string(subject) +
                                   " has a map but no mask");
        if (m->val.rank() != 2 || m->val.dim(0) != it->second.h || m->val.dim(1) != it->second.w)
            throw argument_error("cross_attention_loss: map/mask resolution mismatch for subject " +
                                 std::to_string(subject));
        auto diff = ag::sub(m, ag::constant(mask_to_tensor<T>(it->second)));
        auto mse = ag::mean_all(ag::mul(diff, diff));
        acc = acc ? ag::add(acc, mse) : mse;
    }
    return ag::mul_scalar(acc, static_cast<T>(1.0 / static_cast<double>(maps.size())));
}

template <typename T>
struct AttentionLossGraph {
    ag::Var<T> l_attn;
    ag::Var<T> l_mask_attn;  // null when no mask-token maps were given
    ag::Var<T> l_mattn;
};

// l_mattn = l_attn + lambda_m * l_mask_attn; with no mask tokens present the
// second term is identically zero and the result reduces to l_attn.
template <typename T>
AttentionLossGraph<T> mask_attention_total_graph(const std::map<int, ag::Var<T>>& handle_maps,
                                                 const std::map<int, ag::Var<T>>& mask_token_maps,
                                                 const SubjectMaskSet& masks,
                                                 const LossWeights& w) {
    w.validate();
    AttentionLossGraph<T> out;
    out.l_attn = cross_attention_loss_graph(handle_maps, masks);
    if (mask_token_maps.empty()) {
        out.l_mattn = out.l_attn;
        return out;
    }
    out.l_mask_attn = cross_attention_loss_graph(mask_token_maps, masks);
    out.l_mattn =
        ag::add(out.l_attn, ag::mul_scalar(out.l_mask_attn, static_cast<T>(w.lambda_m)));
    return out;
}

template <typename T>
ag::Var<T> total_loss_graph(const ag::Var<T>& l_rec, const ag::Var<T>& l_mattn,
                            const LossWeights& w) {
    w.validate();
    return ag::add(l_rec, ag::mul_scalar(l_mattn, static_cast<T>(w.lambda_attn)));
}

// ============================================================================
// Plain-value wrappers (evaluation and tests)
// ============================================================================

template <typename T>
T masked_diffusion_loss(const Tensor<T>& eps, const Tensor<T>& eps_pred,
                        const BinaryMask& union_mask) {
    ag::NoGrad ng;
    return masked_diffusion_loss_graph(eps, ag::constant(eps_pred), union_mask)->val[0];
}

template <typename T>
T cross_attention_loss(const std::map<int, Tensor<T>>& maps, const SubjectMaskSet& masks) {
    ag::NoGrad ng;
    std::map<int, ag::Var<T>> vars;
    for (const auto& [s, m] : maps) vars[s] = ag::constant(m);
    return cross_attention_loss_graph(vars, masks)->val[0];
}

// Returns (l_mattn, l_attn, l_mask_attn).
template <typename T>
std::tuple<T, T, T> mask_attention_total(const std::map<int, Tensor<T>>& handle_maps,
                                         const std::map<int, Tensor<T>>& mask_token_maps,
                                         const SubjectMaskSet& masks, const LossWeights& w) {
    ag::NoGrad ng;
    std::map<int, ag::Var<T>> hv, mv;
    for (const auto& [s, m] : handle_maps) hv[s] = ag::constant(m);
    for (const auto& [s, m] : mask_token_maps) mv[s] = ag::constant(m);
    auto g = mask_attention_total_graph(hv, mv, masks, w);
    return {g.l_mattn->val[0], g.l_attn->val[0],
            g.l_mask_attn ? g.l_mask_attn->val[0] : T(0)};
}

template <typename T>
T total_loss(T l_rec, T l_mattn, const LossWeights& w) {
    if (l_rec < T(0) || l_mattn < T(0))
        throw argument_error("total_loss: inputs must be non-negative");
    w.validate();
    return l_rec + static_cast<T>(w.lambda_attn) * l_mattn;
}

}  // namespace maskdiff
