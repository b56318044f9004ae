#pragma once

#include <cmath>
#include <string>

#include "xdelta/delta.hpp"
#include "xdelta/network.hpp"

namespace xdelta {

// Input-aligned heatmap in [0,1] for one image and one class.
struct ActivationMap {
    Tensor map;  // {H, W}
    std::string source;  // edge | delta | base
    long class_index = 0;
};

namespace cam_detail {

// Index of the target feature maps: the activation right after the last conv
// layer of the feature extractor, or the conv itself when nothing follows.
inline long cam_target_layer(const NetworkSpec& net) {
    long conv = -1;
    for (std::size_t i = 0; i < net.split_index; ++i)
        if (net.layers[i].kind == LayerKind::Conv) conv = static_cast<long>(i);
    if (conv < 0) throw StructuralError("network has no conv layer for map extraction");
    long target = conv;
    for (std::size_t i = static_cast<std::size_t>(conv) + 1; i < net.split_index; ++i) {
        if (net.layers[i].kind == LayerKind::Activation) {
            target = static_cast<long>(i);
            break;
        }
        if (net.layers[i].kind == LayerKind::Conv) break;
    }
    return target;
}

// Per-channel weights from the score gradient, then the rectified weighted
// sum over channels. Follows the exponential-score closed form: with
// Y = exp(S), all higher derivatives reduce to powers of dS/dA, giving
//   alpha = g^2 / (2 g^2 + sum_ab(A) * g^3)      (0 where the denominator is 0)
//   w_k   = sum_ij alpha_ij * relu(g_ij)
//   M     = relu(sum_k w_k A_k)
inline Tensor weighted_map(const Tensor& activations, const Tensor& grads) {
    const long C = activations.dim(1), H = activations.dim(2), W = activations.dim(3);
    const long HW = H * W;
    Tensor m({H, W});
    for (long c = 0; c < C; ++c) {
        const float* a = activations.data() + c * HW;
        const float* g = grads.data() + c * HW;
        double asum = 0;
        for (long i = 0; i < HW; ++i) asum += a[i];
        double w = 0;
        for (long i = 0; i < HW; ++i) {
            double gi = g[i];
            double g2 = gi * gi;
            double denom = 2.0 * g2 + asum * g2 * gi;
            double alpha = denom != 0.0 ? g2 / denom : 0.0;
            if (gi > 0) w += alpha * gi;
        }
        for (long i = 0; i < HW; ++i)
            m[static_cast<std::size_t>(i)] += static_cast<float>(w * a[i]);
    }
    for (long i = 0; i < m.size(); ++i)
        if (m[static_cast<std::size_t>(i)] < 0) m[static_cast<std::size_t>(i)] = 0;
    return m;
}

// Corner-aligned bilinear resize.
inline Tensor upsample_bilinear(const Tensor& m, long out_h, long out_w) {
    const long h = m.dim(0), w = m.dim(1);
    Tensor out({out_h, out_w});
    for (long y = 0; y < out_h; ++y) {
        double sy = (h == 1 || out_h == 1)
                        ? 0.0
                        : static_cast<double>(y) * static_cast<double>(h - 1) / static_cast<double>(out_h - 1);
        long y0 = static_cast<long>(sy);
        long y1 = std::min(y0 + 1, h - 1);
        double fy = sy - static_cast<double>(y0);
        for (long x = 0; x < out_w; ++x) {
            double sx = (w == 1 || out_w == 1)
                            ? 0.0
                            : static_cast<double>(x) * static_cast<double>(w - 1) / static_cast<double>(out_w - 1);
            long x0 = static_cast<long>(sx);
            long x1 = std::min(x0 + 1, w - 1);
            double fx = sx - static_cast<double>(x0);
            double v = (1 - fy) * ((1 - fx) * m.at2(y0, x0) + fx * m.at2(y0, x1)) +
                       fy * ((1 - fx) * m.at2(y1, x0) + fx * m.at2(y1, x1));
            out.at2(y, x) = static_cast<float>(v);
        }
    }
    return out;
}

// All zeros stay zero; a constant positive map becomes all ones; otherwise
// min-max to [0,1].
inline void normalize_minmax(Tensor& m) {
    float mx = m.max_value();
    float mn = m.min_value();
    if (mx == 0.0f) {
        m.fill(0.0f);
    } else if (mx == mn) {
        m.fill(1.0f);
    } else {
        for (long i = 0; i < m.size(); ++i)
            m[static_cast<std::size_t>(i)] = (m[static_cast<std::size_t>(i)] - mn) / (mx - mn);
    }
}

}  // namespace cam_detail

// Map for a plain network (base or edge), seeded from the class score at the
// logits and measured at the last conv stage's activation.
inline ActivationMap compute_cam(const NetworkSpec& net, const Tensor& image, long class_index,
                                 const std::string& source_tag = "base") {
    if (class_index < 0 || class_index >= net.class_count())
        throw DomainError("class index out of range");
    Tensor batch = image.rank() == 3
                       ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                       : image;
    if (batch.dim(0) != 1) throw StructuralError("compute_cam expects a single image");
    long target = cam_detail::cam_target_layer(net);

    ForwardTrace trace;
    Tensor logits = Runtime::forward(net, batch, &trace);
    Tensor seed(logits.shape());
    seed[static_cast<std::size_t>(class_index)] = 1.0f;

    Tensor grads;
    BackwardOptions opt;
    opt.accumulate_param_grads = false;
    opt.capture_layer = target;
    opt.captured = &grads;
    Runtime::backward(net, trace, seed, opt);

    Tensor m = cam_detail::weighted_map(trace.outputs[static_cast<std::size_t>(target)], grads);
    Tensor up = cam_detail::upsample_bilinear(m, net.input_shape[1], net.input_shape[2]);
    cam_detail::normalize_minmax(up);
    return ActivationMap{std::move(up), source_tag, class_index};
}

// Gradient of one class score of a flat classifier head (linear/activation/
// norm layers) with respect to its input features.
inline Tensor head_score_grad(const NetworkSpec& net, const Tensor& features, long class_index) {
    std::vector<Tensor> acts;  // inputs of each head layer
    Tensor cur = features;
    for (std::size_t i = net.split_index; i < net.layers.size(); ++i) {
        acts.push_back(cur);
        const LayerSpec& L = net.layers[i];
        switch (L.kind) {
            case LayerKind::Linear:
                cur = kernels::linear_forward(net.params->param(L.name + ".weight"),
                                              net.params->param(L.name + ".bias"), cur);
                break;
            case LayerKind::Activation:
                for (long k = 0; k < cur.size(); ++k)
                    if (cur[static_cast<std::size_t>(k)] < 0) cur[static_cast<std::size_t>(k)] = 0;
                break;
            default:
                throw StructuralError("classifier head supports linear/activation layers only");
        }
    }
    Tensor g(cur.shape());
    for (long n = 0; n < g.dim(0); ++n) g.at2(n, class_index) = 1.0f;
    for (std::size_t ii = net.layers.size(); ii-- > net.split_index;) {
        const LayerSpec& L = net.layers[ii];
        const Tensor& x = acts[ii - net.split_index];
        if (L.kind == LayerKind::Linear) {
            Tensor gx(x.shape());
            kernels::linear_backward(net.params->param(L.name + ".weight"), x, g, &gx, nullptr,
                                     nullptr);
            g = std::move(gx);
        } else {
            for (long k = 0; k < g.size(); ++k)
                if (x[static_cast<std::size_t>(k)] <= 0) g[static_cast<std::size_t>(k)] = 0;
        }
    }
    return g;
}

// Map of the fused classification path, measured at the trunk's last conv
// stage. The class score flows through the frozen base head, the fusion
// mean, and the resizer before reaching the trunk.
inline ActivationMap compute_cam_delta(const DeltaNetwork& delta, const NetworkSpec& base,
                                       const NetworkSpec& edge, const Tensor& image,
                                       long class_index) {
    Tensor batch = image.rank() == 3
                       ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                       : image;
    if (batch.dim(0) != 1) throw StructuralError("compute_cam_delta expects a single image");

    Tensor edge_map = Runtime::forward_features(edge, batch);
    DeltaNetwork::Cache cache;
    Tensor fe = delta.adapt_edge(edge_map, &cache);
    Tensor fdelta = delta.delta_features(batch, fe, &cache);
    Tensor fused = fuse_features(fe, fdelta);

    Tensor d_fused = head_score_grad(base, fused, class_index);
    Tensor d_fdelta = d_fused;
    d_fdelta *= 0.5f;  // fusion mean
    Tensor d_fe_zero(fe.shape());  // delta-branch saliency only

    long target = cam_detail::cam_target_layer(delta.trunk());
    Tensor grads;
    delta.backward(cache, d_fdelta, d_fe_zero, /*accumulate=*/false, target, &grads);

    Tensor m = cam_detail::weighted_map(cache.trunk_trace.outputs[static_cast<std::size_t>(target)],
                                        grads);
    Tensor up = cam_detail::upsample_bilinear(m, delta.trunk().input_shape[1],
                                              delta.trunk().input_shape[2]);
    cam_detail::normalize_minmax(up);
    return ActivationMap{std::move(up), "delta", class_index};
}

}  // namespace xdelta
