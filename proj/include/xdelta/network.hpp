#pragma once

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xdelta/layers.hpp"
#include "xdelta/tensor.hpp"

namespace xdelta {

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using CMapRM = Eigen::Map<const MatrixRM>;

// Named parameter tensors plus their gradient buffers. std::map keeps
// iteration order stable, which the checkpoint format and checksums rely on.
struct ParamStore {
    std::map<std::string, Tensor> params;
    std::map<std::string, Tensor> grads;

    Tensor& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw StructuralError("missing parameter: " + name);
        return it->second;
    }
    const Tensor& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw StructuralError("missing parameter: " + name);
        return it->second;
    }
    Tensor& grad(const std::string& name) {
        auto it = grads.find(name);
        if (it == grads.end()) it = grads.emplace(name, Tensor(param(name).shape())).first;
        return it->second;
    }
    void zero_grads() {
        for (auto& [k, g] : grads) g.fill(0.0f);
    }
    bool has(const std::string& name) const { return params.count(name) != 0; }

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [k, t] : params) {
            h = fnv1a64(k, h);
            h = tensor_checksum(t, h);
        }
        return h;
    }
};

// Layered network description: ordered layers, a split index separating the
// feature extractor from the classifier head, and the parameter store.
struct NetworkSpec {
    std::vector<LayerSpec> layers;
    std::size_t split_index = 0;  // layers[0, split) = feature extractor
    std::vector<long> input_shape;  // {C, H, W}
    std::shared_ptr<ParamStore> params = std::make_shared<ParamStore>();

    LayerSpec& layer(std::size_t i) { return layers.at(i); }
    const LayerSpec& layer(std::size_t i) const { return layers.at(i); }

    // Dimensionality of the feature the classifier head consumes.
    long feature_dim() const {
        if (split_index == 0 || split_index > layers.size())
            throw StructuralError("split index out of range");
        const LayerSpec& last = layers[split_index - 1];
        return last.output_elems();
    }

    long class_count() const {
        if (layers.empty()) return 0;
        return layers.back().output_elems();
    }

    // Infers per-layer shapes from input_shape and checks adjacency.
    void finalize() {
        if (input_shape.size() != 3) throw StructuralError("input shape must be C,H,W");
        long c = input_shape[0], h = input_shape[1], w = input_shape[2];
        bool flat = false;
        long feat = 0;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            LayerSpec& L = layers[i];
            L.flat_in = flat;
            L.in_c = c;
            L.in_h = h;
            L.in_w = w;
            if (flat) L.in_features = (L.kind == LayerKind::Linear) ? L.in_features : feat;
            switch (L.kind) {
                case LayerKind::Conv: {
                    if (flat) throw StructuralError(L.name + ": conv after flatten");
                    if (L.in_channels != c)
                        throw StructuralError(L.name + ": channel mismatch");
                    long oh = (h + 2 * L.pad - L.kernel) / L.stride + 1;
                    long ow = (w + 2 * L.pad - L.kernel) / L.stride + 1;
                    if (oh <= 0 || ow <= 0) throw StructuralError(L.name + ": empty output");
                    c = L.out_channels;
                    h = oh;
                    w = ow;
                    break;
                }
                case LayerKind::Linear: {
                    long needed = flat ? feat : c * h * w;
                    if (L.in_features != needed)
                        throw StructuralError(L.name + ": linear expects " +
                                              std::to_string(L.in_features) + " features, got " +
                                              std::to_string(needed));
                    flat = true;
                    feat = L.out_features;
                    break;
                }
                case LayerKind::Pool: {
                    if (flat) throw StructuralError(L.name + ": pool after flatten");
                    if (L.pool_mode == PoolMode::Max) {
                        h = (h - L.pool_kernel) / L.pool_stride + 1;
                        w = (w - L.pool_kernel) / L.pool_stride + 1;
                        if (h <= 0 || w <= 0) throw StructuralError(L.name + ": empty output");
                    } else {  // GlobalAvg flattens to N x C
                        flat = true;
                        feat = c;
                    }
                    break;
                }
                case LayerKind::Activation:
                case LayerKind::Norm:
                    if (flat && L.kind == LayerKind::Norm) L.in_features = feat;
                    break;
                case LayerKind::SeBlock:
                    if (flat) throw StructuralError(L.name + ": se-block after flatten");
                    if (c < L.se_reduction)
                        throw ConfigError(L.name + ": channels below se reduction ratio");
                    break;
                case LayerKind::SkipMerge: {
                    if (L.skip_offset < 1 || L.skip_offset > static_cast<long>(i))
                        throw StructuralError(L.name + ": skip offset out of range");
                    const LayerSpec& src = layers[i - static_cast<std::size_t>(L.skip_offset)];
                    if (src.output_elems() != (flat ? feat : c * h * w) || src.flat_out != flat)
                        throw StructuralError(L.name + ": skip source shape mismatch");
                    break;
                }
            }
            L.flat_out = flat;
            if (flat) {
                L.out_features = feat;
                L.out_c = 0;
                L.out_h = 0;
                L.out_w = 0;
            } else {
                L.out_c = c;
                L.out_h = h;
                L.out_w = w;
            }
        }
        if (split_index == 0 || split_index > layers.size())
            throw StructuralError("split index out of range");
    }

    // Allocates and initializes all parameters (He-normal weights, zero bias).
    void init_params(Rng& rng) {
        for (const LayerSpec& L : layers) {
            switch (L.kind) {
                case LayerKind::Conv: {
                    Tensor w({L.out_channels, L.in_channels, L.kernel, L.kernel});
                    float std = std::sqrt(2.0f / static_cast<float>(L.in_channels * L.kernel * L.kernel));
                    w.fill_normal(rng, 0.0f, std);
                    params->params[L.name + ".weight"] = std::move(w);
                    params->params[L.name + ".bias"] = Tensor({L.out_channels});
                    break;
                }
                case LayerKind::Linear: {
                    Tensor w({L.out_features, L.in_features});
                    float std = std::sqrt(2.0f / static_cast<float>(L.in_features));
                    w.fill_normal(rng, 0.0f, std);
                    params->params[L.name + ".weight"] = std::move(w);
                    params->params[L.name + ".bias"] = Tensor({L.out_features});
                    break;
                }
                case LayerKind::Norm: {
                    long n = L.flat_in ? L.in_features : L.in_c;
                    Tensor scale({n});
                    scale.fill(1.0f);
                    params->params[L.name + ".scale"] = std::move(scale);
                    params->params[L.name + ".shift"] = Tensor({n});
                    break;
                }
                case LayerKind::SeBlock: {
                    long mid = L.in_c / L.se_reduction;
                    Tensor w1({mid, L.in_c});
                    w1.fill_normal(rng, 0.0f, std::sqrt(2.0f / static_cast<float>(L.in_c)));
                    Tensor w2({L.in_c, mid});
                    w2.fill_normal(rng, 0.0f, std::sqrt(2.0f / static_cast<float>(mid)));
                    params->params[L.name + ".fc1.weight"] = std::move(w1);
                    params->params[L.name + ".fc1.bias"] = Tensor({mid});
                    params->params[L.name + ".fc2.weight"] = std::move(w2);
                    params->params[L.name + ".fc2.bias"] = Tensor({L.in_c});
                    break;
                }
                default:
                    break;
            }
        }
    }

    // Parameter names owned by one layer, in store order.
    std::vector<std::string> layer_param_names(const LayerSpec& L) const {
        switch (L.kind) {
            case LayerKind::Conv:
            case LayerKind::Linear:
                return {L.name + ".weight", L.name + ".bias"};
            case LayerKind::Norm:
                return {L.name + ".scale", L.name + ".shift"};
            case LayerKind::SeBlock:
                return {L.name + ".fc1.weight", L.name + ".fc1.bias", L.name + ".fc2.weight",
                        L.name + ".fc2.bias"};
            default:
                return {};
        }
    }
};

namespace detail {

inline void im2col(const float* img, long C, long H, long W, long k, long stride, long pad,
                   long out_h, long out_w, float* cols) {
    // cols layout: (C*k*k) rows x (out_h*out_w) columns, row-major
    const long HW = out_h * out_w;
    for (long c = 0; c < C; ++c) {
        for (long ky = 0; ky < k; ++ky) {
            for (long kx = 0; kx < k; ++kx) {
                float* dst = cols + ((c * k + ky) * k + kx) * HW;
                for (long oy = 0; oy < out_h; ++oy) {
                    long iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (long ox = 0; ox < out_w; ++ox) dst[oy * out_w + ox] = 0.0f;
                        continue;
                    }
                    const float* src_row = img + (c * H + iy) * W;
                    for (long ox = 0; ox < out_w; ++ox) {
                        long ix = ox * stride - pad + kx;
                        dst[oy * out_w + ox] = (ix >= 0 && ix < W) ? src_row[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

inline void col2im_add(const float* cols, long C, long H, long W, long k, long stride, long pad,
                       long out_h, long out_w, float* img) {
    const long HW = out_h * out_w;
    for (long c = 0; c < C; ++c) {
        for (long ky = 0; ky < k; ++ky) {
            for (long kx = 0; kx < k; ++kx) {
                const float* src = cols + ((c * k + ky) * k + kx) * HW;
                for (long oy = 0; oy < out_h; ++oy) {
                    long iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    float* dst_row = img + (c * H + iy) * W;
                    for (long ox = 0; ox < out_w; ++ox) {
                        long ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst_row[ix] += src[oy * out_w + ox];
                    }
                }
            }
        }
    }
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace detail

// Stateless conv/linear kernels parameterized by explicit weight tensors.
// The layer runtime, the branch-extended search network, and the fusion
// modules all route through these.
namespace kernels {

inline Tensor conv2d_forward(const LayerSpec& L, const Tensor& Wt, const Tensor& Bt,
                             const Tensor& x) {
    const long N = x.dim(0);
    Tensor y({N, L.out_channels, L.out_h, L.out_w});
    const long K = L.in_channels * L.kernel * L.kernel;
    const long HW = L.out_h * L.out_w;
    CMapRM Wm(Wt.data(), L.out_channels, K);
#pragma omp parallel
    {
        std::vector<float> cols(static_cast<std::size_t>(K * HW));
#pragma omp for schedule(static)
        for (long n = 0; n < N; ++n) {
            detail::im2col(x.data() + n * L.in_c * L.in_h * L.in_w, L.in_c, L.in_h, L.in_w,
                           L.kernel, L.stride, L.pad, L.out_h, L.out_w, cols.data());
            CMapRM cm(cols.data(), K, HW);
            MapRM ym(y.data() + n * L.out_channels * HW, L.out_channels, HW);
            ym.noalias() = Wm * cm;
            for (long c = 0; c < L.out_channels; ++c)
                ym.row(c).array() += Bt[static_cast<std::size_t>(c)];
        }
    }
    return y;
}

// Any of gx / gW / gb may be null to skip that gradient. gW and gb are
// accumulated into, gx is overwritten.
inline void conv2d_backward(const LayerSpec& L, const Tensor& Wt, const Tensor& x,
                            const Tensor& gy, Tensor* gx, Tensor* gW, Tensor* gb) {
    const long N = x.dim(0);
    const long K = L.in_channels * L.kernel * L.kernel;
    const long HW = L.out_h * L.out_w;
    CMapRM Wm(Wt.data(), L.out_channels, K);
    if (gx) {
        gx->fill(0.0f);
#pragma omp parallel
        {
            std::vector<float> dcols(static_cast<std::size_t>(K * HW));
#pragma omp for schedule(static)
            for (long n = 0; n < N; ++n) {
                CMapRM gym(gy.data() + n * L.out_channels * HW, L.out_channels, HW);
                MapRM dcm(dcols.data(), K, HW);
                dcm.noalias() = Wm.transpose() * gym;
                detail::col2im_add(dcols.data(), L.in_c, L.in_h, L.in_w, L.kernel, L.stride, L.pad,
                                   L.out_h, L.out_w, gx->data() + n * L.in_c * L.in_h * L.in_w);
            }
        }
    }
    if (gW) {
        int nthreads = 1;
#ifdef _OPENMP
        nthreads = omp_get_max_threads();
#endif
        std::vector<std::vector<double>> parts(static_cast<std::size_t>(nthreads),
                                               std::vector<double>(static_cast<std::size_t>(L.out_channels * K), 0.0));
#pragma omp parallel
        {
            std::vector<float> cols(static_cast<std::size_t>(K * HW));
            int tid = 0;
#ifdef _OPENMP
            tid = omp_get_thread_num();
#endif
#pragma omp for schedule(static)
            for (long n = 0; n < N; ++n) {
                detail::im2col(x.data() + n * L.in_c * L.in_h * L.in_w, L.in_c, L.in_h, L.in_w,
                               L.kernel, L.stride, L.pad, L.out_h, L.out_w, cols.data());
                CMapRM cm(cols.data(), K, HW);
                CMapRM gym(gy.data() + n * L.out_channels * HW, L.out_channels, HW);
                MatrixRM dW = gym * cm.transpose();
                auto& acc = parts[static_cast<std::size_t>(tid)];
                const float* p = dW.data();
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
            }
        }
        for (const auto& acc : parts)
            for (std::size_t i = 0; i < acc.size(); ++i) (*gW)[i] += static_cast<float>(acc[i]);
    }
    if (gb) {
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < L.out_channels; ++c) {
                const float* row = gy.data() + (n * L.out_channels + c) * HW;
                double s = 0;
                for (long i = 0; i < HW; ++i) s += row[i];
                (*gb)[static_cast<std::size_t>(c)] += static_cast<float>(s);
            }
    }
}

inline Tensor linear_forward(const Tensor& Wt, const Tensor& Bt, const Tensor& x) {
    const long N = x.dim(0);
    const long in_f = Wt.dim(1), out_f = Wt.dim(0);
    Tensor y({N, out_f});
    CMapRM Xm(x.data(), N, in_f);
    CMapRM Wm(Wt.data(), out_f, in_f);
    MapRM Ym(y.data(), N, out_f);
    Ym.noalias() = Xm * Wm.transpose();
    for (long j = 0; j < out_f; ++j) Ym.col(j).array() += Bt[static_cast<std::size_t>(j)];
    return y;
}

inline void linear_backward(const Tensor& Wt, const Tensor& x, const Tensor& gy, Tensor* gx,
                            Tensor* gW, Tensor* gb) {
    const long N = x.dim(0);
    const long in_f = Wt.dim(1), out_f = Wt.dim(0);
    CMapRM Xm(x.data(), N, in_f);
    CMapRM Wm(Wt.data(), out_f, in_f);
    CMapRM Gym(gy.data(), N, out_f);
    if (gx) {
        MapRM Gxm(gx->data(), N, in_f);
        Gxm.noalias() = Gym * Wm;
    }
    if (gW) {
        MapRM GWm(gW->data(), out_f, in_f);
        GWm.noalias() += Gym.transpose() * Xm;
    }
    if (gb) {
        for (long j = 0; j < out_f; ++j) {
            double s = 0;
            for (long n = 0; n < N; ++n) s += Gym(n, j);
            (*gb)[static_cast<std::size_t>(j)] += static_cast<float>(s);
        }
    }
}

}  // namespace kernels

// Per-layer forward cache used by backward and by the CAM extractor.
struct ForwardTrace {
    Tensor input;                       // network input batch
    std::vector<Tensor> outputs;        // outputs[i] = output of layers[i]
    std::vector<std::vector<long>> pool_argmax;  // per max-pool layer cache
    std::vector<Tensor> se_cache;       // per se layer: z|pre1|hid|gate rows

    const Tensor& layer_input(const NetworkSpec& net, std::size_t i) const {
        (void)net;
        return i == 0 ? input : outputs[i - 1];
    }
};

struct BackwardOptions {
    bool accumulate_param_grads = true;
    // When >= 0, the gradient w.r.t. outputs[capture_layer] is copied into
    // `captured` right before that layer's backward step runs.
    long capture_layer = -1;
    Tensor* captured = nullptr;
};

class Runtime {
  public:
    // Forward pass over the whole layer stack. `trace` may be null when no
    // backward pass will follow.
    static Tensor forward(const NetworkSpec& net, const Tensor& batch, ForwardTrace* trace) {
        if (batch.rank() != 4) throw StructuralError("network input must be N,C,H,W");
        if (batch.dim(1) != net.input_shape[0] || batch.dim(2) != net.input_shape[1] ||
            batch.dim(3) != net.input_shape[2])
            throw StructuralError("input batch does not match network input shape");
        if (trace) {
            trace->input = batch;
            trace->outputs.clear();
            trace->outputs.reserve(net.layers.size());
            trace->pool_argmax.assign(net.layers.size(), {});
            trace->se_cache.assign(net.layers.size(), Tensor());
        }
        // Without a trace, retain only the outputs a later skip-merge needs.
        std::vector<bool> keep(net.layers.size(), false);
        if (!trace) {
            for (std::size_t i = 0; i < net.layers.size(); ++i)
                if (net.layers[i].kind == LayerKind::SkipMerge)
                    keep[i - static_cast<std::size_t>(net.layers[i].skip_offset)] = true;
        }
        std::vector<Tensor> local(trace ? 0 : net.layers.size());
        Tensor cur = batch;
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            cur = forward_layer(net, i, cur, trace, trace ? &trace->outputs : &local);
            if (trace)
                trace->outputs.push_back(cur);
            else if (keep[i])
                local[i] = cur;
        }
        return cur;
    }

    // Runs the feature extractor only (layers [0, split)).
    static Tensor forward_features(const NetworkSpec& net, const Tensor& batch,
                                   ForwardTrace* trace = nullptr) {
        if (trace) {
            trace->input = batch;
            trace->outputs.clear();
            trace->pool_argmax.assign(net.layers.size(), {});
            trace->se_cache.assign(net.layers.size(), Tensor());
        }
        Tensor cur = batch;
        for (std::size_t i = 0; i < net.split_index; ++i) {
            cur = forward_layer(net, i, cur, trace, trace ? &trace->outputs : nullptr);
            if (trace) trace->outputs.push_back(cur);
        }
        return cur;
    }

    // Applies the classifier head (layers [split, end)) to a feature batch.
    static Tensor forward_head(const NetworkSpec& net, const Tensor& features) {
        Tensor cur = features;
        for (std::size_t i = net.split_index; i < net.layers.size(); ++i)
            cur = forward_layer(net, i, cur, nullptr, nullptr);
        return cur;
    }

    // Backward over the full stack. Returns the gradient w.r.t. the input
    // batch. Parameter gradients are accumulated into net.params->grads.
    static Tensor backward(const NetworkSpec& net, const ForwardTrace& trace,
                           const Tensor& grad_out, const BackwardOptions& opt = {}) {
        const std::size_t n = net.layers.size();
        std::vector<Tensor> ograds(n);
        ograds[n - 1] = grad_out;
        Tensor input_grad(trace.input.shape());
        for (std::size_t ii = n; ii-- > 0;) {
            if (ograds[ii].empty()) continue;  // dead branch (nothing flowed here)
            if (opt.capture_layer == static_cast<long>(ii) && opt.captured)
                *opt.captured = ograds[ii];
            const Tensor& x = trace.layer_input(net, ii);
            Tensor gin = backward_layer(net, ii, x, trace, ograds[ii], opt.accumulate_param_grads,
                                        ograds);
            if (ii == 0) {
                input_grad += gin;
            } else {
                if (ograds[ii - 1].empty()) ograds[ii - 1] = Tensor(gin.shape());
                ograds[ii - 1] += gin;
            }
        }
        return input_grad;
    }

  private:
    static Tensor forward_layer(const NetworkSpec& net, std::size_t idx, const Tensor& x,
                                ForwardTrace* trace, const std::vector<Tensor>* prev_outputs) {
        const LayerSpec& L = net.layers[idx];
        ParamStore& ps = *net.params;
        switch (L.kind) {
            case LayerKind::Conv:
                return conv_forward(L, ps, x);
            case LayerKind::Linear:
                return linear_forward(L, ps, x);
            case LayerKind::Pool:
                return L.pool_mode == PoolMode::Max
                           ? maxpool_forward(L, x, trace ? &trace->pool_argmax[idx] : nullptr)
                           : gap_forward(L, x);
            case LayerKind::Activation: {
                Tensor y = x;
                for (long i = 0; i < y.size(); ++i)
                    if (y[static_cast<std::size_t>(i)] < 0.0f) y[static_cast<std::size_t>(i)] = 0.0f;
                return y;
            }
            case LayerKind::Norm:
                return norm_forward(L, ps, x);
            case LayerKind::SeBlock:
                return se_forward(L, ps, x, trace ? &trace->se_cache[idx] : nullptr);
            case LayerKind::SkipMerge: {
                if (!prev_outputs) throw StructuralError("skip-merge source unavailable");
                const Tensor& src = (*prev_outputs)[idx - static_cast<std::size_t>(L.skip_offset)];
                if (src.empty()) throw StructuralError("skip-merge source unavailable");
                Tensor y = x;
                y += src;
                return y;
            }
        }
        throw StructuralError("unknown layer kind");
    }

    static Tensor backward_layer(const NetworkSpec& net, std::size_t idx, const Tensor& x,
                                 const ForwardTrace& trace, const Tensor& gy, bool acc_grads,
                                 std::vector<Tensor>& ograds) {
        const LayerSpec& L = net.layers[idx];
        ParamStore& ps = *net.params;
        switch (L.kind) {
            case LayerKind::Conv:
                return conv_backward(L, ps, x, gy, acc_grads);
            case LayerKind::Linear:
                return linear_backward(L, ps, x, gy, acc_grads);
            case LayerKind::Pool:
                return L.pool_mode == PoolMode::Max
                           ? maxpool_backward(L, x, trace.pool_argmax[idx], gy)
                           : gap_backward(L, x, gy);
            case LayerKind::Activation: {
                Tensor gx(x.shape());
                for (long i = 0; i < x.size(); ++i)
                    gx[static_cast<std::size_t>(i)] =
                        x[static_cast<std::size_t>(i)] > 0.0f ? gy[static_cast<std::size_t>(i)] : 0.0f;
                return gx;
            }
            case LayerKind::Norm:
                return norm_backward(L, ps, x, gy, acc_grads);
            case LayerKind::SeBlock:
                return se_backward(L, ps, x, trace.se_cache[idx], gy, acc_grads);
            case LayerKind::SkipMerge: {
                std::size_t src = idx - static_cast<std::size_t>(L.skip_offset);
                if (ograds[src].empty()) ograds[src] = Tensor(gy.shape());
                ograds[src] += gy;
                return gy;  // identity path
            }
        }
        throw StructuralError("unknown layer kind");
    }

    static Tensor conv_forward(const LayerSpec& L, ParamStore& ps, const Tensor& x) {
        return kernels::conv2d_forward(L, ps.param(L.name + ".weight"), ps.param(L.name + ".bias"),
                                       x);
    }

    static Tensor conv_backward(const LayerSpec& L, ParamStore& ps, const Tensor& x,
                                const Tensor& gy, bool acc_grads) {
        Tensor gx(x.shape());
        kernels::conv2d_backward(L, ps.param(L.name + ".weight"), x, gy, &gx,
                                 acc_grads ? &ps.grad(L.name + ".weight") : nullptr,
                                 acc_grads ? &ps.grad(L.name + ".bias") : nullptr);
        return gx;
    }

    static Tensor linear_forward(const LayerSpec& L, ParamStore& ps, const Tensor& x) {
        return kernels::linear_forward(ps.param(L.name + ".weight"), ps.param(L.name + ".bias"), x);
    }

    static Tensor linear_backward(const LayerSpec& L, ParamStore& ps, const Tensor& x,
                                  const Tensor& gy, bool acc_grads) {
        Tensor gx(x.shape());
        kernels::linear_backward(ps.param(L.name + ".weight"), x, gy, &gx,
                                 acc_grads ? &ps.grad(L.name + ".weight") : nullptr,
                                 acc_grads ? &ps.grad(L.name + ".bias") : nullptr);
        return gx;
    }

    static Tensor maxpool_forward(const LayerSpec& L, const Tensor& x, std::vector<long>* argmax) {
        const long N = x.dim(0), C = x.dim(1);
        Tensor y({N, C, L.out_h, L.out_w});
        if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c)
                for (long oy = 0; oy < L.out_h; ++oy)
                    for (long ox = 0; ox < L.out_w; ++ox) {
                        long best = -1;
                        float bv = 0;
                        for (long ky = 0; ky < L.pool_kernel; ++ky)
                            for (long kx = 0; kx < L.pool_kernel; ++kx) {
                                long iy = oy * L.pool_stride + ky;
                                long ix = ox * L.pool_stride + kx;
                                if (iy >= L.in_h || ix >= L.in_w) continue;
                                long idx = ((n * C + c) * L.in_h + iy) * L.in_w + ix;
                                float v = x[static_cast<std::size_t>(idx)];
                                if (best < 0 || v > bv) {
                                    best = idx;
                                    bv = v;
                                }
                            }
                        long oidx = ((n * C + c) * L.out_h + oy) * L.out_w + ox;
                        y[static_cast<std::size_t>(oidx)] = bv;
                        if (argmax) (*argmax)[static_cast<std::size_t>(oidx)] = best;
                    }
        return y;
    }

    static Tensor maxpool_backward(const LayerSpec& L, const Tensor& x,
                                   const std::vector<long>& argmax, const Tensor& gy) {
        Tensor gx(x.shape());
        for (long i = 0; i < gy.size(); ++i)
            gx[static_cast<std::size_t>(argmax[static_cast<std::size_t>(i)])] +=
                gy[static_cast<std::size_t>(i)];
        return gx;
    }

    static Tensor gap_forward(const LayerSpec& L, const Tensor& x) {
        const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
        Tensor y({N, C});
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c) {
                const float* p = x.data() + (n * C + c) * HW;
                double s = 0;
                for (long i = 0; i < HW; ++i) s += p[i];
                y.at2(n, c) = static_cast<float>(s / static_cast<double>(HW));
            }
        return y;
    }

    static Tensor gap_backward(const LayerSpec& L, const Tensor& x, const Tensor& gy) {
        const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
        Tensor gx(x.shape());
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c) {
                float g = gy.at2(n, c) / static_cast<float>(HW);
                float* p = gx.data() + (n * C + c) * HW;
                for (long i = 0; i < HW; ++i) p[i] = g;
            }
        return gx;
    }

    static Tensor norm_forward(const LayerSpec& L, ParamStore& ps, const Tensor& x) {
        const Tensor& scale = ps.param(L.name + ".scale");
        const Tensor& shift = ps.param(L.name + ".shift");
        Tensor y = x;
        if (L.flat_in) {
            const long N = x.dim(0), F = x.dim(1);
            for (long n = 0; n < N; ++n)
                for (long f = 0; f < F; ++f)
                    y.at2(n, f) = x.at2(n, f) * scale[static_cast<std::size_t>(f)] +
                                  shift[static_cast<std::size_t>(f)];
        } else {
            const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
            for (long n = 0; n < N; ++n)
                for (long c = 0; c < C; ++c) {
                    float* p = y.data() + (n * C + c) * HW;
                    float s = scale[static_cast<std::size_t>(c)], b = shift[static_cast<std::size_t>(c)];
                    for (long i = 0; i < HW; ++i) p[i] = p[i] * s + b;
                }
        }
        return y;
    }

    static Tensor norm_backward(const LayerSpec& L, ParamStore& ps, const Tensor& x,
                                const Tensor& gy, bool acc_grads) {
        const Tensor& scale = ps.param(L.name + ".scale");
        Tensor gx(x.shape());
        Tensor* gs = acc_grads ? &ps.grad(L.name + ".scale") : nullptr;
        Tensor* gb = acc_grads ? &ps.grad(L.name + ".shift") : nullptr;
        if (L.flat_in) {
            const long N = x.dim(0), F = x.dim(1);
            for (long n = 0; n < N; ++n)
                for (long f = 0; f < F; ++f) {
                    gx.at2(n, f) = gy.at2(n, f) * scale[static_cast<std::size_t>(f)];
                    if (acc_grads) {
                        (*gs)[static_cast<std::size_t>(f)] += gy.at2(n, f) * x.at2(n, f);
                        (*gb)[static_cast<std::size_t>(f)] += gy.at2(n, f);
                    }
                }
        } else {
            const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
            for (long n = 0; n < N; ++n)
                for (long c = 0; c < C; ++c) {
                    const float* px = x.data() + (n * C + c) * HW;
                    const float* pg = gy.data() + (n * C + c) * HW;
                    float* pgx = gx.data() + (n * C + c) * HW;
                    float s = scale[static_cast<std::size_t>(c)];
                    double ds = 0, db = 0;
                    for (long i = 0; i < HW; ++i) {
                        pgx[i] = pg[i] * s;
                        ds += static_cast<double>(pg[i]) * px[i];
                        db += pg[i];
                    }
                    if (acc_grads) {
                        (*gs)[static_cast<std::size_t>(c)] += static_cast<float>(ds);
                        (*gb)[static_cast<std::size_t>(c)] += static_cast<float>(db);
                    }
                }
        }
        return gx;
    }

    // Squeeze-excitation with skip: y = x + x * broadcast(gate(x)).
    // gate = sigmoid(W2 relu(W1 gap(x) + b1) + b2)
    static Tensor se_forward(const LayerSpec& L, ParamStore& ps, const Tensor& x, Tensor* cache) {
        const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
        const long M = C / L.se_reduction;
        const Tensor& W1 = ps.param(L.name + ".fc1.weight");
        const Tensor& b1 = ps.param(L.name + ".fc1.bias");
        const Tensor& W2 = ps.param(L.name + ".fc2.weight");
        const Tensor& b2 = ps.param(L.name + ".fc2.bias");
        // cache rows per example: [z(C), pre1(M), hid(M), gate(C)]
        Tensor cc({N, 2 * C + 2 * M});
        for (long n = 0; n < N; ++n) {
            float* z = cc.data() + n * (2 * C + 2 * M);
            float* pre1 = z + C;
            float* hid = pre1 + M;
            float* gate = hid + M;
            for (long c = 0; c < C; ++c) {
                const float* p = x.data() + (n * C + c) * HW;
                double s = 0;
                for (long i = 0; i < HW; ++i) s += p[i];
                z[c] = static_cast<float>(s / static_cast<double>(HW));
            }
            for (long m = 0; m < M; ++m) {
                double s = b1[static_cast<std::size_t>(m)];
                const float* wrow = W1.data() + m * C;
                for (long c = 0; c < C; ++c) s += static_cast<double>(wrow[c]) * z[c];
                pre1[m] = static_cast<float>(s);
                hid[m] = pre1[m] > 0.0f ? pre1[m] : 0.0f;
            }
            for (long c = 0; c < C; ++c) {
                double s = b2[static_cast<std::size_t>(c)];
                const float* wrow = W2.data() + c * M;
                for (long m = 0; m < M; ++m) s += static_cast<double>(wrow[m]) * hid[m];
                gate[c] = detail::sigmoidf(static_cast<float>(s));
            }
        }
        Tensor y(x.shape());
        for (long n = 0; n < N; ++n) {
            const float* gate = cc.data() + n * (2 * C + 2 * M) + C + 2 * M;
            for (long c = 0; c < C; ++c) {
                const float* px = x.data() + (n * C + c) * HW;
                float* py = y.data() + (n * C + c) * HW;
                float g = gate[c];
                for (long i = 0; i < HW; ++i) py[i] = px[i] + px[i] * g;
            }
        }
        if (cache) *cache = std::move(cc);
        return y;
    }

    static Tensor se_backward(const LayerSpec& L, ParamStore& ps, const Tensor& x,
                              const Tensor& cache, const Tensor& gy, bool acc_grads) {
        const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
        const long M = C / L.se_reduction;
        if (cache.empty()) throw StructuralError("se backward requires forward cache");
        const Tensor& W1 = ps.param(L.name + ".fc1.weight");
        const Tensor& W2 = ps.param(L.name + ".fc2.weight");
        Tensor gx(x.shape());
        std::vector<double> dgate(static_cast<std::size_t>(C)), dhid(static_cast<std::size_t>(M)),
            dz(static_cast<std::size_t>(C));
        for (long n = 0; n < N; ++n) {
            const float* z = cache.data() + n * (2 * C + 2 * M);
            const float* pre1 = z + C;
            const float* hid = pre1 + M;
            const float* gate = hid + M;
            // direct paths: dx += gy * (1 + g); dgate[c] = sum_hw gy * x
            for (long c = 0; c < C; ++c) {
                const float* px = x.data() + (n * C + c) * HW;
                const float* pg = gy.data() + (n * C + c) * HW;
                float* pgx = gx.data() + (n * C + c) * HW;
                double dg = 0;
                float g = gate[c];
                for (long i = 0; i < HW; ++i) {
                    pgx[i] = pg[i] * (1.0f + g);
                    dg += static_cast<double>(pg[i]) * px[i];
                }
                dgate[static_cast<std::size_t>(c)] = dg * gate[c] * (1.0 - gate[c]);  // through sigmoid
            }
            // gate = sigmoid(W2 hid + b2)
            for (long m = 0; m < M; ++m) {
                double s = 0;
                for (long c = 0; c < C; ++c)
                    s += dgate[static_cast<std::size_t>(c)] * W2[static_cast<std::size_t>(c * M + m)];
                dhid[static_cast<std::size_t>(m)] = pre1[m] > 0.0f ? s : 0.0;
            }
            for (long c = 0; c < C; ++c) {
                double s = 0;
                for (long m = 0; m < M; ++m)
                    s += dhid[static_cast<std::size_t>(m)] * W1[static_cast<std::size_t>(m * C + c)];
                dz[static_cast<std::size_t>(c)] = s;
            }
            if (acc_grads) {
                Tensor& gW2 = ps.grad(L.name + ".fc2.weight");
                Tensor& gb2 = ps.grad(L.name + ".fc2.bias");
                Tensor& gW1 = ps.grad(L.name + ".fc1.weight");
                Tensor& gb1 = ps.grad(L.name + ".fc1.bias");
                for (long c = 0; c < C; ++c) {
                    gb2[static_cast<std::size_t>(c)] += static_cast<float>(dgate[static_cast<std::size_t>(c)]);
                    for (long m = 0; m < M; ++m)
                        gW2[static_cast<std::size_t>(c * M + m)] +=
                            static_cast<float>(dgate[static_cast<std::size_t>(c)] * hid[m]);
                }
                for (long m = 0; m < M; ++m) {
                    gb1[static_cast<std::size_t>(m)] += static_cast<float>(dhid[static_cast<std::size_t>(m)]);
                    for (long c = 0; c < C; ++c)
                        gW1[static_cast<std::size_t>(m * C + c)] +=
                            static_cast<float>(dhid[static_cast<std::size_t>(m)] * z[c]);
                }
            }
            // z = gap(x): spread dz back evenly
            for (long c = 0; c < C; ++c) {
                float add = static_cast<float>(dz[static_cast<std::size_t>(c)] / static_cast<double>(HW));
                float* pgx = gx.data() + (n * C + c) * HW;
                for (long i = 0; i < HW; ++i) pgx[i] += add;
            }
        }
        return gx;
    }
};

}  // namespace xdelta
