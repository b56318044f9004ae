#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xdelta/cost.hpp"
#include "xdelta/sparsity.hpp"

namespace xdelta {

// Rebuilds the truncated subgraph as a dense network: masked units are
// physically removed, along with the dead input channels they fed. The
// result computes exactly the same function on the surviving channels, and
// its tensors have honest sizes for cost accounting.
inline NetworkSpec compact_subgraph(const SubgraphSpec& sg) {
    if (!sg.head_removed) throw StructuralError("compact_subgraph expects a truncated subgraph");
    NetworkSpec out;
    out.input_shape = sg.net.input_shape;
    out.params = std::make_shared<ParamStore>();
    std::vector<long> live;  // surviving channel indices of the previous conv
    for (long c = 0; c < sg.net.input_shape[0]; ++c) live.push_back(c);
    for (const LayerSpec& L : sg.net.layers) {
        if (L.kind == LayerKind::Conv) {
            auto mit = sg.masks.find(L.name);
            std::vector<long> kept;
            for (long u = 0; u < L.out_channels; ++u)
                if (mit == sg.masks.end() || mit->second.unit_keep[static_cast<std::size_t>(u)])
                    kept.push_back(u);
            if (kept.empty()) throw StructuralError(L.name + ": all units masked away");
            const Tensor& W = sg.net.params->param(L.name + ".weight");
            const Tensor& B = sg.net.params->param(L.name + ".bias");
            Tensor Wc({static_cast<long>(kept.size()), static_cast<long>(live.size()), L.kernel,
                       L.kernel});
            Tensor Bc({static_cast<long>(kept.size())});
            const long kk = L.kernel * L.kernel;
            for (std::size_t f = 0; f < kept.size(); ++f) {
                for (std::size_t c = 0; c < live.size(); ++c) {
                    const float* src = W.data() + (kept[f] * L.in_channels + live[c]) * kk;
                    float* dst = Wc.data() + (static_cast<long>(f) * static_cast<long>(live.size()) +
                                              static_cast<long>(c)) * kk;
                    std::copy_n(src, kk, dst);
                }
                Bc[f] = B[static_cast<std::size_t>(kept[f])];
            }
            LayerSpec Lc = conv_spec(L.name, static_cast<long>(live.size()),
                                     static_cast<long>(kept.size()), L.kernel, L.stride, L.pad);
            out.layers.push_back(Lc);
            out.params->params[L.name + ".weight"] = std::move(Wc);
            out.params->params[L.name + ".bias"] = std::move(Bc);
            live = kept;  // original unit indices feed the next layer's slicing
        } else if (L.kind == LayerKind::Activation || L.kind == LayerKind::Pool) {
            LayerSpec Lc = L;
            out.layers.push_back(Lc);
        } else {
            throw StructuralError("unexpected layer in truncated subgraph: " + L.name);
        }
    }
    out.split_index = out.layers.size();
    out.finalize();
    return out;
}

struct DeltaBuildConfig {
    long se_reduction = 4;
    long reduced_dim = 0;  // d_s; 0 picks half the fused dimension
};

// Batch of the four fusion feature views, all N x d_f.
struct FusionFeatures {
    Tensor f_base;   // base extractor output
    Tensor f_edge;   // adapted edge features
    Tensor f_delta;  // resized fused delta features
    Tensor f_fused;  // elementwise mean of edge and delta

    void check() const {
        if (!(f_base.same_shape(f_edge) && f_edge.same_shape(f_delta) &&
              f_delta.same_shape(f_fused)))
            throw StructuralError("fusion features must share N x d_f");
    }
};

// Unweighted elementwise mean of the adapted edge and delta features.
inline Tensor fuse_features(const Tensor& fe, const Tensor& fdelta) {
    if (!fe.same_shape(fdelta)) throw StructuralError("fuse: dimension mismatch");
    Tensor out(fe.shape());
    for (long i = 0; i < out.size(); ++i)
        out[static_cast<std::size_t>(i)] =
            0.5f * (fe[static_cast<std::size_t>(i)] + fdelta[static_cast<std::size_t>(i)]);
    return out;
}

// The Y-shaped difference network. The trunk (compacted subgraph + SE refiner
// with skip + global pooling + linear reduction) digests the image; the edge
// adapter projects pooled edge features to the fused width; the two-layer
// resizer turns their concatenation into the delta feature.
class DeltaNetwork {
  public:
    DeltaNetwork() = default;

    static DeltaNetwork build(const SubgraphSpec& truncated, long edge_channels, long fused_dim,
                              const DeltaBuildConfig& cfg, Rng& rng) {
        DeltaNetwork d;
        d.d_f_ = fused_dim;
        d.d_s_ = cfg.reduced_dim > 0 ? cfg.reduced_dim : std::max(4L, fused_dim / 2);
        d.edge_channels_ = edge_channels;
        d.trunk_ = compact_subgraph(truncated);
        long cs = d.trunk_.layers.back().flat_out ? d.trunk_.layers.back().out_features
                                                  : d.trunk_.layers.back().out_c;
        if (cs < cfg.se_reduction)
            throw ConfigError("trunk channels below the se reduction ratio");
        d.trunk_.layers.push_back(se_block_spec("refiner", cfg.se_reduction));
        d.trunk_.layers.push_back(global_avg_pool_spec("gap"));
        d.trunk_.layers.push_back(linear_spec("reduce", cs, d.d_s_));
        d.trunk_.split_index = d.trunk_.layers.size();
        d.trunk_.finalize();
        // init the refiner/reducer params (conv weights already present)
        NetworkSpec tail;
        tail.input_shape = d.trunk_.input_shape;
        tail.layers = {d.trunk_.layers[d.trunk_.layers.size() - 3],
                       d.trunk_.layers[d.trunk_.layers.size() - 1]};
        tail.split_index = 1;
        tail.params = d.trunk_.params;
        tail.init_params(rng);

        d.hidden_ = round_half_up(std::sqrt(static_cast<double>(d.d_s_ + d.d_f_) *
                                            static_cast<double>(d.d_f_)));
        auto& ps = *d.trunk_.params;
        Tensor aw({d.d_f_, edge_channels});
        aw.fill_normal(rng, 0.0f, std::sqrt(2.0f / static_cast<float>(edge_channels)));
        ps.params["edge_adapter.weight"] = std::move(aw);
        ps.params["edge_adapter.bias"] = Tensor({d.d_f_});
        Tensor r0({d.hidden_, d.d_s_ + d.d_f_});
        r0.fill_normal(rng, 0.0f, std::sqrt(2.0f / static_cast<float>(d.d_s_ + d.d_f_)));
        ps.params["resizer_fc0.weight"] = std::move(r0);
        ps.params["resizer_fc0.bias"] = Tensor({d.hidden_});
        Tensor r1({d.d_f_, d.hidden_});
        r1.fill_normal(rng, 0.0f, std::sqrt(2.0f / static_cast<float>(d.hidden_)));
        ps.params["resizer_fc1.weight"] = std::move(r1);
        ps.params["resizer_fc1.bias"] = Tensor({d.d_f_});
        return d;
    }

    const NetworkSpec& trunk() const { return trunk_; }
    NetworkSpec& trunk() { return trunk_; }
    std::shared_ptr<ParamStore> store() const { return trunk_.params; }
    long fused_dim() const { return d_f_; }
    long reduced_dim() const { return d_s_; }
    long edge_channels() const { return edge_channels_; }
    long hidden_dim() const { return hidden_; }

    std::vector<std::string> conv_weight_names() const {
        std::vector<std::string> names;
        for (const auto& L : trunk_.layers)
            if (L.kind == LayerKind::Conv) names.push_back(L.name + ".weight");
        return names;
    }

    struct Cache {
        ForwardTrace trunk_trace;
        Tensor edge_pooled;  // N x C_e
        Tensor fe;           // N x d_f
        Tensor s_feat;       // N x d_s
        Tensor concat;       // N x (d_s + d_f)
        Tensor hid_pre;      // N x hidden
        Tensor hid;          // N x hidden
        Tensor fdelta;       // N x d_f
    };

    // Pools the edge feature map spatially and projects to the fused width.
    Tensor adapt_edge(const Tensor& edge_map, Cache* cache) const {
        Tensor pooled = spatial_mean(edge_map);
        if (pooled.dim(1) != edge_channels_)
            throw StructuralError("edge feature channels do not match the adapter");
        Tensor fe = kernels::linear_forward(trunk_.params->param("edge_adapter.weight"),
                                            trunk_.params->param("edge_adapter.bias"), pooled);
        if (cache) {
            cache->edge_pooled = std::move(pooled);
            cache->fe = fe;
        }
        return fe;
    }

    // Full delta-feature path for an image batch given adapted edge features.
    Tensor delta_features(const Tensor& images, const Tensor& fe, Cache* cache) const {
        ForwardTrace local;
        ForwardTrace* tr = cache ? &cache->trunk_trace : &local;
        Tensor s = Runtime::forward(trunk_, images, tr);
        Tensor cat({s.dim(0), d_s_ + d_f_});
        for (long n = 0; n < s.dim(0); ++n) {
            std::copy_n(s.data() + n * d_s_, d_s_, cat.data() + n * (d_s_ + d_f_));
            std::copy_n(fe.data() + n * d_f_, d_f_, cat.data() + n * (d_s_ + d_f_) + d_s_);
        }
        Tensor pre = kernels::linear_forward(trunk_.params->param("resizer_fc0.weight"),
                                             trunk_.params->param("resizer_fc0.bias"), cat);
        Tensor hid = pre;
        for (long i = 0; i < hid.size(); ++i)
            if (hid[static_cast<std::size_t>(i)] < 0) hid[static_cast<std::size_t>(i)] = 0;
        Tensor fdelta = kernels::linear_forward(trunk_.params->param("resizer_fc1.weight"),
                                                trunk_.params->param("resizer_fc1.bias"), hid);
        if (cache) {
            cache->s_feat = std::move(s);
            cache->concat = std::move(cat);
            cache->hid_pre = std::move(pre);
            cache->hid = std::move(hid);
            cache->fdelta = fdelta;
        }
        return fdelta;
    }

    // Backward from gradients on f_delta and on f_e (both loss paths),
    // accumulating into this network's own parameter store only. With
    // accumulate=false it only transports gradients, optionally capturing the
    // gradient at one trunk layer output (used by the map extractor).
    void backward(const Cache& cache, const Tensor& d_fdelta, const Tensor& d_fe,
                  bool accumulate = true, long capture_trunk_layer = -1,
                  Tensor* captured = nullptr) const {
        auto& ps = *trunk_.params;
        // resizer
        Tensor d_hid(cache.hid.shape());
        kernels::linear_backward(ps.param("resizer_fc1.weight"), cache.hid, d_fdelta, &d_hid,
                                 accumulate ? &ps.grad("resizer_fc1.weight") : nullptr,
                                 accumulate ? &ps.grad("resizer_fc1.bias") : nullptr);
        for (long i = 0; i < d_hid.size(); ++i)
            if (cache.hid_pre[static_cast<std::size_t>(i)] <= 0)
                d_hid[static_cast<std::size_t>(i)] = 0;
        Tensor d_cat(cache.concat.shape());
        kernels::linear_backward(ps.param("resizer_fc0.weight"), cache.concat, d_hid, &d_cat,
                                 accumulate ? &ps.grad("resizer_fc0.weight") : nullptr,
                                 accumulate ? &ps.grad("resizer_fc0.bias") : nullptr);
        // split the concat gradient
        const long N = d_cat.dim(0);
        Tensor d_s(cache.s_feat.shape());
        Tensor d_fe_total = d_fe;
        for (long n = 0; n < N; ++n) {
            std::copy_n(d_cat.data() + n * (d_s_ + d_f_), d_s_, d_s.data() + n * d_s_);
            for (long j = 0; j < d_f_; ++j)
                d_fe_total[static_cast<std::size_t>(n * d_f_ + j)] +=
                    d_cat[static_cast<std::size_t>(n * (d_s_ + d_f_) + d_s_ + j)];
        }
        // adapter (edge endpoint itself stays frozen; its pooled features are inputs)
        if (accumulate)
            kernels::linear_backward(ps.param("edge_adapter.weight"), cache.edge_pooled,
                                     d_fe_total, nullptr, &ps.grad("edge_adapter.weight"),
                                     &ps.grad("edge_adapter.bias"));
        // trunk
        BackwardOptions opt;
        opt.accumulate_param_grads = accumulate;
        opt.capture_layer = capture_trunk_layer;
        opt.captured = captured;
        Runtime::backward(trunk_, cache.trunk_trace, d_s, opt);
    }

    // Includes the refiner (inside the trunk), the edge adapter, and the
    // two-layer resizer.
    CostProfile cost() const {
        CostProfile c = network_cost(trunk_);
        auto add_linear = [&c](long in, long out) {
            c.param_count += out * in + out;
            c.mac_count += out * in;
            c.mem_access_cost += out * in + out + in + out;
        };
        add_linear(edge_channels_, d_f_);  // edge adapter
        add_linear(d_s_ + d_f_, hidden_);  // resizer
        add_linear(hidden_, d_f_);
        return c;
    }

    static Tensor spatial_mean(const Tensor& map) {
        if (map.rank() == 2) return map;
        if (map.rank() != 4) throw StructuralError("edge features must be N,C,H,W or N,C");
        const long N = map.dim(0), C = map.dim(1), HW = map.dim(2) * map.dim(3);
        Tensor out({N, C});
        for (long n = 0; n < N; ++n)
            for (long c = 0; c < C; ++c) {
                const float* p = map.data() + (n * C + c) * HW;
                double s = 0;
                for (long i = 0; i < HW; ++i) s += p[i];
                out.at2(n, c) = static_cast<float>(s / static_cast<double>(HW));
            }
        return out;
    }

  private:
    NetworkSpec trunk_;
    long d_f_ = 0, d_s_ = 0, hidden_ = 0, edge_channels_ = 0;
};

// Applies a frozen classifier head to fused features and returns logits.
inline Tensor fuse_and_classify(const Tensor& fe, const Tensor& fdelta, const NetworkSpec& base) {
    Tensor fused = fuse_features(fe, fdelta);
    if (fused.dim(1) != base.feature_dim())
        throw StructuralError("fused feature width does not match the classifier head");
    return Runtime::forward_head(base, fused);
}

// ---------------------------------------------------------------------------
// Standalone single-map operations (oracle-friendly shapes)
// ---------------------------------------------------------------------------

// x + x * broadcast(gate(x)) on one C x H x W map given explicit gate params.
inline Tensor se_refine(const Tensor& map, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                        const Tensor& b2, long reduction) {
    if (map.rank() != 3) throw StructuralError("se_refine expects C,H,W");
    const long C = map.dim(0);
    if (C < reduction) throw ConfigError("channel count below reduction ratio");
    NetworkSpec net;
    net.input_shape = {C, map.dim(1), map.dim(2)};
    net.layers = {se_block_spec("se", reduction)};
    net.split_index = 1;
    net.finalize();
    net.params->params["se.fc1.weight"] = w1;
    net.params->params["se.fc1.bias"] = b1;
    net.params->params["se.fc2.weight"] = w2;
    net.params->params["se.fc2.bias"] = b2;
    Tensor batch = map.reshaped({1, C, map.dim(1), map.dim(2)});
    Tensor out = Runtime::forward(net, batch, nullptr);
    return out.reshaped({C, map.dim(1), map.dim(2)});
}

// Per-channel spatial mean of one C x H x W map.
inline Tensor global_avg_pool(const Tensor& map) {
    if (map.rank() != 3) throw StructuralError("global_avg_pool expects C,H,W");
    const long C = map.dim(0), HW = map.dim(1) * map.dim(2);
    Tensor out({C});
    for (long c = 0; c < C; ++c) {
        const float* p = map.data() + c * HW;
        double s = 0;
        for (long i = 0; i < HW; ++i) s += p[i];
        out[static_cast<std::size_t>(c)] = static_cast<float>(s / static_cast<double>(HW));
    }
    return out;
}

}  // namespace xdelta
