#pragma once

#include <string>
#include <vector>

#include "xdelta/common.hpp"

namespace xdelta {

enum class LayerKind { Conv, Linear, Pool, Activation, Norm, SeBlock, SkipMerge };

enum class PoolMode { Max, GlobalAvg };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Linear: return "linear";
        case LayerKind::Pool: return "pool";
        case LayerKind::Activation: return "activation";
        case LayerKind::Norm: return "norm";
        case LayerKind::SeBlock: return "se-block";
        case LayerKind::SkipMerge: return "skip-merge";
    }
    return "?";
}

// Static description of one layer. Shape metadata (in_* / out_*) is filled in
// by NetworkSpec::finalize from the network input shape.
struct LayerSpec {
    LayerKind kind = LayerKind::Activation;
    std::string name;

    // conv
    long in_channels = 0, out_channels = 0;
    long kernel = 0, stride = 1, pad = 0;
    // linear
    long in_features = 0, out_features = 0;
    // pool
    PoolMode pool_mode = PoolMode::Max;
    long pool_kernel = 2, pool_stride = 2;
    // se-block
    long se_reduction = 4;
    // skip-merge: adds the output of the layer `skip_offset` positions back
    long skip_offset = 2;

    // inferred
    long in_h = 0, in_w = 0, in_c = 0;
    long out_h = 0, out_w = 0, out_c = 0;
    bool flat_in = false;   // input is N x F rather than N x C x H x W
    bool flat_out = false;  // output is N x F

    bool prunable() const { return kind == LayerKind::Conv || kind == LayerKind::Linear; }

    // Structural units for masking: conv filters or linear output rows.
    long unit_count() const {
        if (kind == LayerKind::Conv) return out_channels;
        if (kind == LayerKind::Linear) return out_features;
        return 0;
    }

    long weight_count() const {
        switch (kind) {
            case LayerKind::Conv: return out_channels * in_channels * kernel * kernel;
            case LayerKind::Linear: return out_features * in_features;
            case LayerKind::Norm: return flat_in ? in_features : in_c;  // scale only
            case LayerKind::SeBlock: {
                long mid = in_c / se_reduction;
                return in_c * mid + mid * in_c;
            }
            default: return 0;
        }
    }

    long bias_count() const {
        switch (kind) {
            case LayerKind::Conv: return out_channels;
            case LayerKind::Linear: return out_features;
            case LayerKind::Norm: return flat_in ? in_features : in_c;  // shift
            case LayerKind::SeBlock: {
                long mid = in_c / se_reduction;
                return mid + in_c;
            }
            default: return 0;
        }
    }

    long param_count() const { return weight_count() + bias_count(); }

    long input_elems() const { return flat_in ? in_features : in_c * in_h * in_w; }
    long output_elems() const { return flat_out ? out_features : out_c * out_h * out_w; }
};

inline LayerSpec conv_spec(std::string name, long in_ch, long out_ch, long kernel = 3,
                           long stride = 1, long pad = 1) {
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.name = std::move(name);
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
}

inline LayerSpec linear_spec(std::string name, long in_f, long out_f) {
    LayerSpec s;
    s.kind = LayerKind::Linear;
    s.name = std::move(name);
    s.in_features = in_f;
    s.out_features = out_f;
    return s;
}

inline LayerSpec relu_spec(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::Activation;
    s.name = std::move(name);
    return s;
}

inline LayerSpec maxpool_spec(std::string name, long kernel = 2, long stride = 2) {
    LayerSpec s;
    s.kind = LayerKind::Pool;
    s.name = std::move(name);
    s.pool_mode = PoolMode::Max;
    s.pool_kernel = kernel;
    s.pool_stride = stride;
    return s;
}

inline LayerSpec global_avg_pool_spec(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::Pool;
    s.name = std::move(name);
    s.pool_mode = PoolMode::GlobalAvg;
    return s;
}

inline LayerSpec norm_spec(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::Norm;
    s.name = std::move(name);
    return s;
}

inline LayerSpec se_block_spec(std::string name, long reduction = 4) {
    LayerSpec s;
    s.kind = LayerKind::SeBlock;
    s.name = std::move(name);
    s.se_reduction = reduction;
    return s;
}

inline LayerSpec skip_merge_spec(std::string name, long offset) {
    LayerSpec s;
    s.kind = LayerKind::SkipMerge;
    s.name = std::move(name);
    s.skip_offset = offset;
    return s;
}

}  // namespace xdelta
