#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xdelta/cost.hpp"
#include "xdelta/masks.hpp"
#include "xdelta/train.hpp"

namespace xdelta {

// Candidate sparsity rates per prunable layer kind. Defaults follow the
// standard grids: eighths for conv filters, fifths for linear rows.
struct SparsityCandidates {
    std::vector<double> conv_rates = {0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875};
    std::vector<double> linear_rates = {0.2, 0.4, 0.6, 0.8};

    const std::vector<double>& rates_for(LayerKind kind) const {
        if (kind == LayerKind::Conv) return conv_rates;
        if (kind == LayerKind::Linear) return linear_rates;
        throw DomainError("no candidate rates for non-prunable layer kind");
    }

    void validate() const {
        for (const auto* v : {&conv_rates, &linear_rates}) {
            if (v->empty()) throw ConfigError("candidate rate list empty");
            double prev = -1.0;
            for (double r : *v) {
                if (r < 0.0 || r >= 1.0) throw ConfigError("candidate rate outside [0,1)");
                if (r <= prev) throw ConfigError("candidate rates must be strictly increasing");
                prev = r;
            }
        }
    }
};

// |raw| / sum|raw|; the convex-combination weights used by the rate formula.
inline std::vector<double> normalize_coefficients(const std::vector<double>& raw) {
    double total = 0;
    for (double v : raw) total += std::fabs(v);
    if (total <= 0.0) throw DomainError("all-zero coefficient vector");
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::fabs(raw[i]) / total;
    return out;
}

// Convex combination of candidate rates; stays inside [min, max] of the
// candidates by construction.
inline double effective_sparsity(const std::vector<double>& coefficients,
                                 const std::vector<double>& candidates) {
    if (coefficients.size() != candidates.size())
        throw DomainError("coefficient/candidate length mismatch");
    double sum = 0, dot = 0;
    for (std::size_t i = 0; i < coefficients.size(); ++i) {
        if (coefficients[i] < -1e-12) throw DomainError("negative coefficient");
        sum += coefficients[i];
        dot += coefficients[i] * candidates[i];
    }
    if (std::fabs(sum - 1.0) > 1e-6) throw DomainError("coefficients must sum to 1");
    return dot;
}

// Evenly spaced pick of K distinct rates from a layer kind's candidate list.
inline std::vector<double> pick_branch_rates(const std::vector<double>& rates, long K) {
    const long n = static_cast<long>(rates.size());
    if (K < 1) throw ConfigError("K must be >= 1");
    if (K > n)
        throw ConfigError("K=" + std::to_string(K) + " exceeds " + std::to_string(n) +
                          " distinct candidate rates");
    std::vector<double> out;
    if (K == 1) {
        out.push_back(rates[0]);
    } else {
        for (long j = 0; j < K; ++j) {
            long idx = round_half_up(static_cast<double>(j) * static_cast<double>(n - 1) /
                                     static_cast<double>(K - 1));
            out.push_back(rates[static_cast<std::size_t>(idx)]);
        }
    }
    return out;
}

// One masked branch copy of a prunable layer. Weights are the base layer's
// weights with the branch mask applied, and stay frozen for the whole search.
struct ExtendedBranch {
    double rate = 0.0;
    BinaryMask mask;
    Tensor weights;
    Tensor bias;
    double gamma = 0.0;       // learnable
    double gamma_grad = 0.0;  // scratch
    long mem_access = 0;      // G term
    long macs = 0;            // H term
};

struct ExtendedLayer {
    std::size_t layer_index = 0;  // into the base layer list
    std::vector<ExtendedBranch> branches;
};

struct SparsitySearchConfig {
    long K = 3;
    double lambda0 = 0.5;
    double lambda1 = 1.0;
    double alpha = 1e-5;
    double beta = 1e-7;
    double lr = 0.001;
    double lr_decay = 0.95;
    long batch_size = 64;
    long epochs = 3;
};

// Weighted branch-cost penalty: sum over layers/branches of
// |gamma| * (alpha * G + beta * H).
inline double branch_cost_penalty(const std::vector<ExtendedLayer>& layers, double alpha,
                                  double beta) {
    double s = 0;
    for (const auto& el : layers)
        for (const auto& b : el.branches)
            s += std::fabs(b.gamma) * (alpha * static_cast<double>(b.mem_access) +
                                       beta * static_cast<double>(b.macs));
    return s;
}

// Search-time loss: lambda0 * CE + lambda1 * cost penalty.
inline double extraction_loss(double ce_loss, const std::vector<ExtendedLayer>& layers,
                              const SparsitySearchConfig& cfg) {
    if (cfg.lambda0 < 0 || cfg.lambda1 < 0 || cfg.alpha < 0 || cfg.beta < 0)
        throw DomainError("extraction loss hyperparameters must be non-negative");
    return cfg.lambda0 * ce_loss + cfg.lambda1 * branch_cost_penalty(layers, cfg.alpha, cfg.beta);
}

// The base network with every prunable layer replaced by K frozen masked
// branches whose outputs are mixed by learnable coefficients.
class ExtendedNetwork {
  public:
    ExtendedNetwork(const NetworkSpec& base, const SparsityCandidates& candidates, long K)
        : base_(base) {
        candidates.validate();
        for (std::size_t i = 0; i < base_.layers.size(); ++i) {
            const LayerSpec& L = base_.layers[i];
            if (!L.prunable()) continue;
            ExtendedLayer el;
            el.layer_index = i;
            const Tensor& W = base_.params->param(L.name + ".weight");
            const Tensor& B = base_.params->param(L.name + ".bias");
            for (double rate : pick_branch_rates(candidates.rates_for(L.kind), K)) {
                ExtendedBranch br;
                br.rate = rate;
                br.mask = generate_mask_l2(W, rate);
                br.weights = W;
                br.bias = B;
                apply_unit_mask(br.weights, &br.bias, br.mask);
                br.gamma = 1.0 / static_cast<double>(K);
                br.mem_access = branch_mem_access(L, br.mask.kept_count());
                br.macs = branch_macs(L, br.mask.kept_count());
                el.branches.push_back(std::move(br));
            }
            layers_.push_back(std::move(el));
        }
    }

    const NetworkSpec& base() const { return base_; }
    std::vector<ExtendedLayer>& layers() { return layers_; }
    const std::vector<ExtendedLayer>& layers() const { return layers_; }

    long coefficient_count() const {
        long n = 0;
        for (const auto& el : layers_) n += static_cast<long>(el.branches.size());
        return n;
    }

    struct Trace {
        ForwardTrace base_trace;                       // per-layer combined outputs
        std::vector<std::vector<Tensor>> branch_outs;  // per extended layer
    };

    Tensor forward(const Tensor& batch, Trace* trace) const {
        if (trace) {
            trace->base_trace.input = batch;
            trace->base_trace.outputs.clear();
            trace->base_trace.pool_argmax.assign(base_.layers.size(), {});
            trace->base_trace.se_cache.assign(base_.layers.size(), Tensor());
            trace->branch_outs.assign(layers_.size(), {});
        }
        Tensor cur = batch;
        std::size_t ext_i = 0;
        for (std::size_t i = 0; i < base_.layers.size(); ++i) {
            const LayerSpec& L = base_.layers[i];
            if (ext_i < layers_.size() && layers_[ext_i].layer_index == i) {
                cur = forward_extended(L, layers_[ext_i], cur,
                                       trace ? &trace->branch_outs[ext_i] : nullptr);
                ++ext_i;
            } else {
                cur = forward_plain(L, i, cur, trace);
            }
            if (trace) trace->base_trace.outputs.push_back(cur);
        }
        return cur;
    }

    // Backpropagates only into the mixing coefficients (gamma_grad). No
    // parameter gradient is ever formed, so masked weights cannot move.
    void backward(const Trace& trace, const Tensor& grad_logits) {
        Tensor g = grad_logits;
        long ext_i = static_cast<long>(layers_.size()) - 1;
        for (std::size_t ii = base_.layers.size(); ii-- > 0;) {
            const LayerSpec& L = base_.layers[ii];
            const Tensor& x = trace.base_trace.layer_input(base_, ii);
            if (ext_i >= 0 && layers_[static_cast<std::size_t>(ext_i)].layer_index == ii) {
                g = backward_extended(L, layers_[static_cast<std::size_t>(ext_i)], x, g,
                                      trace.branch_outs[static_cast<std::size_t>(ext_i)]);
                --ext_i;
            } else {
                g = backward_plain(L, ii, x, g, trace);
            }
            if (ii == 0) break;
        }
    }

    void zero_gamma_grads() {
        for (auto& el : layers_)
            for (auto& b : el.branches) b.gamma_grad = 0.0;
    }

    // Final coefficient table: per base layer name, the raw gammas in branch
    // order plus the branch rates.
    struct GammaRecord {
        std::string layer;
        std::vector<double> rates;
        std::vector<double> gammas;
    };
    std::vector<GammaRecord> gamma_table() const {
        std::vector<GammaRecord> out;
        for (const auto& el : layers_) {
            GammaRecord r;
            r.layer = base_.layers[el.layer_index].name;
            for (const auto& b : el.branches) {
                r.rates.push_back(b.rate);
                r.gammas.push_back(b.gamma);
            }
            out.push_back(std::move(r));
        }
        return out;
    }

    static long branch_mem_access(const LayerSpec& L, long kept) {
        if (L.kind == LayerKind::Conv) {
            long weights = kept * L.in_channels * L.kernel * L.kernel + kept;
            return weights + L.input_elems() + kept * L.out_h * L.out_w;
        }
        long weights = kept * L.in_features + kept;
        return weights + L.in_features + kept;
    }

    static long branch_macs(const LayerSpec& L, long kept) {
        if (L.kind == LayerKind::Conv)
            return L.kernel * L.kernel * L.in_channels * kept * L.out_h * L.out_w;
        return L.in_features * kept;
    }

  private:
    Tensor forward_extended(const LayerSpec& L, const ExtendedLayer& el, const Tensor& x,
                            std::vector<Tensor>* branch_cache) const {
        Tensor sum;
        for (const auto& br : el.branches) {
            Tensor y = (L.kind == LayerKind::Conv) ? kernels::conv2d_forward(L, br.weights, br.bias, x)
                                                   : kernels::linear_forward(br.weights, br.bias, x);
            if (sum.empty()) {
                sum = Tensor(y.shape());
            }
            for (long i = 0; i < y.size(); ++i)
                sum[static_cast<std::size_t>(i)] +=
                    static_cast<float>(br.gamma) * y[static_cast<std::size_t>(i)];
            if (branch_cache) branch_cache->push_back(std::move(y));
        }
        return sum;
    }

    Tensor backward_extended(const LayerSpec& L, ExtendedLayer& el, const Tensor& x,
                             const Tensor& gy, const std::vector<Tensor>& branch_outs) {
        Tensor gx(x.shape());
        Tensor gx_branch(x.shape());
        for (std::size_t j = 0; j < el.branches.size(); ++j) {
            ExtendedBranch& br = el.branches[j];
            // d loss / d gamma_j = <gy, y_j>
            double dot = 0;
            const Tensor& yj = branch_outs[j];
            for (long i = 0; i < gy.size(); ++i)
                dot += static_cast<double>(gy[static_cast<std::size_t>(i)]) *
                       yj[static_cast<std::size_t>(i)];
            br.gamma_grad += dot;
            // input gradient through the branch, scaled by gamma
            if (L.kind == LayerKind::Conv)
                kernels::conv2d_backward(L, br.weights, x, gy, &gx_branch, nullptr, nullptr);
            else
                kernels::linear_backward(br.weights, x, gy, &gx_branch, nullptr, nullptr);
            for (long i = 0; i < gx.size(); ++i)
                gx[static_cast<std::size_t>(i)] += static_cast<float>(br.gamma) *
                                                   gx_branch[static_cast<std::size_t>(i)];
        }
        return gx;
    }

    Tensor forward_plain(const LayerSpec& L, std::size_t idx, const Tensor& x,
                         Trace* trace) const {
        switch (L.kind) {
            case LayerKind::Pool:
                if (L.pool_mode == PoolMode::Max) {
                    // reuse Runtime via a single-layer spec walk
                    return pool_forward(L, x, trace ? &trace->base_trace.pool_argmax[idx] : nullptr);
                } else {
                    return gap_forward(L, x);
                }
            case LayerKind::Activation: {
                Tensor y = x;
                for (long i = 0; i < y.size(); ++i)
                    if (y[static_cast<std::size_t>(i)] < 0) y[static_cast<std::size_t>(i)] = 0;
                return y;
            }
            default:
                throw StructuralError("extended network supports conv/linear/pool/activation, got " +
                                      std::string(layer_kind_name(L.kind)));
        }
    }

    Tensor backward_plain(const LayerSpec& L, std::size_t idx, const Tensor& x, const Tensor& gy,
                          const Trace& trace) const {
        switch (L.kind) {
            case LayerKind::Pool:
                if (L.pool_mode == PoolMode::Max) {
                    Tensor gx(x.shape());
                    const auto& argmax = trace.base_trace.pool_argmax[idx];
                    for (long i = 0; i < gy.size(); ++i)
                        gx[static_cast<std::size_t>(argmax[static_cast<std::size_t>(i)])] +=
                            gy[static_cast<std::size_t>(i)];
                    return gx;
                } else {
                    Tensor gx(x.shape());
                    const long N = x.dim(0), C = x.dim(1), HW = L.in_h * L.in_w;
                    for (long n = 0; n < N; ++n)
                        for (long c = 0; c < C; ++c) {
                            float g = gy.at2(n, c) / static_cast<float>(HW);
                            float* p = gx.data() + (n * C + c) * HW;
                            for (long i = 0; i < HW; ++i) p[i] = g;
                        }
                    return gx;
                }
            case LayerKind::Activation: {
                Tensor gx(x.shape());
                for (long i = 0; i < x.size(); ++i)
                    gx[static_cast<std::size_t>(i)] =
                        x[static_cast<std::size_t>(i)] > 0 ? gy[static_cast<std::size_t>(i)] : 0.0f;
                return gx;
            }
            default:
                throw StructuralError("unsupported layer in extended backward");
        }
    }

    static Tensor pool_forward(const LayerSpec& L, const Tensor& x, std::vector<long>* argmax) {
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
                                long iy = oy * L.pool_stride + ky, ix = ox * L.pool_stride + kx;
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

    NetworkSpec base_;  // private frozen copy (weights shared via store handle)
    std::vector<ExtendedLayer> layers_;
};

// Per-epoch trace of the coefficient search.
struct SearchLog {
    std::vector<double> epoch_loss;  // combined extraction loss
    std::vector<double> epoch_ce;
};

// Learns the mixing coefficients with plain SGD at the configured rate,
// exponentially decayed. Branch weights and all base weights stay untouched.
inline SearchLog train_sparsity_coefficients(ExtendedNetwork& ext, const LabeledDataset& data,
                                             const SparsitySearchConfig& cfg, Rng& rng) {
    SearchLog log;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double lr = cfg.lr;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double ep_loss = 0, ep_ce = 0;
        long batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                          order.begin() + static_cast<long>(end));
            Tensor batch = make_batch(data, idx);
            std::vector<long> labels;
            for (std::size_t i : idx) labels.push_back(data.labels[i]);
            ExtendedNetwork::Trace trace;
            Tensor logits = ext.forward(batch, &trace);
            CeResult ce = softmax_ce(logits, labels);
            double total = extraction_loss(ce.loss, ext.layers(), cfg);
            if (!std::isfinite(total)) throw TrainingError("sparsity search diverged");
            ext.zero_gamma_grads();
            Tensor seed = ce.logit_grad;
            seed *= static_cast<float>(cfg.lambda0);
            ext.backward(trace, seed);
            for (auto& el : ext.layers())
                for (auto& br : el.branches) {
                    double sign = br.gamma > 0 ? 1.0 : (br.gamma < 0 ? -1.0 : 0.0);
                    double g = br.gamma_grad +
                               cfg.lambda1 * sign *
                                   (cfg.alpha * static_cast<double>(br.mem_access) +
                                    cfg.beta * static_cast<double>(br.macs));
                    br.gamma -= lr * g;
                }
            ep_loss += total;
            ep_ce += ce.loss;
            ++batches;
        }
        log.epoch_loss.push_back(ep_loss / std::max(1L, batches));
        log.epoch_ce.push_back(ep_ce / std::max(1L, batches));
        lr *= cfg.lr_decay;
    }
    return log;
}

// Masked copy of the base with per-layer rates from the gamma table.
struct SubgraphSpec {
    NetworkSpec net;  // masked base copy; classifier head intact until truncation
    std::map<std::string, BinaryMask> masks;
    std::map<std::string, double> rates;
    std::size_t truncation_point = 0;  // count of retained feature layers
    bool head_removed = false;
};

inline SubgraphSpec extract_subgraph(const NetworkSpec& base,
                                     const std::vector<ExtendedNetwork::GammaRecord>& table) {
    SubgraphSpec sg;
    sg.net = base;
    sg.net.params = std::make_shared<ParamStore>(*base.params);  // deep copy
    sg.truncation_point = sg.net.layers.size();
    std::map<std::string, const ExtendedNetwork::GammaRecord*> by_name;
    for (const auto& r : table) by_name[r.layer] = &r;
    for (const LayerSpec& L : sg.net.layers) {
        if (!L.prunable()) continue;
        auto it = by_name.find(L.name);
        if (it == by_name.end()) throw StructuralError("gamma table missing layer " + L.name);
        const auto& rec = *it->second;
        double zeta = effective_sparsity(normalize_coefficients(rec.gammas), rec.rates);
        Tensor& W = sg.net.params->param(L.name + ".weight");
        Tensor& B = sg.net.params->param(L.name + ".bias");
        BinaryMask mask = generate_mask_l2(W, zeta);
        apply_unit_mask(W, &B, mask);
        sg.rates[L.name] = zeta;
        sg.masks[L.name] = std::move(mask);
    }
    return sg;
}

// Effective cost of the retained feature-extractor part, counting only
// surviving units and the channels feeding them.
inline CostProfile subgraph_cost(const SubgraphSpec& sg) {
    CostProfile total;
    long live_in = sg.net.input_shape[0];
    for (std::size_t i = 0; i < sg.truncation_point && i < sg.net.split_index; ++i) {
        const LayerSpec& L = sg.net.layers[i];
        if (L.kind == LayerKind::Conv) {
            auto it = sg.masks.find(L.name);
            long kept = it != sg.masks.end() ? it->second.kept_count() : L.out_channels;
            CostProfile c;
            c.param_count = L.kernel * L.kernel * live_in * kept + kept;
            c.mac_count = L.kernel * L.kernel * live_in * kept * L.out_h * L.out_w;
            c.mem_access_cost = c.param_count + live_in * L.in_h * L.in_w + kept * L.out_h * L.out_w;
            total += c;
            live_in = kept;
        } else {
            LayerSpec eff = L;  // shape-preserving layers scale by live channels
            if (!L.flat_in && L.in_c > 0) {
                eff.in_channels = live_in;
                eff.in_c = live_in;
                if (L.kind == LayerKind::Pool && L.pool_mode == PoolMode::GlobalAvg)
                    eff.out_features = live_in;
                else
                    eff.out_c = live_in;
            }
            total += layer_cost(eff);
        }
    }
    return total;
}

struct TailBudget {
    long max_params = 0;
    long max_macs = 0;
};

// Drops the classifier head, then trailing conv stages deepest-first until
// the effective cost fits the budget. A stage is everything from after the
// previous pool through its pool layer.
inline SubgraphSpec truncate_tail(const SubgraphSpec& input, const TailBudget& budget) {
    if (budget.max_params <= 0 || budget.max_macs <= 0)
        throw BudgetError("budget must be positive");
    SubgraphSpec sg = input;
    sg.head_removed = true;
    sg.truncation_point = sg.net.split_index;

    // stage boundaries: index one past each pool layer
    std::vector<std::size_t> boundaries;
    for (std::size_t i = 0; i < sg.net.split_index; ++i)
        if (sg.net.layers[i].kind == LayerKind::Pool) boundaries.push_back(i + 1);
    if (boundaries.empty() || boundaries.back() != sg.net.split_index)
        boundaries.push_back(sg.net.split_index);

    std::size_t stages = boundaries.size();
    auto fits = [&]() {
        CostProfile c = subgraph_cost(sg);
        return c.param_count <= budget.max_params && c.mac_count <= budget.max_macs;
    };
    while (!fits()) {
        if (stages <= 1)
            throw BudgetError("budget unreachable even with a single stage retained");
        --stages;
        sg.truncation_point = boundaries[stages - 1];
    }
    // physically drop removed layers (head and truncated tail)
    sg.net.layers.resize(sg.truncation_point);
    sg.net.split_index = sg.truncation_point;
    for (auto it = sg.masks.begin(); it != sg.masks.end();) {
        bool found = false;
        for (const auto& L : sg.net.layers)
            if (L.name == it->first) {
                found = true;
                break;
            }
        it = found ? std::next(it) : sg.masks.erase(it);
    }
    return sg;
}

// Retrains unmasked weights with the augmentation menu and label smoothing;
// masked positions stay exactly zero via gradient gating.
inline TrainLog fine_tune_subgraph(SubgraphSpec& sg, const LabeledDataset& data,
                                   const SgdConfig& cfg_in, Rng& rng) {
    if (sg.head_removed)
        throw StructuralError("fine-tuning requires the classifier head");
    SgdConfig cfg = cfg_in;
    GradHook hook = [&sg](ParamStore& ps) {
        for (const auto& [name, mask] : sg.masks) gate_unit_grads(ps, name, mask);
    };
    TrainLog log = train_classifier(sg.net, data, cfg, rng, hook);
    // the gating must have kept every masked position at exactly zero
    for (const auto& [name, mask] : sg.masks) {
        const Tensor& W = sg.net.params->param(name + ".weight");
        long per_unit = W.size() / mask.unit_count();
        for (long u = 0; u < mask.unit_count(); ++u) {
            if (mask.unit_keep[static_cast<std::size_t>(u)]) continue;
            for (long i = 0; i < per_unit; ++i)
                if (W[static_cast<std::size_t>(u * per_unit + i)] != 0.0f)
                    throw ConsistencyError("masked weight moved during fine-tuning: " + name);
        }
    }
    return log;
}

}  // namespace xdelta
