#pragma once

#include <cmath>
#include <functional>
#include <map>

#include "xdelta/augment.hpp"
#include "xdelta/dataset.hpp"
#include "xdelta/network.hpp"

namespace xdelta {

struct CeResult {
    double loss = 0;
    Tensor logit_grad;  // already divided by batch size
};

// Softmax cross entropy with optional label smoothing; mean over the batch.
inline CeResult softmax_ce(const Tensor& logits, const std::vector<long>& labels,
                           double smoothing = 0.0, bool want_grad = true) {
    const long N = logits.dim(0), K = logits.dim(1);
    if (N == 0) throw DomainError("softmax_ce on empty batch");
    CeResult res;
    if (want_grad) res.logit_grad = Tensor(logits.shape());
    double total = 0;
    std::vector<double> p(static_cast<std::size_t>(K));
    for (long n = 0; n < N; ++n) {
        double mx = logits.at2(n, 0);
        for (long k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at2(n, k)));
        double z = 0;
        for (long k = 0; k < K; ++k) {
            p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits.at2(n, k)) - mx);
            z += p[static_cast<std::size_t>(k)];
        }
        for (long k = 0; k < K; ++k) p[static_cast<std::size_t>(k)] /= z;
        for (long k = 0; k < K; ++k) {
            double q = smoothing / static_cast<double>(K) +
                       (k == labels[static_cast<std::size_t>(n)] ? 1.0 - smoothing : 0.0);
            if (q > 0) total -= q * std::log(std::max(p[static_cast<std::size_t>(k)], 1e-30));
            if (want_grad)
                res.logit_grad.at2(n, k) =
                    static_cast<float>((p[static_cast<std::size_t>(k)] - q) / static_cast<double>(N));
        }
    }
    res.loss = total / static_cast<double>(N);
    return res;
}

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double lr_decay = 0.95;  // multiplicative per epoch
    long batch_size = 64;
    long epochs = 10;
    double label_smoothing = 0.0;
    AugmentConfig augment{.enabled = false};
};

// Classical momentum SGD over a ParamStore. `trainable` filters parameters;
// a grad hook between backward and step implements mask gating.
class Sgd {
  public:
    using Filter = std::function<bool(const std::string&)>;

    void step(ParamStore& ps, double lr, double momentum, const Filter& trainable = nullptr) {
        for (auto& [name, g] : ps.grads) {
            if (trainable && !trainable(name)) continue;
            auto pit = ps.params.find(name);
            if (pit == ps.params.end()) continue;
            Tensor& w = pit->second;
            Tensor& v = velocity_.try_emplace(name, Tensor(w.shape())).first->second;
            for (long i = 0; i < w.size(); ++i) {
                float vi = static_cast<float>(momentum) * v[static_cast<std::size_t>(i)] +
                           g[static_cast<std::size_t>(i)];
                v[static_cast<std::size_t>(i)] = vi;
                w[static_cast<std::size_t>(i)] -= static_cast<float>(lr) * vi;
            }
        }
    }

    void reset() { velocity_.clear(); }

  private:
    std::map<std::string, Tensor> velocity_;
};

using GradHook = std::function<void(ParamStore&)>;

// Epoch-level record of a classification training run.
struct TrainLog {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_lr;
};

inline TrainLog train_classifier(NetworkSpec& net, const LabeledDataset& data, const SgdConfig& cfg,
                                 Rng& rng, const GradHook& grad_hook = nullptr,
                                 const Sgd::Filter& trainable = nullptr) {
    if (data.size() == 0) throw DomainError("training on empty dataset");
    TrainLog log;
    Sgd opt;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double lr = cfg.lr;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0;
        long batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                          order.begin() + static_cast<long>(end));
            Tensor batch({static_cast<long>(idx.size()), data.channels, data.height, data.width});
            const long stride = data.channels * data.height * data.width;
            std::vector<long> labels(idx.size());
            for (std::size_t i = 0; i < idx.size(); ++i) {
                Tensor img = cfg.augment.enabled ? augment_image(data.images[idx[i]], cfg.augment, rng)
                                                 : data.images[idx[i]];
                std::copy_n(img.data(), stride, batch.data() + static_cast<long>(i) * stride);
                labels[i] = data.labels[idx[i]];
            }
            ForwardTrace trace;
            Tensor logits = Runtime::forward(net, batch, &trace);
            CeResult ce = softmax_ce(logits, labels, cfg.label_smoothing);
            if (!std::isfinite(ce.loss))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
            net.params->zero_grads();
            Runtime::backward(net, trace, ce.logit_grad);
            if (grad_hook) grad_hook(*net.params);
            opt.step(*net.params, lr, cfg.momentum, trainable);
            epoch_loss += ce.loss;
            ++batches;
        }
        log.epoch_loss.push_back(epoch_loss / std::max(1L, batches));
        log.epoch_lr.push_back(lr);
        lr *= cfg.lr_decay;
    }
    return log;
}

// Mean CE loss without any update; used by the convergence comparisons.
inline double dataset_ce_loss(const NetworkSpec& net, const LabeledDataset& data,
                              long batch_size = 128) {
    if (data.size() == 0) throw DomainError("loss on empty dataset");
    double total = 0;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        Tensor batch = make_batch(data, idx);
        std::vector<long> labels;
        for (std::size_t i : idx) labels.push_back(data.labels[i]);
        Tensor logits = Runtime::forward(net, batch, nullptr);
        total += softmax_ce(logits, labels, 0.0, false).loss * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(data.size());
}

}  // namespace xdelta
