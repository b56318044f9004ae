#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "xdelta/common.hpp"
#include "xdelta/rng.hpp"

namespace xdelta {

// Dense row-major float tensor. Convolutional activations use NCHW order,
// feature batches use N x D. Small and value-semantic on purpose; all heavy
// lifting happens in the layer kernels.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0f);
    }

    Tensor(std::vector<long> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<long>(data_.size()) != count(shape_))
            throw StructuralError("tensor data does not match shape");
    }

    static long count(const std::vector<long>& shape) {
        long n = 1;
        for (long d : shape) {
            if (d < 0) throw StructuralError("negative tensor dimension");
            n *= d;
        }
        return n;
    }

    const std::vector<long>& shape() const { return shape_; }
    long dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    long size() const { return static_cast<long>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at4(long n, long c, long h, long w) {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    float at4(long n, long c, long h, long w) const {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    float& at2(long r, long c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
    float at2(long r, long c) const { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    void fill_normal(Rng& rng, float mean, float stddev) {
        for (auto& v : data_) v = static_cast<float>(rng.normal(mean, stddev));
    }

    void fill_uniform(Rng& rng, float lo, float hi) {
        for (auto& v : data_) v = static_cast<float>(rng.uniform(lo, hi));
    }

    Tensor reshaped(std::vector<long> shape) const {
        if (count(shape) != size()) throw StructuralError("reshape changes element count");
        return Tensor(std::move(shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor& operator+=(const Tensor& o) {
        assert(same_shape(o));
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator*=(float s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    double sum() const {
        double s = 0;
        for (float v : data_) s += v;
        return s;
    }
    double abs_sum() const {
        double s = 0;
        for (float v : data_) s += std::fabs(v);
        return s;
    }
    float max_value() const {
        float m = data_.empty() ? 0.0f : data_[0];
        for (float v : data_) m = std::max(m, v);
        return m;
    }
    float min_value() const {
        float m = data_.empty() ? 0.0f : data_[0];
        for (float v : data_) m = std::min(m, v);
        return m;
    }

    const std::vector<float>& storage() const { return data_; }
    std::vector<float>& storage() { return data_; }

  private:
    std::vector<long> shape_;
    std::vector<float> data_;
};

inline Tensor operator+(Tensor a, const Tensor& b) { return a += b; }

// Checksum over exact float bit patterns; basis of the frozen-endpoint checks.
inline std::uint64_t tensor_checksum(const Tensor& t, std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(long), seed);
    return fnv1a64(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float), h);
}

}  // namespace xdelta
