#pragma once

#include <array>
#include <cmath>

#include "xdelta/rng.hpp"
#include "xdelta/tensor.hpp"

namespace xdelta {

// Fine-tuning augmentation menu: random crop (shift with zero pad),
// horizontal flip, random perspective, color jitter. Operates on one
// normalized {C,H,W} image; every draw comes from the caller's stream.
struct AugmentConfig {
    bool enabled = true;
    long crop_pad = 3;
    double flip_prob = 0.5;
    double perspective_prob = 0.3;
    double perspective_strength = 0.12;
    double jitter = 0.2;  // brightness/contrast/saturation half-range
};

namespace aug_detail {

// Homography through four point correspondences (x,y) -> (u,v), h33 = 1.
inline std::array<double, 9> homography(const std::array<double, 8>& xy,
                                        const std::array<double, 8>& uv) {
    double A[8][9] = {};
    for (int i = 0; i < 4; ++i) {
        double x = xy[static_cast<std::size_t>(2 * i)], y = xy[static_cast<std::size_t>(2 * i + 1)];
        double u = uv[static_cast<std::size_t>(2 * i)], v = uv[static_cast<std::size_t>(2 * i + 1)];
        double* r0 = A[2 * i];
        double* r1 = A[2 * i + 1];
        r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
        r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
    }
    for (int col = 0; col < 8; ++col) {  // gaussian elimination, partial pivot
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::fabs(A[r][col]) > std::fabs(A[piv][col])) piv = r;
        for (int k = 0; k < 9; ++k) std::swap(A[col][k], A[piv][k]);
        double d = A[col][col];
        if (std::fabs(d) < 1e-12) d = 1e-12;
        for (int k = col; k < 9; ++k) A[col][k] /= d;
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            double f = A[r][col];
            for (int k = col; k < 9; ++k) A[r][k] -= f * A[col][k];
        }
    }
    return {A[0][8], A[1][8], A[2][8], A[3][8], A[4][8], A[5][8], A[6][8], A[7][8], 1.0};
}

inline float bilinear(const Tensor& img, long c, double y, double x) {
    const long H = img.dim(1), W = img.dim(2);
    if (x < -0.5 || y < -0.5 || x > W - 0.5 || y > H - 0.5) return 0.0f;
    long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto at = [&](long yy, long xx) -> float {
        yy = std::clamp(yy, 0L, H - 1);
        xx = std::clamp(xx, 0L, W - 1);
        return img[static_cast<std::size_t>((c * H + yy) * W + xx)];
    };
    return static_cast<float>((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                              fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)));
}

}  // namespace aug_detail

inline Tensor augment_image(const Tensor& img, const AugmentConfig& cfg, Rng& rng) {
    const long C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor out = img;

    // shift crop with zero padding
    long dx = rng.uniform_int(-cfg.crop_pad, cfg.crop_pad);
    long dy = rng.uniform_int(-cfg.crop_pad, cfg.crop_pad);
    if (dx != 0 || dy != 0) {
        Tensor shifted({C, H, W});
        for (long c = 0; c < C; ++c)
            for (long y = 0; y < H; ++y)
                for (long x = 0; x < W; ++x) {
                    long sy = y + dy, sx = x + dx;
                    shifted[static_cast<std::size_t>((c * H + y) * W + x)] =
                        (sy >= 0 && sy < H && sx >= 0 && sx < W)
                            ? out[static_cast<std::size_t>((c * H + sy) * W + sx)]
                            : 0.0f;
                }
        out = std::move(shifted);
    }

    if (rng.bernoulli(cfg.flip_prob)) {
        for (long c = 0; c < C; ++c)
            for (long y = 0; y < H; ++y)
                for (long x = 0; x < W / 2; ++x)
                    std::swap(out[static_cast<std::size_t>((c * H + y) * W + x)],
                              out[static_cast<std::size_t>((c * H + y) * W + (W - 1 - x))]);
    }

    if (rng.bernoulli(cfg.perspective_prob)) {
        double d = cfg.perspective_strength * std::min(H, W);
        std::array<double, 8> dst = {0, 0, double(W), 0, double(W), double(H), 0, double(H)};
        std::array<double, 8> src = dst;
        for (auto& v : src) v += rng.uniform(-d, d);
        auto Hm = aug_detail::homography(dst, src);  // output -> input
        Tensor warped({C, H, W});
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double xc = x + 0.5, yc = y + 0.5;
                double wz = Hm[6] * xc + Hm[7] * yc + Hm[8];
                double sx = (Hm[0] * xc + Hm[1] * yc + Hm[2]) / wz - 0.5;
                double sy = (Hm[3] * xc + Hm[4] * yc + Hm[5]) / wz - 0.5;
                for (long c = 0; c < C; ++c)
                    warped[static_cast<std::size_t>((c * H + y) * W + x)] =
                        aug_detail::bilinear(out, c, sy, sx);
            }
        out = std::move(warped);
    }

    // color jitter in normalized space: brightness shift, contrast about the
    // image mean, saturation toward the channel mean
    float bright = static_cast<float>(rng.uniform(-cfg.jitter, cfg.jitter));
    float contrast = static_cast<float>(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter));
    float sat = static_cast<float>(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter));
    double mean = out.sum() / out.size();
    const long HW = H * W;
    for (long i = 0; i < HW; ++i) {
        float gray = 0;
        for (long c = 0; c < C; ++c) gray += out[static_cast<std::size_t>(c * HW + i)];
        gray /= static_cast<float>(C);
        for (long c = 0; c < C; ++c) {
            float& v = out[static_cast<std::size_t>(c * HW + i)];
            v = gray + sat * (v - gray);
            v = static_cast<float>(mean) + contrast * (v - static_cast<float>(mean)) + bright;
        }
    }
    return out;
}

}  // namespace xdelta
