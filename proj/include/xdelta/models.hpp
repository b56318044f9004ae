#pragma once

#include <string>

#include "xdelta/network.hpp"

namespace xdelta {

// Reference architectures at 32x32. Width multipliers keep them trainable on
// a desktop CPU while preserving the depth/width contrast between the pair.

// 13 conv layers in five stages (2-2-3-3-3), classifier of two linear layers.
inline NetworkSpec vgg16_style(long width, long classes, long head_hidden = 0) {
    NetworkSpec net;
    net.input_shape = {3, 32, 32};
    const long w1 = width, w2 = 2 * width, w4 = 4 * width, w8 = 8 * width;
    long convs_per_stage[5] = {2, 2, 3, 3, 3};
    long widths[5] = {w1, w2, w4, w8, w8};
    long in_ch = 3;
    int ci = 0;
    for (int stage = 0; stage < 5; ++stage) {
        for (long k = 0; k < convs_per_stage[stage]; ++k) {
            net.layers.push_back(conv_spec("conv" + std::to_string(ci), in_ch, widths[stage]));
            net.layers.push_back(relu_spec("relu" + std::to_string(ci)));
            in_ch = widths[stage];
            ++ci;
        }
        net.layers.push_back(maxpool_spec("pool" + std::to_string(stage)));
    }
    net.split_index = net.layers.size();  // feature extractor ends here, 8w x 1 x 1
    if (head_hidden <= 0) head_hidden = w8;
    net.layers.push_back(linear_spec("fc0", w8, head_hidden));
    net.layers.push_back(relu_spec("fc_relu"));
    net.layers.push_back(linear_spec("fc1", head_hidden, classes));
    net.finalize();
    return net;
}

// Five single-conv stages and one linear classifier; no norm layers.
inline NetworkSpec vgg8_style(long width, long classes) {
    NetworkSpec net;
    net.input_shape = {3, 32, 32};
    long widths[5] = {width, 2 * width, 4 * width, 8 * width, 8 * width};
    long in_ch = 3;
    for (int stage = 0; stage < 5; ++stage) {
        net.layers.push_back(conv_spec("conv" + std::to_string(stage), in_ch, widths[stage]));
        net.layers.push_back(relu_spec("relu" + std::to_string(stage)));
        net.layers.push_back(maxpool_spec("pool" + std::to_string(stage)));
        in_ch = widths[stage];
    }
    net.split_index = net.layers.size();
    net.layers.push_back(linear_spec("fc0", widths[4], classes));
    net.finalize();
    return net;
}

// Small four-conv network used by the component-level studies.
inline NetworkSpec conv4_net(long width, long classes) {
    NetworkSpec net;
    net.input_shape = {3, 32, 32};
    long widths[4] = {width, 2 * width, 4 * width, 4 * width};
    long in_ch = 3;
    for (int stage = 0; stage < 4; ++stage) {
        net.layers.push_back(conv_spec("conv" + std::to_string(stage), in_ch, widths[stage]));
        net.layers.push_back(relu_spec("relu" + std::to_string(stage)));
        net.layers.push_back(maxpool_spec("pool" + std::to_string(stage)));
        in_ch = widths[stage];
    }
    net.split_index = net.layers.size();  // 4w x 2 x 2
    net.layers.push_back(linear_spec("fc0", widths[3] * 2 * 2, classes));
    net.finalize();
    return net;
}

}  // namespace xdelta
