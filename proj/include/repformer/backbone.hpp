#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "repformer/nn.hpp"
#include "repformer/ops.hpp"

namespace repformer {

template <typename T>
struct ConvParams {
    Tensor<T> weight;  // [kh, kw, cin, cout]
    Tensor<T> bias;    // [cout]
    std::size_t stride = 1;
    std::size_t pad = 0;

    // He-uniform weights, zero bias.
    static ConvParams he(std::size_t k, std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(k * k * cin));
        return {uniform_tensor<T>({k, k, cin, cout}, bound, rng), Tensor<T>::zeros({cout}, true), stride,
                k / 2};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

struct BackboneConfig {
    std::size_t in_channels = 1;
    std::size_t levels = 4;       // M
    std::size_t base_width = 16;  // channels of stage 1; doubles per stage up to 4x
    std::size_t d_model = 64;

    std::size_t stage_width(std::size_t stage) const {
        return base_width << std::min<std::size_t>(stage, 2);
    }
};

/// One f_B^i: a stride-2 3x3 conv followed by a stride-1 3x3 conv, both ReLU.
template <typename T>
struct BackboneStage {
    ConvParams<T> down;
    ConvParams<T> refine;
    ConvParams<T> project;  // 1x1 to d_model, no activation

    Tensor<T> features(const Tensor<T>& x) const { return relu(refine(relu(down(x)))); }
};

template <typename T>
struct BackboneParams {
    BackboneConfig config;
    ConvParams<T> stem;  // stride 2; together with stage 1's stride gives the 4x stem
    std::vector<BackboneStage<T>> stages;

    static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
        BackboneParams p;
        p.config = cfg;
        p.stem = ConvParams<T>::he(3, cfg.in_channels, cfg.base_width, 2, rng);
        std::size_t cin = cfg.base_width;
        for (std::size_t i = 0; i < cfg.levels; ++i) {
            const std::size_t c = cfg.stage_width(i);
            BackboneStage<T> s;
            s.down = ConvParams<T>::he(3, cin, c, 2, rng);
            s.refine = ConvParams<T>::he(3, c, c, 1, rng);
            s.project = ConvParams<T>::he(1, c, cfg.d_model, 1, rng);
            p.stages.push_back(std::move(s));
            cin = c;
        }
        return p;
    }

    // Projections of levels below `from_level` are skipped: they feed no memory.
    void collect(NamedTensors<T>& out, const std::string& prefix, std::size_t from_level = 1) const {
        stem.collect(out, prefix + ".stem");
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const std::string s = prefix + ".stage" + std::to_string(i + 1);
            stages[i].down.collect(out, s + ".down");
            stages[i].refine.collect(out, s + ".refine");
            if (i + 1 >= from_level) stages[i].project.collect(out, s + ".project");
        }
    }
};

/// Multi-resolution features z_1..z_M, each [h_i, w_i, d_model]; level 1 is
/// the finest.
template <typename T>
struct FeaturePyramid {
    std::vector<Tensor<T>> levels;    // levels[i - 1] holds z_i
    std::vector<std::size_t> strides;  // downsampling factor of each level vs the input

    std::size_t depth() const { return levels.size(); }
    const Tensor<T>& level(std::size_t i) const { return levels.at(i - 1); }
};

/// Runs the stage composition f_B^M(...f_B^1(image)) and projects every stage
/// output to d_model channels.
template <typename T>
FeaturePyramid<T> extract(const Tensor<T>& image, const BackboneParams<T>& params) {
    const auto& cfg = params.config;
    if (image.rank() != 3 || image.dim(2) != cfg.in_channels)
        throw ShapeMismatch("backbone expects [H,W," + std::to_string(cfg.in_channels) + "] image, got " +
                            to_string(image.shape()));
    const std::size_t factor = std::size_t{1} << (cfg.levels + 1);
    if (image.dim(0) % factor != 0 || image.dim(1) % factor != 0)
        throw BadResolution("image " + std::to_string(image.dim(0)) + "x" + std::to_string(image.dim(1)) +
                            " not divisible by " + std::to_string(factor) + " for " +
                            std::to_string(cfg.levels) + " levels");
    FeaturePyramid<T> z;
    Tensor<T> x = relu(params.stem(image));
    std::size_t stride = 2;
    for (const auto& stage : params.stages) {
        x = stage.features(x);
        stride *= 2;
        z.levels.push_back(stage.project(x));
        z.strides.push_back(stride);
    }
    return z;
}

}  // namespace repformer
