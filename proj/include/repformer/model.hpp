#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "repformer/backbone.hpp"
#include "repformer/pyramid_memory.hpp"
#include "repformer/refinement_head.hpp"

namespace repformer {

struct ModelConfig {
    std::size_t image_size = 64;
    std::size_t in_channels = 1;
    std::size_t levels = 4;      // M
    std::size_t stages = 3;      // K
    std::size_t landmarks = 5;   // N
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t backbone_width = 16;
    double tau = 1000.0;
    bool pyramid = true;  // cross-scale memories, stage i on level M-i+1
    bool dlr = true;      // residual refinement with dynamically aggregated queries
    bool decoder_pos = false;

    BackboneConfig backbone() const { return {in_channels, levels, backbone_width, d_model}; }
};

template <typename T>
struct ForwardResult {
    FeaturePyramid<T> features;
    MemoryPyramid<T> memories;
    std::vector<LandmarkState<T>> states;
};

template <typename T>
class Model {
public:
    Model() = default;

    Model(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
        if (cfg.stages == 0 || cfg.stages > cfg.levels)
            throw BadStageCount("stages must be in 1.." + std::to_string(cfg.levels));
        Rng rng(seed);
        backbone_ = BackboneParams<T>::init(cfg.backbone(), rng);
        if (cfg.pyramid) cross_scale_ = CrossScaleParams<T>::init(cfg.levels, cfg.d_model, cfg.n_heads, cfg.d_ff, rng);
        head_.init.embeddings = normal_tensor<T>({cfg.landmarks, cfg.d_model}, 1.0, rng);
        if (cfg.dlr) head_.init.coord_head = Linear<T>::xavier(cfg.d_model, 2 * cfg.landmarks, rng);
        for (std::size_t i = 0; i < cfg.stages; ++i) {
            StageParams<T> s;
            s.decoder = DecoderStageParams<T>::init(cfg.d_model, cfg.n_heads, cfg.d_ff, rng);
            if (cfg.dlr || i + 1 == cfg.stages)
                s.predictor = FfnParams<T>::init(cfg.d_model, cfg.d_model, 2, rng, /*zero_output=*/true);
            head_.stages.push_back(std::move(s));
        }
    }

    const ModelConfig& config() const { return config_; }
    const BackboneParams<T>& backbone() const { return backbone_; }
    const CrossScaleParams<T>& cross_scale() const { return cross_scale_; }
    const HeadParams<T>& head() const { return head_; }
    BackboneParams<T>& backbone() { return backbone_; }
    CrossScaleParams<T>& cross_scale() { return cross_scale_; }
    HeadParams<T>& head() { return head_; }

    /// Lowest pyramid level whose memory is read by the head.
    std::size_t lowest_level() const {
        return config_.pyramid ? config_.levels - config_.stages + 1 : config_.levels;
    }

    /// Every trainable tensor that reaches the output, with a stable dotted
    /// name, in a fixed order.
    NamedTensors<T> parameters() const {
        NamedTensors<T> out;
        backbone_.collect(out, "backbone", lowest_level());
        cross_scale_.collect(out, "cross_scale", lowest_level());
        head_.collect(out, "head");
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : parameters()) n += t.numel();
        return n;
    }

    /// Deep copy: same structure, independent parameter storage.
    Model clone() const {
        Model m(config_, 0);
        m.copy_parameters_from(*this);
        return m;
    }

    void copy_parameters_from(const Model& other) {
        auto dst = parameters();
        const auto src = other.parameters();
        if (dst.size() != src.size()) throw ShapeMismatch("parameter structure differs");
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (dst[i].first != src[i].first || dst[i].second.shape() != src[i].second.shape())
                throw ShapeMismatch("parameter mismatch at " + dst[i].first);
            auto out = dst[i].second.mutable_data();
            auto in = src[i].second.data();
            std::copy(in.begin(), in.end(), out.begin());
        }
    }

    void zero_grad() {
        for (auto& [name, t] : parameters()) t.zero_grad();
    }

    ForwardResult<T> forward(const Tensor<T>& image) const {
        ForwardResult<T> r;
        r.features = extract(image, backbone_);
        if (config_.pyramid)
            r.memories = build_memories(r.features, cross_scale_, lowest_level());
        else
            r.memories = top_level_memory(r.features);
        r.states = refine(r.memories, head_, config_.stages, static_cast<T>(config_.tau),
                          HeadMode{config_.pyramid, config_.dlr, config_.decoder_pos});
        return r;
    }

    std::vector<LandmarkState<T>> predict(const Tensor<T>& image) const { return forward(image).states; }

private:
    ModelConfig config_;
    BackboneParams<T> backbone_;
    CrossScaleParams<T> cross_scale_;
    HeadParams<T> head_;
};

}  // namespace repformer
