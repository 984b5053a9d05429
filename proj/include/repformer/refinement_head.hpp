#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "repformer/nn.hpp"
#include "repformer/pyramid_memory.hpp"

namespace repformer {

/// Queries and normalized (x, y) coordinates of the N landmarks after a
/// refinement stage. Stage 0 is the initial estimate.
template <typename T>
struct LandmarkState {
    std::size_t stage = 0;
    Tensor<T> queries;    // [N, d]
    Tensor<T> coords;     // [N, 2]
    Tensor<T> residuals;  // [N, 2]; undefined for stage 0 and absolute predictions
    Tensor<T> weights;    // [N, P] aggregation weights; undefined when queries were not aggregated
};

template <typename T>
struct InitializerParams {
    Tensor<T> embeddings;  // learned E^1, [N, d]
    Linear<T> coord_head;  // pooled top memory -> 2N logits; unused without residual refinement

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".embeddings", embeddings);
        if (coord_head.weight.defined()) coord_head.collect(out, prefix + ".coord_head");
    }
};

/// Landmark-to-landmark self-attention, landmark-to-memory cross-attention,
/// then an FFN; each sublayer is residual + LayerNorm.
template <typename T>
struct DecoderStageParams {
    MhaParams<T> self_attn;
    LayerNormParams<T> ln_self;
    MhaParams<T> cross_attn;
    LayerNormParams<T> ln_cross;
    FfnParams<T> ffn;
    LayerNormParams<T> ln_ffn;

    static DecoderStageParams init(std::size_t d_model, std::size_t n_heads, std::size_t d_ff, Rng& rng) {
        DecoderStageParams p;
        p.self_attn = MhaParams<T>::init(d_model, n_heads, rng);
        p.ln_self = LayerNormParams<T>::identity(d_model);
        p.cross_attn = MhaParams<T>::init(d_model, n_heads, rng);
        p.ln_cross = LayerNormParams<T>::identity(d_model);
        p.ffn = FfnParams<T>::init(d_model, d_ff, d_model, rng);
        p.ln_ffn = LayerNormParams<T>::identity(d_model);
        return p;
    }

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        self_attn.collect(out, prefix + ".self_attn");
        ln_self.collect(out, prefix + ".ln_self");
        cross_attn.collect(out, prefix + ".cross_attn");
        ln_cross.collect(out, prefix + ".ln_cross");
        ffn.collect(out, prefix + ".ffn");
        ln_ffn.collect(out, prefix + ".ln_ffn");
    }
};

template <typename T>
struct StageParams {
    DecoderStageParams<T> decoder;
    std::optional<FfnParams<T>> predictor;  // d -> d -> 2, shared across landmarks
};

template <typename T>
struct HeadParams {
    InitializerParams<T> init;
    std::vector<StageParams<T>> stages;

    void collect(NamedTensors<T>& out, const std::string& prefix) const {
        init.collect(out, prefix + ".init");
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const std::string s = prefix + ".stage" + std::to_string(i + 1);
            stages[i].decoder.collect(out, s);
            if (stages[i].predictor) stages[i].predictor->collect(out, s + ".predictor");
        }
    }
};

/// L^0 = sigmoid(W meanpool(v_M) + b) as [N, 2]; queries are the learned E^1.
template <typename T>
LandmarkState<T> init_landmarks(const Tensor<T>& top_memory, const InitializerParams<T>& params) {
    const std::size_t n = params.embeddings.dim(0);
    if (params.coord_head.out_features() != 2 * n)
        throw ShapeMismatch("coordinate head must emit 2N values");
    Tensor<T> pooled = mean(top_memory, 0, true);  // [1, d]
    Tensor<T> coords = reshape(sigmoid(params.coord_head(pooled)), {n, 2});
    return {0, params.embeddings, coords, {}, {}};
}

/// One decoder stage: self-attention over the N queries, cross-attention
/// into one memory level (values = memory), FFN. Optional positional
/// encodings are added to the attention queries and keys only.
template <typename T>
Tensor<T> pth_stage(const Tensor<T>& queries, const Tensor<T>& memory, const DecoderStageParams<T>& p,
                    const Tensor<T>& query_pos = {}, const Tensor<T>& memory_pos = {}) {
    if (queries.rank() != 2 || memory.rank() != 2 || queries.dim(1) != memory.dim(1))
        throw ShapeMismatch("pth_stage: queries " + to_string(queries.shape()) + " vs memory " +
                            to_string(memory.shape()));
    auto with = [](const Tensor<T>& x, const Tensor<T>& pos) { return pos.defined() ? add(x, pos) : x; };
    const Tensor<T> qk = with(queries, query_pos);
    Tensor<T> x = p.ln_self(add(queries, mha(qk, qk, queries, p.self_attn).output));
    Tensor<T> y = p.ln_cross(add(x, mha(with(x, query_pos), with(memory, memory_pos), memory, p.cross_attn).output));
    return p.ln_ffn(add(y, p.ffn(y)));
}

template <typename T>
struct Aggregate {
    Tensor<T> queries;  // [N, d]
    Tensor<T> weights;  // [N, P]
};

/// Soft crop: query j = sum_k s_jk memory[k] with
/// s_j = softmax_k(-tau * ||l_j - c_k||^2). Differentiable in coords, memory and tau.
template <typename T>
Aggregate<T> dynamic_aggregate(const Tensor<T>& coords, const Tensor<T>& memory,
                               const Tensor<T>& pixel_coords, const Tensor<T>& tau) {
    if (tau.numel() != 1) throw ShapeMismatch("temperature must be a scalar");
    if (!(tau.item() > T(0))) throw BadTemperature("temperature must be positive");
    if (memory.rank() != 2 || pixel_coords.rank() != 2 || memory.dim(0) != pixel_coords.dim(0))
        throw ShapeMismatch("dynamic_aggregate: memory " + to_string(memory.shape()) + " vs coords " +
                            to_string(pixel_coords.shape()));
    Tensor<T> logits = mul(pairwise_sqdist(coords, pixel_coords), scale(tau, T(-1)));
    Tensor<T> weights = softmax(logits, -1);
    return {matmul(weights, memory), weights};
}

template <typename T>
Aggregate<T> dynamic_aggregate(const Tensor<T>& coords, const Tensor<T>& memory,
                               const Tensor<T>& pixel_coords, T tau) {
    return dynamic_aggregate(coords, memory, pixel_coords, Tensor<T>::scalar(tau));
}

/// Row-wise residual predictor; no output activation.
template <typename T>
Tensor<T> predict_residuals(const Tensor<T>& queries, const FfnParams<T>& predictor) {
    return predictor(queries);
}

struct HeadMode {
    bool pyramid = true;  // stage i attends v_{M-i+1}; otherwise every stage attends v_M
    bool dlr = true;      // residual cascade with aggregated queries; otherwise one absolute prediction
    bool decoder_pos = false;  // sine positional encodings on decoder keys and queries
};

/// Cascaded refinement over the memory pyramid. With residual refinement the
/// result holds stages 0..K; otherwise it holds the single final prediction.
template <typename T>
std::vector<LandmarkState<T>> refine(const MemoryPyramid<T>& v, const HeadParams<T>& params, std::size_t k,
                                     T tau, HeadMode mode = {}) {
    const std::size_t m = v.depth();
    if (k == 0 || k > m || k > params.stages.size())
        throw BadStageCount("stage count " + std::to_string(k) + " must be in 1.." + std::to_string(m));
    if (!(tau > T(0))) throw BadTemperature("temperature must be positive");
    auto level_for = [&](std::size_t stage) { return mode.pyramid ? m - stage + 1 : m; };

    std::vector<LandmarkState<T>> states;
    if (!mode.dlr) {
        Tensor<T> e = params.init.embeddings;
        for (std::size_t i = 1; i <= k; ++i) {
            const auto& mem = v.level(level_for(i));
            e = pth_stage(e, mem.memory, params.stages[i - 1].decoder, {},
                          mode.decoder_pos ? sincos_pos_at(mem.pixel_coords, mem.memory.dim(1)) : Tensor<T>{});
        }
        const auto& pred = params.stages[k - 1].predictor;
        if (!pred) throw ShapeMismatch("final stage has no predictor");
        states.push_back({k, e, sigmoid((*pred)(e)), {}, {}});
        return states;
    }

    states.push_back(init_landmarks(v.level(m).memory, params.init));
    for (std::size_t i = 1; i <= k; ++i) {
        const auto& mem = v.level(level_for(i));
        const auto& prev = states.back();
        LandmarkState<T> s;
        s.stage = i;
        Tensor<T> e_in;
        if (i == 1) {
            e_in = params.init.embeddings;
        } else {
            auto agg = dynamic_aggregate(prev.coords, mem.memory, mem.pixel_coords, tau);
            e_in = agg.queries;
            s.weights = agg.weights;
        }
        Tensor<T> query_pos, memory_pos;
        if (mode.decoder_pos) {
            query_pos = sincos_pos_at(prev.coords, mem.memory.dim(1));
            memory_pos = sincos_pos_at(mem.pixel_coords, mem.memory.dim(1));
        }
        s.queries = pth_stage(e_in, mem.memory, params.stages[i - 1].decoder, query_pos, memory_pos);
        const auto& pred = params.stages[i - 1].predictor;
        if (!pred) throw ShapeMismatch("stage " + std::to_string(i) + " has no predictor");
        s.residuals = predict_residuals(s.queries, *pred);
        s.coords = add(prev.coords, s.residuals);
        states.push_back(std::move(s));
    }
    return states;
}

}  // namespace repformer
