#pragma once

#include <functional>
#include <string>
#include <vector>

#include "repformer/data.hpp"
#include "repformer/gradcheck.hpp"
#include "repformer/model.hpp"
#include "repformer/ops.hpp"

namespace repformer {

/// The small instance used for whole-model gradient checks.
inline ModelConfig gradcheck_model_config() {
    ModelConfig c;
    c.image_size = 32;
    c.levels = 3;
    c.stages = 2;
    c.landmarks = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.backbone_width = 4;
    return c;
}

struct GradSuiteOptions {
    std::uint64_t seed = 42;
    double h = 1e-5;
    double tol = 1e-4;
    // Key biases have an identically zero gradient (softmax shift invariance),
    // leaving only finite-difference rounding noise of order 1e-11.
    double abs_floor = 1e-6;
    std::size_t max_entries = 24;  // per parameter tensor; 0 = all
    bool ops = true;
    bool model = true;
};

namespace detail {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double min_abs = 0) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) {
        double r = rng.normal();
        // keep away from kinks (relu, abs)
        if (min_abs > 0 && std::abs(r) < min_abs) r = r < 0 ? r - min_abs : r + min_abs;
        x = static_cast<T>(r);
    }
    return Tensor<T>(std::move(shape), std::move(v), true);
}

}  // namespace detail

/// One VJP check per differentiable primitive, named "op:<name>".
template <typename T>
std::vector<GradCheckEntry> op_gradchecks(const GradSuiteOptions& o) {
    Rng rng = Rng::stream(o.seed, 1);
    GradCheckOptions opt;
    opt.h = o.h;
    opt.tol = o.tol;
    opt.abs_floor = o.abs_floor;
    std::vector<GradCheckEntry> out;
    auto check = [&](const std::string& op, const NamedTensors<T>& in, std::function<Tensor<T>()> f) {
        opt.seed = rng.next_u64();
        out.push_back(vjp_check<T>("op:" + op, f, in, opt));
    };
    using detail::random_tensor;
    {
        auto a = random_tensor<T>({3, 4}, rng), b = random_tensor<T>({4}, rng);
        check("add", {{"a", a}, {"b", b}}, [=] { return add(a, b); });
        check("sub", {{"a", a}, {"b", b}}, [=] { return sub(a, b); });
        check("mul", {{"a", a}, {"b", b}}, [=] { return mul(a, b); });
        check("scale", {{"a", a}}, [=] { return scale(a, T(0.7)); });
        check("add_scalar", {{"a", a}}, [=] { return add_scalar(a, T(0.3)); });
        check("exp", {{"a", a}}, [=] { return exp(a); });
        check("sigmoid", {{"a", a}}, [=] { return sigmoid(a); });
        check("sum", {{"a", a}}, [=] { return sum(a); });
        check("sum_axis", {{"a", a}}, [=] { return sum(a, 0, true); });
        check("softmax", {{"a", a}}, [=] { return softmax(a, -1); });
        check("reshape", {{"a", a}}, [=] { return reshape(a, {2, 6}); });
    }
    {
        auto a = random_tensor<T>({3, 4}, rng, 0.05);
        check("relu", {{"a", a}}, [=] { return relu(a); });
        check("abs", {{"a", a}}, [=] { return abs(a); });
    }
    {
        auto a = random_tensor<T>({2, 3, 4}, rng), b = random_tensor<T>({2, 2, 4}, rng);
        check("permute", {{"a", a}}, [=] { return permute(a, {2, 0, 1}); });
        check("concat", {{"a", a}, {"b", b}}, [=] { return concat<T>({a, b}, 1); });
    }
    {
        auto a = random_tensor<T>({2, 3, 4}, rng), b = random_tensor<T>({4, 5}, rng);
        check("matmul", {{"a", a}, {"b", b}}, [=] { return matmul(a, b); });
    }
    {
        auto a = random_tensor<T>({4, 2}, rng), b = random_tensor<T>({5, 2}, rng);
        check("pairwise_sqdist", {{"a", a}, {"b", b}}, [=] { return pairwise_sqdist(a, b); });
    }
    {
        auto x = random_tensor<T>({3, 6}, rng), g = random_tensor<T>({6}, rng), b = random_tensor<T>({6}, rng);
        check("layer_norm", {{"x", x}, {"gain", g}, {"bias", b}}, [=] { return layer_norm(x, g, b); });
    }
    {
        auto x = random_tensor<T>({5, 4, 2}, rng);
        check("im2col", {{"x", x}}, [=] { return im2col(x, 3, 3, 2, 1); });
        check("bilinear_upsample", {{"x", x}}, [=] { return bilinear_upsample(x, 10, 8); });
    }
    return out;
}

/// Whole-model gradient of the multi-stage loss for every parameter tensor,
/// named "param:<name>". Zero-initialized tensors are randomized first so
/// every path carries gradient.
template <typename T>
GradCheckReport model_gradcheck(const ModelConfig& cfg, const GradSuiteOptions& o) {
    Model<T> model(cfg, o.seed);
    Rng rng = Rng::stream(o.seed, 2);
    auto params = model.parameters();
    for (auto& [name, t] : params) {
        auto v = t.mutable_data();
        if (std::all_of(v.begin(), v.end(), [](T x) { return x == T(0); }))
            for (auto& x : v) x = static_cast<T>(0.1 * rng.normal());
    }
    SyntheticFaceSpec spec;
    spec.seed = o.seed;
    spec.image_size = cfg.image_size;
    const Sample face = generate_synthetic(spec, 1).front();
    std::vector<T> gt_values(2 * cfg.landmarks);
    for (auto& x : gt_values) x = static_cast<T>(rng.uniform(0.2, 0.8));
    const Tensor<T> image = face.image<T>();
    const Tensor<T> gt({cfg.landmarks, 2}, gt_values);
    NamedTensors<T> inputs;
    for (auto& [name, t] : params) inputs.emplace_back("param:" + name, t);
    GradCheckOptions opt;
    opt.h = o.h;
    opt.tol = o.tol;
    opt.abs_floor = o.abs_floor;
    opt.max_entries = o.max_entries;
    opt.seed = o.seed;
    return grad_check<T>([&] { return multi_stage_loss(model.predict(image), gt); }, inputs, opt);
}

template <typename T>
GradCheckReport run_gradcheck_suite(const ModelConfig& cfg, const GradSuiteOptions& o = {}) {
    GradCheckReport report;
    auto absorb = [&](const GradCheckEntry& e) {
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
        report.passed = report.passed && e.passed;
        report.entries.push_back(e);
    };
    if (o.ops)
        for (const auto& e : op_gradchecks<T>(o)) absorb(e);
    if (o.model)
        for (const auto& e : model_gradcheck<T>(cfg, o).entries) absorb(e);
    return report;
}

}  // namespace repformer
