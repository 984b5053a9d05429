#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "repformer/rng.hpp"
#include "repformer/tensor.hpp"

namespace repformer {

struct GradCheckOptions {
    double h = 1e-5;
    double tol = 1e-4;
    // Entries checked per tensor; 0 checks all. When sampling, the entry with
    // the largest analytic gradient is always included.
    std::size_t max_entries = 0;
    std::uint64_t seed = 0;
    // Denominator floor for tensors whose gradient is (numerically) zero.
    double abs_floor = 1e-8;
};

struct GradCheckEntry {
    std::string name;
    std::size_t checked = 0;
    double max_abs_error = 0;
    double rel_error = 0;  // max|analytic - numeric| / max(max|analytic|, max|numeric|)
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0;
    bool passed = true;

    const GradCheckEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

inline std::ostream& operator<<(std::ostream& os, const GradCheckReport& r) {
    for (const auto& e : r.entries)
        os << (e.passed ? "PASS " : "FAIL ") << e.name << " entries=" << e.checked
           << " rel_err=" << e.rel_error << " abs_err=" << e.max_abs_error << '\n';
    os << (r.passed ? "PASS" : "FAIL") << " overall max_rel_err=" << r.max_rel_error << '\n';
    return os;
}

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Compares reverse-mode gradients of the scalar `f()` with respect to each
/// named input against central differences. `f` must rebuild its graph from
/// the current input values on every call.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, const NamedTensors<T>& inputs,
                           const GradCheckOptions& opt = {}) {
    for (const auto& [name, t] : inputs) {
        Tensor<T> handle = t;
        handle.zero_grad();
    }
    {
        Tensor<T> loss = f();
        backward(loss);
    }
    GradCheckReport report;
    Rng rng(opt.seed);
    for (const auto& [name, tensor] : inputs) {
        Tensor<T> t = tensor;
        const std::size_t n = t.numel();
        std::vector<T> analytic(n, T(0));
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

        std::vector<std::size_t> picks;
        if (opt.max_entries == 0 || opt.max_entries >= n) {
            picks.resize(n);
            for (std::size_t i = 0; i < n; ++i) picks[i] = i;
        } else {
            std::size_t top = 0;
            for (std::size_t i = 1; i < n; ++i)
                if (std::abs(analytic[i]) > std::abs(analytic[top])) top = i;
            picks.push_back(top);
            while (picks.size() < opt.max_entries) {
                const std::size_t i = static_cast<std::size_t>(rng.below(n));
                if (std::find(picks.begin(), picks.end(), i) == picks.end()) picks.push_back(i);
            }
            std::sort(picks.begin(), picks.end());
        }

        GradCheckEntry entry;
        entry.name = name;
        entry.checked = picks.size();
        double max_a = 0, max_n = 0;
        auto values = t.mutable_data();
        for (std::size_t i : picks) {
            const T orig = values[i];
            values[i] = static_cast<T>(orig + opt.h);
            const double fp = static_cast<double>(f().item());
            values[i] = static_cast<T>(orig - opt.h);
            const double fm = static_cast<double>(f().item());
            values[i] = orig;
            const double numeric = (fp - fm) / (2 * opt.h);
            const double a = static_cast<double>(analytic[i]);
            entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric));
            max_a = std::max(max_a, std::abs(a));
            max_n = std::max(max_n, std::abs(numeric));
        }
        const double denom = std::max({max_a, max_n, opt.abs_floor});
        entry.rel_error = entry.max_abs_error == 0 ? 0.0 : entry.max_abs_error / denom;
        entry.passed = entry.rel_error < opt.tol;
        report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
        report.passed = report.passed && entry.passed;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

/// Checks the backward rule of a single op: the analytic vector-Jacobian
/// product for a random cotangent r against central differences of r . f().
/// Only the op under test appears in the graph.
template <typename T>
GradCheckEntry vjp_check(const std::string& name, const std::function<Tensor<T>()>& f, const NamedTensors<T>& inputs,
                         const GradCheckOptions& opt = {}) {
    for (const auto& [n, t] : inputs) {
        Tensor<T> handle = t;
        handle.zero_grad();
    }
    Rng rng(opt.seed);
    std::vector<T> r;
    {
        Tensor<T> y = f();
        r.resize(y.numel());
        for (auto& v : r) v = static_cast<T>(rng.normal());
        GradTape<T>(y).replay(std::span<const T>(r));
    }
    auto dot = [&] {
        const Tensor<T> y = f();
        double s = 0;
        for (std::size_t i = 0; i < r.size(); ++i) s += static_cast<double>(r[i]) * static_cast<double>(y.data()[i]);
        return s;
    };
    GradCheckEntry entry;
    entry.name = name;
    double max_a = 0, max_n = 0;
    for (const auto& [n, tensor] : inputs) {
        Tensor<T> t = tensor;
        std::vector<T> analytic(t.numel(), T(0));
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        auto values = t.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T orig = values[i];
            values[i] = static_cast<T>(orig + opt.h);
            const double fp = dot();
            values[i] = static_cast<T>(orig - opt.h);
            const double fm = dot();
            values[i] = orig;
            const double numeric = (fp - fm) / (2 * opt.h);
            const double a = static_cast<double>(analytic[i]);
            entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric));
            max_a = std::max(max_a, std::abs(a));
            max_n = std::max(max_n, std::abs(numeric));
            ++entry.checked;
        }
    }
    const double denom = std::max({max_a, max_n, opt.abs_floor});
    entry.rel_error = entry.max_abs_error == 0 ? 0.0 : entry.max_abs_error / denom;
    entry.passed = entry.rel_error < opt.tol;
    return entry;
}

}  // namespace repformer
