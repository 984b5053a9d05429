#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "repformer/config.hpp"
#include "repformer/data.hpp"
#include "repformer/model.hpp"
#include "repformer/rpft.hpp"

namespace repformer {

// ---------------------------------------------------------------------------
// Adam

struct LrSchedule {
    double initial = 1e-4;
    double decay_factor = 0.1;
    std::size_t decay_epoch = 40;

    double at(std::size_t epoch) const { return epoch >= decay_epoch ? initial * decay_factor : initial; }
};

template <typename T>
struct OptimState {
    std::vector<std::vector<T>> m;  // first moments, one per parameter
    std::vector<std::vector<T>> v;  // second moments
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    LrSchedule schedule;

    static OptimState for_params(const NamedTensors<T>& params) {
        OptimState s;
        for (const auto& [name, t] : params) {
            s.m.emplace_back(t.numel(), T(0));
            s.v.emplace_back(t.numel(), T(0));
        }
        return s;
    }
};

/// Bias-corrected Adam update without weight decay.
template <typename T>
void adam_step(const NamedTensors<T>& params, const std::vector<std::vector<T>>& grads, OptimState<T>& state,
               double lr) {
    if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
        throw ShapeMismatch("adam_step: parameter, gradient and moment counts differ");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T> p = params[i].second;
        auto values = p.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (grads[i].size() != values.size() || m.size() != values.size() || v.size() != values.size())
            throw ShapeMismatch("adam_step: shape mismatch for " + params[i].first);
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double g = static_cast<double>(grads[i][j]);
            const double mj = state.beta1 * static_cast<double>(m[j]) + (1.0 - state.beta1) * g;
            const double vj = state.beta2 * static_cast<double>(v[j]) + (1.0 - state.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
            values[j] = static_cast<T>(static_cast<double>(values[j]) - update);
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<std::vector<T>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& g : grads)
        for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads)
            for (T& x : g) x = static_cast<T>(static_cast<double>(x) * s);
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "RPCK" | u16 major | u16 minor | u64 config digest | u32 epoch | f64 metric
//   | u64 adam step | string config text | u32 tensor count
//   | { string name | RPFT blob }*
// Strings are u32 length + bytes. Optimizer moments are stored as tensors
// named "adam.m/<param>" and "adam.v/<param>". Unknown tensor names are
// ignored when loading, so minor versions may add blobs.

inline constexpr std::uint16_t kCheckpointMajor = 1;
inline constexpr std::uint16_t kCheckpointMinor = 0;

template <typename T>
struct Checkpoint {
    TrainConfig config;
    std::uint64_t digest = 0;
    std::uint32_t epoch = 0;  // completed epochs
    double metric = std::numeric_limits<double>::quiet_NaN();
    Model<T> model;
    OptimState<T> optim;
    bool has_optim = false;
};

template <typename T>
void save_checkpoint(const std::string& path, const TrainConfig& cfg, const Model<T>& model,
                     const OptimState<T>* optim, std::uint32_t epoch, double metric) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os.write("RPCK", 4);
        const std::uint32_t version = std::uint32_t{kCheckpointMajor} | std::uint32_t{kCheckpointMinor} << 16;
        rpft::put_u32(os, version);
        rpft::put_u64(os, config_digest(cfg));
        rpft::put_u32(os, epoch);
        rpft::put_f64(os, metric);
        rpft::put_u64(os, optim ? optim->step : 0);
        TrainConfig stored = cfg;
        stored.out_dir.clear();
        stored.resume.clear();
        stored.threads = 0;
        rpft::put_string(os, serialize_config(stored));
        const auto params = model.parameters();
        const std::size_t count = params.size() * (optim ? 3 : 1);
        rpft::put_u32(os, static_cast<std::uint32_t>(count));
        for (const auto& [name, t] : params) {
            rpft::put_string(os, name);
            rpft::write(os, t);
        }
        if (optim) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                rpft::put_string(os, "adam.m/" + params[i].first);
                rpft::write<T>(os, params[i].second.shape(), optim->m[i]);
                rpft::put_string(os, "adam.v/" + params[i].first);
                rpft::write<T>(os, params[i].second.shape(), optim->v[i]);
            }
        }
        if (!os) throw IoError("failed writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// Only the stored config, without materializing tensors.
inline TrainConfig read_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "RPCK") throw IoError(path + " is not a checkpoint");
    if ((rpft::get_u32(is) & 0xFFFF) != kCheckpointMajor) throw IoError("unsupported checkpoint version");
    rpft::get_u64(is);
    rpft::get_u32(is);
    rpft::get_f64(is);
    rpft::get_u64(is);
    std::istringstream text(rpft::get_string(is));
    return parse_config(text);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "RPCK") throw IoError(path + " is not a checkpoint");
    const std::uint32_t version = rpft::get_u32(is);
    if ((version & 0xFFFF) != kCheckpointMajor)
        throw IoError("checkpoint major version " + std::to_string(version & 0xFFFF) + " unsupported");
    Checkpoint<T> ck;
    ck.digest = rpft::get_u64(is);
    ck.epoch = rpft::get_u32(is);
    ck.metric = rpft::get_f64(is);
    const std::uint64_t step = rpft::get_u64(is);
    std::istringstream cfg_text(rpft::get_string(is));
    ck.config = parse_config(cfg_text);
    ck.model = Model<T>(ck.config.model, 0);
    std::map<std::string, rpft::Blob> blobs;
    const std::uint32_t count = rpft::get_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = rpft::get_string(is);
        blobs.emplace(std::move(name), rpft::read_blob(is));
    }
    auto fill = [&](const std::string& name, const Shape& shape, std::span<T> dst) {
        const auto it = blobs.find(name);
        if (it == blobs.end()) return false;
        if (it->second.shape != shape) throw IoError("checkpoint tensor " + name + " has wrong shape");
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(it->second.values[j]);
        return true;
    };
    auto params = ck.model.parameters();
    for (auto& [name, t] : params)
        if (!fill(name, t.shape(), t.mutable_data())) throw IoError("checkpoint is missing tensor " + name);
    ck.optim = OptimState<T>::for_params(params);
    ck.has_optim = true;
    for (std::size_t i = 0; i < params.size(); ++i) {
        ck.has_optim = fill("adam.m/" + params[i].first, params[i].second.shape(), ck.optim.m[i]) && ck.has_optim;
        ck.has_optim = fill("adam.v/" + params[i].first, params[i].second.shape(), ck.optim.v[i]) && ck.has_optim;
    }
    ck.optim.step = step;
    return ck;
}

// ---------------------------------------------------------------------------
// Evaluation

struct StageMetrics {
    std::size_t stage = 0;
    double loss = 0;  // mean absolute coordinate error
    double nme = 0;   // percent
};

inline std::size_t resolve_threads(std::size_t requested) {
    if (requested > 0) return requested;
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs `fn(worker, item)` for items 0..n-1, item i on worker i % workers.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t, std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(0, i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < n; i += workers) fn(w, i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Per-stage mean L1 and NME over a sample set.
template <typename T>
std::vector<StageMetrics> evaluate(const Model<T>& model, const std::vector<Sample>& samples, std::size_t threads = 1) {
    if (samples.empty()) return {};
    std::vector<std::vector<StageMetrics>> per_sample(samples.size());
    parallel_for(samples.size(), resolve_threads(threads), [&](std::size_t, std::size_t i) {
        NoGradGuard no_grad;
        const Sample& s = samples[i];
        const auto states = model.predict(s.image<T>());
        const Tensor<T> gt = s.target<T>();
        for (const auto& st : states)
            per_sample[i].push_back({st.stage, static_cast<double>(l1_loss(st.coords, gt).item()),
                                     nme(st.coords, gt, s.norm_ref, static_cast<double>(s.width),
                                         static_cast<double>(s.height))});
    });
    std::vector<StageMetrics> out = per_sample[0];
    for (auto& m : out) m.loss = m.nme = 0;
    for (const auto& ps : per_sample)
        for (std::size_t k = 0; k < out.size(); ++k) {
            out[k].loss += ps[k].loss;
            out[k].nme += ps[k].nme;
        }
    for (auto& m : out) {
        m.loss /= static_cast<double>(samples.size());
        m.nme /= static_cast<double>(samples.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct MetricsRow {
    std::size_t epoch = 0;  // 1-based count of completed epochs
    std::string split;      // fit (optimization loss), train, val
    int stage = -1;         // -1: all stages summed
    double loss = 0;
    double nme = std::numeric_limits<double>::quiet_NaN();
};

inline std::string metrics_header() { return "epoch,split,stage,loss,nme\n"; }

inline std::string format_metrics_row(const MetricsRow& r) {
    std::ostringstream os;
    os << std::setprecision(9) << r.epoch << ',' << r.split << ',';
    if (r.stage < 0) os << "all";
    else os << r.stage;
    os << ',' << r.loss << ',';
    if (!std::isnan(r.nme)) os << r.nme;
    os << '\n';
    return os.str();
}

struct Datasets {
    std::vector<Sample> train;
    std::vector<Sample> val;
};

inline constexpr std::uint64_t kTrainStream = 0x747261696E000000ULL;
inline constexpr std::uint64_t kValStream = 0x76616C0000000000ULL;
inline constexpr std::uint64_t kShuffleStream = 0x73687566666C6500ULL;
inline constexpr std::uint64_t kModelStream = 0x6D6F64656C000000ULL;

inline Datasets load_datasets(const TrainConfig& cfg) {
    Datasets d;
    if (!cfg.train_list.empty())
        d.train = load_sample_list(cfg.train_list, cfg.norm, cfg.eye_left, cfg.eye_right);
    else
        d.train = generate_synthetic(cfg.synthetic_spec(cfg.seed ^ kTrainStream), cfg.train_count);
    if (!cfg.val_list.empty())
        d.val = load_sample_list(cfg.val_list, cfg.norm, cfg.eye_left, cfg.eye_right);
    else if (cfg.val_count > 0)
        d.val = generate_synthetic(cfg.synthetic_spec(cfg.seed ^ kValStream), cfg.val_count);
    if (cfg.norm == NormKind::image_size)
        for (auto* set : {&d.train, &d.val})
            for (auto& s : *set) {
                s.norm_kind = NormKind::image_size;
                s.norm_ref = reference_length(s.landmarks, s.width, s.height, NormKind::image_size);
            }
    return d;
}

template <typename T>
struct TrainResult {
    Model<T> model;
    OptimState<T> optim;
    std::vector<MetricsRow> history;
    std::vector<StageMetrics> final_train;
    std::vector<StageMetrics> final_val;
    double best_val_nme = std::numeric_limits<double>::quiet_NaN();
    std::size_t epochs_completed = 0;
    std::string last_checkpoint;
    std::string best_checkpoint;
};

struct TrainOptions {
    // Called after each completed epoch; returning true stops the run there.
    std::function<bool(std::size_t completed_epochs)> stop_after;
    std::function<void(const std::string&)> log;
    bool write_files = true;
};

/// One optimizer step over a minibatch. Per-sample gradients are computed
/// on worker replicas and reduced in sample order, so the result does not
/// depend on the worker count.
template <typename T>
class BatchStepper {
public:
    BatchStepper(const Model<T>& model, std::size_t workers, std::size_t max_batch)
        : workers_(std::max<std::size_t>(1, std::min(workers, max_batch))),
          sample_grads_(max_batch),
          sample_loss_(max_batch) {
        for (std::size_t w = 0; w < workers_; ++w) replicas_.push_back(model.clone());
        for (const auto& [name, t] : model.parameters()) grads_.emplace_back(t.numel(), T(0));
    }

    /// Returns the mean loss of the batch before the update.
    double step(Model<T>& model, OptimState<T>& optim, const std::vector<const Sample*>& batch, double lr,
                double clip_norm) {
        const std::size_t bsz = batch.size();
        if (bsz == 0 || bsz > sample_grads_.size()) throw ShapeMismatch("batch size out of range");
        for (auto& r : replicas_) r.copy_parameters_from(model);
        parallel_for(bsz, workers_, [&](std::size_t w, std::size_t b) {
            Model<T>& replica = replicas_[w];
            replica.zero_grad();
            const Sample& s = *batch[b];
            const Tensor<T> loss = multi_stage_loss(replica.predict(s.image<T>()), s.target<T>());
            backward(loss);
            sample_loss_[b] = static_cast<double>(loss.item());
            auto rp = replica.parameters();
            auto& out = sample_grads_[b];
            out.resize(rp.size());
            for (std::size_t i = 0; i < rp.size(); ++i) {
                out[i].assign(rp[i].second.numel(), T(0));
                if (rp[i].second.has_grad()) std::copy(rp[i].second.grad().begin(), rp[i].second.grad().end(), out[i].begin());
            }
        });
        double loss = 0;
        for (std::size_t b = 0; b < bsz; ++b) loss += sample_loss_[b];
        if (!std::isfinite(loss)) throw DivergedError("non-finite loss");
        const T inv = T(1) / static_cast<T>(bsz);
        for (std::size_t i = 0; i < grads_.size(); ++i) {
            auto& g = grads_[i];
            std::fill(g.begin(), g.end(), T(0));
            for (std::size_t b = 0; b < bsz; ++b) {
                const auto& sg = sample_grads_[b][i];
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += sg[j];
            }
            for (auto& x : g) x *= inv;
        }
        if (!std::isfinite(clip_global_norm(grads_, clip_norm))) throw DivergedError("non-finite gradient");
        const auto params = model.parameters();
        adam_step(params, grads_, optim, lr);
        for (const auto& [name, t] : params)
            for (T v : t.data())
                if (!std::isfinite(v)) throw DivergedError("parameter " + name + " became non-finite");
        return loss / static_cast<double>(bsz);
    }

private:
    std::size_t workers_;
    std::vector<Model<T>> replicas_;
    std::vector<std::vector<std::vector<T>>> sample_grads_;
    std::vector<double> sample_loss_;
    std::vector<std::vector<T>> grads_;
};

/// Adam on the summed per-stage L1 loss over minibatches. Per-sample
/// gradients are reduced in sample order, so results do not depend on the
/// worker count.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg_in, const Datasets& data, const TrainOptions& opts = {}) {
    TrainConfig cfg = cfg_in;
    cfg.apply_variant();
    if (cfg.epochs == 0 || cfg.batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (data.train.empty()) throw ConfigError("training set is empty");
    for (const auto* set : {&data.train, &data.val})
        for (const auto& s : *set)
            if (s.landmark_count() != cfg.model.landmarks || s.height != cfg.model.image_size ||
                s.width != cfg.model.image_size || s.channels != cfg.model.in_channels)
                throw ConfigError("sample does not match model config (image size, channels or landmark count)");
    auto log = [&](const std::string& msg) {
        if (opts.log) opts.log(msg);
    };

    TrainResult<T> result;
    result.model = Model<T>(cfg.model, cfg.seed ^ kModelStream);
    auto params = result.model.parameters();
    result.optim = OptimState<T>::for_params(params);
    result.optim.beta1 = cfg.beta1;
    result.optim.beta2 = cfg.beta2;
    result.optim.eps = cfg.adam_eps;
    std::size_t start_epoch = 0;
    if (!cfg.resume.empty()) {
        Checkpoint<T> ck = load_checkpoint<T>(cfg.resume);
        if (ck.digest != config_digest(cfg)) throw ConfigError("checkpoint " + cfg.resume + " was written for a different config");
        if (!ck.has_optim) throw ConfigError("checkpoint " + cfg.resume + " has no optimizer state");
        result.model.copy_parameters_from(ck.model);
        result.optim.m = std::move(ck.optim.m);
        result.optim.v = std::move(ck.optim.v);
        result.optim.step = ck.optim.step;
        result.best_val_nme = ck.metric;
        start_epoch = ck.epoch;
        log("resumed from " + cfg.resume + " after epoch " + std::to_string(start_epoch));
    }
    result.optim.schedule = {cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_epoch};

    const std::filesystem::path out(cfg.out_dir);
    std::ofstream metrics;
    if (opts.write_files) {
        std::filesystem::create_directories(out);
        {
            std::ofstream c(out / "config.txt");
            c << serialize_config(cfg);
        }
        const bool append = start_epoch > 0;
        metrics.open(out / "metrics.csv", append ? std::ios::app : std::ios::trunc);
        if (!metrics) throw IoError("cannot open " + (out / "metrics.csv").string());
        if (!append) metrics << metrics_header();
        result.last_checkpoint = (out / "last.rpck").string();
        result.best_checkpoint = (out / "best.rpck").string();
    }
    auto record = [&](const MetricsRow& row) {
        result.history.push_back(row);
        if (metrics.is_open()) {
            metrics << format_metrics_row(row);
            metrics.flush();
        }
    };

    BatchStepper<T> stepper(result.model, resolve_threads(cfg.threads), cfg.batch_size);
    const std::size_t n = data.train.size();
    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = Rng::stream(cfg.seed ^ kShuffleStream, epoch);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        const double lr = result.optim.schedule.at(epoch);

        double epoch_loss = 0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            std::vector<const Sample*> batch;
            for (std::size_t b = begin; b < std::min(begin + cfg.batch_size, n); ++b) batch.push_back(&data.train[order[b]]);
            try {
                epoch_loss += stepper.step(result.model, result.optim, batch, lr, cfg.clip_norm) *
                              static_cast<double>(batch.size());
            } catch (const DivergedError& e) {
                throw DivergedError(std::string(e.what()) + " in epoch " + std::to_string(epoch + 1));
            }
        }
        const std::size_t done = epoch + 1;
        record({done, "fit", -1, epoch_loss / static_cast<double>(n)});

        const bool last = done == cfg.epochs;
        const bool stopping = opts.stop_after && opts.stop_after(done);
        const bool eval_now = last || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        std::ostringstream msg;
        msg << "epoch " << done << "/" << cfg.epochs << " lr " << lr << " loss " << epoch_loss / static_cast<double>(n);
        if (eval_now) {
            const auto val = evaluate(result.model, data.val, cfg.threads);
            for (const auto& m : val) record({done, "val", static_cast<int>(m.stage), m.loss, m.nme});
            if (last) {
                result.final_train = evaluate(result.model, data.train, cfg.threads);
                for (const auto& m : result.final_train) record({done, "train", static_cast<int>(m.stage), m.loss, m.nme});
            }
            result.final_val = val;
            if (!val.empty()) {
                const double final_nme = val.back().nme;
                msg << " val_nme " << final_nme;
                if (std::isnan(result.best_val_nme) || final_nme < result.best_val_nme) {
                    result.best_val_nme = final_nme;
                    if (opts.write_files)
                        save_checkpoint(result.best_checkpoint, cfg, result.model, &result.optim,
                                        static_cast<std::uint32_t>(done), final_nme);
                }
            }
        }
        if (opts.write_files)
            save_checkpoint(result.last_checkpoint, cfg, result.model, &result.optim, static_cast<std::uint32_t>(done),
                            result.best_val_nme);
        log(msg.str());
        result.epochs_completed = done;
        if (stopping) break;
    }
    if (opts.write_files && data.val.empty() && !result.last_checkpoint.empty())
        std::filesystem::copy_file(result.last_checkpoint, result.best_checkpoint,
                                   std::filesystem::copy_options::overwrite_existing);
    return result;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
    std::string table;    // components | temperature
    std::string variant;  // baseline | pth | dlr | full
    bool pth = false;
    bool dlr = false;
    double tau = 0;
    double final_nme = 0;
    double stage0_nme = std::numeric_limits<double>::quiet_NaN();
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "table,variant,pth,dlr,tau,final_nme,stage0_nme\n" << std::setprecision(9);
    for (const auto& r : rows) {
        os << r.table << ',' << r.variant << ',' << (r.pth ? 1 : 0) << ',' << (r.dlr ? 1 : 0) << ',' << r.tau << ','
           << r.final_nme << ',';
        if (!std::isnan(r.stage0_nme)) os << r.stage0_nme;
        os << '\n';
    }
    return os.str();
}

/// The final model of a completed run of exactly `cfg` in its output
/// directory, if there is one.
template <typename T>
std::optional<Model<T>> finished_run(const TrainConfig& cfg) {
    const auto path = std::filesystem::path(cfg.out_dir) / "last.rpck";
    if (!std::filesystem::exists(path)) return std::nullopt;
    const TrainConfig stored = read_checkpoint_config(path.string());
    if (config_digest(stored) != config_digest(cfg)) return std::nullopt;
    auto ck = load_checkpoint<T>(path.string());
    if (ck.epoch != cfg.epochs) return std::nullopt;
    return std::move(ck.model);
}

/// Trains each component variant, then the full model at each temperature,
/// all under the same seed and budget. Identical configurations are trained
/// once and reused.
template <typename T>
std::vector<AblationRow> ablation_run(const TrainConfig& base, const std::vector<std::string>& variants,
                                      const std::vector<double>& taus, const Datasets& data,
                                      const TrainOptions& opts = {}) {
    std::map<std::uint64_t, AblationRow> cache;
    std::vector<AblationRow> rows;
    auto run = [&](TrainConfig cfg, const std::string& table, const std::string& dir) {
        cfg.apply_variant();
        cfg.resume.clear();
        cfg.out_dir = (std::filesystem::path(base.out_dir) / dir).string();
        const std::uint64_t key = config_digest(cfg);
        AblationRow row;
        if (auto it = cache.find(key); it != cache.end()) {
            row = it->second;
        } else {
            std::vector<StageMetrics> val;
            if (const auto done = finished_run<T>(cfg)) {
                if (opts.log) opts.log("ablation: reusing finished run in " + dir);
                val = evaluate(*done, data.val, cfg.threads);
            } else {
                if (opts.log) opts.log("ablation: training " + dir);
                val = train<T>(cfg, data, opts).final_val;
            }
            row.variant = cfg.variant;
            row.pth = cfg.model.pyramid;
            row.dlr = cfg.model.dlr;
            row.tau = cfg.model.tau;
            if (!val.empty()) {
                row.final_nme = val.back().nme;
                if (val.size() > 1) row.stage0_nme = val.front().nme;
            }
            cache[key] = row;
        }
        row.table = table;
        rows.push_back(row);
    };
    for (const auto& v : variants) {
        TrainConfig cfg = base;
        cfg.variant = v;
        run(cfg, "components", v);
    }
    for (double tau : taus) {
        TrainConfig cfg = base;
        cfg.variant = "full";
        cfg.model.tau = tau;
        std::ostringstream dir;
        dir << "tau_" << tau;
        run(cfg, "temperature", dir.str());
    }
    return rows;
}

}  // namespace repformer
