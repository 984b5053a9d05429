#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "repformer/repformer.hpp"

namespace fs = std::filesystem;
using namespace repformer;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

// Raised for anything the user must fix in their invocation or config.
struct UsageError : Error {
    using Error::Error;
};

struct Common {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out;
    std::string precision;
    std::vector<std::string> sets;
    std::size_t threads = 0;
    bool seed_set = false;
};

struct TrainFlags {
    double lr = -1;
    std::size_t epochs = 0;
    std::string resume;
};

struct EvalFlags {
    std::string checkpoint;
    std::string data;
    std::string split = "val";
    std::string norm;
};

struct PredictFlags {
    std::string checkpoint;
    std::string image;
    std::string pts;
    std::string svg;
};

struct GradFlags {
    std::string corrupt;
    bool all_entries = false;
    bool skip_ops = false;
};

struct SynthFlags {
    std::size_t count = 10;
};

TrainConfig build_config(const Common& c) {
    TrainConfig cfg;
    if (!c.config_path.empty()) {
        if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
        cfg = load_config(c.config_path);
    }
    for (const auto& kv : c.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed_set) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.out_dir = c.out;
    if (!c.precision.empty()) set_config_value(cfg, "precision", c.precision);
    if (c.threads) cfg.threads = c.threads;
    cfg.apply_variant();
    return cfg;
}

template <typename Fn>
int dispatch(const std::string& precision, Fn&& fn) {
    if (precision == "f64") return fn(double{});
    return fn(float{});
}

// Evaluate in the precision the checkpoint was trained in unless overridden.
std::string checkpoint_precision(const Common& c, const std::string& checkpoint) {
    if (!c.precision.empty()) return c.precision;
    return read_checkpoint_config(checkpoint).precision;
}

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

template <typename T>
int run_train(const TrainConfig& cfg) {
    const Datasets data = load_datasets(cfg);
    TrainOptions opts;
    opts.log = log_line;
    const auto result = train<T>(cfg, data, opts);
    std::cout << "epochs " << result.epochs_completed << "\n";
    for (const auto& m : result.final_val)
        std::cout << "val stage " << m.stage << " loss " << m.loss << " nme " << m.nme << "\n";
    std::cout << "checkpoint " << result.last_checkpoint << "\n";
    return kOk;
}

std::vector<Sample> eval_samples(const TrainConfig& cfg, const EvalFlags& f) {
    TrainConfig c = cfg;
    if (!f.norm.empty()) set_config_value(c, "norm", f.norm);
    if (!f.data.empty()) return load_sample_list(f.data, c.norm, c.eye_left, c.eye_right);
    if (f.split != "train" && f.split != "val") throw UsageError("--split must be train or val");
    c.train_list.clear();
    c.val_list.clear();
    Datasets d = load_datasets(c);
    return f.split == "train" ? std::move(d.train) : std::move(d.val);
}

template <typename T>
int run_eval(const EvalFlags& f, std::size_t threads) {
    const Checkpoint<T> ck = load_checkpoint<T>(f.checkpoint);
    const auto samples = eval_samples(ck.config, f);
    if (samples.empty()) throw UsageError("no samples to evaluate");
    const auto metrics = evaluate(ck.model, samples, threads ? threads : ck.config.threads);
    std::cout << "stage,loss,nme\n" << std::setprecision(9);
    for (const auto& m : metrics) std::cout << m.stage << ',' << m.loss << ',' << m.nme << '\n';
    return kOk;
}

std::string svg_overlay(const Sample& s, const std::vector<Point>& pts) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << s.width << "\" height=\"" << s.height
       << "\" viewBox=\"0 0 " << s.width << ' ' << s.height << "\">\n";
    for (std::size_t y = 0; y < s.height; ++y)
        for (std::size_t x = 0; x < s.width; ++x) {
            double v = 0;
            for (std::size_t c = 0; c < s.channels; ++c) v += s.pixels[(y * s.width + x) * s.channels + c];
            const int g = static_cast<int>(std::clamp(v / static_cast<double>(s.channels), 0.0, 1.0) * 255.0 + 0.5);
            os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"1\" height=\"1\" fill=\"rgb(" << g << ',' << g
               << ',' << g << ")\"/>\n";
        }
    const double r = std::max(0.75, static_cast<double>(std::max(s.width, s.height)) / 64.0);
    for (const auto& p : pts)
        os << "<circle cx=\"" << p[0] << "\" cy=\"" << p[1] << "\" r=\"" << r
           << "\" fill=\"none\" stroke=\"red\" stroke-width=\"0.5\"/>\n";
    os << "</svg>\n";
    return os.str();
}

template <typename T>
int run_predict(const PredictFlags& f) {
    const Checkpoint<T> ck = load_checkpoint<T>(f.checkpoint);
    const Tensor<float> img = rpft::load<float>(f.image);
    if (img.rank() != 3) throw UsageError("image must be an [H,W,C] container: " + f.image);
    Sample s;
    s.height = img.dim(0);
    s.width = img.dim(1);
    s.channels = img.dim(2);
    s.pixels.assign(img.data().begin(), img.data().end());
    if (s.height != ck.config.model.image_size || s.width != ck.config.model.image_size ||
        s.channels != ck.config.model.in_channels)
        throw UsageError("image shape does not match the checkpoint's model");
    NoGradGuard no_grad;
    const auto states = ck.model.predict(s.image<T>());
    const auto coords = states.back().coords.data();
    std::vector<Point> pts(coords.size() / 2);
    for (std::size_t j = 0; j < pts.size(); ++j)
        pts[j] = {static_cast<double>(coords[2 * j]) * static_cast<double>(s.width),
                  static_cast<double>(coords[2 * j + 1]) * static_cast<double>(s.height)};
    if (f.pts.empty()) write_pts(std::cout, pts);
    else save_pts(f.pts, pts);
    if (!f.svg.empty()) {
        std::ofstream os(f.svg);
        if (!os) throw IoError("cannot open " + f.svg + " for writing");
        os << svg_overlay(s, pts);
    }
    return kOk;
}

template <typename T>
int run_gradcheck(const TrainConfig& cfg, const GradFlags& f) {
    GradSuiteOptions o;
    o.seed = cfg.seed;
    o.ops = !f.skip_ops;
    if (f.all_entries) o.max_entries = 0;
    if (!f.corrupt.empty()) corrupt_backward_for_testing(f.corrupt);
    const auto report = run_gradcheck_suite<T>(gradcheck_model_config(), o);
    corrupt_backward_for_testing("");
    std::cout << report;
    if (!report.passed) {
        std::cerr << "gradient check failed:";
        for (const auto& e : report.entries)
            if (!e.passed) std::cerr << ' ' << e.name;
        std::cerr << '\n';
        return kRuntime;
    }
    return kOk;
}

template <typename T>
int run_ablate(const TrainConfig& cfg) {
    const Datasets data = load_datasets(cfg);
    std::vector<double> taus;
    for (const auto& t : split_list(cfg.tau_sweep)) {
        double v = 0;
        try {
            v = std::stod(t);
        } catch (const std::exception&) {
            throw ConfigError("invalid tau_sweep entry '" + t + "'");
        }
        taus.push_back(v);
    }
    TrainOptions opts;
    opts.log = log_line;
    const auto rows = ablation_run<T>(cfg, split_list(cfg.variants), taus, data, opts);
    const std::string csv = ablation_csv(rows);
    fs::create_directories(cfg.out_dir);
    std::ofstream os(fs::path(cfg.out_dir) / "ablation.csv");
    os << csv;
    std::cout << csv;
    return kOk;
}

int run_synth(const TrainConfig& cfg, const SynthFlags& f) {
    const auto samples = generate_synthetic(cfg.synthetic_spec(cfg.seed), f.count);
    fs::create_directories(cfg.out_dir);
    std::ofstream list(fs::path(cfg.out_dir) / "list.txt");
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Sample& s = samples[i];
        char stem[32];
        std::snprintf(stem, sizeof stem, "%06zu", i);
        const std::string img = std::string(stem) + ".rpft";
        const std::string pts = std::string(stem) + ".pts";
        rpft::save((fs::path(cfg.out_dir) / img).string(), s.image<float>());
        std::vector<Point> p(s.landmark_count());
        for (std::size_t j = 0; j < p.size(); ++j)
            p[j] = {s.landmarks[2 * j] * static_cast<double>(s.width), s.landmarks[2 * j + 1] * static_cast<double>(s.height)};
        save_pts((fs::path(cfg.out_dir) / pts).string(), p);
        list << img << ' ' << pts << '\n';
    }
    std::cout << "wrote " << samples.size() << " samples to " << cfg.out_dir << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"repformer: cascaded landmark refinement on pyramid memories"};
    app.require_subcommand(1, 1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "key=value config file");
        sub->add_option_function<std::uint64_t>(
            "--seed", [&](std::uint64_t v) { common.seed = v, common.seed_set = true; }, "random seed");
        sub->add_option("--out", common.out, "output directory");
        sub->add_option("--precision", common.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
        sub->add_option("--set", common.sets, "override a config key (key=value), repeatable");
        sub->add_option("--threads", common.threads, "worker threads (0 = all cores)");
    };

    TrainFlags tf;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    add_common(train_cmd);
    train_cmd->add_option("--lr", tf.lr, "initial learning rate");
    train_cmd->add_option("--epochs", tf.epochs, "number of epochs");
    train_cmd->add_option("--resume", tf.resume, "checkpoint to resume from");

    EvalFlags ef;
    auto* eval_cmd = app.add_subcommand("eval", "per-stage loss and NME of a checkpoint");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", ef.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", ef.data, "list file of '<image.rpft> <points.pts>' lines");
    eval_cmd->add_option("--split", ef.split, "synthetic split when --data is absent (train|val)");
    eval_cmd->add_option("--norm", ef.norm, "inter_ocular or image_size");

    PredictFlags pf;
    auto* predict_cmd = app.add_subcommand("predict", "predict landmarks for one image");
    add_common(predict_cmd);
    predict_cmd->add_option("--checkpoint", pf.checkpoint, "checkpoint file")->required();
    predict_cmd->add_option("--image", pf.image, "[H,W,C] image container")->required();
    predict_cmd->add_option("--pts", pf.pts, "output pts file (stdout if absent)");
    predict_cmd->add_option("--svg", pf.svg, "output SVG overlay");

    GradFlags gf;
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    add_common(grad_cmd);
    grad_cmd->add_flag("--all-entries", gf.all_entries, "check every entry of every parameter");
    grad_cmd->add_flag("--skip-ops", gf.skip_ops, "only check whole-model parameter gradients");
    grad_cmd->add_option("--corrupt-backward", gf.corrupt)->group("");

    auto* ablate_cmd = app.add_subcommand("ablate", "component and temperature ablations");
    add_common(ablate_cmd);

    SynthFlags sf;
    auto* synth_cmd = app.add_subcommand("synth", "write synthetic samples as rpft + pts");
    add_common(synth_cmd);
    synth_cmd->add_option("--count", sf.count, "number of samples");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        TrainConfig cfg = build_config(common);
        if (train_cmd->parsed()) {
            if (tf.lr >= 0) cfg.lr = tf.lr;
            if (tf.epochs) cfg.epochs = tf.epochs;
            if (!tf.resume.empty()) cfg.resume = tf.resume;
            return dispatch(cfg.precision, [&](auto t) { return run_train<decltype(t)>(cfg); });
        }
        if (eval_cmd->parsed())
            return dispatch(checkpoint_precision(common, ef.checkpoint), [&](auto t) { return run_eval<decltype(t)>(ef, common.threads); });
        if (predict_cmd->parsed())
            return dispatch(checkpoint_precision(common, pf.checkpoint), [&](auto t) { return run_predict<decltype(t)>(pf); });
        if (grad_cmd->parsed()) {
            const std::string p = common.precision.empty() ? "f64" : common.precision;
            return dispatch(p, [&](auto t) { return run_gradcheck<decltype(t)>(cfg, gf); });
        }
        if (ablate_cmd->parsed())
            return dispatch(cfg.precision, [&](auto t) { return run_ablate<decltype(t)>(cfg); });
        if (synth_cmd->parsed()) return run_synth(cfg, sf);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const BadSpec& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}
