#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "repformer/errors.hpp"
#include "repformer/ops.hpp"
#include "repformer/refinement_head.hpp"
#include "repformer/rng.hpp"
#include "repformer/rpft.hpp"

namespace repformer {

enum class NormKind { inter_ocular, image_size };

inline std::string to_string(NormKind k) { return k == NormKind::inter_ocular ? "inter_ocular" : "image_size"; }

using Point = std::array<double, 2>;

/// One image with its ordered landmarks. Landmarks are normalized (x, y):
/// pixel coordinates divided by the image width/height, with the image
/// spanning [0, W] x [0, H] and pixel centers at +0.5.
struct Sample {
    std::size_t height = 0, width = 0, channels = 1;
    std::vector<float> pixels;     // HWC
    std::vector<double> landmarks;  // [N, 2]
    double norm_ref = 1.0;          // pixels
    NormKind norm_kind = NormKind::inter_ocular;

    std::size_t landmark_count() const { return landmarks.size() / 2; }

    template <typename T>
    Tensor<T> image() const {
        return Tensor<T>({height, width, channels}, std::vector<T>(pixels.begin(), pixels.end()));
    }

    template <typename T>
    Tensor<T> target() const {
        return Tensor<T>({landmark_count(), 2}, std::vector<T>(landmarks.begin(), landmarks.end()));
    }
};

/// Reference length in pixels: distance between two eye landmarks, or
/// sqrt(W * H) for image-size normalization.
inline double reference_length(const std::vector<double>& landmarks, std::size_t width, std::size_t height,
                               NormKind kind, std::size_t eye_left = 0, std::size_t eye_right = 1) {
    if (kind == NormKind::image_size)
        return std::sqrt(static_cast<double>(width) * static_cast<double>(height));
    const std::size_t n = landmarks.size() / 2;
    if (eye_left >= n || eye_right >= n) throw BadRef("eye landmark index out of range");
    const double dx = (landmarks[2 * eye_left] - landmarks[2 * eye_right]) * static_cast<double>(width);
    const double dy = (landmarks[2 * eye_left + 1] - landmarks[2 * eye_right + 1]) * static_cast<double>(height);
    return std::hypot(dx, dy);
}

// ---------------------------------------------------------------------------
// Synthetic faces

struct Range {
    double lo = 0, hi = 0;
    bool valid() const { return std::isfinite(lo) && std::isfinite(hi) && lo <= hi; }
    double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

/// Geometry below is in head-frame units: fractions of the semi-axes.
struct SyntheticFaceSpec {
    std::uint64_t seed = 42;
    std::size_t landmarks = 5;
    std::size_t image_size = 64;
    Range offset{-0.08, 0.08};        // head center shift, fraction of image size
    Range scale{0.85, 1.15};
    Range aspect{0.92, 1.08};         // horizontal axis stretch
    Range rotation{-15.0, 15.0};      // degrees
    Range eye_x{0.34, 0.46};
    Range eye_y{-0.34, -0.22};
    Range eye_radius{0.08, 0.11};     // fraction of the horizontal semi-axis
    Range nose_x{-0.06, 0.06};
    Range nose_y{0.02, 0.14};
    Range mouth_x{0.26, 0.40};
    Range mouth_y{0.40, 0.52};
    Range mouth_curve{0.02, 0.10};    // sag of the arc center, fraction of vertical semi-axis
    Range background{0.05, 0.35};
    Range skin{0.55, 0.95};
    Range feature{0.0, 0.2};
    Range noise{0.0, 0.03};           // per-pixel gaussian stddev

    void validate() const {
        for (const Range* r : {&offset, &scale, &aspect, &rotation, &eye_x, &eye_y, &eye_radius, &nose_x,
                               &nose_y, &mouth_x, &mouth_y, &mouth_curve, &background, &skin, &feature, &noise})
            if (!r->valid()) throw BadSpec("synthetic spec has an empty or non-finite range");
        if (landmarks != 5) throw BadSpec("synthetic faces define exactly 5 landmarks");
        if (image_size < 8) throw BadSpec("synthetic image size must be at least 8");
        if (scale.lo <= 0 || aspect.lo <= 0 || eye_radius.lo <= 0 || noise.lo < 0)
            throw BadSpec("scale, aspect, eye radius must be positive and noise non-negative");
    }
};

/// Parameters drawn for one synthetic face, kept so tests can check the
/// landmarks against the geometry analytically.
struct FaceGeometry {
    double cx, cy;      // head center, pixels
    double ax, ay;      // semi-axes, pixels
    double angle;       // radians
    double eye_x, eye_y, eye_r, nose_x, nose_y, mouth_x, mouth_y, mouth_curve;

    Point to_image(double u, double v) const {
        const double c = std::cos(angle), s = std::sin(angle);
        return {cx + c * u * ax - s * v * ay, cy + s * u * ax + c * v * ay};
    }

    /// Head-frame coordinates of an image point.
    Point to_head(double x, double y) const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double dx = x - cx, dy = y - cy;
        return {(c * dx + s * dy) / ax, (-s * dx + c * dy) / ay};
    }

    /// Eyes (left, right), nose, mouth corners (left, right) in pixels.
    std::array<Point, 5> landmarks() const {
        return {to_image(-eye_x, eye_y), to_image(eye_x, eye_y), to_image(nose_x, nose_y),
                to_image(-mouth_x, mouth_y), to_image(mouth_x, mouth_y)};
    }
};

namespace detail {

inline double coverage(double signed_distance) { return std::clamp(0.5 - signed_distance, 0.0, 1.0); }

inline double segment_distance(double px, double py, Point a, Point b) {
    const double vx = b[0] - a[0], vy = b[1] - a[1];
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - a[0]) * vx + (py - a[1]) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(px - a[0] - t * vx, py - a[1] - t * vy);
}

}  // namespace detail

inline FaceGeometry draw_geometry(const SyntheticFaceSpec& spec, Rng& rng) {
    const double size = static_cast<double>(spec.image_size);
    FaceGeometry g{};
    g.cx = size * (0.5 + spec.offset.sample(rng));
    g.cy = size * (0.5 + spec.offset.sample(rng));
    const double s = spec.scale.sample(rng);
    g.ax = size * 0.28 * s * spec.aspect.sample(rng);
    g.ay = size * 0.36 * s;
    g.angle = spec.rotation.sample(rng) * std::numbers::pi / 180.0;
    g.eye_x = spec.eye_x.sample(rng);
    g.eye_y = spec.eye_y.sample(rng);
    g.eye_r = spec.eye_radius.sample(rng);
    g.nose_x = spec.nose_x.sample(rng);
    g.nose_y = spec.nose_y.sample(rng);
    g.mouth_x = spec.mouth_x.sample(rng);
    g.mouth_y = spec.mouth_y.sample(rng);
    g.mouth_curve = spec.mouth_curve.sample(rng);
    return g;
}

/// Renders a face-like figure: filled head ellipse, two eye disks, a nose
/// dot and a mouth arc, with anti-aliased edges and additive noise.
inline Sample render_face(const SyntheticFaceSpec& spec, const FaceGeometry& g, Rng& rng) {
    const std::size_t n = spec.image_size;
    Sample out;
    out.height = out.width = n;
    out.channels = 1;
    out.pixels.resize(n * n);
    const double bg = spec.background.sample(rng);
    const double skin = spec.skin.sample(rng);
    const double dark = spec.feature.sample(rng);
    const double sigma = spec.noise.sample(rng);

    const auto lm = g.landmarks();
    const double eye_r = g.eye_r * g.ax;
    const double nose_r = 0.05 * g.ax + 0.6;
    const double mouth_half_width = 0.7;
    std::array<Point, 17> arc{};
    for (std::size_t i = 0; i < arc.size(); ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(arc.size() - 1);
        const double u = -g.mouth_x + 2 * g.mouth_x * t;
        const double v = g.mouth_y + g.mouth_curve * 4 * t * (1 - t);
        arc[i] = g.to_image(u, v);
    }

    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
            // Head ellipse: first-order signed distance q-1 over |grad q|.
            const auto [hu, hv] = g.to_head(x, y);
            const double q = std::hypot(hu, hv);
            double head_sd;
            if (q < 1e-9) {
                head_sd = -std::min(g.ax, g.ay);
            } else {
                const double gx = hu / g.ax, gy = hv / g.ay;
                head_sd = (q - 1.0) * q / std::max(std::hypot(gx, gy), 1e-12);
            }
            double v = bg + (skin - bg) * detail::coverage(head_sd);
            double feat = 0;
            feat = std::max(feat, detail::coverage(std::hypot(x - lm[0][0], y - lm[0][1]) - eye_r));
            feat = std::max(feat, detail::coverage(std::hypot(x - lm[1][0], y - lm[1][1]) - eye_r));
            feat = std::max(feat, detail::coverage(std::hypot(x - lm[2][0], y - lm[2][1]) - nose_r));
            double md = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i + 1 < arc.size(); ++i)
                md = std::min(md, detail::segment_distance(x, y, arc[i], arc[i + 1]));
            feat = std::max(feat, detail::coverage(md - mouth_half_width));
            v += (dark - v) * feat;
            if (sigma > 0) v += sigma * rng.normal();
            out.pixels[r * n + c] = static_cast<float>(v);
        }

    out.landmarks.resize(10);
    for (std::size_t j = 0; j < 5; ++j) {
        out.landmarks[2 * j] = lm[j][0] / static_cast<double>(n);
        out.landmarks[2 * j + 1] = lm[j][1] / static_cast<double>(n);
    }
    out.norm_kind = NormKind::inter_ocular;
    out.norm_ref = reference_length(out.landmarks, n, n, NormKind::inter_ocular, 0, 1);
    return out;
}

/// Sample `first_index + i` uses its own stream derived from (seed, index),
/// so any subset can be regenerated independently.
inline std::vector<Sample> generate_synthetic(const SyntheticFaceSpec& spec, std::size_t count,
                                              std::uint64_t first_index = 0) {
    if (count == 0) throw BadSpec("sample count must be at least 1");
    spec.validate();
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = Rng::stream(spec.seed, first_index + i);
        const FaceGeometry g = draw_geometry(spec, rng);
        out.push_back(render_face(spec, g, rng));
    }
    return out;
}

// ---------------------------------------------------------------------------
// pts annotations

/// Parses the 300W pts layout:
///   version: 1
///   n_points: <n>
///   {
///   x y
///   ...
///   }
inline std::vector<Point> parse_pts(std::istream& is) {
    std::string line;
    std::size_t lineno = 0;
    long long declared = -1;
    bool in_body = false, closed = false;
    std::vector<Point> points;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        const std::string text = line.substr(first, line.find_last_not_of(" \t") - first + 1);
        if (closed) throw ParseError("content after closing brace", lineno);
        if (!in_body) {
            if (text == "{") {
                if (declared < 0) throw ParseError("missing n_points header before '{'", lineno);
                in_body = true;
                continue;
            }
            const auto colon = text.find(':');
            if (colon == std::string::npos) throw ParseError("expected 'key: value' header", lineno);
            const std::string key = text.substr(0, colon);
            std::istringstream value(text.substr(colon + 1));
            if (key == "n_points") {
                if (!(value >> declared) || declared < 0 || !(value >> std::ws).eof())
                    throw ParseError("invalid n_points value", lineno);
            } else if (key != "version") {
                throw ParseError("unknown header '" + key + "'", lineno);
            }
            continue;
        }
        if (text == "}") {
            closed = true;
            continue;
        }
        std::istringstream row(text);
        Point p{};
        if (!(row >> p[0] >> p[1]) || !(row >> std::ws).eof())
            throw ParseError("expected two numbers per point", lineno);
        points.push_back(p);
    }
    if (!in_body) throw ParseError("missing '{' before points", lineno);
    if (!closed) throw ParseError("missing closing '}'", lineno);
    if (points.size() != static_cast<std::size_t>(declared))
        throw CountMismatch("n_points declares " + std::to_string(declared) + " but file has " +
                            std::to_string(points.size()));
    return points;
}

inline std::vector<Point> load_pts(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    return parse_pts(is);
}

inline void write_pts(std::ostream& os, const std::vector<Point>& points) {
    os << "version: 1\n" << "n_points: " << points.size() << "\n{\n";
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& p : points) os << p[0] << ' ' << p[1] << '\n';
    os << "}\n";
}

inline void save_pts(const std::string& path, const std::vector<Point>& points) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_pts(os, points);
}

/// Loads an image container plus pts annotation into a Sample, normalizing
/// coordinates by the image size.
inline Sample load_sample(const std::string& image_path, const std::string& pts_path, NormKind kind,
                          std::size_t eye_left = 0, std::size_t eye_right = 1) {
    Tensor<float> img = rpft::load<float>(image_path);
    if (img.rank() != 3) throw ShapeMismatch("image container must be [H,W,C]: " + image_path);
    Sample s;
    s.height = img.dim(0);
    s.width = img.dim(1);
    s.channels = img.dim(2);
    s.pixels.assign(img.data().begin(), img.data().end());
    for (const auto& p : load_pts(pts_path)) {
        s.landmarks.push_back(p[0] / static_cast<double>(s.width));
        s.landmarks.push_back(p[1] / static_cast<double>(s.height));
    }
    s.norm_kind = kind;
    s.norm_ref = reference_length(s.landmarks, s.width, s.height, kind, eye_left, eye_right);
    if (!(s.norm_ref > 0)) throw BadRef("non-positive normalization reference for " + pts_path);
    return s;
}

/// Reads a list file with one "image.rpft annotation.pts" pair per line;
/// relative paths resolve against the list file's directory.
inline std::vector<Sample> load_sample_list(const std::string& list_path, NormKind kind,
                                            std::size_t eye_left = 0, std::size_t eye_right = 1) {
    std::ifstream is(list_path);
    if (!is) throw IoError("cannot open " + list_path);
    const auto slash = list_path.find_last_of('/');
    const std::string dir = slash == std::string::npos ? "" : list_path.substr(0, slash + 1);
    auto resolve = [&](const std::string& p) { return !p.empty() && p[0] == '/' ? p : dir + p; };
    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::istringstream row(line);
        std::string img, pts;
        if (!(row >> img)) continue;
        if (img[0] == '#') continue;
        if (!(row >> pts)) throw ParseError("expected '<image> <pts>' in " + list_path, lineno);
        out.push_back(load_sample(resolve(img), resolve(pts), kind, eye_left, eye_right));
    }
    if (out.empty()) throw IoError("no samples listed in " + list_path);
    return out;
}

// ---------------------------------------------------------------------------
// Metrics and loss

/// Mean euclidean landmark error in pixels divided by `norm_ref`, in percent.
/// Coordinates are normalized; `width`/`height` convert them to pixels.
template <typename T>
double nme(std::span<const T> pred, std::span<const T> gt, double norm_ref, double width, double height) {
    if (pred.size() != gt.size() || pred.size() % 2 != 0 || pred.empty())
        throw ShapeMismatch("nme: prediction and ground truth sizes differ");
    if (!(norm_ref > 0)) throw BadRef("normalization reference must be positive");
    const std::size_t n = pred.size() / 2;
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const double dx = (static_cast<double>(pred[2 * j]) - static_cast<double>(gt[2 * j])) * width;
        const double dy = (static_cast<double>(pred[2 * j + 1]) - static_cast<double>(gt[2 * j + 1])) * height;
        total += std::hypot(dx, dy);
    }
    return 100.0 * total / static_cast<double>(n) / norm_ref;
}

template <typename T>
double nme(const Tensor<T>& pred, const Tensor<T>& gt, double norm_ref, double width, double height) {
    if (pred.shape() != gt.shape()) throw ShapeMismatch("nme: " + to_string(pred.shape()) + " vs " + to_string(gt.shape()));
    return nme<T>(pred.data(), gt.data(), norm_ref, width, height);
}

/// Sum over stages of the mean absolute coordinate error (unit weights).
template <typename T>
Tensor<T> multi_stage_loss(const std::vector<LandmarkState<T>>& stages, const Tensor<T>& gt) {
    if (stages.empty()) throw ShapeMismatch("multi_stage_loss needs at least one stage");
    Tensor<T> total = l1_loss(stages[0].coords, gt);
    for (std::size_t i = 1; i < stages.size(); ++i) total = add(total, l1_loss(stages[i].coords, gt));
    return total;
}

}  // namespace repformer
