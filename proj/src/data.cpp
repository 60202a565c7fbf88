#include "calibra/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "calibra/io.hpp"

namespace calibra {

// ===== dataset type =====

DomainDataset::DomainDataset(Tensor images_in, std::vector<int> labels, Domain domain_in,
                             bool labels_visible_in)
    : images(std::move(images_in)),
      domain(domain_in),
      labels_visible(labels_visible_in),
      labels_(std::move(labels)) {
    if (images.rank() != 4) {
        throw std::invalid_argument("dataset images must be NCHW, got " + shape_str(images.shape));
    }
    if (static_cast<std::int64_t>(labels_.size()) != images.shape[0]) {
        throw std::invalid_argument("dataset has " + std::to_string(images.shape[0]) +
                                    " images but " + std::to_string(labels_.size()) + " labels");
    }
    for (int l : labels_) {
        if (l < 0) throw std::invalid_argument("dataset labels must be non-negative");
    }
    for (double v : images.data) {
        if (!(v >= -1.0 && v <= 1.0)) {
            throw std::invalid_argument("dataset pixels must lie in [-1, 1]");
        }
    }
}

int DomainDataset::label(std::int64_t i) const {
    if (!labels_visible) {
        throw std::logic_error("label read on a dataset whose labels are not visible");
    }
    if (i < 0 || i >= size()) {
        throw std::invalid_argument("label index " + std::to_string(i) + " out of range [0, " +
                                    std::to_string(size()) + ")");
    }
    return labels_[static_cast<std::size_t>(i)];
}

int DomainDataset::max_label() const {
    if (!labels_visible) {
        throw std::logic_error("label read on a dataset whose labels are not visible");
    }
    int m = 0;
    for (int l : labels_) m = std::max(m, l);
    return m;
}

DomainDataset DomainDataset::unlocked() const {
    DomainDataset out = *this;
    out.labels_visible = true;
    return out;
}

// ===== shift config =====

void ShiftConfig::validate(std::int64_t channels) const {
    if (texture_amplitude < 0.0 || texture_amplitude > 2.0) {
        throw std::invalid_argument("shift: texture amplitude must lie in [0, 2]");
    }
    if (texture_amplitude > 0.0 && texture_frequency <= 0.0) {
        throw std::invalid_argument("shift: texture needs a positive frequency");
    }
    if (elastic_scale < 0.0) throw std::invalid_argument("shift: elastic scale must be >= 0");
    if (!channel_bias.empty() && static_cast<std::int64_t>(channel_bias.size()) != channels) {
        throw std::invalid_argument("shift: channel bias has " +
                                    std::to_string(channel_bias.size()) + " entries for " +
                                    std::to_string(channels) + " channels");
    }
    for (double b : channel_bias) {
        if (std::fabs(b) > 2.0) throw std::invalid_argument("shift: channel bias out of range");
    }
}

bool ShiftConfig::any() const {
    return contrast_inversion || texture_amplitude > 0.0 || !channel_bias.empty() ||
           elastic_scale > 0.0;
}

// ===== glyph renderer =====

namespace {

struct Seg {
    double x1, y1, x2, y2;
};

// Ten stroke patterns in unit coordinates, y pointing down.
const std::vector<Seg>& glyph_strokes(int cls) {
    static const std::vector<std::vector<Seg>> glyphs = {
        /* bar      */ {{0.50, 0.18, 0.50, 0.82}},
        /* dash     */ {{0.18, 0.50, 0.82, 0.50}},
        /* backslash*/ {{0.22, 0.20, 0.78, 0.80}},
        /* slash    */ {{0.22, 0.80, 0.78, 0.20}},
        /* cross    */ {{0.22, 0.20, 0.78, 0.80}, {0.22, 0.80, 0.78, 0.20}},
        /* plus     */ {{0.50, 0.18, 0.50, 0.82}, {0.18, 0.50, 0.82, 0.50}},
        /* ell      */ {{0.35, 0.20, 0.35, 0.78}, {0.35, 0.78, 0.72, 0.78}},
        /* tee      */ {{0.22, 0.24, 0.78, 0.24}, {0.50, 0.24, 0.50, 0.80}},
        /* wedge    */
        {{0.50, 0.20, 0.22, 0.78}, {0.50, 0.20, 0.78, 0.78}, {0.22, 0.78, 0.78, 0.78}},
        /* box      */
        {{0.27, 0.27, 0.73, 0.27},
         {0.73, 0.27, 0.73, 0.73},
         {0.73, 0.73, 0.27, 0.73},
         {0.27, 0.73, 0.27, 0.27}},
    };
    return glyphs[static_cast<std::size_t>(cls)];
}

constexpr int kMaxClasses = 10;

// Render style: moderate stroke/background contrast keeps a contrast-inverted
// copy inside what a bounded perturbation can still steer.
constexpr double kStrokeLevel = 0.58;
constexpr double kGroundLevel = 0.47;
constexpr double kStrokeHalfWidth = 0.042;
constexpr double kPixelNoise = 0.015;

double point_segment_distance(double px, double py, const Seg& s) {
    const double dx = s.x2 - s.x1, dy = s.y2 - s.y1;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x1) * dx + (py - s.y1) * dy) / len2 : 0.0;
    t = std::min(1.0, std::max(0.0, t));
    const double cx = s.x1 + t * dx, cy = s.y1 + t * dy;
    return std::hypot(px - cx, py - cy);
}

// One glyph in [0,1] intensity, written into out[offset .. offset+S*S).
void render_glyph(int cls, std::int64_t S, Rng& rng, double* out) {
    const double theta = rng.uniform(-0.22, 0.22);
    const double scale = rng.uniform(0.85, 1.15);
    const double tx = rng.uniform(-0.07, 0.07);
    const double ty = rng.uniform(-0.07, 0.07);
    const double hw = kStrokeHalfWidth * (1.0 + rng.uniform(-0.25, 0.25));
    const double fg = kStrokeLevel + rng.uniform(-0.02, 0.02);
    const double bg = kGroundLevel + rng.uniform(-0.015, 0.015);

    const double c = std::cos(theta), s = std::sin(theta);
    std::vector<Seg> segs = glyph_strokes(cls);
    for (Seg& g : segs) {
        auto xf = [&](double& x, double& y) {
            const double ox = (x - 0.5) * scale, oy = (y - 0.5) * scale;
            x = 0.5 + c * ox - s * oy + tx;
            y = 0.5 + s * ox + c * oy + ty;
        };
        xf(g.x1, g.y1);
        xf(g.x2, g.y2);
    }

    const double aa = 1.0 / static_cast<double>(S);  // one-pixel soft edge
    for (std::int64_t py = 0; py < S; ++py) {
        for (std::int64_t px = 0; px < S; ++px) {
            const double u = (static_cast<double>(px) + 0.5) / static_cast<double>(S);
            const double v = (static_cast<double>(py) + 0.5) / static_cast<double>(S);
            double d = 1e9;
            for (const Seg& g : segs) d = std::min(d, point_segment_distance(u, v, g));
            const double cov = std::min(1.0, std::max(0.0, (hw + 0.5 * aa - d) / aa));
            out[py * S + px] = bg + (fg - bg) * cov;
        }
    }
    for (std::int64_t j = 0; j < S * S; ++j) {
        out[j] = std::min(1.0, std::max(0.0, out[j] + kPixelNoise * rng.normal()));
    }
}

// Shift pipeline over one normalized C x S x S sample, in place.
void apply_shift(const ShiftConfig& shift, std::int64_t C, std::int64_t S, Rng& rng, double* img) {
    if (shift.elastic_scale > 0.0) {
        const double f1 = rng.uniform(1.0, 3.0), p1 = rng.uniform(0.0, 1.0);
        const double f2 = rng.uniform(1.0, 3.0), p2 = rng.uniform(0.0, 1.0);
        std::vector<double> warped(static_cast<std::size_t>(C * S * S));
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const double* src = img + ch * S * S;
            double* dst = warped.data() + ch * S * S;
            for (std::int64_t y = 0; y < S; ++y) {
                for (std::int64_t x = 0; x < S; ++x) {
                    const double u = static_cast<double>(x) / static_cast<double>(S);
                    const double v = static_cast<double>(y) / static_cast<double>(S);
                    const double sx = static_cast<double>(x) +
                                      shift.elastic_scale * std::sin(2.0 * std::numbers::pi * (v * f1 + p1));
                    const double sy = static_cast<double>(y) +
                                      shift.elastic_scale * std::sin(2.0 * std::numbers::pi * (u * f2 + p2));
                    const double cx = std::min(static_cast<double>(S - 1), std::max(0.0, sx));
                    const double cy = std::min(static_cast<double>(S - 1), std::max(0.0, sy));
                    const std::int64_t x0 = static_cast<std::int64_t>(cx);
                    const std::int64_t y0 = static_cast<std::int64_t>(cy);
                    const std::int64_t x1 = std::min(S - 1, x0 + 1);
                    const std::int64_t y1 = std::min(S - 1, y0 + 1);
                    const double fx = cx - static_cast<double>(x0);
                    const double fy = cy - static_cast<double>(y0);
                    dst[y * S + x] = (1 - fy) * ((1 - fx) * src[y0 * S + x0] + fx * src[y0 * S + x1]) +
                                     fy * ((1 - fx) * src[y1 * S + x0] + fx * src[y1 * S + x1]);
                }
            }
        }
        std::copy(warped.begin(), warped.end(), img);
    }
    if (shift.contrast_inversion) {
        for (std::int64_t j = 0; j < C * S * S; ++j) img[j] = -img[j];
    }
    if (!shift.channel_bias.empty()) {
        for (std::int64_t ch = 0; ch < C; ++ch) {
            const double b = shift.channel_bias[static_cast<std::size_t>(ch)];
            for (std::int64_t j = 0; j < S * S; ++j) img[ch * S * S + j] += b;
        }
    }
    if (shift.texture_amplitude > 0.0) {
        const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double f = shift.texture_frequency;
        for (std::int64_t ch = 0; ch < C; ++ch) {
            for (std::int64_t y = 0; y < S; ++y) {
                for (std::int64_t x = 0; x < S; ++x) {
                    const double u = static_cast<double>(x) / static_cast<double>(S);
                    const double v = static_cast<double>(y) / static_cast<double>(S);
                    img[ch * S * S + y * S + x] += shift.texture_amplitude *
                                                   std::sin(2.0 * std::numbers::pi * f * u + p1) *
                                                   std::sin(2.0 * std::numbers::pi * f * v + p2);
                }
            }
        }
    }
    for (std::int64_t j = 0; j < C * S * S; ++j) {
        img[j] = std::min(1.0, std::max(-1.0, img[j]));
    }
}

void parallel_over(std::int64_t n, int workers, const std::function<void(std::int64_t)>& fn) {
    if (workers <= 1 || n < 2) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (std::thread& t : pool) t.join();
}

}  // namespace

// ===== generation =====

std::pair<DomainDataset, DomainDataset> generate_domain_pair(int n_classes,
                                                             std::int64_t n_per_class,
                                                             std::int64_t image_size,
                                                             const ShiftConfig& shift,
                                                             std::uint64_t seed) {
    if (n_classes < 2 || n_classes > kMaxClasses) {
        throw std::invalid_argument("generate_domain_pair: n_classes must lie in [2, " +
                                    std::to_string(kMaxClasses) + "]");
    }
    if (n_per_class < 1) throw std::invalid_argument("generate_domain_pair: n_per_class must be >= 1");
    if (image_size < 8) throw std::invalid_argument("generate_domain_pair: image size must be >= 8");
    shift.validate(1);

    const std::int64_t n = static_cast<std::int64_t>(n_classes) * n_per_class;
    const std::int64_t S = image_size;
    Tensor src_images = Tensor::zeros({n, 1, S, S});
    Tensor tgt_images = Tensor::zeros({n, 1, S, S});
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        labels[static_cast<std::size_t>(i)] = static_cast<int>(i % n_classes);
    }

    const int workers = thread_budget();
    parallel_over(n, workers, [&](std::int64_t i) {
        const int cls = labels[static_cast<std::size_t>(i)];
        std::vector<double> raw(static_cast<std::size_t>(S * S));
        // Source side.
        {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 0));
            render_glyph(cls, S, rng, raw.data());
            double* out = src_images.data.data() + i * S * S;
            for (std::int64_t j = 0; j < S * S; ++j) out[j] = 2.0 * raw[j] - 1.0;
        }
        // Target side: an independent draw, then the shift.
        {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), 1));
            render_glyph(cls, S, rng, raw.data());
            double* out = tgt_images.data.data() + i * S * S;
            for (std::int64_t j = 0; j < S * S; ++j) out[j] = 2.0 * raw[j] - 1.0;
            Rng shift_rng(derive_seed(shift.seed, static_cast<std::uint64_t>(i), 2));
            apply_shift(shift, 1, S, shift_rng, out);
        }
    });

    DomainDataset source(std::move(src_images), labels, Domain::source, true);
    DomainDataset target(std::move(tgt_images), std::move(labels), Domain::target, false);
    return {std::move(source), std::move(target)};
}

// ===== normalization =====

Tensor normalize(const Tensor& raw01) {
    Tensor out = raw01;
    out.requires_grad = false;
    for (double& v : out.data) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument("normalize: pixel " + std::to_string(v) +
                                        " outside [0, 1]");
        }
        v = 2.0 * v - 1.0;
    }
    return out;
}

Tensor denormalize(const Tensor& pm1) {
    Tensor out = pm1;
    out.requires_grad = false;
    for (double& v : out.data) {
        if (!(v >= -1.0 && v <= 1.0)) {
            throw std::invalid_argument("denormalize: pixel " + std::to_string(v) +
                                        " outside [-1, 1]");
        }
        v = (v + 1.0) / 2.0;
    }
    return out;
}

// ===== patch shuffle =====

PatchPlan make_patch_plan(std::int64_t height, std::int64_t width, int patch_size, Rng& rng) {
    if (patch_size < 1 || patch_size > height || patch_size > width) {
        throw std::invalid_argument("patch size " + std::to_string(patch_size) +
                                    " does not fit image " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    PatchPlan p;
    p.patch = patch_size;
    p.row0 = static_cast<int>(rng.uniform_int(0, height - patch_size));
    p.col0 = static_cast<int>(rng.uniform_int(0, width - patch_size));
    auto perm = rng.permutation(static_cast<std::int64_t>(patch_size) * patch_size);
    p.perm.reserve(perm.size());
    for (std::int64_t v : perm) p.perm.push_back(static_cast<std::int32_t>(v));
    return p;
}

Tensor sample_patch_and_shuffle(const Tensor& image, int patch_size, Rng& rng) {
    if (image.rank() != 3) {
        throw std::invalid_argument("sample_patch_and_shuffle: image must be CxHxW, got " +
                                    shape_str(image.shape));
    }
    const std::int64_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
    PatchPlan p = make_patch_plan(H, W, patch_size, rng);
    const std::int64_t P2 = static_cast<std::int64_t>(patch_size) * patch_size;
    Tensor out = Tensor::zeros({C * P2});
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t q = 0; q < P2; ++q) {
            const std::int32_t pos = p.perm[static_cast<std::size_t>(q)];
            const std::int64_t pr = p.row0 + pos / patch_size;
            const std::int64_t pc = p.col0 + pos % patch_size;
            out[c * P2 + q] = image.data[static_cast<std::size_t>((c * H + pr) * W + pc)];
        }
    }
    return out;
}

// ===== batching =====

std::vector<std::vector<std::int64_t>> make_batches(const DomainDataset& ds,
                                                    std::int64_t batch_size, Rng& rng) {
    if (ds.size() == 0) throw std::invalid_argument("make_batches: empty dataset");
    if (batch_size < 1) throw std::invalid_argument("make_batches: batch size must be >= 1");
    auto perm = rng.permutation(ds.size());
    std::vector<std::vector<std::int64_t>> batches;
    for (std::int64_t lo = 0; lo < ds.size(); lo += batch_size) {
        const std::int64_t hi = std::min(ds.size(), lo + batch_size);
        batches.emplace_back(perm.begin() + lo, perm.begin() + hi);
    }
    return batches;
}

Tensor gather_images(const DomainDataset& ds, const std::vector<std::int64_t>& indices) {
    const std::int64_t per = ds.channels() * ds.height() * ds.width();
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(indices.size()), ds.channels(),
                                ds.height(), ds.width()});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::int64_t i = indices[b];
        if (i < 0 || i >= ds.size()) {
            throw std::invalid_argument("gather_images: index " + std::to_string(i) +
                                        " out of range");
        }
        std::copy(ds.images.data.begin() + i * per, ds.images.data.begin() + (i + 1) * per,
                  out.data.begin() + static_cast<std::int64_t>(b) * per);
    }
    return out;
}

std::vector<int> gather_labels(const DomainDataset& ds, const std::vector<std::int64_t>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::int64_t i : indices) out.push_back(ds.label(i));
    return out;
}

// ===== file format =====

void save_dataset(const std::string& path, const DomainDataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write dataset file: " + path);
    write_magic(os, "CALD");
    write_u32(os, kDatasetFormatVersion);
    write_u32(os, static_cast<std::uint32_t>(ds.domain));
    write_u32(os, ds.labels_visible ? 1u : 0u);
    write_u64(os, static_cast<std::uint64_t>(ds.size()));
    write_u64(os, static_cast<std::uint64_t>(ds.channels()));
    write_u64(os, static_cast<std::uint64_t>(ds.height()));
    write_u64(os, static_cast<std::uint64_t>(ds.width()));
    for (int l : ds.labels_) write_u32(os, static_cast<std::uint32_t>(l));
    write_tensor(os, ds.images);
    if (!os) throw std::runtime_error("failed while writing dataset file: " + path);
}

DomainDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset file: " + path);
    const std::string ctx = "dataset " + path;
    read_magic(is, "CALD", ctx);
    const std::uint32_t version = read_u32(is, ctx);
    if (version != kDatasetFormatVersion) {
        throw std::runtime_error("unsupported dataset version " + std::to_string(version) +
                                 " in " + path);
    }
    const std::uint32_t domain = read_u32(is, ctx);
    if (domain > 1) throw std::runtime_error("corrupt dataset " + path + ": bad domain tag");
    const std::uint32_t visible = read_u32(is, ctx);
    if (visible > 1) throw std::runtime_error("corrupt dataset " + path + ": bad label flag");
    const std::uint64_t n = read_u64(is, ctx);
    const std::uint64_t c = read_u64(is, ctx);
    const std::uint64_t h = read_u64(is, ctx);
    const std::uint64_t w = read_u64(is, ctx);
    std::vector<int> labels(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(read_u32(is, ctx));
    }
    Tensor images = read_tensor(is, ctx);
    const std::vector<std::int64_t> want = {
        static_cast<std::int64_t>(n), static_cast<std::int64_t>(c), static_cast<std::int64_t>(h),
        static_cast<std::int64_t>(w)};
    if (images.shape != want) {
        throw std::runtime_error("corrupt dataset " + path + ": header says " + shape_str(want) +
                                 ", tensor is " + shape_str(images.shape));
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw std::runtime_error("corrupt dataset " + path + ": trailing bytes");
    }
    return DomainDataset(std::move(images), std::move(labels), static_cast<Domain>(domain),
                         visible == 1);
}

// ===== threading =====

int thread_budget() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    const char* env = std::getenv("CALIBRA_THREADS");
    if (env && *env) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end == nullptr || *end != '\0' || v < 1) {
            throw std::runtime_error("CALIBRA_THREADS must be a positive integer");
        }
        hw = std::min(hw, static_cast<int>(v));
    }
    return hw;
}

}  // namespace calibra
