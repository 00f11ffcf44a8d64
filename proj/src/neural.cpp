#include "nearcol/neural.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <zlib.h>
#include <Eigen/Core>

#include "nearcol/errors.hpp"
#include "nearcol/random.hpp"

namespace nearcol {

// ---------------------------------------------------------------------------------------------
// Tensor, config

Tensor::Tensor(std::vector<std::size_t> dims) : shape(std::move(dims)) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    data.assign(n, 0.0);
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::string to_string(Head h) {
    switch (h) {
    case Head::regression:
        return "regression";
    case Head::binary:
        return "binary";
    case Head::multilabel:
        return "multilabel";
    }
    return "regression";
}

Head head_from_string(const std::string &s) {
    if (s == "regression") {
        return Head::regression;
    }
    if (s == "binary") {
        return Head::binary;
    }
    if (s == "multilabel") {
        return Head::multilabel;
    }
    throw ConfigError(fmt::format("unknown head '{}' (expected regression, binary or multilabel)", s));
}

int head_units(Head h) {
    switch (h) {
    case Head::regression:
        return 1;
    case Head::binary:
        return 2;
    case Head::multilabel:
        return kNumTimeBins;
    }
    return 1;
}

int target_width(Head h) { return h == Head::multilabel ? kNumTimeBins : 1; }

namespace {

struct Shape3 {
    int c = 0;
    int h = 0;
    int w = 0;
    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
};

std::string layer_kind_name(LayerKind k) {
    switch (k) {
    case LayerKind::conv:
        return "conv";
    case LayerKind::relu:
        return "relu";
    case LayerKind::maxpool:
        return "maxpool";
    }
    return "conv";
}

LayerKind layer_kind_from_string(const std::string &s) {
    if (s == "conv") {
        return LayerKind::conv;
    }
    if (s == "relu") {
        return LayerKind::relu;
    }
    if (s == "maxpool") {
        return LayerKind::maxpool;
    }
    throw ConfigError(fmt::format("unknown layer kind '{}'", s));
}

// Shapes after each backbone layer (index 0 = input) and after the reduction (back()).
std::vector<Shape3> chain_shapes(const NetworkConfig &cfg) {
    std::vector<Shape3> shapes{{cfg.input_channels, cfg.input_height, cfg.input_width}};
    auto apply = [&](const LayerSpec &l, const std::string &name) {
        Shape3 s = shapes.back();
        switch (l.kind) {
        case LayerKind::conv:
            if (l.in_channels != s.c) {
                throw ConfigError(fmt::format("layer {} (conv): expects {} input channels but receives {}", name,
                                              l.in_channels, s.c));
            }
            if (l.out_channels < 1 || l.kernel < 1 || l.kernel % 2 == 0) {
                throw ConfigError(fmt::format("layer {} (conv): needs >= 1 output channel and an odd kernel", name));
            }
            s.c = l.out_channels;
            break;
        case LayerKind::relu:
            break;
        case LayerKind::maxpool:
            if (l.kernel < 1 || s.h % l.kernel != 0 || s.w % l.kernel != 0) {
                throw ConfigError(fmt::format("layer {} (maxpool {}): input {}x{} is not divisible by the window", name,
                                              l.kernel, s.h, s.w));
            }
            s.h /= l.kernel;
            s.w /= l.kernel;
            break;
        }
        shapes.push_back(s);
    };
    int convs = 0;
    for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
        const bool conv = cfg.backbone[i].kind == LayerKind::conv;
        convs += conv ? 1 : 0;
        apply(cfg.backbone[i], conv ? fmt::format("conv{} (backbone[{}])", convs, i) : fmt::format("backbone[{}]", i));
    }
    if (cfg.reduce.kind != LayerKind::conv || cfg.reduce.kernel != 1) {
        throw ConfigError("layer reduce: must be a 1x1 convolution");
    }
    apply(cfg.reduce, "reduce");
    return shapes;
}

}  // namespace

void NetworkConfig::validate() const {
    if (n_frames < kMinWindowFrames || n_frames > kMaxWindowFrames) {
        throw ConfigError(fmt::format("network: n_frames must be in [1, 9] (got {})", n_frames));
    }
    if (input_channels < 1 || input_height < 1 || input_width < 1) {
        throw ConfigError("network: input size must be positive");
    }
    if (hidden_units < 1) {
        throw ConfigError("layer fc1: hidden_units must be >= 1");
    }
    (void)chain_shapes(*this);
}

int NetworkConfig::frame_feature_size() const { return static_cast<int>(chain_shapes(*this).back().size()); }

void to_json(nlohmann::json &j, const NetworkConfig &cfg) {
    nlohmann::json layers = nlohmann::json::array();
    auto layer_json = [](const LayerSpec &l) {
        return nlohmann::json{{"kind", layer_kind_name(l.kind)},
                              {"in_channels", l.in_channels},
                              {"out_channels", l.out_channels},
                              {"kernel", l.kernel}};
    };
    for (const auto &l : cfg.backbone) {
        layers.push_back(layer_json(l));
    }
    j = nlohmann::json{{"n_frames", cfg.n_frames},
                       {"input", {cfg.input_channels, cfg.input_height, cfg.input_width}},
                       {"backbone", layers},
                       {"reduce", layer_json(cfg.reduce)},
                       {"hidden_units", cfg.hidden_units},
                       {"head", to_string(cfg.head)}};
}

NetworkConfig network_config_from_json(const nlohmann::json &j) {
    try {
        NetworkConfig cfg;
        auto layer = [](const nlohmann::json &l) {
            return LayerSpec{layer_kind_from_string(l.at("kind").get<std::string>()), l.at("in_channels").get<int>(),
                             l.at("out_channels").get<int>(), l.at("kernel").get<int>()};
        };
        cfg.n_frames = j.at("n_frames").get<int>();
        cfg.input_channels = j.at("input").at(0).get<int>();
        cfg.input_height = j.at("input").at(1).get<int>();
        cfg.input_width = j.at("input").at(2).get<int>();
        cfg.backbone.clear();
        for (const auto &l : j.at("backbone")) {
            cfg.backbone.push_back(layer(l));
        }
        cfg.reduce = layer(j.at("reduce"));
        cfg.hidden_units = j.at("hidden_units").get<int>();
        cfg.head = head_from_string(j.at("head").get<std::string>());
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(fmt::format("network config: {}", e.what()));
    }
}

void Hyperparams::validate() const {
    if (batch_size < 1) {
        throw ConfigError(fmt::format("batch_size must be >= 1 (got {})", batch_size));
    }
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError(fmt::format("learning_rate must be finite and >= 0 (got {})", learning_rate));
    }
    if (epochs < 0) {
        throw ConfigError(fmt::format("epochs must be >= 0 (got {})", epochs));
    }
}

// ---------------------------------------------------------------------------------------------
// Loss

LossResult compute_loss(std::span<const double> outputs, std::span<const double> targets, Head head) {
    const auto units = static_cast<std::size_t>(head_units(head));
    const auto twidth = static_cast<std::size_t>(target_width(head));
    if (outputs.empty() || outputs.size() % units != 0 || targets.size() != outputs.size() / units * twidth) {
        throw ConfigError(fmt::format("loss: {} outputs and {} targets do not match head {}", outputs.size(),
                                      targets.size(), to_string(head)));
    }
    constexpr double kClamp = 1e-12;
    const std::size_t batch = outputs.size() / units;
    const double inv_batch = 1.0 / static_cast<double>(batch);
    LossResult r;
    r.grad.resize(outputs.size());
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const double *out = outputs.data() + b * units;
        const double *tgt = targets.data() + b * twidth;
        double *g = r.grad.data() + b * units;
        switch (head) {
        case Head::regression: {
            const double diff = out[0] - tgt[0];
            total += 0.5 * diff * diff;
            g[0] = diff * inv_batch;
            break;
        }
        case Head::binary: {
            const double m = std::max(out[0], out[1]);
            const double e0 = std::exp(out[0] - m);
            const double e1 = std::exp(out[1] - m);
            const double p1 = e1 / (e0 + e1);
            const double p0 = e0 / (e0 + e1);
            const bool positive = tgt[0] > 0.5;
            const double p_true = std::clamp(positive ? p1 : p0, kClamp, 1.0 - kClamp);
            total += -std::log(p_true);
            g[0] = (p0 - (positive ? 0.0 : 1.0)) * inv_batch;
            g[1] = (p1 - (positive ? 1.0 : 0.0)) * inv_batch;
            break;
        }
        case Head::multilabel: {
            double sample = 0.0;
            for (std::size_t k = 0; k < units; ++k) {
                const double s = 1.0 / (1.0 + std::exp(-out[k]));
                const double sc = std::clamp(s, kClamp, 1.0 - kClamp);
                sample += -(tgt[k] * std::log(sc) + (1.0 - tgt[k]) * std::log(1.0 - sc));
                g[k] = (s - tgt[k]) / static_cast<double>(units) * inv_batch;
            }
            total += sample / static_cast<double>(units);
            break;
        }
        }
    }
    r.loss = total * inv_batch;
    return r;
}

// ---------------------------------------------------------------------------------------------
// Kernels

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Unrolls "same"-padded k x k patches: row (ch*k + ky)*k + kx, column y*w + x.
void im2col(const double *in, int c, int h, int w, int k, std::vector<double> &col) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    col.resize(static_cast<std::size_t>(c) * k * k * hw);
    double *row = col.data();
    for (int ch = 0; ch < c; ++ch) {
        const double *plane = in + ch * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, row += hw) {
                const int dx = kx - pad;
                const int x0 = std::max(0, -dx);
                const int x1 = std::min(w, w - dx);
                for (int y = 0; y < h; ++y) {
                    double *dst = row + static_cast<std::size_t>(y) * w;
                    const int yy = y + ky - pad;
                    if (yy < 0 || yy >= h || x0 >= x1) {
                        std::fill(dst, dst + w, 0.0);
                        continue;
                    }
                    std::fill(dst, dst + x0, 0.0);
                    std::memcpy(dst + x0, plane + static_cast<std::size_t>(yy) * w + x0 + dx,
                                sizeof(double) * (x1 - x0));
                    std::fill(dst + x1, dst + w, 0.0);
                }
            }
        }
    }
}

// Adjoint of im2col: scatters patch rows back onto the (zeroed) input planes.
void col2im_add(const double *col, int c, int h, int w, int k, double *out) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const double *row = col;
    for (int ch = 0; ch < c; ++ch) {
        double *plane = out + ch * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx, row += hw) {
                const int dx = kx - pad;
                const int x0 = std::max(0, -dx);
                const int x1 = std::min(w, w - dx);
                for (int y = 0; y < h; ++y) {
                    const int yy = y + ky - pad;
                    if (yy < 0 || yy >= h) {
                        continue;
                    }
                    const double *src = row + static_cast<std::size_t>(y) * w;
                    double *dst = plane + static_cast<std::size_t>(yy) * w + dx;
#pragma omp simd
                    for (int x = x0; x < x1; ++x) {
                        dst[x] += src[x];
                    }
                }
            }
        }
    }
}

// out (oc x hw) = weight (oc x c*k*k) * im2col(in) + bias; `col` keeps the patches for backward.
void conv_forward(const double *in, int c, int h, int w, int oc, int k, const double *weight, const double *bias,
                  std::vector<double> &col, double *out) {
    const auto hw = static_cast<Eigen::Index>(h) * w;
    const auto ckk = static_cast<Eigen::Index>(c) * k * k;
    im2col(in, c, h, w, k, col);
    MatMap o(out, oc, hw);
    o.noalias() = ConstMatMap(weight, oc, ckk) * ConstMatMap(col.data(), ckk, hw);
    for (int i = 0; i < oc; ++i) {
        o.row(i).array() += bias[i];
    }
}

// Fixed lane count keeps the summation order independent of buffer alignment.
double dot(const double *a, const double *b, std::size_t n) {
    std::array<double, 8> acc{};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    for (std::size_t l = 0; i < n; ++i, ++l) {
        acc[l] += a[i] * b[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

double sum(const double *a, std::size_t n) {
    std::array<double, 8> acc{};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) {
            acc[l] += a[i + l];
        }
    }
    for (std::size_t l = 0; i < n; ++i, ++l) {
        acc[l] += a[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

void axpy(double alpha, const double *x, double *y, std::size_t n) {
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

// Any inf or NaN turns the product sum into NaN, which keeps the scan vectorizable.
bool finite_span(const std::vector<double> &v) {
    double acc = 0.0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < v.size(); ++i) {
        acc += v[i] * 0.0;
    }
    return acc == 0.0;
}

// 2x2 stride-2 max pooling; ties keep the first element in row-major window order.
void maxpool2(const double *in, int c, int h, int w, double *out, int *argmax) {
    const int oh = h / 2;
    const int ow = w / 2;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            const int r0 = (ch * h + 2 * y) * w;
            const int r1 = r0 + w;
            const int o = (ch * oh + y) * ow;
            for (int x = 0; x < ow; ++x) {
                int best = r0 + 2 * x;
                best = in[r0 + 2 * x + 1] > in[best] ? r0 + 2 * x + 1 : best;
                best = in[r1 + 2 * x] > in[best] ? r1 + 2 * x : best;
                best = in[r1 + 2 * x + 1] > in[best] ? r1 + 2 * x + 1 : best;
                argmax[o + x] = best;
                out[o + x] = in[best];
            }
        }
    }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// Records every ReLU sign and pooling choice of a forward pass as a running hash. Two passes with
// equal traces take the same linear pieces.
class KinkTrace {
  public:
    void relu(const std::vector<double> &pre) {
        for (double v : pre) {
            mix(v > 0.0 ? 1u : 0u);
        }
    }
    void pool(const std::vector<int> &argmax) {
        for (int i : argmax) {
            mix(static_cast<std::uint64_t>(i));
        }
    }
    [[nodiscard]] std::uint64_t hash() const { return h_; }

  private:
    void mix(std::uint64_t v) { h_ = (h_ ^ v) * 0x100000001b3ULL; }
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

// ---------------------------------------------------------------------------------------------
// Network

struct Network::Workspace {
    struct FrameCache {
        // acts[i] = input of backbone layer i; acts[backbone.size()] = input of reduce; acts.back() = features.
        std::vector<std::vector<double>> acts;
        std::vector<std::vector<int>> argmax;  // per backbone layer (maxpool only)
        std::vector<std::vector<double>> cols;  // im2col patches per conv layer
    };
    std::vector<Shape3> shapes;
    std::vector<FrameCache> frames;
    std::vector<double> features;  // concat, N * F
    std::vector<double> hidden_pre;
    std::vector<double> hidden;
    std::vector<double> output;
    // scratch
    std::vector<double> grad_col;
    std::vector<double> grad_a;
    std::vector<double> grad_b;
    std::vector<double> grad_features;
    std::vector<double> grad_hidden;
    bool check_finite = false;

    explicit Workspace(const NetworkConfig &cfg) : shapes(chain_shapes(cfg)) {
        frames.resize(cfg.n_frames);
        for (auto &f : frames) {
            f.acts.resize(shapes.size());
            f.argmax.resize(cfg.backbone.size());
            f.cols.resize(cfg.backbone.size() + 1);
        }
        // Large scratch buffers are sized once: repeated growth would go through mmap on every sample.
        std::size_t largest = 0;
        std::size_t largest_col = 0;
        for (std::size_t i = 0; i + 1 < shapes.size(); ++i) {
            largest = std::max(largest, shapes[i].size());
            const LayerSpec &l = i < cfg.backbone.size() ? cfg.backbone[i] : cfg.reduce;
            if (l.kind == LayerKind::conv) {
                largest_col = std::max(largest_col, shapes[i].size() * l.kernel * l.kernel);
            }
        }
        largest = std::max(largest, shapes.back().size());
        grad_a.reserve(largest);
        grad_b.reserve(largest);
        grad_col.reserve(largest_col);
    }
};

Network Network::build(const NetworkConfig &cfg, std::uint64_t seed) {
    cfg.validate();
    Network net;
    net.cfg_ = cfg;
    net.seed_ = seed;
    const auto shapes = chain_shapes(cfg);

    auto add = [&](const std::string &layer, const std::string &suffix, std::vector<std::size_t> dims,
                   std::size_t fan_in) {
        Parameter p;
        p.name = layer + "." + suffix;
        p.layer = layer;
        p.value = Tensor(dims);
        p.grad = Tensor(std::move(dims));
        p.fan_in = fan_in;
        net.params_.push_back(std::move(p));
        return net.params_.size() - 1;
    };
    auto add_conv = [&](const std::string &name, const LayerSpec &l) {
        const auto k = static_cast<std::size_t>(l.kernel);
        const auto fan_in = static_cast<std::size_t>(l.in_channels) * k * k;
        ConvRef ref;
        ref.weight = add(name, "weight", {static_cast<std::size_t>(l.out_channels),
                                          static_cast<std::size_t>(l.in_channels), k, k},
                         fan_in);
        ref.bias = add(name, "bias", {static_cast<std::size_t>(l.out_channels)}, 0);
        net.conv_refs_.push_back(ref);
    };
    int conv_index = 0;
    for (const auto &l : cfg.backbone) {
        if (l.kind == LayerKind::conv) {
            add_conv(fmt::format("conv{}", ++conv_index), l);
        }
    }
    add_conv("reduce", cfg.reduce);
    const auto features = static_cast<std::size_t>(cfg.n_frames) * shapes.back().size();
    const auto hidden = static_cast<std::size_t>(cfg.hidden_units);
    const auto units = static_cast<std::size_t>(head_units(cfg.head));
    net.fc1_.weight = add("fc1", "weight", {hidden, features}, features);
    net.fc1_.bias = add("fc1", "bias", {hidden}, 0);
    net.out_.weight = add("out", "weight", {units, hidden}, hidden);
    net.out_.bias = add("out", "bias", {units}, 0);

    for (std::size_t i = 0; i < net.params_.size(); ++i) {
        auto &p = net.params_[i];
        if (p.fan_in == 0) {
            continue;
        }
        Rng rng = make_stream(seed, "init:" + p.name);
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
        for (auto &v : p.value.data) {
            v = normal(rng);
        }
    }
    return net;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto &p : params_) {
        n += p.value.size();
    }
    return n;
}

double Network::forward_sample(std::span<const double> window, Workspace &ws, KinkTrace *trace) const {
    const std::size_t frame_size = cfg_.frame_input_size();
    if (window.size() != frame_size * cfg_.n_frames) {
        throw ConfigError(fmt::format("forward: window has {} values, expected {} ({} frames of {}x{}x{})",
                                      window.size(), frame_size * cfg_.n_frames, cfg_.n_frames, cfg_.input_channels,
                                      cfg_.input_height, cfg_.input_width));
    }
    const auto &shapes = ws.shapes;
    const std::size_t feat = shapes.back().size();
    ws.features.resize(feat * cfg_.n_frames);


    for (int f = 0; f < cfg_.n_frames; ++f) {
        auto &fc = ws.frames[f];
        fc.acts[0].assign(window.begin() + f * frame_size, window.begin() + (f + 1) * frame_size);
        std::size_t conv_i = 0;
        const std::size_t n_layers = cfg_.backbone.size() + 1;
        for (std::size_t li = 0; li < n_layers; ++li) {
            const LayerSpec &l = li < cfg_.backbone.size() ? cfg_.backbone[li] : cfg_.reduce;
            const Shape3 in_s = shapes[li];
            const Shape3 out_s = shapes[li + 1];
            const auto &in = fc.acts[li];
            auto &out = fc.acts[li + 1];
            out.resize(out_s.size());
            switch (l.kind) {
            case LayerKind::conv: {
                const auto &w = params_[conv_refs_[conv_i].weight].value.data;
                const auto &b = params_[conv_refs_[conv_i].bias].value.data;
                conv_forward(in.data(), in_s.c, in_s.h, in_s.w, out_s.c, l.kernel, w.data(), b.data(), fc.cols[li],
                             out.data());
                ++conv_i;
                break;
            }
            case LayerKind::relu:
                if (trace) {
                    trace->relu(in);
                }
                for (std::size_t i = 0; i < in.size(); ++i) {
                    out[i] = in[i] > 0.0 ? in[i] : 0.0;
                }
                break;
            case LayerKind::maxpool: {
                auto &idx = fc.argmax[li];
                idx.resize(out_s.size());
                const int k = l.kernel;
                if (k == 2) {
                    maxpool2(in.data(), in_s.c, in_s.h, in_s.w, out.data(), idx.data());
                } else {
                for (int c = 0; c < out_s.c; ++c) {
                    for (int y = 0; y < out_s.h; ++y) {
                        for (int x = 0; x < out_s.w; ++x) {
                            int best = (c * in_s.h + y * k) * in_s.w + x * k;
                            for (int dy = 0; dy < k; ++dy) {
                                for (int dx = 0; dx < k; ++dx) {
                                    const int j = (c * in_s.h + y * k + dy) * in_s.w + x * k + dx;
                                    if (in[j] > in[best]) {
                                        best = j;
                                    }
                                }
                            }
                            const int o = (c * out_s.h + y) * out_s.w + x;
                            idx[o] = best;
                            out[o] = in[best];
                        }
                    }
                }
                }
                if (trace) {
                    trace->pool(idx);
                }
                break;
            }
            }
            if (ws.check_finite && l.kind == LayerKind::conv && !finite_span(out)) {
                throw TrainingError(fmt::format("non-finite activation in layer {}",
                                                li < cfg_.backbone.size() ? fmt::format("conv{}", conv_i)
                                                                          : std::string("reduce")));
            }
        }
        std::copy(fc.acts.back().begin(), fc.acts.back().end(), ws.features.begin() + f * feat);
    }

    // fc1 -> relu -> out
    const auto &w1 = params_[fc1_.weight].value.data;
    const auto &b1 = params_[fc1_.bias].value.data;
    const std::size_t nf = ws.features.size();
    const auto hidden = static_cast<std::size_t>(cfg_.hidden_units);
    ws.hidden_pre.resize(hidden);
    ws.hidden.resize(hidden);
    for (std::size_t j = 0; j < hidden; ++j) {
        ws.hidden_pre[j] = b1[j] + dot(w1.data() + j * nf, ws.features.data(), nf);
        ws.hidden[j] = ws.hidden_pre[j] > 0.0 ? ws.hidden_pre[j] : 0.0;
    }
    if (trace) {
        trace->relu(ws.hidden_pre);
    }
    if (ws.check_finite && !finite_span(ws.hidden_pre)) {
        throw TrainingError("non-finite activation in layer fc1");
    }
    const auto &w2 = params_[out_.weight].value.data;
    const auto &b2 = params_[out_.bias].value.data;
    const auto units = static_cast<std::size_t>(head_units(cfg_.head));
    ws.output.resize(units);
    for (std::size_t k = 0; k < units; ++k) {
        ws.output[k] = b2[k] + dot(w2.data() + k * hidden, ws.hidden.data(), hidden);
    }
    if (!finite_span(ws.output)) {
        if (ws.check_finite) {
            throw TrainingError("non-finite activation in layer out");
        }
        throw RuntimeError("forward: non-finite network output");
    }
    return 0.0;
}

void Network::backward_sample(Workspace &ws, std::span<const double> out_grad) {
    const auto hidden = static_cast<std::size_t>(cfg_.hidden_units);
    const auto units = static_cast<std::size_t>(head_units(cfg_.head));
    const std::size_t nf = ws.features.size();

    // out layer
    auto &gw2 = params_[out_.weight].grad.data;
    auto &gb2 = params_[out_.bias].grad.data;
    const auto &w2 = params_[out_.weight].value.data;
    ws.grad_hidden.assign(hidden, 0.0);
    for (std::size_t k = 0; k < units; ++k) {
        gb2[k] += out_grad[k];
        axpy(out_grad[k], ws.hidden.data(), gw2.data() + k * hidden, hidden);
        axpy(out_grad[k], w2.data() + k * hidden, ws.grad_hidden.data(), hidden);
    }
    // relu + fc1
    auto &gw1 = params_[fc1_.weight].grad.data;
    auto &gb1 = params_[fc1_.bias].grad.data;
    const auto &w1 = params_[fc1_.weight].value.data;
    ws.grad_features.assign(nf, 0.0);
    for (std::size_t j = 0; j < hidden; ++j) {
        const double g = ws.hidden_pre[j] > 0.0 ? ws.grad_hidden[j] : 0.0;
        if (g == 0.0) {
            continue;
        }
        gb1[j] += g;
        axpy(g, ws.features.data(), gw1.data() + j * nf, nf);
        axpy(g, w1.data() + j * nf, ws.grad_features.data(), nf);
    }

    // Split the concatenated gradient back into the streams; each stream accumulates into the
    // shared backbone parameters.
    const auto &shapes = ws.shapes;
    const std::size_t feat = shapes.back().size();
    const std::size_t n_layers = cfg_.backbone.size() + 1;
    for (int f = 0; f < cfg_.n_frames; ++f) {
        auto &fc = ws.frames[f];
        ws.grad_a.assign(ws.grad_features.begin() + f * feat, ws.grad_features.begin() + (f + 1) * feat);
        std::size_t conv_i = conv_refs_.size();
        for (std::size_t li = n_layers; li-- > 0;) {
            const LayerSpec &l = li < cfg_.backbone.size() ? cfg_.backbone[li] : cfg_.reduce;
            const Shape3 in_s = shapes[li];
            const Shape3 out_s = shapes[li + 1];
            const auto &in = fc.acts[li];
            const bool need_input_grad = li > 0;
            switch (l.kind) {
            case LayerKind::conv: {
                --conv_i;
                const auto &w = params_[conv_refs_[conv_i].weight].value.data;
                auto &gw = params_[conv_refs_[conv_i].weight].grad.data;
                auto &gb = params_[conv_refs_[conv_i].bias].grad.data;
                const int k = l.kernel;
                const auto hw = static_cast<Eigen::Index>(out_s.h) * out_s.w;
                const auto ckk = static_cast<Eigen::Index>(in_s.c) * k * k;
                const ConstMatMap dout(ws.grad_a.data(), out_s.c, hw);
                const ConstMatMap col(fc.cols[li].data(), ckk, hw);
                MatMap(gw.data(), out_s.c, ckk).noalias() += dout * col.transpose();
                for (int o = 0; o < out_s.c; ++o) {
                    gb[o] += sum(ws.grad_a.data() + o * hw, static_cast<std::size_t>(hw));
                }
                if (need_input_grad) {
                    ws.grad_col.resize(static_cast<std::size_t>(ckk * hw));
                    MatMap(ws.grad_col.data(), ckk, hw).noalias() =
                        ConstMatMap(w.data(), out_s.c, ckk).transpose() * dout;
                    ws.grad_b.assign(in_s.size(), 0.0);
                    col2im_add(ws.grad_col.data(), in_s.c, in_s.h, in_s.w, k, ws.grad_b.data());
                    ws.grad_a.swap(ws.grad_b);
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t i = 0; i < in.size(); ++i) {
                    if (!(in[i] > 0.0)) {
                        ws.grad_a[i] = 0.0;
                    }
                }
                break;
            case LayerKind::maxpool: {
                const auto &idx = fc.argmax[li];
                ws.grad_b.assign(in_s.size(), 0.0);
                for (std::size_t o = 0; o < idx.size(); ++o) {
                    ws.grad_b[idx[o]] += ws.grad_a[o];
                }
                ws.grad_a.swap(ws.grad_b);
                break;
            }
            }
        }
    }
}

std::vector<double> Network::forward_raw(std::span<const double> window) const {
    Workspace ws(cfg_);
    forward_sample(window, ws, nullptr);
    return ws.output;
}

std::vector<double> Network::forward(std::span<const double> window) const {
    auto out = forward_raw(window);
    switch (cfg_.head) {
    case Head::regression:
        out[0] = std::clamp(out[0], 0.0, kMaxPredictedTime);
        break;
    case Head::binary: {
        const double m = std::max(out[0], out[1]);
        const double e0 = std::exp(out[0] - m);
        const double e1 = std::exp(out[1] - m);
        out = {e0 / (e0 + e1), e1 / (e0 + e1)};
        break;
    }
    case Head::multilabel:
        for (auto &v : out) {
            v = sigmoid(v);
        }
        break;
    }
    return out;
}

std::vector<double> Network::frame_features(std::span<const double> frame) const {
    const std::size_t frame_size = cfg_.frame_input_size();
    if (frame.size() != frame_size) {
        throw ConfigError(fmt::format("frame_features: frame has {} values, expected {}", frame.size(), frame_size));
    }
    // Backbone-only pass, mirroring forward_sample.
    const auto shapes = chain_shapes(cfg_);
    std::vector<double> cur(frame.begin(), frame.end());
    std::vector<double> next;
    std::vector<double> col;
    std::size_t conv_i = 0;
    for (std::size_t li = 0; li <= cfg_.backbone.size(); ++li) {
        const LayerSpec &l = li < cfg_.backbone.size() ? cfg_.backbone[li] : cfg_.reduce;
        const Shape3 in_s = shapes[li];
        const Shape3 out_s = shapes[li + 1];
        next.assign(out_s.size(), 0.0);
        if (l.kind == LayerKind::conv) {
            const auto &w = params_[conv_refs_[conv_i].weight].value.data;
            const auto &b = params_[conv_refs_[conv_i].bias].value.data;
            conv_forward(cur.data(), in_s.c, in_s.h, in_s.w, out_s.c, l.kernel, w.data(), b.data(), col, next.data());
            ++conv_i;
        } else if (l.kind == LayerKind::relu) {
            for (std::size_t i = 0; i < cur.size(); ++i) {
                next[i] = cur[i] > 0.0 ? cur[i] : 0.0;
            }
        } else {
            const int k = l.kernel;
            for (int c = 0; c < out_s.c; ++c) {
                for (int y = 0; y < out_s.h; ++y) {
                    for (int x = 0; x < out_s.w; ++x) {
                        double best = cur[(c * in_s.h + y * k) * in_s.w + x * k];
                        for (int dy = 0; dy < k; ++dy) {
                            for (int dx = 0; dx < k; ++dx) {
                                best = std::max(best, cur[(c * in_s.h + y * k + dy) * in_s.w + x * k + dx]);
                            }
                        }
                        next[(c * out_s.h + y) * out_s.w + x] = best;
                    }
                }
            }
        }
        cur.swap(next);
    }
    return cur;
}

std::vector<double> Network::concat_features(std::span<const double> window) const {
    Workspace ws(cfg_);
    forward_sample(window, ws, nullptr);
    return ws.features;
}

double Network::batch_loss(const Batch &batch, KinkTrace *trace) const {
    const std::size_t in_size = cfg_.frame_input_size() * cfg_.n_frames;
    const auto units = static_cast<std::size_t>(head_units(cfg_.head));
    Workspace ws(cfg_);
    std::vector<double> outputs;
    outputs.reserve(batch.size * units);
    for (std::size_t b = 0; b < batch.size; ++b) {
        forward_sample(std::span<const double>(batch.inputs).subspan(b * in_size, in_size), ws, trace);
        outputs.insert(outputs.end(), ws.output.begin(), ws.output.end());
    }
    return compute_loss(outputs, batch.targets, cfg_.head).loss;
}

double Network::compute_gradients(const Batch &batch) {
    if (batch.size == 0) {
        throw ConfigError("empty batch");
    }
    for (auto &p : params_) {
        std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    }
    const std::size_t in_size = cfg_.frame_input_size() * cfg_.n_frames;
    const auto units = static_cast<std::size_t>(head_units(cfg_.head));
    const auto twidth = static_cast<std::size_t>(target_width(cfg_.head));
    if (batch.inputs.size() != batch.size * in_size || batch.targets.size() != batch.size * twidth) {
        throw ConfigError("batch: input or target size does not match the network");
    }
    Workspace ws(cfg_);
    ws.check_finite = true;
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size; ++b) {
        forward_sample(std::span<const double>(batch.inputs).subspan(b * in_size, in_size), ws, nullptr);
        auto loss = compute_loss(ws.output, std::span<const double>(batch.targets).subspan(b * twidth, twidth),
                                 cfg_.head);
        total += loss.loss;
        for (auto &g : loss.grad) {
            g /= static_cast<double>(batch.size);
        }
        backward_sample(ws, loss.grad);
    }
    (void)units;
    for (const auto &p : params_) {
        if (!p.grad.all_finite()) {
            throw TrainingError(fmt::format("non-finite gradient in layer {} ({})", p.layer, p.name));
        }
    }
    return total / static_cast<double>(batch.size);
}

void Network::sgd_step(double learning_rate) {
    for (auto &p : params_) {
        axpy(-learning_rate, p.grad.data.data(), p.value.data.data(), p.value.size());
    }
}

double backward_and_step(Network &net, const Batch &batch, const Hyperparams &hyper) {
    if (batch.size > static_cast<std::size_t>(hyper.batch_size)) {
        throw ConfigError(fmt::format("batch of {} exceeds batch_size {}", batch.size, hyper.batch_size));
    }
    const double loss = net.compute_gradients(batch);
    net.sgd_step(hyper.learning_rate);
    return loss;
}

// ---------------------------------------------------------------------------------------------
// Training

Batch make_batch(std::span<const WindowSample> samples, std::span<const std::size_t> indices, Head head) {
    Batch batch;
    batch.size = indices.size();
    if (indices.empty()) {
        return batch;
    }
    const auto &first = samples[indices[0]];
    const std::size_t frame_size = static_cast<std::size_t>(first.height()) * first.width();
    const std::size_t window_size = frame_size * first.n_frames;
    batch.inputs.resize(window_size * indices.size());
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const auto &s = samples[indices[b]];
        if (static_cast<std::size_t>(s.height()) * s.width() * s.n_frames != window_size) {
            throw ConfigError("batch: samples have inconsistent window shapes");
        }
        for (int f = 0; f < s.n_frames; ++f) {
            s.write_frame(f, std::span<double>(batch.inputs).subspan(b * window_size + f * frame_size, frame_size));
        }
        switch (head) {
        case Head::regression:
            if (!s.t_true) {
                throw ConfigError("regression batch: sample has no time-to-collision target");
            }
            batch.targets.push_back(*s.t_true);
            break;
        case Head::binary:
            if (!s.targets) {
                throw ConfigError("binary batch: sample has no classification target");
            }
            batch.targets.push_back(s.targets->binary);
            break;
        case Head::multilabel:
            if (!s.targets) {
                throw ConfigError("multilabel batch: sample has no classification target");
            }
            for (auto v : s.targets->multilabel) {
                batch.targets.push_back(v);
            }
            break;
        }
    }
    return batch;
}

TrainResult train(Network &net, std::span<const WindowSample> samples, const Hyperparams &hyper,
                  const EpochCallback &on_epoch) {
    hyper.validate();
    if (samples.empty()) {
        throw ConfigError("train: empty dataset");
    }
    const auto &cfg = net.config();
    for (const auto &s : samples) {
        if (s.n_frames != cfg.n_frames || s.height() != cfg.input_height || s.width() != cfg.input_width) {
            throw ConfigError(fmt::format("train: sample window {}x{}x{} does not match network {}x{}x{}", s.n_frames,
                                          s.height(), s.width(), cfg.n_frames, cfg.input_height, cfg.input_width));
        }
    }
    const std::size_t n = samples.size();
    const auto bs = static_cast<std::size_t>(hyper.batch_size);
    const std::size_t batches_per_epoch = (n + bs - 1) / bs;
    std::optional<WeightedSampler> sampler;
    if (cfg.head != Head::regression) {
        sampler.emplace(make_weighted_sampler(samples, derive_seed(hyper.seed, "sampler")));
    }
    TrainResult result;
    std::vector<std::size_t> order(n);
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        if (!sampler) {
            std::iota(order.begin(), order.end(), 0);
            Rng rng = make_stream(hyper.seed, "shuffle", static_cast<std::uint64_t>(epoch));
            std::shuffle(order.begin(), order.end(), rng);
        } else {
            order.resize(batches_per_epoch * bs);
            for (auto &i : order) {
                i = sampler->next();
            }
        }
        double epoch_total = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t count = std::min(bs, order.size() - start);
            const auto idx = std::span<const std::size_t>(order).subspan(start, count);
            const Batch batch = make_batch(samples, idx, cfg.head);
            double loss = 0.0;
            try {
                loss = backward_and_step(net, batch, hyper);
            } catch (const TrainingError &e) {
                throw TrainingError(fmt::format("epoch {}, batch {}: {}", epoch, start / bs, e.what()));
            }
            if (!std::isfinite(loss) || loss > 1e6) {
                throw TrainingError(fmt::format("training diverged at epoch {}, batch {}: loss {} (lr {}, batch {})",
                                                epoch, start / bs, loss, hyper.learning_rate, hyper.batch_size));
            }
            epoch_total += loss * static_cast<double>(count);
            seen += count;
        }
        result.epoch_loss.push_back(epoch_total / static_cast<double>(seen));
        if (on_epoch) {
            on_epoch(epoch, result.epoch_loss.back());
        }
    }
    return result;
}

std::vector<double> predict(const Network &net, std::span<const WindowSample> samples) {
    std::vector<double> out;
    if (samples.empty()) {
        return out;
    }
    const auto &first = samples.front();
    const std::size_t frame_size = static_cast<std::size_t>(first.height()) * first.width();
    std::vector<double> window(frame_size * first.n_frames);
    for (const auto &s : samples) {
        if (static_cast<std::size_t>(s.height()) * s.width() != frame_size || s.n_frames != first.n_frames) {
            throw ConfigError("predict: samples have inconsistent window shapes");
        }
        for (int f = 0; f < s.n_frames; ++f) {
            s.write_frame(f, std::span<double>(window).subspan(f * frame_size, frame_size));
        }
        const auto y = net.forward(window);
        out.insert(out.end(), y.begin(), y.end());
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Gradient check

bool GradCheckReport::passed() const {
    return std::all_of(layers.begin(), layers.end(), [&](const LayerGradCheck &l) {
        return l.checked > 0 && l.max_rel_error < tolerance;
    });
}

GradCheckReport grad_check(const NetworkConfig &cfg, const GradCheckOptions &options) {
    Network net = Network::build(cfg, options.seed);
    Rng rng = make_stream(options.seed, "gradcheck");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Batch batch;
    batch.size = options.batch_size;
    batch.inputs.resize(batch.size * cfg.frame_input_size() * cfg.n_frames);
    for (auto &v : batch.inputs) {
        v = unit(rng);
    }
    for (std::size_t b = 0; b < batch.size; ++b) {
        switch (cfg.head) {
        case Head::regression:
            batch.targets.push_back(6.0 * unit(rng));
            break;
        case Head::binary:
            batch.targets.push_back(b % 2 == 0 ? 1.0 : 0.0);
            break;
        case Head::multilabel:
            for (int k = 0; k < kNumTimeBins; ++k) {
                batch.targets.push_back(unit(rng) < 0.5 ? 1.0 : 0.0);
            }
            break;
        }
    }

    return grad_check(net, batch, options);
}

GradCheckReport grad_check(Network &net, const Batch &batch, const GradCheckOptions &options) {
    net.compute_gradients(batch);
    KinkTrace base_trace;
    (void)net.batch_loss(batch, &base_trace);

    // Gradients are compared relative to max(|analytic|, |numeric|), floored so that entries whose
    // true gradient is ~0 are judged against round-off rather than against themselves.
    constexpr double kDenominatorFloor = 1e-6;
    GradCheckReport report;
    report.tolerance = options.tolerance;
    const double eps = options.epsilon;
    for (auto &p : net.parameters()) {
        auto it = std::find_if(report.layers.begin(), report.layers.end(),
                               [&](const LayerGradCheck &l) { return l.layer == p.layer; });
        if (it == report.layers.end()) {
            report.layers.push_back({p.layer, 0.0, 0, 0});
            it = report.layers.end() - 1;
        }
        std::vector<std::size_t> points(p.value.size());
        std::iota(points.begin(), points.end(), 0);
        if (points.size() > options.max_points_per_tensor) {
            Rng pick = make_stream(options.seed, "gradcheck:" + p.name);
            std::shuffle(points.begin(), points.end(), pick);
            points.resize(options.max_points_per_tensor);
            std::sort(points.begin(), points.end());
        }
        const bool corrupt = options.corrupt_layer && *options.corrupt_layer == p.layer;
        for (std::size_t i : points) {
            const double original = p.value.data[i];
            KinkTrace plus_trace;
            KinkTrace minus_trace;
            p.value.data[i] = original + eps;
            const double lp = net.batch_loss(batch, &plus_trace);
            p.value.data[i] = original - eps;
            const double lm = net.batch_loss(batch, &minus_trace);
            p.value.data[i] = original;
            if (plus_trace.hash() != base_trace.hash() ||
                minus_trace.hash() != base_trace.hash()) {
                ++it->skipped;
                continue;
            }
            const double numeric = (lp - lm) / (2.0 * eps);
            const double analytic = corrupt ? -p.grad.data[i] : p.grad.data[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), kDenominatorFloor});
            it->max_rel_error = std::max(it->max_rel_error, std::abs(analytic - numeric) / denom);
            ++it->checked;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'N', 'C', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put_le(std::vector<unsigned char> &buf, T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    const auto bits = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf.push_back(static_cast<unsigned char>(bits >> (8 * i)));
    }
}

template <typename T>
T get_le(const std::vector<unsigned char> &buf, std::size_t &pos) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    if (pos + sizeof(T) > buf.size()) {
        throw IoError("checkpoint truncated");
    }
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bits |= static_cast<U>(buf[pos + i]) << (8 * i);
    }
    pos += sizeof(T);
    return std::bit_cast<T>(bits);
}

std::uint32_t crc_of(const unsigned char *data, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

void save_checkpoint(const Network &net, const std::filesystem::path &path) {
    std::vector<unsigned char> buf(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put_le<std::uint32_t>(buf, kCheckpointVersion);
    nlohmann::json header = {{"config", net.config()}, {"seed", net.seed()}};
    const std::string text = header.dump();
    put_le<std::uint64_t>(buf, text.size());
    buf.insert(buf.end(), text.begin(), text.end());
    put_le<std::uint64_t>(buf, net.parameter_count());
    for (const auto &p : net.parameters()) {
        for (double v : p.value.data) {
            put_le<double>(buf, v);
        }
    }
    put_le<std::uint32_t>(buf, crc_of(buf.data(), buf.size()));
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) {
        throw IoError(fmt::format("cannot write checkpoint '{}'", path.string()));
    }
}

Network load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open checkpoint '{}'", path.string()));
    }
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 + 4 + 8 + 8 + 4 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), buf.begin())) {
        throw IoError(fmt::format("'{}' is not a checkpoint", path.string()));
    }
    std::size_t tail = buf.size() - 4;
    const auto stored_crc = get_le<std::uint32_t>(buf, tail);
    if (stored_crc != crc_of(buf.data(), buf.size() - 4)) {
        throw IoError(fmt::format("checkpoint '{}': checksum mismatch", path.string()));
    }
    std::size_t pos = 4;
    const auto version = get_le<std::uint32_t>(buf, pos);
    if (version != kCheckpointVersion) {
        throw IoError(fmt::format("checkpoint '{}': unsupported version {}", path.string(), version));
    }
    const auto json_len = get_le<std::uint64_t>(buf, pos);
    if (pos + json_len > buf.size() - 4) {
        throw IoError(fmt::format("checkpoint '{}': truncated header", path.string()));
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                                       buf.begin() + static_cast<std::ptrdiff_t>(pos + json_len));
    } catch (const nlohmann::json::exception &e) {
        throw IoError(fmt::format("checkpoint '{}': bad header: {}", path.string(), e.what()));
    }
    pos += json_len;
    Network net = Network::build(network_config_from_json(header.at("config")), header.at("seed").get<std::uint64_t>());
    const auto count = get_le<std::uint64_t>(buf, pos);
    if (count != net.parameter_count() || pos + count * 8 != buf.size() - 4) {
        throw IoError(fmt::format("checkpoint '{}': parameter count mismatch", path.string()));
    }
    for (auto &p : net.parameters()) {
        for (auto &v : p.value.data) {
            v = get_le<double>(buf, pos);
        }
    }
    return net;
}

}  // namespace nearcol
