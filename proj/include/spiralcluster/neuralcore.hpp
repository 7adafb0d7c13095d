#pragma once

// Small fixed-layer-set network with exact reverse-mode gradients: strided
// "same" convolution, its transpose, dense, leaky ReLU, sigmoid, flatten and
// reshape, plus softmax, mean-squared error and Adam.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiralcluster/error.hpp"
#include "spiralcluster/io.hpp"
#include "spiralcluster/random.hpp"

namespace spiralcluster::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

struct Tensor {
    Shape shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), values(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        require(values.size() == shape_size(shape), "Tensor: value count does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return values.size(); }
    std::size_t batch() const { return shape.empty() ? 0 : shape[0]; }
    // Elements per leading-dimension slice.
    std::size_t sample_size() const { return shape.empty() ? 0 : size() / shape[0]; }
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline void check_finite(const Tensor& t, const std::string& where) {
    for (double v : t.values)
        if (!std::isfinite(v)) throw numeric_domain_error(where + ": non-finite value");
}

enum class LayerKind { conv, deconv, dense, lrelu, sigmoid, flatten, reshape };

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::conv, "conv"},
                                         {LayerKind::deconv, "deconv"},
                                         {LayerKind::dense, "dense"},
                                         {LayerKind::lrelu, "lrelu"},
                                         {LayerKind::sigmoid, "sigmoid"},
                                         {LayerKind::flatten, "flatten"},
                                         {LayerKind::reshape, "reshape"}})

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t filters = 1;  // output channels (conv/deconv) or units (dense)
    double lrelu_slope = 0.01;
    Shape target;  // reshape only, per-sample shape

    static LayerSpec conv(std::size_t filters, std::size_t kernel = 3, std::size_t stride = 2) {
        return {LayerKind::conv, kernel, stride, filters, 0.01, {}};
    }
    static LayerSpec deconv(std::size_t filters, std::size_t kernel = 3, std::size_t stride = 2) {
        return {LayerKind::deconv, kernel, stride, filters, 0.01, {}};
    }
    static LayerSpec dense(std::size_t units) { return {LayerKind::dense, 0, 0, units, 0.01, {}}; }
    static LayerSpec lrelu(double slope = 0.01) { return {LayerKind::lrelu, 0, 0, 0, slope, {}}; }
    static LayerSpec sigmoid() { return {LayerKind::sigmoid, 0, 0, 0, 0.01, {}}; }
    static LayerSpec flatten() { return {LayerKind::flatten, 0, 0, 0, 0.01, {}}; }
    static LayerSpec reshape(Shape s) { return {LayerKind::reshape, 0, 0, 0, 0.01, std::move(s)}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LayerSpec, kind, kernel, stride, filters, lrelu_slope, target)

namespace detail {

// TF-style "same" geometry: out = ceil(in / stride), leading pad = total / 2.
struct SameGeometry {
    std::size_t in = 0, out = 0;
    long pad = 0;
};

inline SameGeometry same_geometry(std::size_t in, std::size_t kernel, std::size_t stride) {
    SameGeometry g;
    g.in = in;
    g.out = (in + stride - 1) / stride;
    const long total = std::max<long>(0, static_cast<long>((g.out - 1) * stride + kernel) - static_cast<long>(in));
    g.pad = total / 2;
    return g;
}

inline std::atomic<std::uint64_t>& version_counter() {
    static std::atomic<std::uint64_t> counter{1};
    return counter;
}

}  // namespace detail

struct Layer {
    LayerSpec spec;
    Shape in_shape, out_shape;  // per sample
    std::size_t param_offset = 0, param_count = 0;
    std::size_t weight_count = 0;  // weights precede biases in the layer's parameter block
    detail::SameGeometry gy, gx;   // conv: input is the large side; deconv: output is the large side
};

struct Cache {
    std::vector<Tensor> activations;  // input to layer i at index i; final output last
    std::uint64_t version = 0;
    const void* owner = nullptr;
};

struct ForwardResult {
    Tensor output;
    Cache cache;
};

struct Gradients {
    std::vector<double> params;
    Tensor input;
};

class Network {
public:
    Network() = default;

    Network(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t seed) : input_shape_(std::move(input_shape)) {
        Shape cur = input_shape_;
        std::size_t offset = 0;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            Layer L;
            L.spec = specs[i];
            L.in_shape = cur;
            const std::string where = "layer " + std::to_string(i);
            switch (L.spec.kind) {
                case LayerKind::conv: {
                    require(cur.size() == 3, where + ": conv expects (C,H,W) input, got " + shape_str(cur));
                    require(L.spec.kernel >= 1 && L.spec.stride >= 1 && L.spec.filters >= 1,
                            where + ": kernel, stride, filters must be >= 1");
                    L.gy = detail::same_geometry(cur[1], L.spec.kernel, L.spec.stride);
                    L.gx = detail::same_geometry(cur[2], L.spec.kernel, L.spec.stride);
                    L.out_shape = {L.spec.filters, L.gy.out, L.gx.out};
                    L.weight_count = L.spec.filters * cur[0] * L.spec.kernel * L.spec.kernel;
                    L.param_count = L.weight_count + L.spec.filters;
                    break;
                }
                case LayerKind::deconv: {
                    require(cur.size() == 3, where + ": deconv expects (C,H,W) input, got " + shape_str(cur));
                    require(L.spec.kernel >= 1 && L.spec.stride >= 1 && L.spec.filters >= 1,
                            where + ": kernel, stride, filters must be >= 1");
                    L.gy = detail::same_geometry(cur[1] * L.spec.stride, L.spec.kernel, L.spec.stride);
                    L.gx = detail::same_geometry(cur[2] * L.spec.stride, L.spec.kernel, L.spec.stride);
                    L.out_shape = {L.spec.filters, L.gy.in, L.gx.in};
                    L.weight_count = cur[0] * L.spec.filters * L.spec.kernel * L.spec.kernel;
                    L.param_count = L.weight_count + L.spec.filters;
                    break;
                }
                case LayerKind::dense:
                    require(cur.size() == 1, where + ": dense expects a flat input, got " + shape_str(cur));
                    require(L.spec.filters >= 1, where + ": dense needs >= 1 unit");
                    L.out_shape = {L.spec.filters};
                    L.weight_count = L.spec.filters * cur[0];
                    L.param_count = L.weight_count + L.spec.filters;
                    break;
                case LayerKind::lrelu:
                case LayerKind::sigmoid: L.out_shape = cur; break;
                case LayerKind::flatten: L.out_shape = {shape_size(cur)}; break;
                case LayerKind::reshape:
                    require(shape_size(L.spec.target) == shape_size(cur),
                            where + ": cannot reshape " + shape_str(cur) + " to " + shape_str(L.spec.target));
                    L.out_shape = L.spec.target;
                    break;
            }
            L.param_offset = offset;
            offset += L.param_count;
            cur = L.out_shape;
            layers_.push_back(std::move(L));
        }
        params_.assign(offset, 0.0);
        init(seed);
    }

    const Shape& input_shape() const { return input_shape_; }
    const Shape& output_shape() const { return layers_.empty() ? input_shape_ : layers_.back().out_shape; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<LayerSpec> specs() const {
        std::vector<LayerSpec> s;
        for (const auto& L : layers_) s.push_back(L.spec);
        return s;
    }

    std::size_t param_count() const { return params_.size(); }
    std::span<const double> params() const { return params_; }
    // Any mutable access invalidates outstanding forward caches.
    std::span<double> mutable_params() {
        version_ = detail::version_counter().fetch_add(1) + 1;
        return params_;
    }

    // He-style uniform fan-in initialization; biases start at zero.
    void init(std::uint64_t seed) {
        auto p = mutable_params();
        std::fill(p.begin(), p.end(), 0.0);
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& L = layers_[i];
            if (L.param_count == 0) continue;
            std::size_t fan_in = 0;
            if (L.spec.kind == LayerKind::dense) fan_in = L.in_shape[0];
            else fan_in = L.in_shape[0] * L.spec.kernel * L.spec.kernel;
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            Rng rng(derive_seed(seed, "layer-init", {i}));
            for (std::size_t w = 0; w < L.weight_count; ++w) p[L.param_offset + w] = rng.uniform(-bound, bound);
        }
    }

    ForwardResult forward(const Tensor& input) const {
        require(!input.shape.empty(), "forward: input needs a leading batch dimension");
        const Shape per(input.shape.begin() + 1, input.shape.end());
        require(per == input_shape_, "forward: input shape " + shape_str(per) + " does not match network input " +
                                         shape_str(input_shape_));
        ForwardResult r;
        r.cache.version = version_;
        r.cache.owner = this;
        r.cache.activations.reserve(layers_.size() + 1);
        r.cache.activations.push_back(input);
        for (std::size_t i = 0; i < layers_.size(); ++i)
            r.cache.activations.push_back(forward_layer(layers_[i], r.cache.activations.back()));
        r.output = r.cache.activations.back();
        return r;
    }

    Gradients backward(const Cache& cache, const Tensor& grad_output) const {
        require(cache.owner == this && cache.version == version_,
                "backward: stale cache (parameters changed or cache belongs to another network)");
        require(cache.activations.size() == layers_.size() + 1, "backward: cache does not match network depth");
        require(grad_output.shape == cache.activations.back().shape,
                "backward: output gradient shape " + shape_str(grad_output.shape) + " does not match output " +
                    shape_str(cache.activations.back().shape));
        Gradients g;
        g.params.assign(params_.size(), 0.0);
        Tensor grad = grad_output;
        for (std::size_t i = layers_.size(); i-- > 0;)
            grad = backward_layer(layers_[i], cache.activations[i], cache.activations[i + 1], grad, g.params);
        g.input = std::move(grad);
        return g;
    }

private:
    static Shape batched(std::size_t b, const Shape& s) {
        Shape out{b};
        out.insert(out.end(), s.begin(), s.end());
        return out;
    }

    Tensor forward_layer(const Layer& L, const Tensor& x) const {
        const std::size_t B = x.batch();
        Tensor y(batched(B, L.out_shape));
        const double* p = params_.data() + L.param_offset;
        const std::size_t in_n = shape_size(L.in_shape), out_n = shape_size(L.out_shape);
        switch (L.spec.kind) {
            case LayerKind::conv:
                for (std::size_t b = 0; b < B; ++b) conv_forward(L, p, &x.values[b * in_n], &y.values[b * out_n]);
                break;
            case LayerKind::deconv:
                for (std::size_t b = 0; b < B; ++b) deconv_forward(L, p, &x.values[b * in_n], &y.values[b * out_n]);
                break;
            case LayerKind::dense: {
                const std::size_t D = in_n, U = out_n;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t u = 0; u < U; ++u) {
                        double acc = p[L.weight_count + u];
                        const double* w = p + u * D;
                        const double* xi = &x.values[b * D];
                        for (std::size_t d = 0; d < D; ++d) acc += w[d] * xi[d];
                        y.values[b * U + u] = acc;
                    }
                break;
            }
            case LayerKind::lrelu:
                for (std::size_t k = 0; k < x.size(); ++k) {
                    const double v = x.values[k];
                    y.values[k] = v > 0 ? v : L.spec.lrelu_slope * v;
                }
                break;
            case LayerKind::sigmoid:
                for (std::size_t k = 0; k < x.size(); ++k) y.values[k] = 1.0 / (1.0 + std::exp(-x.values[k]));
                break;
            case LayerKind::flatten:
            case LayerKind::reshape: y.values = x.values; break;
        }
        return y;
    }

    Tensor backward_layer(const Layer& L, const Tensor& x, const Tensor& y, const Tensor& gy,
                          std::vector<double>& gparams) const {
        const std::size_t B = x.batch();
        Tensor gx(x.shape);
        const double* p = params_.data() + L.param_offset;
        double* gp = gparams.data() + L.param_offset;
        const std::size_t in_n = shape_size(L.in_shape), out_n = shape_size(L.out_shape);
        switch (L.spec.kind) {
            case LayerKind::conv:
                for (std::size_t b = 0; b < B; ++b)
                    conv_backward(L, p, gp, &x.values[b * in_n], &gy.values[b * out_n], &gx.values[b * in_n]);
                break;
            case LayerKind::deconv:
                for (std::size_t b = 0; b < B; ++b)
                    deconv_backward(L, p, gp, &x.values[b * in_n], &gy.values[b * out_n], &gx.values[b * in_n]);
                break;
            case LayerKind::dense: {
                const std::size_t D = in_n, U = out_n;
                for (std::size_t b = 0; b < B; ++b) {
                    const double* xi = &x.values[b * D];
                    double* gxi = &gx.values[b * D];
                    for (std::size_t u = 0; u < U; ++u) {
                        const double g = gy.values[b * U + u];
                        gp[L.weight_count + u] += g;
                        if (g == 0) continue;
                        const double* w = p + u * D;
                        double* gw = gp + u * D;
                        for (std::size_t d = 0; d < D; ++d) {
                            gw[d] += g * xi[d];
                            gxi[d] += g * w[d];
                        }
                    }
                }
                break;
            }
            case LayerKind::lrelu:
                for (std::size_t k = 0; k < x.size(); ++k)
                    gx.values[k] = gy.values[k] * (x.values[k] > 0 ? 1.0 : L.spec.lrelu_slope);
                break;
            case LayerKind::sigmoid:
                for (std::size_t k = 0; k < x.size(); ++k) {
                    const double s = y.values[k];
                    gx.values[k] = gy.values[k] * s * (1 - s);
                }
                break;
            case LayerKind::flatten:
            case LayerKind::reshape: gx.values = gy.values; break;
        }
        return gx;
    }

    // Convolution from (C,H,W) to (F,H',W'); weights laid out [F][C][k][k].
    static void conv_forward(const Layer& L, const double* p, const double* in, double* out) {
        const std::size_t C = L.in_shape[0], H = L.in_shape[1], W = L.in_shape[2];
        const std::size_t F = L.out_shape[0], OH = L.out_shape[1], OW = L.out_shape[2];
        const std::size_t k = L.spec.kernel, s = L.spec.stride;
        for (std::size_t f = 0; f < F; ++f) {
            double* o = out + f * OH * OW;
            std::fill(o, o + OH * OW, p[L.weight_count + f]);
            for (std::size_t c = 0; c < C; ++c) {
                const double* ic = in + c * H * W;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t bb = 0; bb < k; ++bb) {
                        const double w = p[((f * C + c) * k + a) * k + bb];
                        for (std::size_t oy = 0; oy < OH; ++oy) {
                            const long iy = static_cast<long>(oy * s + a) - L.gy.pad;
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            const double* row = ic + static_cast<std::size_t>(iy) * W;
                            double* orow = o + oy * OW;
                            for (std::size_t ox = 0; ox < OW; ++ox) {
                                const long ix = static_cast<long>(ox * s + bb) - L.gx.pad;
                                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                orow[ox] += w * row[ix];
                            }
                        }
                    }
            }
        }
    }

    static void conv_backward(const Layer& L, const double* p, double* gp, const double* in, const double* gout,
                              double* gin) {
        const std::size_t C = L.in_shape[0], H = L.in_shape[1], W = L.in_shape[2];
        const std::size_t F = L.out_shape[0], OH = L.out_shape[1], OW = L.out_shape[2];
        const std::size_t k = L.spec.kernel, s = L.spec.stride;
        for (std::size_t f = 0; f < F; ++f) {
            const double* go = gout + f * OH * OW;
            double gb = 0;
            for (std::size_t t = 0; t < OH * OW; ++t) gb += go[t];
            gp[L.weight_count + f] += gb;
            for (std::size_t c = 0; c < C; ++c) {
                const double* ic = in + c * H * W;
                double* gc = gin + c * H * W;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t bb = 0; bb < k; ++bb) {
                        const std::size_t widx = ((f * C + c) * k + a) * k + bb;
                        const double w = p[widx];
                        double gw = 0;
                        for (std::size_t oy = 0; oy < OH; ++oy) {
                            const long iy = static_cast<long>(oy * s + a) - L.gy.pad;
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            const double* row = ic + static_cast<std::size_t>(iy) * W;
                            double* grow = gc + static_cast<std::size_t>(iy) * W;
                            const double* gorow = go + oy * OW;
                            for (std::size_t ox = 0; ox < OW; ++ox) {
                                const long ix = static_cast<long>(ox * s + bb) - L.gx.pad;
                                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                gw += gorow[ox] * row[ix];
                                grow[ix] += gorow[ox] * w;
                            }
                        }
                        gp[widx] += gw;
                    }
            }
        }
    }

    // Transpose of a same-padded stride-s convolution from (F, H*s, W*s) down to
    // (C, H, W); weights laid out [C][F][k][k].
    static void deconv_forward(const Layer& L, const double* p, const double* in, double* out) {
        const std::size_t C = L.in_shape[0], H = L.in_shape[1], W = L.in_shape[2];
        const std::size_t F = L.out_shape[0], OH = L.out_shape[1], OW = L.out_shape[2];
        const std::size_t k = L.spec.kernel, s = L.spec.stride;
        for (std::size_t f = 0; f < F; ++f) std::fill(out + f * OH * OW, out + (f + 1) * OH * OW, p[L.weight_count + f]);
        for (std::size_t c = 0; c < C; ++c) {
            const double* ic = in + c * H * W;
            for (std::size_t f = 0; f < F; ++f) {
                double* o = out + f * OH * OW;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t bb = 0; bb < k; ++bb) {
                        const double w = p[((c * F + f) * k + a) * k + bb];
                        for (std::size_t iy = 0; iy < H; ++iy) {
                            const long oy = static_cast<long>(iy * s + a) - L.gy.pad;
                            if (oy < 0 || oy >= static_cast<long>(OH)) continue;
                            const double* row = ic + iy * W;
                            double* orow = o + static_cast<std::size_t>(oy) * OW;
                            for (std::size_t ix = 0; ix < W; ++ix) {
                                const long ox = static_cast<long>(ix * s + bb) - L.gx.pad;
                                if (ox < 0 || ox >= static_cast<long>(OW)) continue;
                                orow[ox] += w * row[ix];
                            }
                        }
                    }
            }
        }
    }

    static void deconv_backward(const Layer& L, const double* p, double* gp, const double* in, const double* gout,
                                double* gin) {
        const std::size_t C = L.in_shape[0], H = L.in_shape[1], W = L.in_shape[2];
        const std::size_t F = L.out_shape[0], OH = L.out_shape[1], OW = L.out_shape[2];
        const std::size_t k = L.spec.kernel, s = L.spec.stride;
        for (std::size_t f = 0; f < F; ++f) {
            double gb = 0;
            for (std::size_t t = 0; t < OH * OW; ++t) gb += gout[f * OH * OW + t];
            gp[L.weight_count + f] += gb;
        }
        for (std::size_t c = 0; c < C; ++c) {
            const double* ic = in + c * H * W;
            double* gc = gin + c * H * W;
            for (std::size_t f = 0; f < F; ++f) {
                const double* go = gout + f * OH * OW;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t bb = 0; bb < k; ++bb) {
                        const std::size_t widx = ((c * F + f) * k + a) * k + bb;
                        const double w = p[widx];
                        double gw = 0;
                        for (std::size_t iy = 0; iy < H; ++iy) {
                            const long oy = static_cast<long>(iy * s + a) - L.gy.pad;
                            if (oy < 0 || oy >= static_cast<long>(OH)) continue;
                            const double* row = ic + iy * W;
                            double* grow = gc + iy * W;
                            const double* gorow = go + static_cast<std::size_t>(oy) * OW;
                            for (std::size_t ix = 0; ix < W; ++ix) {
                                const long ox = static_cast<long>(ix * s + bb) - L.gx.pad;
                                if (ox < 0 || ox >= static_cast<long>(OW)) continue;
                                gw += gorow[ox] * row[ix];
                                grow[ix] += gorow[ox] * w;
                            }
                        }
                        gp[widx] += gw;
                    }
            }
        }
    }

    Shape input_shape_;
    std::vector<Layer> layers_;
    std::vector<double> params_;
    std::uint64_t version_ = 0;
};

// ---- losses and activations outside the layer stack ----------------------

inline double mse(const Tensor& recon, const Tensor& target) {
    require(recon.shape == target.shape, "mse: shape mismatch " + shape_str(recon.shape) + " vs " +
                                             shape_str(target.shape));
    require(recon.size() > 0, "mse: empty tensors");
    double s = 0;
    for (std::size_t i = 0; i < recon.size(); ++i) {
        const double d = recon.values[i] - target.values[i];
        s += d * d;
    }
    return s / static_cast<double>(recon.size());
}

inline Tensor mse_grad(const Tensor& recon, const Tensor& target) {
    require(recon.shape == target.shape, "mse_grad: shape mismatch");
    Tensor g(recon.shape);
    const double scale = 2.0 / static_cast<double>(recon.size());
    for (std::size_t i = 0; i < recon.size(); ++i) g.values[i] = scale * (recon.values[i] - target.values[i]);
    return g;
}

// Row-wise softmax of a (B, K) tensor, max-shifted.
inline Tensor softmax(const Tensor& logits) {
    require(logits.shape.size() == 2, "softmax: expects (B, K)");
    const std::size_t B = logits.shape[0], K = logits.shape[1];
    Tensor p(logits.shape);
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = &logits.values[b * K];
        const double mx = *std::max_element(z, z + K);
        double sum = 0;
        for (std::size_t k = 0; k < K; ++k) sum += (p.values[b * K + k] = std::exp(z[k] - mx));
        for (std::size_t k = 0; k < K; ++k) p.values[b * K + k] /= sum;
    }
    return p;
}

// dL/dz from dL/dp for p = softmax(z).
inline Tensor softmax_backward(const Tensor& p, const Tensor& grad_p) {
    require(p.shape == grad_p.shape && p.shape.size() == 2, "softmax_backward: shape mismatch");
    const std::size_t B = p.shape[0], K = p.shape[1];
    Tensor g(p.shape);
    for (std::size_t b = 0; b < B; ++b) {
        double dot = 0;
        for (std::size_t k = 0; k < K; ++k) dot += p.values[b * K + k] * grad_p.values[b * K + k];
        for (std::size_t k = 0; k < K; ++k)
            g.values[b * K + k] = p.values[b * K + k] * (grad_p.values[b * K + k] - dot);
    }
    return g;
}

// ---- optimizer -----------------------------------------------------------

struct AdamConfig {
    double eta = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-8;

    void validate() const {
        require(eta > 0, "AdamConfig: eta must be > 0");
        require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "AdamConfig: betas must lie in (0, 1)");
        require(epsilon >= 0, "AdamConfig: epsilon must be >= 0");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamConfig, eta, beta1, beta2, epsilon)

struct AdamMoments {
    std::vector<double> m, v;
    explicit AdamMoments(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// Bias-corrected Adam step; step counts from 1.
inline void adam_update(std::span<double> params, std::span<const double> grads, AdamMoments& moments,
                        std::size_t step, const AdamConfig& cfg) {
    require(params.size() == grads.size() && moments.m.size() == params.size() && moments.v.size() == params.size(),
            "adam_update: parameter, gradient and moment sizes differ");
    require(step >= 1, "adam_update: step must be >= 1");
    const double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1 - cfg.beta2) * g * g;
        const double mhat = moments.m[i] / c1;
        const double vhat = moments.v[i] / c2;
        params[i] -= cfg.eta * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
}

// ---- checkpoint ----------------------------------------------------------

// "ATM1", u32 header length, JSON header, float32 parameters in declaration order.
inline std::string encode_checkpoint(const nlohmann::json& header, const std::vector<std::span<const double>>& blocks) {
    const std::string h = header.dump();
    std::string out = "ATM1";
    io::put_u32(out, static_cast<std::uint32_t>(h.size()));
    out += h;
    for (const auto& blk : blocks)
        for (double v : blk) io::put_f32(out, static_cast<float>(v));
    return out;
}

struct Checkpoint {
    nlohmann::json header;
    std::vector<float> params;
};

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
    if (bytes.size() < 8 || bytes.substr(0, 4) != "ATM1") throw bad_magic_error(what + ": expected magic \"ATM1\"");
    const std::size_t hlen = io::get_u32(bytes, 4);
    if (bytes.size() < 8 + hlen) throw truncated_error(what + ": header truncated");
    Checkpoint c;
    try {
        c.header = nlohmann::json::parse(bytes.substr(8, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw load_error(what + ": bad header: " + e.what());
    }
    const std::size_t payload = bytes.size() - 8 - hlen;
    if (payload % 4 != 0) throw truncated_error(what + ": payload is not a whole number of float32 values");
    c.params.resize(payload / 4);
    for (std::size_t i = 0; i < c.params.size(); ++i) c.params[i] = io::get_f32(bytes, 8 + hlen + 4 * i);
    return c;
}

}  // namespace spiralcluster::nn
