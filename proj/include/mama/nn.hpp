#pragma once

// Small feed-forward classifiers (dense and strided-convolution layers) built
// on the autodiff engine. Architectures are described by a comma-separated
// layer string, e.g. "conv:8:3:2:1,relu,dense:32,relu,dense:10" where
// conv:<out_channels>:<kernel>:<stride>:<padding> and dense:<width>.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mama/autodiff.hpp"
#include "mama/core.hpp"
#include "mama/io.hpp"

namespace mama::nn {

struct LayerSpec {
    enum class Kind { Dense, Conv, Relu, Tanh };
    Kind kind = Kind::Dense;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
};

inline std::vector<LayerSpec> parse_architecture(const std::string& arch) {
    std::vector<LayerSpec> layers;
    std::stringstream ss(arch);
    std::string token;
    while (std::getline(ss, token, ',')) {
        std::vector<std::string> parts;
        std::stringstream ts(token);
        std::string p;
        while (std::getline(ts, p, ':')) parts.push_back(p);
        if (parts.empty()) continue;
        auto num = [&](std::size_t i) -> std::size_t {
            if (i >= parts.size()) throw ConfigError("architecture: '" + token + "' is missing fields");
            return std::stoul(parts[i]);
        };
        if (parts[0] == "dense") {
            layers.push_back({LayerSpec::Kind::Dense, num(1), 0, 1, 0});
        } else if (parts[0] == "conv") {
            layers.push_back({LayerSpec::Kind::Conv, num(1), num(2), num(3), num(4)});
        } else if (parts[0] == "relu") {
            layers.push_back({LayerSpec::Kind::Relu});
        } else if (parts[0] == "tanh") {
            layers.push_back({LayerSpec::Kind::Tanh});
        } else {
            throw ConfigError("architecture: unknown layer '" + parts[0] + "'");
        }
    }
    if (layers.empty()) throw ConfigError("architecture: no layers");
    return layers;
}

class Network final : public Classifier {
public:
    Network(std::string name, ImageShape input, std::size_t num_classes, const std::string& architecture,
            std::uint64_t seed, std::string recipe = "")
        : specs_(parse_architecture(architecture)) {
        info_ = {std::move(name), architecture, std::move(recipe), num_classes, input};
        build(seed);
    }

    /// z = x W^T + b for W of shape (K x D).
    static Network linear(const Tensor& weight, const Tensor& bias, ImageShape input, std::string name = "linear") {
        const auto k = weight.rows();
        Network net(std::move(name), input, k, "dense:" + std::to_string(k), 0, "fixed");
        if (weight.cols() != input.size() || bias.rows() != 1 || bias.cols() != k) {
            throw ConfigError("linear: weight/bias shape mismatch");
        }
        Tensor wt(weight.cols(), k);
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < weight.cols(); ++c) wt(c, r) = weight(r, c);
        }
        net.params_[0] = ad::constant(wt);
        net.params_[1] = ad::constant(bias);
        return net;
    }

    [[nodiscard]] const ClassifierInfo& info() const override { return info_; }
    ClassifierInfo& mutable_info() { return info_; }

    using Classifier::logits;
    [[nodiscard]] ad::Var logits(const ad::Var& images) const override {
        if (images.cols() != info_.input.size()) {
            throw ConfigError("network '" + info_.name + "': expected input width " +
                              std::to_string(info_.input.size()) + ", got " + std::to_string(images.cols()));
        }
        const std::size_t n = images.rows();
        ad::Var h = images;
        std::size_t p = 0;
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            const auto& s = specs_[i];
            switch (s.kind) {
                case LayerSpec::Kind::Dense:
                    h = ad::add_row(ad::matmul(h, params_[p]), params_[p + 1]);
                    p += 2;
                    break;
                case LayerSpec::Kind::Conv: {
                    const auto& g = geometry_[i];
                    auto patches = ad::gather(h, im2col_index(i, n), n * g.out_h * g.out_w, g.in.channels * s.kernel * s.kernel);
                    auto out = ad::add_row(ad::matmul(patches, params_[p]), params_[p + 1]);
                    h = ad::reshape(out, n, g.out_h * g.out_w * s.out);
                    p += 2;
                    break;
                }
                case LayerSpec::Kind::Relu: h = ad::relu(h); break;
                case LayerSpec::Kind::Tanh: h = ad::tanh(h); break;
            }
        }
        return h;
    }

    /// Trainable leaves, in a fixed order matching array_names().
    [[nodiscard]] const std::vector<ad::Var>& parameters() const { return params_; }

    void set_parameters(const std::vector<Tensor>& values, bool trainable) {
        if (values.size() != params_.size()) throw ConfigError("network: parameter count mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!values[i].same_shape(params_[i].value())) throw ConfigError("network: parameter shape mismatch");
            params_[i] = ad::Var(values[i], trainable);
        }
    }

    void set_trainable(bool trainable) {
        for (auto& v : params_) v = ad::Var(v.value(), trainable);
    }

    [[nodiscard]] std::vector<io::NamedArray> arrays() const {
        std::vector<io::NamedArray> out;
        for (std::size_t i = 0; i < params_.size(); ++i) out.push_back({names_[i], params_[i].value()});
        return out;
    }

    void load_arrays(const io::Container& c) {
        std::vector<Tensor> values;
        for (const auto& name : names_) values.push_back(c.at(name));
        set_parameters(values, false);
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& v : params_) n += v.size();
        return n;
    }

private:
    struct ConvGeometry {
        ImageShape in;
        bool in_chw = true;
        std::size_t out_h = 0;
        std::size_t out_w = 0;
    };

    void build(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        ImageShape shape = info_.input;
        bool chw = true;
        std::size_t width = shape.size();
        geometry_.resize(specs_.size());
        caches_.resize(specs_.size());
        std::size_t index = 0;
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            const auto& s = specs_[i];
            if (s.kind == LayerSpec::Kind::Dense) {
                add_param(width, s.out, width, rng, "layer" + std::to_string(index));
                width = s.out;
                shape = {s.out, 1, 1};
                ++index;
            } else if (s.kind == LayerSpec::Kind::Conv) {
                if (shape.size() != width) throw ConfigError("architecture: conv after dense is not supported");
                if (s.kernel == 0 || s.stride == 0) throw ConfigError("architecture: conv kernel/stride must be > 0");
                if (shape.height + 2 * s.pad < s.kernel || shape.width + 2 * s.pad < s.kernel) {
                    throw ConfigError("architecture: conv kernel larger than input");
                }
                ConvGeometry g{shape, chw, (shape.height + 2 * s.pad - s.kernel) / s.stride + 1,
                               (shape.width + 2 * s.pad - s.kernel) / s.stride + 1};
                geometry_[i] = g;
                caches_[i] = std::make_shared<IndexCache>();
                const auto fan_in = shape.channels * s.kernel * s.kernel;
                add_param(fan_in, s.out, fan_in, rng, "layer" + std::to_string(index));
                shape = {s.out, g.out_h, g.out_w};
                width = shape.size();
                chw = false;
                ++index;
            }
        }
        if (width != info_.num_classes) {
            throw ConfigError("architecture: final width " + std::to_string(width) + " != class count " +
                              std::to_string(info_.num_classes));
        }
    }

    void add_param(std::size_t rows, std::size_t cols, std::size_t fan_in, std::mt19937_64& rng,
                   const std::string& prefix) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor w(rows, cols);
        for (auto& v : w.data()) v = dist(rng);
        params_.push_back(ad::constant(std::move(w)));
        params_.push_back(ad::constant(Tensor(1, cols)));
        names_.push_back(prefix + ".weight");
        names_.push_back(prefix + ".bias");
    }

    struct IndexCache {
        std::mutex mutex;
        std::map<std::size_t, std::shared_ptr<const std::vector<std::int64_t>>> by_batch;
    };

    std::shared_ptr<const std::vector<std::int64_t>> im2col_index(std::size_t layer, std::size_t n) const {
        auto& cache = *caches_[layer];
        std::lock_guard lock(cache.mutex);
        if (auto it = cache.by_batch.find(n); it != cache.by_batch.end()) return it->second;
        const auto& s = specs_[layer];
        const auto& g = geometry_[layer];
        const auto c_in = g.in.channels;
        const auto h_in = g.in.height;
        const auto w_in = g.in.width;
        const auto per_image = g.in.size();
        const auto patch = c_in * s.kernel * s.kernel;
        auto idx = std::make_shared<std::vector<std::int64_t>>(n * g.out_h * g.out_w * patch, -1);
        std::size_t pos = 0;
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                    for (std::size_t c = 0; c < c_in; ++c) {
                        for (std::size_t ky = 0; ky < s.kernel; ++ky) {
                            for (std::size_t kx = 0; kx < s.kernel; ++kx, ++pos) {
                                const auto iy = static_cast<std::int64_t>(oy * s.stride + ky) -
                                                static_cast<std::int64_t>(s.pad);
                                const auto ix = static_cast<std::int64_t>(ox * s.stride + kx) -
                                                static_cast<std::int64_t>(s.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::int64_t>(h_in) ||
                                    ix >= static_cast<std::int64_t>(w_in)) {
                                    continue;
                                }
                                const auto y = static_cast<std::size_t>(iy);
                                const auto x = static_cast<std::size_t>(ix);
                                const auto offset =
                                    g.in_chw ? c * h_in * w_in + y * w_in + x : (y * w_in + x) * c_in + c;
                                (*idx)[pos] = static_cast<std::int64_t>(b * per_image + offset);
                            }
                        }
                    }
                }
            }
        }
        cache.by_batch.emplace(n, idx);
        return idx;
    }

    ClassifierInfo info_;
    std::vector<LayerSpec> specs_;
    std::vector<ConvGeometry> geometry_;
    std::vector<std::shared_ptr<IndexCache>> caches_;
    std::vector<ad::Var> params_;
    std::vector<std::string> names_;
};

}  // namespace mama::nn
