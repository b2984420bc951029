// Modality encoders.
//
//  * Silhouette branch: a frame-wise CNN mapping binary masks (B, T, H, W)
//    to spatial feature maps (B, C, T, H', W'). The backbone is pluggable
//    through a named registry; the built-in "reference-cnn" uses three
//    conv/batch-norm/relu blocks with 2x2 max pooling after the first two,
//    so H and W shrink by 4x (64x44 -> 16x11).
//  * Pose/shape branch: a three-layer MLP applied per frame, mapping the
//    82-dimensional parameter vector (23 joint rotations * 3 + 10 shape
//    coefficients + 3 root orientation) to a D'-dimensional embedding.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "combogait/layers.hpp"

namespace combogait {

constexpr int64_t kSmplParamDim = 82;

struct EncoderConfig {
    std::string kind = "reference-cnn";
    int64_t input_h = 64;
    int64_t input_w = 44;
    std::vector<int64_t> channels = {16, 32, 32};

    void validate() const {
        if (input_h < 4 || input_w < 4) {
            throw ConfigError("encoder: input " + std::to_string(input_h) + "x" +
                              std::to_string(input_w) + " too small");
        }
        if (input_h % 4 != 0 || input_w % 4 != 0) {
            throw ConfigError("encoder: input extents must be divisible by 4 (two 2x2 pools)");
        }
        if (channels.size() != 3) {
            throw ConfigError("encoder: reference backbone needs exactly 3 channel widths");
        }
        for (int64_t c : channels) {
            if (c < 1) throw ConfigError("encoder: channel widths must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// Interface
// ---------------------------------------------------------------------------

template <typename S>
class SilhouetteEncoderT {
public:
    virtual ~SilhouetteEncoderT() = default;

    // x: (B, T, H, W) with values in {0, 1}. Returns (B, C, T, H', W').
    virtual TensorT<S> forward(Tape<S>* tape, const TensorT<S>& x, bool training) = 0;

    virtual int64_t out_channels() const = 0;
    virtual int64_t out_h() const = 0;
    virtual int64_t out_w() const = 0;

    virtual void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) = 0;
    virtual void visit_buffers(const std::string& prefix, const ParamVisitor<S>& fn) = 0;
};

namespace detail {

template <typename S>
inline void check_silhouette_input(const TensorT<S>& x, int64_t h, int64_t w) {
    if (x.ndim() != 4) {
        throw DimensionError("silhouette encoder: need (B, T, H, W), got " +
                             shape_str(x.shape()));
    }
    if (x.dim(2) != h || x.dim(3) != w) {
        throw DimensionError("silhouette encoder: configured for " + std::to_string(h) +
                             "x" + std::to_string(w) + " frames, got " +
                             shape_str(x.shape()));
    }
    for (S v : x.values()) {
        if (v != S(0) && v != S(1)) {
            throw ValidationError("silhouette encoder: mask values must be 0 or 1, found " +
                                  std::to_string(double(v)));
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reference CNN backbone
// ---------------------------------------------------------------------------

template <typename S>
class ReferenceCnnEncoderT final : public SilhouetteEncoderT<S> {
public:
    ReferenceCnnEncoderT(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int64_t c1 = cfg_.channels[0], c2 = cfg_.channels[1], c3 = cfg_.channels[2];
        conv1_ = make_conv(1, c1, rng);
        bn1_ = BatchNormT<S>(c1);
        conv2_ = make_conv(c1, c2, rng);
        bn2_ = BatchNormT<S>(c2);
        conv3_ = make_conv(c2, c3, rng);
        bn3_ = BatchNormT<S>(c3);
    }

    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& x, bool training) override {
        detail::check_silhouette_input(x, cfg_.input_h, cfg_.input_w);
        const int64_t b = x.dim(0), t = x.dim(1);
        TensorT<S> h = reshape(tape, x, {b * t, 1, cfg_.input_h, cfg_.input_w});
        h = block(tape, h, conv1_, bn1_, training, /*pool=*/true);
        h = block(tape, h, conv2_, bn2_, training, /*pool=*/true);
        h = block(tape, h, conv3_, bn3_, training, /*pool=*/false);
        h = reshape(tape, h, {b, t, out_channels(), out_h(), out_w()});
        return permute(tape, h, {0, 2, 1, 3, 4});  // (B, C, T, H', W')
    }

    int64_t out_channels() const override { return cfg_.channels[2]; }
    int64_t out_h() const override { return cfg_.input_h / 4; }
    int64_t out_w() const override { return cfg_.input_w / 4; }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) override {
        fn(prefix + ".conv1.kernel", conv1_.kernel);
        fn(prefix + ".conv1.bias", conv1_.bias);
        bn1_.visit_params(prefix + ".bn1", fn);
        fn(prefix + ".conv2.kernel", conv2_.kernel);
        fn(prefix + ".conv2.bias", conv2_.bias);
        bn2_.visit_params(prefix + ".bn2", fn);
        fn(prefix + ".conv3.kernel", conv3_.kernel);
        fn(prefix + ".conv3.bias", conv3_.bias);
        bn3_.visit_params(prefix + ".bn3", fn);
    }

    void visit_buffers(const std::string& prefix, const ParamVisitor<S>& fn) override {
        bn1_.visit_buffers(prefix + ".bn1", fn);
        bn2_.visit_buffers(prefix + ".bn2", fn);
        bn3_.visit_buffers(prefix + ".bn3", fn);
    }

private:
    struct Conv {
        TensorT<S> kernel;
        TensorT<S> bias;
    };

    static Conv make_conv(int64_t cin, int64_t cout, Rng& rng) {
        Conv c;
        c.kernel = TensorT<S>::zeros({cout, cin, 3, 3});
        init_he(c.kernel, rng, cin * 9);
        c.kernel.set_requires_grad(true);
        c.bias = TensorT<S>::zeros({cout});
        c.bias.set_requires_grad(true);
        return c;
    }

    TensorT<S> block(Tape<S>* tape, const TensorT<S>& x, const Conv& conv, BatchNormT<S>& bn,
                     bool training, bool pool) {
        TensorT<S> h = conv2d(tape, x, conv.kernel, conv.bias, /*stride=*/1, /*pad=*/1);
        h = bn.forward(tape, h, training);
        h = relu(tape, h);
        if (pool) h = maxpool2d(tape, h, 2);
        return h;
    }

    EncoderConfig cfg_;
    Conv conv1_, conv2_, conv3_;
    BatchNormT<S> bn1_, bn2_, bn3_;
};

// ---------------------------------------------------------------------------
// Backbone registry
// ---------------------------------------------------------------------------

template <typename S>
using EncoderFactory =
    std::function<std::unique_ptr<SilhouetteEncoderT<S>>(const EncoderConfig&, Rng&)>;

template <typename S>
inline std::map<std::string, EncoderFactory<S>>& encoder_registry() {
    static std::map<std::string, EncoderFactory<S>> reg;
    return reg;
}

template <typename S>
inline void register_encoder(const std::string& kind, EncoderFactory<S> factory) {
    encoder_registry<S>()[kind] = std::move(factory);
}

template <typename S>
inline std::unique_ptr<SilhouetteEncoderT<S>> make_encoder(const EncoderConfig& cfg,
                                                           Rng& rng) {
    if (cfg.kind == "reference-cnn") {
        return std::make_unique<ReferenceCnnEncoderT<S>>(cfg, rng);
    }
    auto& reg = encoder_registry<S>();
    auto it = reg.find(cfg.kind);
    if (it == reg.end()) {
        throw ConfigError("encoder: unknown backbone kind '" + cfg.kind + "'");
    }
    return it->second(cfg, rng);
}

// ---------------------------------------------------------------------------
// Pose/shape parameter encoder
// ---------------------------------------------------------------------------

template <typename S>
struct SmplEncoderT {
    LinearT<S> fc1, fc2, fc3;
    BatchNormT<S> bn1, bn2;
    DropoutT<S> drop;
    int64_t hidden1 = 128, hidden2 = 256, out_dim = 256;

    SmplEncoderT() = default;

    SmplEncoderT(int64_t h1, int64_t h2, int64_t out, double dropout_rate, Rng& rng)
        : hidden1(h1), hidden2(h2), out_dim(out) {
        if (h1 < 1 || h2 < 1 || out < 1) {
            throw ConfigError("smpl encoder: layer widths must be positive");
        }
        fc1 = LinearT<S>(kSmplParamDim, h1, rng);
        bn1 = BatchNormT<S>(h1);
        fc2 = LinearT<S>(h1, h2, rng);
        bn2 = BatchNormT<S>(h2);
        fc3 = LinearT<S>(h2, out, rng, /*with_bias=*/true, /*rectified=*/false);
        drop = DropoutT<S>(dropout_rate);
    }

    // y: (B, T, 82) -> (B, T, out_dim)
    TensorT<S> forward(Tape<S>* tape, const TensorT<S>& y, bool training, Rng* rng) {
        if (y.ndim() != 3 || y.dim(2) != kSmplParamDim) {
            throw DimensionError("smpl encoder: need (B, T, " +
                                 std::to_string(kSmplParamDim) + "), got " +
                                 shape_str(y.shape()));
        }
        const int64_t b = y.dim(0), t = y.dim(1);
        TensorT<S> h = reshape(tape, y, {b * t, kSmplParamDim});
        h = fc1.forward(tape, h);
        h = bn1.forward(tape, h, training);
        h = relu(tape, h);
        h = drop.forward(tape, h, training, rng);
        h = fc2.forward(tape, h);
        h = bn2.forward(tape, h, training);
        h = relu(tape, h);
        h = drop.forward(tape, h, training, rng);
        h = fc3.forward(tape, h);
        return reshape(tape, h, {b, t, out_dim});
    }

    void visit_params(const std::string& prefix, const ParamVisitor<S>& fn) {
        fc1.visit_params(prefix + ".fc1", fn);
        bn1.visit_params(prefix + ".bn1", fn);
        fc2.visit_params(prefix + ".fc2", fn);
        bn2.visit_params(prefix + ".bn2", fn);
        fc3.visit_params(prefix + ".fc3", fn);
    }

    void visit_buffers(const std::string& prefix, const ParamVisitor<S>& fn) {
        bn1.visit_buffers(prefix + ".bn1", fn);
        bn2.visit_buffers(prefix + ".bn2", fn);
    }
};

}  // namespace combogait
