#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "jsynth/adam.hpp"
#include "jsynth/ops.hpp"
#include "jsynth/rng.hpp"
#include "jsynth/tensor.hpp"

namespace jsynth {

enum class FinalActivation : std::uint32_t { Sigmoid = 0, LeakyReLU = 1 };

struct UNetConfig {
    Dim in_channels = 2;
    Dim out_channels = 1;
    Dim depth = 3;          // pool/upsample levels
    Dim base_filters = 16;  // channels at the first level, doubling per level
    FinalActivation final_activation = FinalActivation::Sigmoid;
    double leaky_slope = 0.2;  // slope of the final activation when LeakyReLU

    void validate() const {
        if (depth < 1) throw ConfigError(detail::msg("unet: depth ", depth, " must be >= 1"));
        if (base_filters < 1)
            throw ConfigError(detail::msg("unet: base_filters ", base_filters, " must be >= 1"));
        if (in_channels != 1 && in_channels != 2)
            throw ConfigError(detail::msg("unet: in_channels ", in_channels, " must be 1 or 2"));
        if (out_channels != 1)
            throw ConfigError(detail::msg("unet: out_channels ", out_channels, " must be 1"));
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
            throw ConfigError(detail::msg("unet: leaky_slope ", leaky_slope, " not in (0,1)"));
    }
};

namespace detail {

constexpr double kInternalSlope = 0.01;

inline void write_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_f64le(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

    std::uint32_t u32le() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64le() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(v);
    }

    void magic(const char* expect) {
        need(4);
        if (std::memcmp(data_ + pos_, expect, 4) != 0)
            throw BadMagic(detail::msg("expected magic '", expect, "'"));
        pos_ += 4;
    }

    bool done() const { return pos_ == size_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw IoError("truncated data");
    }
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace detail

// U-Net built from [conv3x3 -> batchnorm -> leaky-relu] x2 blocks per level,
// max-pool downsampling, nearest-neighbour upsampling followed by convolution,
// and a 1x1 output head.
class Network {
public:
    struct ForwardOptions {
        int ablate_skip_level = -1;  // zero that skip connection (wiring checks)
    };

    Network(UNetConfig config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        Dim cin = config_.in_channels;
        for (Dim level = 0; level < config_.depth; ++level) {
            const Dim w = config_.base_filters << level;
            encoder_.push_back(make_double_block(cin, w, rng));
            cin = w;
        }
        bottleneck_ = make_double_block(cin, config_.base_filters << config_.depth, rng);
        for (Dim level = config_.depth - 1; level >= 0; --level) {
            const Dim skip = config_.base_filters << level;
            const Dim up = config_.base_filters << (level + 1);
            decoder_.push_back(make_double_block(up + skip, skip, rng));
        }
        head_w_ = make_weight(config_.out_channels, config_.base_filters, 1, 1, rng);
        head_b_ = Tensor::zeros({config_.out_channels}, true);
        params_.push_back(head_w_);
        params_.push_back(head_b_);
    }

    const UNetConfig& config() const { return config_; }
    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    const std::vector<Tensor>& parameters() const { return params_; }
    const std::vector<Tensor>& buffers() const { return buffers_; }

    Dim parameter_count() const {
        Dim n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // Gradient flow can pass through a network without touching its own
    // parameters (the fixed-classifier half of an alternating step).
    void set_parameters_trainable(bool trainable) {
        for (auto& p : params_) p.set_requires_grad(trainable);
    }

    Tensor forward(const Tensor& input) { return forward(input, ForwardOptions{}); }

    Tensor forward(const Tensor& input, ForwardOptions options) {
        if (input.rank() != 4 || input.dim(1) != config_.in_channels)
            throw ShapeError(detail::msg("unet: expected input (N,", config_.in_channels,
                                         ",H,W), got ", shape_str(input.shape())));
        const Dim divisor = Dim{1} << config_.depth;
        if (input.dim(2) % divisor != 0 || input.dim(3) % divisor != 0)
            throw ShapeError(detail::msg("unet: spatial dims ", input.dim(2), "x", input.dim(3),
                                         " must be divisible by ", divisor));
        std::vector<Tensor> skips;
        Tensor h = input;
        for (auto& block : encoder_) {
            h = run_double_block(block, h);
            skips.push_back(h);
            h = max_pool2d(h, 2);
        }
        h = run_double_block(bottleneck_, h);
        for (std::size_t d = 0; d < decoder_.size(); ++d) {
            const int level = static_cast<int>(config_.depth) - 1 - static_cast<int>(d);
            h = upsample_nearest2(h);
            Tensor skip = skips[static_cast<std::size_t>(level)];
            if (options.ablate_skip_level == level) skip = Tensor::zeros(skip.shape());
            h = run_double_block(decoder_[d], concat_channels(h, skip));
        }
        h = conv2d(h, head_w_, head_b_, 0, 1);
        if (config_.final_activation == FinalActivation::Sigmoid) return sigmoid(h);
        return leaky_relu(h, config_.leaky_slope);
    }

    // FNV-1a over the trainable parameter bytes (batch-norm running stats are
    // excluded; they move on any train-mode forward).
    std::uint64_t parameter_fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            for (double v : p.values()) {
                const auto bits = std::bit_cast<std::uint64_t>(v);
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xff;
                    h *= 0x100000001b3ULL;
                }
            }
        }
        return h;
    }

    std::string serialize() const {
        std::string out;
        out.append("JSYN", 4);
        detail::write_u32le(out, 1);  // format version
        detail::write_u32le(out, static_cast<std::uint32_t>(config_.in_channels));
        detail::write_u32le(out, static_cast<std::uint32_t>(config_.out_channels));
        detail::write_u32le(out, static_cast<std::uint32_t>(config_.depth));
        detail::write_u32le(out, static_cast<std::uint32_t>(config_.base_filters));
        detail::write_u32le(out, static_cast<std::uint32_t>(config_.final_activation));
        detail::write_f64le(out, config_.leaky_slope);
        for (const auto& p : params_)
            for (double v : p.values()) detail::write_f64le(out, v);
        for (const auto& b : buffers_)
            for (double v : b.values()) detail::write_f64le(out, v);
        return out;
    }

    static Network deserialize(const std::string& bytes) {
        detail::ByteReader r(bytes.data(), bytes.size());
        r.magic("JSYN");
        const auto version = r.u32le();
        if (version != 1)
            throw IoError(detail::msg("unsupported checkpoint version ", version));
        UNetConfig cfg;
        cfg.in_channels = r.u32le();
        cfg.out_channels = r.u32le();
        cfg.depth = r.u32le();
        cfg.base_filters = r.u32le();
        cfg.final_activation = static_cast<FinalActivation>(r.u32le());
        cfg.leaky_slope = r.f64le();
        Network net(cfg, 0);
        for (auto& p : net.params_)
            for (double& v : p.values()) v = r.f64le();
        for (auto& b : net.buffers_)
            for (double& v : b.values()) v = r.f64le();
        if (!r.done()) throw IoError("checkpoint has trailing bytes");
        net.set_mode(Mode::Eval);
        return net;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError(detail::msg("cannot open '", path, "' for writing"));
        const auto bytes = serialize();
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError(detail::msg("write failed for '", path, "'"));
    }

    static Network load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError(detail::msg("cannot open '", path, "' for reading"));
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }

    Network clone() const {
        Network copy = deserialize(serialize());
        copy.set_mode(mode_);
        return copy;
    }

private:
    struct ConvBnAct {
        Tensor w, b, gamma, beta;
        BatchNormState bn;
    };
    struct DoubleBlock {
        ConvBnAct first, second;
    };

    Tensor make_weight(Dim cout, Dim cin, Dim kh, Dim kw, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(cin * kh * kw));
        Tensor w = Tensor::zeros({cout, cin, kh, kw}, true);
        for (double& v : w.values()) v = rng.uniform(-bound, bound);
        return w;
    }

    ConvBnAct make_conv_bn(Dim cin, Dim cout, Rng& rng) {
        ConvBnAct layer;
        layer.w = make_weight(cout, cin, 3, 3, rng);
        layer.b = Tensor::zeros({cout}, true);
        layer.gamma = Tensor::full({cout}, 1.0, true);
        layer.beta = Tensor::zeros({cout}, true);
        layer.bn = BatchNormState::init(cout);
        params_.push_back(layer.w);
        params_.push_back(layer.b);
        params_.push_back(layer.gamma);
        params_.push_back(layer.beta);
        buffers_.push_back(layer.bn.running_mean);
        buffers_.push_back(layer.bn.running_var);
        return layer;
    }

    DoubleBlock make_double_block(Dim cin, Dim cout, Rng& rng) {
        DoubleBlock block;
        block.first = make_conv_bn(cin, cout, rng);
        block.second = make_conv_bn(cout, cout, rng);
        return block;
    }

    Tensor run_conv_bn(ConvBnAct& layer, const Tensor& x) {
        Tensor h = conv2d(x, layer.w, layer.b, 1, 1);
        h = batch_norm2d(h, layer.gamma, layer.beta, layer.bn, mode_);
        return leaky_relu(h, detail::kInternalSlope);
    }

    Tensor run_double_block(DoubleBlock& block, const Tensor& x) {
        return run_conv_bn(block.second, run_conv_bn(block.first, x));
    }

    UNetConfig config_;
    Mode mode_ = Mode::Train;
    std::vector<DoubleBlock> encoder_;
    DoubleBlock bottleneck_;
    std::vector<DoubleBlock> decoder_;
    Tensor head_w_, head_b_;
    std::vector<Tensor> params_;
    std::vector<Tensor> buffers_;
};

// Segmentation network: sigmoid head, one or two input channels.
inline Network build_classifier(UNetConfig config, std::uint64_t seed) {
    if (config.final_activation != FinalActivation::Sigmoid)
        throw ConfigError("build_classifier: final activation must be Sigmoid");
    return Network(config, seed);
}

// Synthesis network: one input channel, leaky-relu head so intensities stay
// unbounded in the z-scored domain.
inline Network build_generator(UNetConfig config, std::uint64_t seed) {
    if (config.in_channels != 1)
        throw ConfigError(detail::msg("build_generator: in_channels must be 1, got ",
                                      config.in_channels));
    if (config.final_activation != FinalActivation::LeakyReLU)
        throw ConfigError("build_generator: final activation must be LeakyReLU");
    return Network(config, seed);
}

}  // namespace jsynth
