#include "cilia/segnet.hpp"

#include <cmath>
#include <sstream>

namespace cilia::segnet {

namespace {

std::string join(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::vector<int> parse_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigError("bad integer list '" + s + "'");
        }
    }
    return out;
}

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; }

}  // namespace

// ---- config ------------------------------------------------------------------

int SegNetConfig::total_layers() const {
    int n = 2 + bottleneck_layers;
    for (int l : down_layers) n += l;
    for (int l : up_layers) n += l;
    return n;
}

std::size_t SegNetConfig::parameter_count() const {
    validate();
    const std::size_t g = std::size_t(growth_rate);
    std::size_t c = std::size_t(initial_filters);
    std::size_t total = conv_params(std::size_t(in_channels), c, 3);
    std::vector<std::size_t> skips;
    auto block = [&](std::size_t in, int layers) {
        for (int j = 0; j < layers; ++j) total += conv_params(in + std::size_t(j) * g, g, 3);
    };
    for (int l : down_layers) {
        block(c, l);
        c += std::size_t(l) * g;
        skips.push_back(c);
        total += conv_params(c, c, 1);
    }
    block(c, bottleneck_layers);
    std::size_t fresh = std::size_t(bottleneck_layers) * g;
    for (std::size_t i = 0; i < up_layers.size(); ++i) {
        total += conv_params(fresh, fresh, 3);
        c = fresh + skips[skips.size() - 1 - i];
        block(c, up_layers[i]);
        if (i + 1 == up_layers.size()) c += std::size_t(up_layers[i]) * g;
        else fresh = std::size_t(up_layers[i]) * g;
    }
    return total + conv_params(c, std::size_t(n_classes), 1);
}

void SegNetConfig::validate() const {
    if (growth_rate < 1) throw ConfigError("segnet: growth_rate must be >= 1");
    if (initial_filters < 1) throw ConfigError("segnet: initial_filters must be >= 1");
    if (bottleneck_layers < 1) throw ConfigError("segnet: bottleneck_layers must be >= 1");
    if (down_layers.empty()) throw ConfigError("segnet: at least one down block is required");
    if (up_layers.size() != down_layers.size()) {
        throw ConfigError("segnet: up path has " + std::to_string(up_layers.size()) + " blocks, down path " +
                          std::to_string(down_layers.size()));
    }
    for (int l : down_layers)
        if (l < 1) throw ConfigError("segnet: dense blocks need >= 1 layer");
    for (int l : up_layers)
        if (l < 1) throw ConfigError("segnet: dense blocks need >= 1 layer");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("segnet: dropout must lie in [0,1)");
    if (in_channels < 1 || n_classes < 2) throw ConfigError("segnet: need >= 1 input channel and >= 2 classes");
    if (input_height > 0 && input_width > 0) {
        const int smallest = std::min(input_height, input_width);
        if ((1 << pooling_depth()) > smallest) {
            throw ConfigError("segnet: pooling depth " + std::to_string(pooling_depth()) + " exceeds log2(min(H,W)) = " +
                              std::to_string(std::log2(double(smallest))) + " for " + std::to_string(input_height) + "x" +
                              std::to_string(input_width) + " input");
        }
    }
}

std::map<std::string, std::string> SegNetConfig::to_map() const {
    std::ostringstream dr;
    dr.precision(17);
    dr << dropout_rate;
    return {{"growth_rate", std::to_string(growth_rate)},
            {"down_layers", join(down_layers)},
            {"bottleneck_layers", std::to_string(bottleneck_layers)},
            {"up_layers", join(up_layers)},
            {"initial_filters", std::to_string(initial_filters)},
            {"dropout", dr.str()},
            {"in_channels", std::to_string(in_channels)},
            {"n_classes", std::to_string(n_classes)}};
}

SegNetConfig SegNetConfig::from_map(const std::map<std::string, std::string>& kv) {
    SegNetConfig c;
    auto get = [&](const char* k) -> const std::string* {
        auto it = kv.find(k);
        return it == kv.end() ? nullptr : &it->second;
    };
    try {
        if (auto v = get("growth_rate")) c.growth_rate = std::stoi(*v);
        if (auto v = get("down_layers")) c.down_layers = parse_list(*v);
        if (auto v = get("bottleneck_layers")) c.bottleneck_layers = std::stoi(*v);
        if (auto v = get("up_layers")) c.up_layers = parse_list(*v);
        if (auto v = get("initial_filters")) c.initial_filters = std::stoi(*v);
        if (auto v = get("dropout")) c.dropout_rate = std::stod(*v);
        if (auto v = get("in_channels")) c.in_channels = std::stoi(*v);
        if (auto v = get("n_classes")) c.n_classes = std::stoi(*v);
    } catch (const std::logic_error&) {
        throw ConfigError("segnet: malformed architecture value");
    }
    c.validate();
    return c;
}

std::uint64_t SegNetConfig::hash() const {
    std::string text;
    for (const auto& [k, v] : to_map()) text += k + "=" + v + "\n";
    return stable_hash(text);
}

SegNetConfig SegNetConfig::fc_densenet109() {
    SegNetConfig c;
    c.growth_rate = 14;
    c.down_layers = {5, 6, 8, 12, 15};
    c.bottleneck_layers = 15;
    c.up_layers = {15, 12, 8, 6, 5};
    c.initial_filters = 32;
    c.dropout_rate = 0.1;
    return c;
}

// ---- network -----------------------------------------------------------------

SegNet SegNet::build(const SegNetConfig& config, std::uint64_t seed) {
    config.validate();
    SegNet net;
    net.config_ = config;
    Rng rng(seed);
    // Fan-in scaled uniform (He) weights, zero biases. The classifier starts
    // at zero so the untrained network predicts the uniform distribution.
    auto conv = [&](std::size_t in, std::size_t out, std::size_t k) {
        const double bound = std::sqrt(6.0 / double(in * k * k));
        return Conv{ad::Tensor::uniform({out, in, k, k}, bound, rng, true), ad::Tensor::zeros({out}, true)};
    };
    const std::size_t g = std::size_t(config.growth_rate);
    auto block = [&](std::size_t in, int layers) {
        std::vector<Conv> b;
        for (int j = 0; j < layers; ++j) b.push_back(conv(in + std::size_t(j) * g, g, 3));
        return b;
    };
    std::size_t c = std::size_t(config.initial_filters);
    net.initial_ = conv(std::size_t(config.in_channels), c, 3);
    std::vector<std::size_t> skips;
    for (int l : config.down_layers) {
        net.down_.push_back(block(c, l));
        c += std::size_t(l) * g;
        skips.push_back(c);
        net.transition_down_.push_back(conv(c, c, 1));
    }
    net.bottleneck_ = block(c, config.bottleneck_layers);
    std::size_t fresh = std::size_t(config.bottleneck_layers) * g;
    for (std::size_t i = 0; i < config.up_layers.size(); ++i) {
        net.transition_up_.push_back(conv(fresh, fresh, 3));
        c = fresh + skips[skips.size() - 1 - i];
        net.up_.push_back(block(c, config.up_layers[i]));
        if (i + 1 == config.up_layers.size()) c += std::size_t(config.up_layers[i]) * g;
        else fresh = std::size_t(config.up_layers[i]) * g;
    }
    net.final_ = {ad::Tensor::zeros({std::size_t(config.n_classes), c, 1, 1}, true),
                  ad::Tensor::zeros({std::size_t(config.n_classes)}, true)};
    return net;
}

ad::Tensor SegNet::apply(const Conv& c, const ad::Tensor& x, int padding) const {
    return ad::add_channel_bias(ad::conv2d(x, c.weight, 1, padding), c.bias);
}

ad::Tensor SegNet::drop(const ad::Tensor& x, bool training, Rng* rng) const {
    if (!training || config_.dropout_rate == 0.0) return x;
    if (!rng) throw Error("segnet: training with dropout needs an rng");
    return ad::dropout(x, config_.dropout_rate, *rng, true);
}

ad::Tensor SegNet::dense_block(const std::vector<Conv>& layers, const ad::Tensor& input, bool keep_input, bool training,
                               Rng* rng) const {
    std::vector<ad::Tensor> features{input};
    for (const auto& layer : layers) {
        const ad::Tensor in = features.size() == 1 ? features[0] : ad::concat(features, 1);
        features.push_back(drop(ad::relu(apply(layer, in, 1)), training, rng));
    }
    if (keep_input) return ad::concat(features, 1);
    std::vector<ad::Tensor> fresh(features.begin() + 1, features.end());
    return fresh.size() == 1 ? fresh[0] : ad::concat(fresh, 1);
}

void SegNet::check_input(std::size_t height, std::size_t width) const {
    const std::size_t multiple = std::size_t(1) << config_.pooling_depth();
    if (height % multiple != 0 || width % multiple != 0 || height == 0 || width == 0) {
        throw ShapeError("segnet: input " + std::to_string(height) + "x" + std::to_string(width) +
                         " must be a multiple of " + std::to_string(multiple) + " in both dimensions");
    }
}

ad::Tensor SegNet::forward(const ad::Tensor& x, bool training, Rng* rng) const {
    if (x.rank() != 4 || x.dim(1) != std::size_t(config_.in_channels)) {
        throw ShapeError("segnet: expected input [N," + std::to_string(config_.in_channels) + ",H,W], got " +
                         ad::to_string(x.shape()));
    }
    check_input(x.dim(2), x.dim(3));
    ad::Tensor h = apply(initial_, x, 1);
    std::vector<ad::Tensor> skips;
    for (std::size_t i = 0; i < down_.size(); ++i) {
        h = dense_block(down_[i], h, true, training, rng);
        skips.push_back(h);
        h = ad::max_pool2d(drop(ad::relu(apply(transition_down_[i], h, 0)), training, rng), 2);
    }
    h = dense_block(bottleneck_, h, false, training, rng);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        ad::Tensor u = apply(transition_up_[i], ad::nearest_upsample2d(h, 2), 1);
        ad::Tensor joined = ad::concat({u, skips[skips.size() - 1 - i]}, 1);
        h = dense_block(up_[i], joined, i + 1 == up_.size(), training, rng);
    }
    return ad::softmax(apply(final_, h, 0), 1);
}

std::vector<io::Checkpoint::Entry> SegNet::named_parameters() const {
    std::vector<io::Checkpoint::Entry> out;
    auto add = [&](const std::string& name, const Conv& c) {
        out.push_back({name + ".weight", c.weight});
        out.push_back({name + ".bias", c.bias});
    };
    add("initial", initial_);
    for (std::size_t i = 0; i < down_.size(); ++i) {
        for (std::size_t j = 0; j < down_[i].size(); ++j) add("down" + std::to_string(i) + ".layer" + std::to_string(j), down_[i][j]);
        add("down" + std::to_string(i) + ".transition", transition_down_[i]);
    }
    for (std::size_t j = 0; j < bottleneck_.size(); ++j) add("bottleneck.layer" + std::to_string(j), bottleneck_[j]);
    for (std::size_t i = 0; i < up_.size(); ++i) {
        add("up" + std::to_string(i) + ".transition", transition_up_[i]);
        for (std::size_t j = 0; j < up_[i].size(); ++j) add("up" + std::to_string(i) + ".layer" + std::to_string(j), up_[i][j]);
    }
    add("final", final_);
    return out;
}

std::vector<ad::Tensor> SegNet::parameters() const {
    std::vector<ad::Tensor> out;
    for (auto& e : named_parameters()) out.push_back(e.tensor);
    return out;
}

std::size_t SegNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
}

int SegNet::conv_layer_count() const { return static_cast<int>(named_parameters().size() / 2); }

int SegNet::layer_count() const {
    std::size_t n = 2 + bottleneck_.size();
    for (const auto& b : down_) n += b.size();
    for (const auto& b : up_) n += b.size();
    return static_cast<int>(n);
}

io::Checkpoint SegNet::to_checkpoint(io::Metadata meta) const {
    io::Checkpoint ck;
    for (auto& e : named_parameters()) ck.entries.push_back({e.name, e.tensor.detach()});
    for (const auto& [k, v] : config_.to_map()) meta["arch." + k] = v;
    meta["config_hash"] = std::to_string(config_.hash());
    meta["model"] = "segnet";
    ck.meta = std::move(meta);
    return ck;
}

SegNet SegNet::from_checkpoint(const io::Checkpoint& ckpt) {
    std::map<std::string, std::string> arch;
    for (const auto& [k, v] : ckpt.meta)
        if (k.rfind("arch.", 0) == 0) arch[k.substr(5)] = v;
    if (auto it = ckpt.meta.find("model"); it == ckpt.meta.end() || it->second != "segnet") {
        throw FormatError("checkpoint does not hold a segmentation network");
    }
    SegNet net = build(SegNetConfig::from_map(arch), 0);
    for (auto& e : net.named_parameters()) {
        const auto& stored = ckpt.get(e.name);
        if (stored.shape() != e.tensor.shape()) {
            throw FormatError("checkpoint tensor " + e.name + " has shape " + ad::to_string(stored.shape()) + ", expected " +
                              ad::to_string(e.tensor.shape()));
        }
        ad::Tensor t = e.tensor;
        t.mutable_value() = stored.value();
    }
    return net;
}

// ---- inference ---------------------------------------------------------------

Mask argmax_mask(const ProbabilityMap& probs) {
    Mask m(Eigen::Index(probs.rows()), Eigen::Index(probs.cols()));
    for (std::size_t r = 0; r < probs.rows(); ++r)
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < probs.frames(); ++k)
                if (probs(k, r, c) > probs(best, r, c)) best = k;
            m(Eigen::Index(r), Eigen::Index(c)) = static_cast<std::uint8_t>(best);
        }
    return m;
}

Segmentation segment_frames(const SegNet& net, const std::vector<ImageD>& frames) {
    if (frames.empty()) throw DataError("segment: no frames");
    const std::size_t H = std::size_t(frames[0].rows()), W = std::size_t(frames[0].cols());
    net.check_input(H, W);
    const std::size_t K = std::size_t(net.config().n_classes);
    ProbabilityMap probs(K, H, W);
    ad::NoGradGuard no_grad;
    for (const auto& f : frames) {
        if (std::size_t(f.rows()) != H || std::size_t(f.cols()) != W) throw ShapeError("segment: frames differ in size");
        Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(f.data(), f.size());
        const auto out = net.forward(ad::Tensor::from({1, 1, H, W}, std::move(v)));
        probs.data() += out.value().array();
    }
    probs.data() /= double(frames.size());
    Segmentation s{std::move(probs), {}};
    s.mask = argmax_mask(s.probabilities);
    return s;
}

Segmentation segment(const SegNet& net, const ImageD& frame) { return segment_frames(net, {frame}); }

Mask cilia_mask(const Mask& labels) {
    return (labels == std::uint8_t(SegClass::lateral_cilia) || labels == std::uint8_t(SegClass::topdown_cilia))
        .select(Mask::Ones(labels.rows(), labels.cols()), Mask::Zero(labels.rows(), labels.cols()));
}

}  // namespace cilia::segnet
