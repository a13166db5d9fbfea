#include "cilia/convlstm.hpp"

#include <cstdio>

#include "cilia/parallel.hpp"

namespace cilia::convlstm {

using ad::Shape;
using ad::Tensor;

void CellConfig::validate() const {
    if (input_channels < 1 || hidden < 1) throw ConfigError("convlstm: channels must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("convlstm: kernel must be odd for same padding");
    if (height < 1 || width < 1) throw ConfigError("convlstm: spatial extents must be >= 1");
    if (candidate == ad::Pointwise::relu) throw ConfigError("convlstm: candidate activation must be tanh or sigmoid");
}

ad::Pointwise parse_activation(const std::string& name) {
    if (name == "tanh") return ad::Pointwise::tanh;
    if (name == "sigmoid") return ad::Pointwise::sigmoid;
    throw ConfigError("unknown candidate activation '" + name + "' (expected tanh or sigmoid)");
}

std::string activation_name(ad::Pointwise fn) {
    switch (fn) {
        case ad::Pointwise::tanh: return "tanh";
        case ad::Pointwise::sigmoid: return "sigmoid";
        case ad::Pointwise::relu: return "relu";
    }
    return "?";
}

// ---- cell --------------------------------------------------------------------

ConvLstmCell::ConvLstmCell(const CellConfig& config) : config_(config) {
    config.validate();
    const std::size_t F = std::size_t(config.hidden), C = std::size_t(config.input_channels),
                      k = std::size_t(config.kernel), H = std::size_t(config.height), W = std::size_t(config.width);
    for (Tensor* w : {&W_f, &W_i, &W_o, &W_c}) *w = Tensor::zeros({F, C, k, k}, true);
    for (Tensor* u : {&U_f, &U_i, &U_o, &U_c}) *u = Tensor::zeros({F, F, k, k}, true);
    for (Tensor* v : {&V_f, &V_i, &V_o}) *v = Tensor::zeros({F, H, W}, true);
    for (Tensor* b : {&b_f, &b_i, &b_o, &b_c}) *b = Tensor::zeros({F}, true);
}

ConvLstmCell::ConvLstmCell(const CellConfig& config, Rng& rng) : ConvLstmCell(config) {
    const double bound = 1.0 / std::sqrt(double((config.input_channels + config.hidden) * config.kernel * config.kernel));
    auto fill = [&](Tensor& t, double b) {
        for (auto& v : t.mutable_value()) v = rng.uniform(-b, b);
    };
    for (Tensor* w : {&W_f, &W_i, &W_o, &W_c, &U_f, &U_i, &U_o, &U_c}) fill(*w, bound);
    for (Tensor* v : {&V_f, &V_i, &V_o}) fill(*v, 0.1);
    b_f.mutable_value().setConstant(config.forget_bias_init);
}

ConvLstmCell::Fused ConvLstmCell::fuse() const {
    const Tensor w = ad::concat({W_f, W_i, W_o, W_c}, 0);
    const Tensor u = ad::concat({U_f, U_i, U_o, U_c}, 0);
    return {ad::concat({w, u}, 1), ad::concat({b_f, b_i, b_o, b_c}, 0)};
}

CellState ConvLstmCell::initial_state(std::size_t batch) const {
    const Shape s{batch, std::size_t(config_.hidden), std::size_t(config_.height), std::size_t(config_.width)};
    return {Tensor::zeros(s), Tensor::zeros(s)};
}

void ConvLstmCell::check(const Tensor& x, const CellState& state) const {
    const Shape& hs = state.h.shape();
    const Shape want_state{hs.empty() ? 0 : hs[0], std::size_t(config_.hidden), std::size_t(config_.height),
                           std::size_t(config_.width)};
    if (hs != want_state || state.c.shape() != want_state) {
        throw ShapeError("convlstm: state must be " + ad::to_string(want_state) + ", got h " + ad::to_string(hs) + " c " +
                         ad::to_string(state.c.shape()));
    }
    const Shape want_x{want_state[0], std::size_t(config_.input_channels), want_state[2], want_state[3]};
    if (x.shape() != want_x) {
        throw ShapeError("convlstm: input must be " + ad::to_string(want_x) + ", got " + ad::to_string(x.shape()));
    }
}

CellState ConvLstmCell::step(const Tensor& x, const CellState& state) const { return step(x, state, fuse()); }

CellState ConvLstmCell::step(const Tensor& x, const CellState& state, const Fused& fused, Gates* gates) const {
    check(x, state);
    const std::size_t F = std::size_t(config_.hidden);
    const Tensor z = ad::add_channel_bias(ad::conv2d(ad::concat({x, state.h}, 1), fused.kernel, 1, config_.kernel / 2),
                                          fused.bias);
    const Tensor& c = state.c;
    const Tensor f = ad::sigmoid(ad::slice(z, 1, 0, F) + ad::mul_shared(c, V_f));
    const Tensor i = ad::sigmoid(ad::slice(z, 1, F, F) + ad::mul_shared(c, V_i));
    const Tensor o = ad::sigmoid(ad::slice(z, 1, 2 * F, F) + ad::mul_shared(c, V_o));
    const Tensor g = ad::pointwise(config_.candidate, ad::slice(z, 1, 3 * F, F));
    if (gates) *gates = {f, i, o, g};
    const Tensor c_next = f * c + i * g;
    return {o * ad::tanh(c_next), c_next};
}

std::vector<io::Checkpoint::Entry> ConvLstmCell::named_parameters() const {
    return {{"cell.W_f", W_f}, {"cell.W_i", W_i}, {"cell.W_o", W_o}, {"cell.W_c", W_c}, {"cell.U_f", U_f},
            {"cell.U_i", U_i}, {"cell.U_o", U_o}, {"cell.U_c", U_c}, {"cell.V_f", V_f}, {"cell.V_i", V_i},
            {"cell.V_o", V_o}, {"cell.b_f", b_f}, {"cell.b_i", b_i}, {"cell.b_o", b_o}, {"cell.b_c", b_c}};
}

// ---- classifier --------------------------------------------------------------

ConvLstmClassifier::ConvLstmClassifier(const ClassifierConfig& config, ConvLstmCell cell)
    : config_(config), cell_(std::move(cell)) {
    if (config.frames < 1) throw ConfigError("convlstm: sequence length must be >= 1");
    head_weight = Tensor::zeros({std::size_t(config.cell.hidden), 2}, true);
    head_bias = Tensor::zeros({2}, true);
}

ConvLstmClassifier ConvLstmClassifier::zeros(const ClassifierConfig& config) {
    return ConvLstmClassifier(config, ConvLstmCell(config.cell));
}

ConvLstmClassifier ConvLstmClassifier::build(const ClassifierConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    ConvLstmClassifier m(config, ConvLstmCell(config.cell, rng));
    const double bound = std::sqrt(6.0 / double(config.cell.hidden + 2));
    for (auto& v : m.head_weight.mutable_value()) v = rng.uniform(-bound, bound);
    return m;
}

Tensor ConvLstmClassifier::forward(const Tensor& seq) const {
    const auto& cc = config_.cell;
    if (seq.rank() != 4 || seq.dim(2) != std::size_t(cc.height) || seq.dim(3) != std::size_t(cc.width) || seq.dim(1) == 0) {
        throw ShapeError("convlstm: sequence must be [N,T," + std::to_string(cc.height) + "," + std::to_string(cc.width) +
                         "], got " + ad::to_string(seq.shape()));
    }
    if (cc.input_channels != 1) throw ShapeError("convlstm: classifier sequences carry a single channel");
    const auto fused = cell_.fuse();
    CellState s = cell_.initial_state(seq.dim(0));
    for (std::size_t t = 0; t < seq.dim(1); ++t) s = cell_.step(ad::slice(seq, 1, t, 1), s, fused);
    return ad::softmax(ad::dense(ad::global_avg_pool(s.h), head_weight, head_bias), 1);
}

std::vector<io::Checkpoint::Entry> ConvLstmClassifier::named_parameters() const {
    auto out = cell_.named_parameters();
    out.push_back({"head.weight", head_weight});
    out.push_back({"head.bias", head_bias});
    return out;
}

std::vector<Tensor> ConvLstmClassifier::parameters() const {
    std::vector<Tensor> out;
    for (auto& e : named_parameters()) out.push_back(e.tensor);
    return out;
}

namespace {

std::string exact(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

int meta_int(const io::Metadata& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw FormatError("classifier checkpoint lacks '" + key + "'");
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw FormatError("classifier checkpoint has malformed '" + key + "'");
    }
}

}  // namespace

io::Checkpoint ConvLstmClassifier::to_checkpoint(const Standardizer& z, io::Metadata meta) const {
    io::Checkpoint ck;
    for (auto& e : named_parameters()) ck.entries.push_back({e.name, e.tensor.detach()});
    const auto& c = config_.cell;
    meta["model"] = "convlstm";
    meta["arch.input_channels"] = std::to_string(c.input_channels);
    meta["arch.hidden"] = std::to_string(c.hidden);
    meta["arch.kernel"] = std::to_string(c.kernel);
    meta["arch.height"] = std::to_string(c.height);
    meta["arch.width"] = std::to_string(c.width);
    meta["arch.candidate"] = activation_name(c.candidate);
    meta["arch.frames"] = std::to_string(config_.frames);
    meta["standardize.mean"] = exact(z.mean);
    meta["standardize.std"] = exact(z.stddev);
    ck.meta = std::move(meta);
    return ck;
}

ConvLstmClassifier ConvLstmClassifier::from_checkpoint(const io::Checkpoint& ckpt, Standardizer* z) {
    const auto& m = ckpt.meta;
    if (auto it = m.find("model"); it == m.end() || it->second != "convlstm") {
        throw FormatError("checkpoint does not hold a ConvLSTM classifier");
    }
    ClassifierConfig cfg;
    cfg.cell.input_channels = meta_int(m, "arch.input_channels");
    cfg.cell.hidden = meta_int(m, "arch.hidden");
    cfg.cell.kernel = meta_int(m, "arch.kernel");
    cfg.cell.height = meta_int(m, "arch.height");
    cfg.cell.width = meta_int(m, "arch.width");
    cfg.cell.candidate = parse_activation(m.at("arch.candidate"));
    cfg.frames = meta_int(m, "arch.frames");
    ConvLstmClassifier model = zeros(cfg);
    for (auto& e : model.named_parameters()) {
        const auto& stored = ckpt.get(e.name);
        if (stored.shape() != e.tensor.shape()) throw FormatError("checkpoint tensor " + e.name + " has the wrong shape");
        Tensor t = e.tensor;
        t.mutable_value() = stored.value();
    }
    if (z) {
        z->mean = std::stod(m.at("standardize.mean"));
        z->stddev = std::stod(m.at("standardize.std"));
    }
    return model;
}

// ---- inference ---------------------------------------------------------------

Tensor make_batch(std::span<const FrameStack* const> stacks, const Standardizer& z) {
    if (stacks.empty()) throw DataError("convlstm: empty batch");
    const FrameStack& first = *stacks[0];
    const std::size_t per = std::size_t(first.data().size());
    Eigen::VectorXd v(Eigen::Index(per * stacks.size()));
    for (std::size_t n = 0; n < stacks.size(); ++n) {
        const FrameStack& s = *stacks[n];
        if (s.frames() != first.frames() || s.rows() != first.rows() || s.cols() != first.cols()) {
            throw ShapeError("convlstm: patches in a batch differ in shape");
        }
        v.segment(Eigen::Index(n * per), Eigen::Index(per)) = ((s.data() - z.mean) / z.stddev).matrix();
    }
    return Tensor::from({stacks.size(), first.frames(), first.rows(), first.cols()}, std::move(v));
}

namespace {

void check_patch(const ConvLstmClassifier& model, const FrameStack& s) {
    const auto& c = model.config();
    if (s.frames() != std::size_t(c.frames) || s.rows() != std::size_t(c.cell.height) ||
        s.cols() != std::size_t(c.cell.width)) {
        throw ShapeError("convlstm: patch must be " + std::to_string(c.frames) + "x" + std::to_string(c.cell.height) + "x" +
                         std::to_string(c.cell.width) + ", got " + std::to_string(s.frames()) + "x" +
                         std::to_string(s.rows()) + "x" + std::to_string(s.cols()));
    }
}

}  // namespace

double classify_patch(const ConvLstmClassifier& model, const patches::PatchSequence& patch, const Standardizer& z) {
    check_patch(model, patch.values);
    ad::NoGradGuard no_grad;
    const FrameStack* one[] = {&patch.values};
    return model.forward(make_batch(one, z)).at(1);
}

std::vector<double> classify_stacks(const ConvLstmClassifier& model, std::span<const FrameStack> stacks,
                                    const Standardizer& z, int threads) {
    for (const auto& s : stacks) check_patch(model, s);
    std::vector<double> out(stacks.size());
    parallel_for(stacks.size(), threads, [&](std::size_t i) {
        ad::NoGradGuard no_grad;
        const FrameStack* one[] = {&stacks[i]};
        out[i] = model.forward(make_batch(one, z)).at(1);
    });
    return out;
}

}  // namespace cilia::convlstm
