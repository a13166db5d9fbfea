#include "cilia/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "cilia/metrics.hpp"

namespace cilia::train {

using ad::Tensor;

// ---- optimisation --------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    if (!(config.lr > 0)) throw ConfigError("adam: learning rate must be > 0");
    if (config.decay < 0) throw ConfigError("adam: decay must be >= 0");
    for (const auto& p : params_) {
        m_.push_back(Eigen::VectorXd::Zero(p.value().size()));
        v_.push_back(Eigen::VectorXd::Zero(p.value().size()));
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor p = params_[k];
        auto& w = p.mutable_value();
        if (p.has_grad()) {
            const Eigen::VectorXd g = p.grad();
            m_[k] = config_.beta1 * m_[k] + (1 - config_.beta1) * g;
            v_[k] = config_.beta2 * v_[k] + (1 - config_.beta2) * g.cwiseAbs2();
        } else {
            m_[k] *= config_.beta1;
            v_[k] *= config_.beta2;
        }
        const Eigen::ArrayXd mhat = m_[k].array() / c1;
        const Eigen::ArrayXd vhat = v_[k].array() / c2;
        w.array() -= config_.lr * (mhat / (vhat.sqrt() + config_.eps) + config_.decay * w.array());
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

bool EarlyStopping::update(double loss) {
    ++epoch_;
    improved_ = loss < best_;
    if (improved_) {
        best_ = loss;
        best_epoch_ = epoch_;
        bad_ = 0;
    } else {
        ++bad_;
    }
    return patience_ > 0 && bad_ >= patience_;
}

double PlateauScheduler::update(double loss, double lr) {
    if (loss < best_) {
        best_ = loss;
        bad_ = 0;
        return lr;
    }
    if (patience_ > 0 && ++bad_ >= patience_) {
        bad_ = 0;
        return lr * factor_;
    }
    return lr;
}

std::vector<Eigen::VectorXd> snapshot(std::span<const Tensor> params) {
    std::vector<Eigen::VectorXd> out;
    for (const auto& p : params) out.push_back(p.value());
    return out;
}

void restore(std::span<const Tensor> params, const std::vector<Eigen::VectorXd>& values) {
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor p = params[k];
        p.mutable_value() = values[k];
    }
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    return idx;
}

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::ofstream open_log(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

}  // namespace

// ---- augmentation ----------------------------------------------------------------

FrameStack flip_horizontal(const FrameStack& s) {
    FrameStack out(s.frames(), s.rows(), s.cols());
    for (std::size_t t = 0; t < s.frames(); ++t) out.frame(t) = s.frame(t).rowwise().reverse();
    return out;
}

FrameStack flip_vertical(const FrameStack& s) {
    FrameStack out(s.frames(), s.rows(), s.cols());
    for (std::size_t t = 0; t < s.frames(); ++t) out.frame(t) = s.frame(t).colwise().reverse();
    return out;
}

SegSample crop(const SegSample& s, std::size_t row, std::size_t col, std::size_t size) {
    const auto H = std::size_t(s.image.rows()), W = std::size_t(s.image.cols());
    if (s.mask.rows() != s.image.rows() || s.mask.cols() != s.image.cols()) throw ShapeError("crop: image and mask differ");
    if (size > H || size > W) {
        throw ShapeError("crop of " + std::to_string(size) + " exceeds " + std::to_string(H) + "x" + std::to_string(W) +
                         " frame");
    }
    if (row + size > H || col + size > W) throw ShapeError("crop window out of bounds");
    const auto r = Eigen::Index(row), c = Eigen::Index(col), n = Eigen::Index(size);
    return {s.image.block(r, c, n, n), s.mask.block(r, c, n, n)};
}

SegSample augment(const SegSample& s, Rng& rng, std::size_t crop_size, bool flips) {
    SegSample out = s;
    if (crop_size > 0) {
        const auto H = std::size_t(s.image.rows()), W = std::size_t(s.image.cols());
        if (crop_size > H || crop_size > W) {
            throw ShapeError("crop of " + std::to_string(crop_size) + " exceeds " + std::to_string(H) + "x" +
                             std::to_string(W) + " frame");
        }
        const std::size_t row = rng.below(H - crop_size + 1);
        const std::size_t col = rng.below(W - crop_size + 1);
        out = crop(s, row, col, crop_size);
    }
    if (flips) {
        if (rng.coin()) out = {flip_horizontal(out.image), flip_horizontal(out.mask)};
        if (rng.coin()) out = {flip_vertical(out.image), flip_vertical(out.mask)};
    }
    return out;
}

FrameStack augment(const FrameStack& patch, Rng& rng) {
    FrameStack out = patch;
    if (rng.coin()) out = flip_horizontal(out);
    if (rng.coin()) out = flip_vertical(out);
    return out;
}

// ---- segmentation ------------------------------------------------------------------

std::vector<double> inverse_frequency_weights(std::span<const Mask> masks, int n_classes) {
    std::vector<double> count(std::size_t(n_classes), 0.0);
    double total = 0;
    for (const auto& m : masks) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const int k = m.data()[i];
            if (k >= n_classes) throw DataError("mask label " + std::to_string(k) + " out of range");
            count[std::size_t(k)] += 1;
        }
        total += double(m.size());
    }
    std::vector<double> w(std::size_t(n_classes), 0.0);
    for (int k = 0; k < n_classes; ++k)
        if (count[std::size_t(k)] > 0) w[std::size_t(k)] = total / (double(n_classes) * count[std::size_t(k)]);
    return w;
}

namespace {

double eval_pixel_accuracy(const segnet::SegNet& net, std::span<const SegSample> data) {
    double hit = 0, total = 0;
    for (const auto& s : data) {
        const auto seg = segnet::segment(net, s.image);
        hit += double((seg.mask == s.mask).count());
        total += double(s.mask.size());
    }
    return hit / total;
}

}  // namespace

SegTrainResult train_segnet(segnet::SegNet& net, std::span<const SegSample> data, const SegTrainConfig& config) {
    if (data.empty()) throw DataError("segment-train: empty dataset");
    if (config.batch_size < 1) throw ConfigError("segment-train: batch_size must be >= 1");
    if (config.epochs < 1) throw ConfigError("segment-train: epochs must be >= 1");
    std::vector<Mask> masks;
    for (const auto& s : data) {
        if (s.image.rows() != s.mask.rows() || s.image.cols() != s.mask.cols()) {
            throw ShapeError("segment-train: image and mask sizes differ");
        }
        masks.push_back(s.mask);
    }
    const auto weights = inverse_frequency_weights(masks, net.config().n_classes);
    const auto params = net.parameters();
    Adam adam(params, config.adam);
    Rng rng(config.seed);
    SegTrainResult result;
    double best_acc = -1;
    std::vector<Eigen::VectorXd> best;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = shuffled(data.size(), rng);
        double loss_sum = 0;
        std::size_t seen = 0;
        for (std::size_t b = 0; b < order.size(); b += std::size_t(config.batch_size)) {
            const std::size_t n = std::min(order.size() - b, std::size_t(config.batch_size));
            std::vector<SegSample> batch;
            for (std::size_t j = 0; j < n; ++j) batch.push_back(augment(data[order[b + j]], rng, config.crop, config.flips));
            const std::size_t H = std::size_t(batch[0].image.rows()), W = std::size_t(batch[0].image.cols());
            Eigen::VectorXd x(Eigen::Index(n * H * W));
            std::vector<int> labels(n * H * W);
            for (std::size_t j = 0; j < n; ++j) {
                if (std::size_t(batch[j].image.rows()) != H || std::size_t(batch[j].image.cols()) != W) {
                    throw ShapeError("segment-train: frames in a batch differ in size; set a crop");
                }
                for (std::size_t i = 0; i < H * W; ++i) {
                    x[Eigen::Index(j * H * W + i)] = batch[j].image.data()[i];
                    labels[j * H * W + i] = batch[j].mask.data()[i];
                }
            }
            const Tensor probs = net.forward(Tensor::from({n, 1, H, W}, std::move(x)), true, &rng);
            const Tensor loss = ad::cross_entropy(probs, labels, weights);
            ad::backward(loss);
            adam.step();
            loss_sum += loss.item() * double(n);
            seen += n;
        }
        const double acc = eval_pixel_accuracy(net, data);
        result.log.push_back({epoch, loss_sum / double(seen), acc, adam.lr()});
        if (acc > best_acc) {
            best_acc = acc;
            result.best_epoch = epoch;
            best = snapshot(params);
        }
        if (config.stop_at_accuracy && acc >= *config.stop_at_accuracy) break;
    }
    restore(params, best);
    return result;
}

void write_log(const std::filesystem::path& path, std::span<const SegEpoch> log) {
    auto out = open_log(path);
    out << "# epoch\tloss\tpixel_accuracy\tlr\n";
    for (const auto& e : log) out << e.epoch << '\t' << g17(e.loss) << '\t' << g17(e.pixel_accuracy) << '\t' << g17(e.lr) << '\n';
}

// ---- classifier ----------------------------------------------------------------------

std::pair<double, double> evaluate_classifier(const convlstm::ConvLstmClassifier& model, const convlstm::Standardizer& z,
                                              std::span<const LabeledPatch> data, int batch_size) {
    if (data.empty()) throw DataError("evaluate: no patches");
    ad::NoGradGuard no_grad;
    double loss = 0, correct = 0;
    for (std::size_t b = 0; b < data.size(); b += std::size_t(batch_size)) {
        const std::size_t n = std::min(data.size() - b, std::size_t(batch_size));
        std::vector<const FrameStack*> stacks;
        std::vector<int> labels;
        for (std::size_t j = 0; j < n; ++j) {
            stacks.push_back(&data[b + j].values);
            labels.push_back(static_cast<int>(data[b + j].label));
        }
        const Tensor probs = model.forward(convlstm::make_batch(stacks, z));
        loss += ad::cross_entropy(probs, labels).item() * double(n);
        for (std::size_t j = 0; j < n; ++j) {
            const int pred = probs.at(2 * j + 1) >= 0.5 ? 1 : 0;
            correct += pred == labels[j];
        }
    }
    return {loss / double(data.size()), correct / double(data.size())};
}

ClfTrainResult train_classifier(std::span<const LabeledPatch> train, std::span<const LabeledPatch> val,
                                const ClfTrainConfig& config, const BatchObserver& observer) {
    if (train.empty()) throw DataError("clf-train: empty training set");
    if (val.empty()) throw DataError("clf-train: empty validation set");
    if (config.batch_size < 1) throw ConfigError("clf-train: batch_size must be >= 1");
    if (config.epochs < 1) throw ConfigError("clf-train: epochs must be >= 1");
    std::size_t abnormal = 0;
    for (const auto& p : train) {
        if (p.label == Label::unknown) throw DataError("clf-train: patch " + p.patch_id + " has no label");
        abnormal += p.label == Label::abnormal;
    }
    if (abnormal == 0 || abnormal == train.size()) {
        throw DataError(std::string("clf-train: training data contains a single class (") +
                        (abnormal ? "abnormal" : "normal") + ")");
    }
    for (const auto& p : val)
        if (p.label == Label::unknown) throw DataError("clf-train: patch " + p.patch_id + " has no label");

    std::vector<FrameStack> values;
    for (const auto& p : train) values.push_back(p.values);
    ClfTrainResult result{convlstm::ConvLstmClassifier::build(config.model, config.seed),
                          convlstm::Standardizer::fit(values), {}, 0};
    const auto params = result.model.parameters();
    Adam adam(params, config.adam);
    EarlyStopping stopper(config.patience);
    PlateauScheduler scheduler(config.anneal_patience, config.anneal_factor);
    Rng rng(config.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<Eigen::VectorXd> best = snapshot(params);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = shuffled(train.size(), rng);
        double loss_sum = 0;
        for (std::size_t b = 0; b < order.size(); b += std::size_t(config.batch_size)) {
            const std::size_t n = std::min(order.size() - b, std::size_t(config.batch_size));
            std::vector<FrameStack> batch;
            std::vector<int> labels;
            std::vector<std::string> ids;
            for (std::size_t j = 0; j < n; ++j) {
                const auto& p = train[order[b + j]];
                batch.push_back(config.flips ? augment(p.values, rng) : p.values);
                labels.push_back(static_cast<int>(p.label));
                ids.push_back(p.patch_id);
            }
            if (observer) observer(ids);
            std::vector<const FrameStack*> ptrs;
            for (const auto& s : batch) ptrs.push_back(&s);
            const Tensor loss = ad::cross_entropy(result.model.forward(convlstm::make_batch(ptrs, result.standardizer)), labels);
            ad::backward(loss);
            adam.step();
            loss_sum += loss.item() * double(n);
        }
        const auto [val_loss, val_acc] = evaluate_classifier(result.model, result.standardizer, val);
        result.log.push_back({epoch, loss_sum / double(train.size()), val_loss, val_acc, adam.lr()});
        const bool stop = stopper.update(val_loss);
        if (stopper.improved()) {
            best = snapshot(params);
            result.best_epoch = epoch;
        }
        adam.set_lr(scheduler.update(val_loss, adam.lr()));
        if (stop) break;
    }
    restore(params, best);
    return result;
}

void write_log(const std::filesystem::path& path, std::span<const ClfEpoch> log) {
    auto out = open_log(path);
    out << "# epoch\ttrain_loss\tval_loss\tval_accuracy\tlr\n";
    for (const auto& e : log) {
        out << e.epoch << '\t' << g17(e.train_loss) << '\t' << g17(e.val_loss) << '\t' << g17(e.val_accuracy) << '\t'
            << g17(e.lr) << '\n';
    }
}

}  // namespace cilia::train
