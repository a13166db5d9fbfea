#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cilia/convlstm.hpp"
#include "cilia/segnet.hpp"
#include "cilia/tensor.hpp"

namespace cilia::train {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Decoupled l² decay: w ← w − lr·decay·w each step.
    double decay = 0.0;
};

class Adam {
public:
    Adam(std::vector<ad::Tensor> params, AdamConfig config);

    /// One update from the accumulated gradients; gradients are then zeroed.
    void step();
    void zero_grad();

    double lr() const { return config_.lr; }
    void set_lr(double lr) { config_.lr = lr; }
    long steps() const { return t_; }

private:
    std::vector<ad::Tensor> params_;
    std::vector<Eigen::VectorXd> m_, v_;
    AdamConfig config_;
    long t_ = 0;
};

/// Stops once `patience` consecutive epochs fail to improve on the best loss.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {}
    /// Returns true when training should stop after this epoch.
    bool update(double loss);
    bool improved() const { return improved_; }
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

private:
    int patience_;
    int epoch_ = 0, best_epoch_ = 0, bad_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
    bool improved_ = false;
};

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, then resets its counter.
class PlateauScheduler {
public:
    PlateauScheduler(int patience, double factor) : patience_(patience), factor_(factor) {}
    /// Returns the learning rate to use next.
    double update(double loss, double lr);

private:
    int patience_;
    double factor_;
    int bad_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

/// Saved parameter values, used to restore the best epoch.
std::vector<Eigen::VectorXd> snapshot(std::span<const ad::Tensor> params);
void restore(std::span<const ad::Tensor> params, const std::vector<Eigen::VectorXd>& values);

// ---- augmentation ------------------------------------------------------------

struct SegSample {
    ImageD image;
    Mask mask;
};

template <typename S>
Image<S> flip_horizontal(const Image<S>& x) {
    return x.rowwise().reverse();
}
template <typename S>
Image<S> flip_vertical(const Image<S>& x) {
    return x.colwise().reverse();
}
FrameStack flip_horizontal(const FrameStack& s);
FrameStack flip_vertical(const FrameStack& s);

/// The size×size window at (row, col) of image and mask.
SegSample crop(const SegSample& s, std::size_t row, std::size_t col, std::size_t size);

/// Segmentation mode: optional random crop (row then column offset drawn
/// with rng.below), then independent horizontal and vertical flips.
SegSample augment(const SegSample& s, Rng& rng, std::size_t crop_size, bool flips = true);
/// Patch mode: every frame flipped identically.
FrameStack augment(const FrameStack& patch, Rng& rng);

// ---- segmentation --------------------------------------------------------------

struct SegTrainConfig {
    int epochs = 100;
    int batch_size = 4;
    AdamConfig adam{};
    std::size_t crop = 0;  // 0 keeps full frames
    bool flips = false;
    std::uint64_t seed = 0;
    /// Stops as soon as the evaluation pass reaches this pixel accuracy.
    std::optional<double> stop_at_accuracy;
};

struct SegEpoch {
    int epoch = 0;
    double loss = 0;
    double pixel_accuracy = 0;
    double lr = 0;
};

struct SegTrainResult {
    std::vector<SegEpoch> log;
    int best_epoch = 0;
};

/// Inverse class-frequency weights w_k = total / (K·n_k); absent classes weigh 0.
std::vector<double> inverse_frequency_weights(std::span<const Mask> masks, int n_classes = kSegClasses);

/// Trains `net` in place; on return it holds the weights of the epoch with
/// the best evaluation pixel accuracy.
SegTrainResult train_segnet(segnet::SegNet& net, std::span<const SegSample> data, const SegTrainConfig& config);

void write_log(const std::filesystem::path& path, std::span<const SegEpoch> log);

// ---- classifier ----------------------------------------------------------------

struct LabeledPatch {
    std::string patch_id;
    std::string patient_id;
    FrameStack values;
    Label label = Label::unknown;
};

struct ClfTrainConfig {
    convlstm::ClassifierConfig model{};
    int epochs = 200;
    int batch_size = 4;
    AdamConfig adam{};
    int patience = 10;
    int anneal_patience = 5;
    double anneal_factor = 0.5;
    bool flips = true;
    std::uint64_t seed = 0;
};

struct ClfEpoch {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_accuracy = 0;
    double lr = 0;
};

struct ClfTrainResult {
    convlstm::ConvLstmClassifier model;
    convlstm::Standardizer standardizer;
    std::vector<ClfEpoch> log;
    int best_epoch = 0;
};

/// Called with the patch ids of every optimiser step's batch.
using BatchObserver = std::function<void(std::span<const std::string>)>;

/// Fits the standardiser on `train`, trains with early stopping on the
/// validation loss, and returns the best-epoch model. A training set with a
/// single class is a DataError.
ClfTrainResult train_classifier(std::span<const LabeledPatch> train, std::span<const LabeledPatch> val,
                                const ClfTrainConfig& config, const BatchObserver& observer = {});

/// Mean cross-entropy and accuracy of `model` on `data`.
std::pair<double, double> evaluate_classifier(const convlstm::ConvLstmClassifier& model,
                                              const convlstm::Standardizer& z, std::span<const LabeledPatch> data,
                                              int batch_size = 16);

void write_log(const std::filesystem::path& path, std::span<const ClfEpoch> log);

}  // namespace cilia::train
