#pragma once

// Segmentation scores, classification metrics and the patch → video →
// patient decision cascade.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cilia/types.hpp"

namespace cilia::metrics {

double pixel_accuracy(const Mask& pred, const Mask& truth);

/// 2|A∩B| / (|A|+|B|) over nonzero pixels. Two empty masks score 1.0 and set
/// *vacuous when given.
double dice(const Mask& pred, const Mask& truth, bool* vacuous = nullptr);

enum class DiceScheme { plain, inverse_frequency };

/// plain: binary Dice of the nonzero pixels. inverse_frequency: per-class
/// Dice over labels 0..n_classes-1, averaged with weights ∝ 1/(truth pixel
/// count); classes absent from the truth get no weight.
double weighted_dice(const Mask& pred, const Mask& truth, DiceScheme scheme, int n_classes = kSegClasses);

struct EvalOptions {
    double threshold = 0.5;
    /// Round each patch probability at the threshold before averaging.
    bool rounded_first = false;
};

struct VideoCall {
    double mean = 0.0;
    bool abnormal = false;
};

/// abnormal iff the mean is >= the threshold.
VideoCall video_call(std::span<const double> patch_probs, const EvalOptions& options = {});

/// Simple majority of binary video calls (0/1); an even split is abnormal.
Label patient_call(std::span<const int> video_calls);

struct ConfusionMatrix {
    long tn = 0, fp = 0, fn = 0, tp = 0;

    void add(Label truth, Label predicted);
    long total() const { return tn + fp + fn + tp; }
    bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassificationReport {
    std::optional<double> accuracy, precision, recall, f1;
};

/// Abnormal is the positive class; a metric whose denominator is zero is
/// left empty.
ClassificationReport classification_report(const ConfusionMatrix& cm);

// ---- prediction tables and decision traces -----------------------------------

struct PatchPrediction {
    std::string patch_id;
    std::string video_id;
    std::string patient_id;
    Label label = Label::unknown;
    int fold = 0;
    double p_abnormal = 0.0;
};

void write_predictions(const std::filesystem::path& path, std::span<const PatchPrediction> rows);
std::vector<PatchPrediction> read_predictions(const std::filesystem::path& path);

struct VideoDecision {
    std::string video_id;
    std::string patient_id;
    std::vector<std::string> patch_ids;
    std::vector<double> patch_probs;
    VideoCall call;
};

struct PatientDecision {
    std::string patient_id;
    Label truth = Label::unknown;
    std::vector<std::string> video_ids;
    int abnormal_votes = 0;
    Label predicted = Label::unknown;
};

struct DecisionTrace {
    std::vector<VideoDecision> videos;      // sorted by (patient, video)
    std::vector<PatientDecision> patients;  // sorted by patient id
    ConfusionMatrix confusion;              // patients with a known truth label
};

DecisionTrace build_trace(std::span<const PatchPrediction> rows, const EvalOptions& options = {});

/// One row per patch, video and patient: level, id, parent, count, value, call.
void write_trace(const std::filesystem::path& path, const DecisionTrace& trace);
/// patient_id, true_label, predicted_label, videos, abnormal_votes.
void write_patient_table(const std::filesystem::path& path, const DecisionTrace& trace);

std::string format_report(const ConfusionMatrix& cm, const ClassificationReport& report);

}  // namespace cilia::metrics
