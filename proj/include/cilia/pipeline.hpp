#pragma once

// File-to-file pipeline stages shared by the command-line tool and its tests.
//
// Output layout under a stage directory:
//   segnet.ckpt, segnet_log.tsv         segment-train
//   masks/<video_id>.cilt               segment (4-class label masks)
//   segment_metrics.tsv                 segment, for videos with reference masks
//   rotation/<video_id>.cilt            flow (T-1 rotation frames)
//   patches/<patch_id>.cilt, patches.tsv
//   clf_fold<k>.ckpt, clf_fold<k>_log.tsv
//   predictions.tsv                     classify
//   trace.tsv, patients.tsv, metrics.txt evaluate
// Each stage also writes <stage>.config holding the resolved configuration.

#include <filesystem>
#include <iosfwd>
#include <set>
#include <span>
#include <string>

#include "cilia/config.hpp"
#include "cilia/convlstm.hpp"
#include "cilia/errors.hpp"
#include "cilia/metrics.hpp"
#include "cilia/optical_flow.hpp"
#include "cilia/patch_sampler.hpp"
#include "cilia/segnet.hpp"
#include "cilia/training.hpp"

namespace cilia::pipeline {

namespace fs = std::filesystem;

segnet::SegNetConfig segnet_config(const config::Config& cfg);
flow::FlowParams flow_params(const config::Config& cfg);
train::SegTrainConfig seg_train_config(const config::Config& cfg);
train::ClfTrainConfig clf_train_config(const config::Config& cfg);
metrics::EvalOptions eval_options(const config::Config& cfg);

/// Wraps a DataError, FormatError or ShapeError with the stage name.
class StageError : public DataError {
public:
    StageError(std::string stage, const std::string& message)
        : DataError("stage " + stage + ": " + message), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct Context {
    config::Config cfg;
    std::ostream* log = nullptr;  // progress messages; null for silence
};

void segment_train(const Context& ctx, const fs::path& manifest, const fs::path& out_dir);
void segment(const Context& ctx, const fs::path& manifest, const fs::path& checkpoint, const fs::path& out_dir);
void flow(const Context& ctx, const fs::path& manifest, const fs::path& out_dir);
void extract_patches(const Context& ctx, const fs::path& manifest, const fs::path& masks_dir,
                     const fs::path& rotation_dir, const fs::path& out_dir);
/// Patients held out from the training folds for early stopping: per
/// label, round(n·fraction) of the n patients (at least 1, at most n−1),
/// chosen by a seeded shuffle. Labels with a single patient contribute none.
std::set<std::string> validation_patients(std::span<const patches::PatchRecord> rows, double fraction,
                                          std::uint64_t seed);
/// One classifier per fold k, trained on the other folds minus the
/// validation patients; fold k itself is never seen during training.
void clf_train(const Context& ctx, const fs::path& patch_manifest, const fs::path& out_dir);
void classify(const Context& ctx, const fs::path& patch_manifest, const fs::path& clf_dir, const fs::path& out_path);
/// Returns the human-readable summary that is also written to metrics.txt.
std::string evaluate(const Context& ctx, const fs::path& predictions, const fs::path& out_dir);

struct PipelineOptions {
    fs::path manifest;
    fs::path out_dir;
    fs::path seg_checkpoint;  // empty with train: out_dir/segnet.ckpt
    fs::path clf_dir;         // empty with train: out_dir
    bool train = false;       // run segment-train and clf-train as part of the chain
};

/// segment → flow → patches → classify → evaluate, with optional training.
std::string run_pipeline(const Context& ctx, const PipelineOptions& options);

}  // namespace cilia::pipeline
