#pragma once

// Synthetic data for tests, the acceptance suite and the `synth` command.

#include <filesystem>

#include "cilia/container_io.hpp"
#include "cilia/training.hpp"

namespace cilia::synth {

/// Four-class frame: background, an elliptical cell body, a striped band of
/// lateral cilia along one side and a dotted disc of top-down cilia, each
/// class with its own intensity level plus mild noise.
train::SegSample seg_image(std::size_t height, std::size_t width, Rng& rng);

struct PatchSetOptions {
    std::size_t patients = 20;
    std::size_t patches_per_patient = 10;
    std::size_t frames = 50;
    std::size_t size = patches::kPatchSize;
    double noise = 0.3;
};

/// Rotation-like patches. Normal: every pixel oscillates with one shared
/// phase. Abnormal: the same oscillation with an independent random phase per
/// pixel. Patients alternate normal/abnormal; ids are prefix + index.
std::vector<train::LabeledPatch> motion_patches(const PatchSetOptions& options, std::uint64_t seed,
                                                const std::string& prefix = "S");

struct VideoSetOptions {
    std::size_t patients = 6;
    std::size_t videos_per_patient = 2;
    std::size_t frames = 64;
    std::size_t height = 32;
    std::size_t width = 32;
    int folds = 3;
};

/// A clip whose cilia pixels carry a travelling wave (normal) or
/// independently phased flicker (abnormal); the mask labels frame 0.
std::pair<io::VideoClip, Mask> video(Label label, const VideoSetOptions& options, Rng& rng);

/// Writes videos/, masks/ and manifest.tsv under `dir`; returns the manifest.
/// Patients alternate normal/abnormal and are dealt round-robin into folds.
io::DatasetManifest write_dataset(const std::filesystem::path& dir, const VideoSetOptions& options, std::uint64_t seed);

}  // namespace cilia::synth
