#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cilia/rng.hpp"
#include "cilia/types.hpp"

namespace cilia::patches {

inline constexpr int kPatchSize = 11;
inline constexpr std::size_t kPatchFrames = 250;

struct Center {
    std::size_t row = 0;
    std::size_t col = 0;
    auto operator<=>(const Center&) const = default;
};

/// Exact Euclidean distance from each foreground pixel (nonzero) to the
/// nearest background pixel centre; pixels outside the image count as
/// background. Zero on background.
ImageD distance_map(const Mask& binary);

/// Number of centres drawn: min(⌈alpha·mask_area/patch_area⌉, eligible).
std::size_t saturation_count(std::size_t mask_area, int patch, double alpha, std::size_t eligible);

/// Draws centres without replacement with probability proportional to the
/// distance-map value, renormalising over the remaining pixels after every
/// draw. Eligible pixels are foreground pixels whose patch window lies
/// fully inside the frame.
std::vector<Center> sample_centers(const ImageD& dmap, int patch, double alpha, Rng& rng);

/// Per-video RNG seed, independent of processing order.
inline std::uint64_t video_seed(std::uint64_t global_seed, const std::string& video_id) {
    return global_seed ^ stable_hash(video_id);
}

struct PatchSequence {
    FrameStack values;  // frames × patch × patch
    Center center;
    std::string video_id;
    std::string patient_id;
    Label label = Label::unknown;
};

/// Copies frames [start, start+length) of each window centred on `centers`.
std::vector<PatchSequence> extract_patches(const FrameStack& rotation, std::span<const Center> centers, std::size_t start,
                                           std::size_t length, int patch, const std::string& video_id,
                                           const std::string& patient_id, Label label);

void write_patch(const std::filesystem::path& path, const PatchSequence& patch);
PatchSequence read_patch(const std::filesystem::path& path);

/// One row of a patch manifest.
struct PatchRecord {
    std::string patch_id;
    std::filesystem::path file;  // resolved against the manifest directory
    std::string video_id;
    std::string patient_id;
    Label label = Label::unknown;
    int fold = 0;
    Center center;
};

/// Tab-separated: patch_id file video_id patient_id label fold row col.
void write_patch_manifest(const std::filesystem::path& path, std::span<const PatchRecord> rows);
std::vector<PatchRecord> read_patch_manifest(const std::filesystem::path& path);

}  // namespace cilia::patches
