#pragma once

// On-disk formats. All integers and floats are little-endian.
//
// Tensor container ("CILT1"):
//   5 bytes  magic "CILT1"
//   u8       dtype code (0 = f32, 1 = f64, 2 = u8)
//   u8       rank (<= 5)
//   u32×rank extents (each >= 1)
//   payload  product(extents) elements, row-major
//   optional metadata block:
//     4 bytes "META", u32 byte length, UTF-8 "key=value\n" lines sorted by key
//
// Checkpoint ("CILC1"):
//   5 bytes  magic "CILC1"
//   u32      entry count
//   per entry: u32 name length, name bytes, u32 record length, CILT1 record (f64, no metadata)
//   metadata block (always present, possibly empty)

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cilia/tensor.hpp"
#include "cilia/types.hpp"

namespace cilia::io {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

std::size_t dtype_size(DType d);

using Metadata = std::map<std::string, std::string>;

struct TensorRecord {
    DType dtype = DType::f64;
    std::vector<std::uint32_t> extents;
    std::vector<double> values;  // u8 payloads hold 0..255, f32 payloads the float values
    Metadata meta;

    std::size_t element_count() const;
};

std::vector<std::uint8_t> encode(const TensorRecord& record);
TensorRecord decode(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void write_tensor(const std::filesystem::path& path, const TensorRecord& record);
TensorRecord read_tensor(const std::filesystem::path& path);

// ---- video clips -----------------------------------------------------------

/// T×H×W grayscale clip. u8-stored clips are held as intensity/255.
struct VideoClip {
    FrameStack frames;
    double fps = 200.0;
    std::string video_id;
    std::string patient_id;
    DType storage = DType::u8;
};

void validate(const VideoClip& clip);
void write_video(const VideoClip& clip, const std::filesystem::path& path);
VideoClip read_video(const std::filesystem::path& path);

// ---- rasters ---------------------------------------------------------------

void write_mask(const std::filesystem::path& path, const Mask& mask, const Metadata& meta = {});
Mask read_mask(const std::filesystem::path& path, Metadata* meta = nullptr);

/// Binary (P5) or ASCII (P2) PGM, 8- or 16-bit, scaled to [0,1] by maxval.
ImageD read_pgm(const std::filesystem::path& path);

TensorRecord to_record(const FrameStack& stack, Metadata meta = {});
FrameStack stack_from_record(const TensorRecord& record);

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
    struct Entry {
        std::string name;
        ad::Tensor tensor;
    };
    std::vector<Entry> entries;
    Metadata meta;

    const ad::Tensor& get(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- dataset manifest ------------------------------------------------------

struct PatientEntry {
    std::string patient_id;
    Label label = Label::unknown;
    int fold = 0;
    std::vector<std::filesystem::path> videos;  // resolved against the manifest directory
    std::vector<std::filesystem::path> masks;   // empty, or one per video
};

struct DatasetManifest {
    std::vector<PatientEntry> patients;

    const PatientEntry* find(const std::string& patient_id) const;
    std::vector<int> folds() const;
};

/// Tab-separated, one patient per line:
///   patient_id  label  fold  video[,video...]  [mask[,mask...] | -]
/// '#' starts a comment line. Relative paths resolve against the manifest's
/// directory. A patient id may appear once; a repeat in a different fold is
/// reported as a split across folds.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths = true);
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir, bool check_paths);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Video id derived from a clip path (file stem).
std::string video_id_from_path(const std::filesystem::path& p);

}  // namespace cilia::io
