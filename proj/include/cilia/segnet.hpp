#pragma once

// Fully convolutional DenseNet for 4-class per-pixel segmentation.
//
//   initial 3×3 conv
//   down path:  dense block → (skip saved) → transition down (1×1 conv, relu, dropout, 2×2 max pool)
//   bottleneck: dense block (new feature maps only)
//   up path:    transition up (nearest ×2 upsample, 3×3 conv) → concat skip → dense block
//   final 1×1 conv to the class count, softmax over the class axis
//
// A dense-block layer sees the concatenation of the block input and every
// earlier layer's output and adds growth_rate maps (3×3 conv, relu,
// dropout). Down blocks and the last up block pass their input through;
// the bottleneck and inner up blocks emit only their new maps.

#include <map>
#include <string>
#include <vector>

#include "cilia/container_io.hpp"
#include "cilia/tensor.hpp"
#include "cilia/types.hpp"

namespace cilia::segnet {

struct SegNetConfig {
    int growth_rate = 4;
    std::vector<int> down_layers{2, 2};
    int bottleneck_layers = 2;
    std::vector<int> up_layers{2, 2};
    int initial_filters = 8;
    double dropout_rate = 0.0;
    int in_channels = 1;
    int n_classes = kSegClasses;
    /// Optional expected input extents (0 = unchecked at build time).
    int input_height = 0;
    int input_width = 0;

    /// 2 (initial and final convs) + dense-block layers along both paths.
    int total_layers() const;
    int pooling_depth() const { return static_cast<int>(down_layers.size()); }
    /// Closed-form trainable parameter count.
    std::size_t parameter_count() const;
    void validate() const;

    std::map<std::string, std::string> to_map() const;
    static SegNetConfig from_map(const std::map<std::string, std::string>& kv);
    std::uint64_t hash() const;

    /// 109-layer configuration sized to the ~9.4 M-parameter regime.
    static SegNetConfig fc_densenet109();
};

/// Class scores, channel-major: 4×H×W.
using ProbabilityMap = FrameStack;

class SegNet {
public:
    static SegNet build(const SegNetConfig& config, std::uint64_t seed);

    /// x[N, in_channels, H, W] -> probabilities [N, n_classes, H, W].
    ad::Tensor forward(const ad::Tensor& x, bool training = false, Rng* rng = nullptr) const;

    const SegNetConfig& config() const { return config_; }
    std::vector<io::Checkpoint::Entry> named_parameters() const;
    std::vector<ad::Tensor> parameters() const;
    /// Sum of sizes of the constructed parameter tensors.
    std::size_t parameter_count() const;
    /// Number of convolution layers constructed, transitions included.
    int conv_layer_count() const;
    /// Initial conv + dense-block layers + final conv, as in total_layers().
    int layer_count() const;

    io::Checkpoint to_checkpoint(io::Metadata meta = {}) const;
    static SegNet from_checkpoint(const io::Checkpoint& ckpt);

    /// Throws ShapeError unless H and W are multiples of 2^pooling_depth.
    void check_input(std::size_t height, std::size_t width) const;

private:
    struct Conv {
        ad::Tensor weight;
        ad::Tensor bias;
    };

    SegNet() = default;
    ad::Tensor apply(const Conv& c, const ad::Tensor& x, int padding) const;
    ad::Tensor dense_block(const std::vector<Conv>& layers, const ad::Tensor& input, bool keep_input, bool training,
                           Rng* rng) const;
    ad::Tensor drop(const ad::Tensor& x, bool training, Rng* rng) const;

    SegNetConfig config_;
    Conv initial_;
    std::vector<std::vector<Conv>> down_;
    std::vector<Conv> transition_down_;
    std::vector<Conv> bottleneck_;
    std::vector<Conv> transition_up_;
    std::vector<std::vector<Conv>> up_;
    Conv final_;
};

struct Segmentation {
    ProbabilityMap probabilities;
    Mask mask;  // argmax class per pixel, ties to the lowest index
};

/// Segments one frame; probabilities of several frames may be averaged
/// with segment_frames.
Segmentation segment(const SegNet& net, const ImageD& frame);
Segmentation segment_frames(const SegNet& net, const std::vector<ImageD>& frames);

/// Argmax over the class axis, lowest index winning ties.
Mask argmax_mask(const ProbabilityMap& probs);

/// 1 where the label is lateral or top-down cilia.
Mask cilia_mask(const Mask& labels);

}  // namespace cilia::segnet
