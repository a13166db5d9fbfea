#pragma once

// Convolutional LSTM with peephole connections and a binary softmax head.
//
//   f_t = σ(W_f∗x_t + U_f∗h_{t−1} + V_f∘c_{t−1} + b_f)
//   i_t = σ(W_i∗x_t + U_i∗h_{t−1} + V_i∘c_{t−1} + b_i)
//   o_t = σ(W_o∗x_t + U_o∗h_{t−1} + V_o∘c_{t−1} + b_o)
//   c_t = f_t∘c_{t−1} + i_t∘g(W_c∗x_t + U_c∗h_{t−1} + b_c)
//   h_t = o_t∘tanh(c_t)
//
// Convolutions use same padding. g is tanh unless configured otherwise.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cilia/container_io.hpp"
#include "cilia/patch_sampler.hpp"
#include "cilia/tensor.hpp"

namespace cilia::convlstm {

struct CellConfig {
    int input_channels = 1;
    int hidden = 16;
    int kernel = 3;
    int height = patches::kPatchSize;
    int width = patches::kPatchSize;
    ad::Pointwise candidate = ad::Pointwise::tanh;
    double forget_bias_init = 1.0;

    void validate() const;
};

ad::Pointwise parse_activation(const std::string& name);
std::string activation_name(ad::Pointwise fn);

/// h and c are [N, hidden, H, W].
struct CellState {
    ad::Tensor h;
    ad::Tensor c;
};

class ConvLstmCell {
public:
    /// Uniform kernels in ±1/sqrt(fan_in), peepholes in ±0.1, zero biases
    /// except b_f = forget_bias_init.
    ConvLstmCell(const CellConfig& config, Rng& rng);
    /// Every parameter zero.
    explicit ConvLstmCell(const CellConfig& config);

    /// Gate kernels and biases stacked in f, i, o, c order for a single
    /// convolution over concat(x, h).
    struct Fused {
        ad::Tensor kernel;  // [4F, C+F, k, k]
        ad::Tensor bias;    // [4F]
    };
    Fused fuse() const;

    /// Gate activations of one step, for inspection.
    struct Gates {
        ad::Tensor f, i, o, g;
    };

    CellState initial_state(std::size_t batch) const;
    CellState step(const ad::Tensor& x, const CellState& state) const;
    CellState step(const ad::Tensor& x, const CellState& state, const Fused& fused, Gates* gates = nullptr) const;

    const CellConfig& config() const { return config_; }

    // input-to-gate, hidden-to-gate, peephole, bias
    ad::Tensor W_f, W_i, W_o, W_c;
    ad::Tensor U_f, U_i, U_o, U_c;
    ad::Tensor V_f, V_i, V_o;
    ad::Tensor b_f, b_i, b_o, b_c;

    std::vector<io::Checkpoint::Entry> named_parameters() const;

private:
    void check(const ad::Tensor& x, const CellState& state) const;
    CellConfig config_;
};

struct ClassifierConfig {
    CellConfig cell;
    int frames = patches::kPatchFrames;
};

/// z-score applied to every rotation value.
struct Standardizer {
    double mean = 0.0;
    double stddev = 1.0;

    template <typename Range>
    static Standardizer fit(const Range& stacks) {
        double n = 0, s = 0, s2 = 0;
        for (const FrameStack& st : stacks) {
            n += double(st.data().size());
            s += st.data().sum();
            s2 += st.data().square().sum();
        }
        Standardizer z;
        if (n > 0) {
            z.mean = s / n;
            const double var = std::max(0.0, s2 / n - z.mean * z.mean);
            z.stddev = var > 1e-24 ? std::sqrt(var) : 1.0;
        }
        return z;
    }
};

class ConvLstmClassifier {
public:
    static ConvLstmClassifier build(const ClassifierConfig& config, std::uint64_t seed);
    static ConvLstmClassifier zeros(const ClassifierConfig& config);

    /// seq[N, T, H, W] -> probabilities [N, 2] (normal, abnormal) from h_T.
    ad::Tensor forward(const ad::Tensor& seq) const;

    const ClassifierConfig& config() const { return config_; }
    ConvLstmCell& cell() { return cell_; }
    const ConvLstmCell& cell() const { return cell_; }
    ad::Tensor head_weight;  // [hidden, 2]
    ad::Tensor head_bias;    // [2]

    std::vector<io::Checkpoint::Entry> named_parameters() const;
    std::vector<ad::Tensor> parameters() const;

    io::Checkpoint to_checkpoint(const Standardizer& z, io::Metadata meta = {}) const;
    static ConvLstmClassifier from_checkpoint(const io::Checkpoint& ckpt, Standardizer* z = nullptr);

private:
    ConvLstmClassifier(const ClassifierConfig& config, ConvLstmCell cell);
    ClassifierConfig config_;
    ConvLstmCell cell_;
};

/// Standardised [N, T, H, W] batch from patch value stacks.
ad::Tensor make_batch(std::span<const FrameStack* const> stacks, const Standardizer& z);

/// p(abnormal) for one patch.
double classify_patch(const ConvLstmClassifier& model, const patches::PatchSequence& patch, const Standardizer& z);

/// p(abnormal) for each stack, evaluated in parallel; order matches input.
std::vector<double> classify_stacks(const ConvLstmClassifier& model, std::span<const FrameStack> stacks,
                                    const Standardizer& z, int threads = 1);

}  // namespace cilia::convlstm
