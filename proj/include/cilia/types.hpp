#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "cilia/errors.hpp"

namespace cilia {

/// Row-major 2-D raster; rows index y, columns index x.
template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageD = Image<double>;
/// Per-pixel labels or binary flags.
using Mask = Image<std::uint8_t>;

/// T×H×W stack of frames stored contiguously, frame-major.
template <typename Scalar>
class Stack {
public:
    using FrameMap = Eigen::Map<Image<Scalar>>;
    using ConstFrameMap = Eigen::Map<const Image<Scalar>>;

    Stack() = default;
    Stack(std::size_t frames, std::size_t rows, std::size_t cols, Scalar fill = Scalar(0))
        : frames_(frames), rows_(rows), cols_(cols),
          data_(Eigen::Array<Scalar, Eigen::Dynamic, 1>::Constant(static_cast<Eigen::Index>(frames * rows * cols), fill)) {}

    std::size_t frames() const { return frames_; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t frame_size() const { return rows_ * cols_; }

    FrameMap frame(std::size_t t) {
        return FrameMap(data_.data() + t * frame_size(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
    }
    ConstFrameMap frame(std::size_t t) const {
        return ConstFrameMap(data_.data() + t * frame_size(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
    }

    Scalar& operator()(std::size_t t, std::size_t r, std::size_t c) { return data_[index(t, r, c)]; }
    Scalar operator()(std::size_t t, std::size_t r, std::size_t c) const { return data_[index(t, r, c)]; }

    Eigen::Array<Scalar, Eigen::Dynamic, 1>& data() { return data_; }
    const Eigen::Array<Scalar, Eigen::Dynamic, 1>& data() const { return data_; }

    bool operator==(const Stack& o) const {
        return frames_ == o.frames_ && rows_ == o.rows_ && cols_ == o.cols_ && (data_ == o.data_).all();
    }

private:
    Eigen::Index index(std::size_t t, std::size_t r, std::size_t c) const {
        return static_cast<Eigen::Index>((t * rows_ + r) * cols_ + c);
    }

    std::size_t frames_ = 0, rows_ = 0, cols_ = 0;
    Eigen::Array<Scalar, Eigen::Dynamic, 1> data_;
};

using FrameStack = Stack<double>;

/// Patient-level ciliary motion call; abnormal is the positive class.
enum class Label : int { normal = 0, abnormal = 1, unknown = -1 };

inline std::string_view to_string(Label l) {
    switch (l) {
        case Label::normal: return "normal";
        case Label::abnormal: return "abnormal";
        case Label::unknown: return "unknown";
    }
    return "unknown";
}

inline Label parse_label(std::string_view s) {
    if (s == "normal" || s == "0") return Label::normal;
    if (s == "abnormal" || s == "1") return Label::abnormal;
    if (s == "unknown" || s == "?" || s == "-") return Label::unknown;
    throw FormatError("unrecognised label '" + std::string(s) + "' (expected normal|abnormal|unknown)");
}

/// The four segmentation classes, in probability-channel order.
enum class SegClass : std::uint8_t { lateral_cilia = 0, topdown_cilia = 1, cell_body = 2, background = 3 };
inline constexpr int kSegClasses = 4;

}  // namespace cilia
