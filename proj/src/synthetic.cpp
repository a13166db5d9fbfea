#include "cilia/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cilia::synth {

namespace {

constexpr double kLevel[kSegClasses] = {0.75, 0.95, 0.45, 0.1};

struct Layout {
    double cy, cx, ry, rx;
    double dy, dx, dr;   // top-down disc
    int side;            // lateral band on the left (-1) or right (+1)
};

Layout random_layout(std::size_t H, std::size_t W, Rng& rng) {
    Layout l;
    l.cy = double(H) / 2 + rng.uniform(-1.5, 1.5);
    l.cx = double(W) / 2 + rng.uniform(-1.5, 1.5);
    l.ry = double(H) * rng.uniform(0.28, 0.36);
    l.rx = double(W) * rng.uniform(0.22, 0.30);
    l.dr = std::min(l.ry, l.rx) * rng.uniform(0.4, 0.5);
    l.dy = l.cy + rng.uniform(-1.0, 1.0);
    l.dx = l.cx + rng.uniform(-1.0, 1.0);
    l.side = rng.coin() ? 1 : -1;
    return l;
}

SegClass classify(const Layout& l, double r, double c) {
    const double e = std::hypot((r - l.cy) / l.ry, (c - l.cx) / l.rx);
    if (std::hypot(r - l.dy, c - l.dx) <= l.dr) return SegClass::topdown_cilia;
    if (e <= 1.0) return SegClass::cell_body;
    if (e <= 1.5 && (c - l.cx) * l.side > 0) return SegClass::lateral_cilia;
    return SegClass::background;
}

double texture(SegClass k, std::size_t r, std::size_t c) {
    switch (k) {
        case SegClass::lateral_cilia: return 0.04 * std::sin(2.0 * double(r));
        case SegClass::topdown_cilia: return (r + c) % 2 ? -0.03 : 0.03;
        default: return 0.0;
    }
}

}  // namespace

train::SegSample seg_image(std::size_t height, std::size_t width, Rng& rng) {
    const Layout l = random_layout(height, width, rng);
    train::SegSample s{ImageD(Eigen::Index(height), Eigen::Index(width)), Mask(Eigen::Index(height), Eigen::Index(width))};
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) {
            const SegClass k = classify(l, double(r), double(c));
            s.mask(Eigen::Index(r), Eigen::Index(c)) = std::uint8_t(k);
            s.image(Eigen::Index(r), Eigen::Index(c)) =
                std::clamp(kLevel[int(k)] + texture(k, r, c) + 0.02 * rng.normal(), 0.0, 1.0);
        }
    return s;
}

std::vector<train::LabeledPatch> motion_patches(const PatchSetOptions& o, std::uint64_t seed, const std::string& prefix) {
    Rng rng(seed);
    std::vector<train::LabeledPatch> out;
    for (std::size_t p = 0; p < o.patients; ++p) {
        const Label label = p % 2 == 0 ? Label::normal : Label::abnormal;
        const std::string patient = prefix + "P" + std::to_string(p);
        for (std::size_t k = 0; k < o.patches_per_patient; ++k) {
            const double amp = rng.uniform(0.5, 1.5);
            const double omega = 2 * std::numbers::pi * rng.uniform(0.05, 0.15);
            const double phase = rng.uniform(0, 2 * std::numbers::pi);
            std::vector<double> phases(o.size * o.size, phase);
            if (label == Label::abnormal)
                for (auto& ph : phases) ph = rng.uniform(0, 2 * std::numbers::pi);
            FrameStack v(o.frames, o.size, o.size);
            for (std::size_t t = 0; t < o.frames; ++t)
                for (std::size_t i = 0; i < o.size * o.size; ++i)
                    v(t, i / o.size, i % o.size) = amp * std::sin(omega * double(t) + phases[i]) + o.noise * rng.normal();
            out.push_back({patient + "_" + std::to_string(k), patient, std::move(v), label});
        }
    }
    return out;
}

std::pair<io::VideoClip, Mask> video(Label label, const VideoSetOptions& o, Rng& rng) {
    const Layout l = random_layout(o.height, o.width, rng);
    const std::size_t HW = o.height * o.width;
    Mask mask(Eigen::Index(o.height), Eigen::Index(o.width));
    std::vector<double> base(HW), phase(HW);
    const double omega = 2 * std::numbers::pi * rng.uniform(0.08, 0.12);
    for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t r = i / o.width, c = i % o.width;
        const SegClass k = classify(l, double(r), double(c));
        mask(Eigen::Index(r), Eigen::Index(c)) = std::uint8_t(k);
        base[i] = kLevel[int(k)] + texture(k, r, c);
        // travelling wave across columns for coherent beating
        phase[i] = label == Label::normal ? 0.6 * double(c) : rng.uniform(0, 2 * std::numbers::pi);
    }
    io::VideoClip clip;
    clip.frames = FrameStack(o.frames, o.height, o.width);
    for (std::size_t t = 0; t < o.frames; ++t)
        for (std::size_t i = 0; i < HW; ++i) {
            const auto k = SegClass(mask.data()[i]);
            double v = base[i] + 0.01 * rng.normal();
            if (k == SegClass::lateral_cilia || k == SegClass::topdown_cilia) v += 0.08 * std::sin(omega * double(t) - phase[i]);
            clip.frames.data()[Eigen::Index(t * HW + i)] = std::clamp(v, 0.0, 1.0);
        }
    return {std::move(clip), std::move(mask)};
}

io::DatasetManifest write_dataset(const std::filesystem::path& dir, const VideoSetOptions& o, std::uint64_t seed) {
    if (o.folds < 1) throw ConfigError("synth: folds must be >= 1");
    io::DatasetManifest m;
    for (std::size_t p = 0; p < o.patients; ++p) {
        io::PatientEntry e;
        e.patient_id = "P" + std::string(p < 10 ? "0" : "") + std::to_string(p);
        e.label = p % 2 == 0 ? Label::normal : Label::abnormal;
        e.fold = int(p / 2) % o.folds;
        Rng rng(seed ^ stable_hash(e.patient_id));
        for (std::size_t v = 0; v < o.videos_per_patient; ++v) {
            auto [clip, mask] = video(e.label, o, rng);
            clip.video_id = e.patient_id + "_v" + std::to_string(v);
            clip.patient_id = e.patient_id;
            const auto vpath = dir / "videos" / (clip.video_id + ".cilt");
            const auto mpath = dir / "masks" / (clip.video_id + ".cilt");
            io::write_video(clip, vpath);
            io::write_mask(mpath, mask, {{"video_id", clip.video_id}});
            e.videos.push_back(vpath);
            e.masks.push_back(mpath);
        }
        m.patients.push_back(std::move(e));
    }
    io::write_manifest(m, dir / "manifest.tsv");
    return m;
}

}  // namespace cilia::synth
