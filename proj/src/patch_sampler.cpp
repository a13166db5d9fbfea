#include "cilia/patch_sampler.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cilia/container_io.hpp"

namespace cilia::patches {

namespace {

// Felzenszwalb–Huttenlocher lower envelope of parabolas: d(q) = min_p (q−p)² + f(p).
void squared_distance_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                         std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[std::size_t(q)] == inf) continue;
        while (k >= 0) {
            const int p = v[std::size_t(k)];
            const double s = ((f[std::size_t(q)] + double(q) * q) - (f[std::size_t(p)] + double(p) * p)) / (2.0 * (q - p));
            if (s <= z[std::size_t(k)]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[std::size_t(k)] = q;
        z[std::size_t(k)] = k == 0 ? -inf : ((f[std::size_t(q)] + double(q) * q) -
                                           (f[std::size_t(v[std::size_t(k - 1)])] + double(v[std::size_t(k - 1)]) * v[std::size_t(k - 1)])) /
                                              (2.0 * (q - v[std::size_t(k - 1)]));
        z[std::size_t(k + 1)] = inf;
    }
    if (k < 0) {
        std::fill(d.begin(), d.end(), inf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[std::size_t(j + 1)] < q) ++j;
        const int p = v[std::size_t(j)];
        d[std::size_t(q)] = double(q - p) * (q - p) + f[std::size_t(p)];
    }
}

std::string label_text(Label l) { return std::string(to_string(l)); }

}  // namespace

ImageD distance_map(const Mask& binary) {
    const Eigen::Index H = binary.rows(), W = binary.cols();
    const Eigen::Index PH = H + 2, PW = W + 2;
    constexpr double inf = std::numeric_limits<double>::infinity();
    // One ring of background around the image stands in for everything outside it.
    ImageD sq(PH, PW);
    for (Eigen::Index r = 0; r < PH; ++r)
        for (Eigen::Index c = 0; c < PW; ++c) {
            const bool inside = r >= 1 && r <= H && c >= 1 && c <= W;
            sq(r, c) = inside && binary(r - 1, c - 1) != 0 ? inf : 0.0;
        }
    const std::size_t len = std::size_t(std::max(PH, PW));
    std::vector<double> f(len), d(len), z(len + 1);
    std::vector<int> v(len);
    for (Eigen::Index c = 0; c < PW; ++c) {
        f.resize(std::size_t(PH));
        d.resize(std::size_t(PH));
        for (Eigen::Index r = 0; r < PH; ++r) f[std::size_t(r)] = sq(r, c);
        squared_distance_1d(f, d, v, z);
        for (Eigen::Index r = 0; r < PH; ++r) sq(r, c) = d[std::size_t(r)];
    }
    for (Eigen::Index r = 0; r < PH; ++r) {
        f.resize(std::size_t(PW));
        d.resize(std::size_t(PW));
        for (Eigen::Index c = 0; c < PW; ++c) f[std::size_t(c)] = sq(r, c);
        squared_distance_1d(f, d, v, z);
        for (Eigen::Index c = 0; c < PW; ++c) sq(r, c) = d[std::size_t(c)];
    }
    return sq.block(1, 1, H, W).sqrt();
}

std::size_t saturation_count(std::size_t mask_area, int patch, double alpha, std::size_t eligible) {
    if (!(alpha > 0.0)) throw ConfigError("patch sampling alpha must be > 0");
    if (patch < 1) throw ConfigError("patch size must be >= 1");
    const double area = double(patch) * patch;
    const auto wanted = static_cast<std::size_t>(std::ceil(alpha * double(mask_area) / area));
    return std::min(wanted, eligible);
}

std::vector<Center> sample_centers(const ImageD& dmap, int patch, double alpha, Rng& rng) {
    const auto half = static_cast<Eigen::Index>(patch / 2);
    std::vector<Center> eligible;
    std::vector<double> weight;
    std::size_t mask_area = 0;
    for (Eigen::Index r = 0; r < dmap.rows(); ++r)
        for (Eigen::Index c = 0; c < dmap.cols(); ++c) {
            if (!(dmap(r, c) > 0.0)) continue;
            ++mask_area;
            if (r - half < 0 || c - half < 0 || r - half + patch > dmap.rows() || c - half + patch > dmap.cols()) continue;
            eligible.push_back({std::size_t(r), std::size_t(c)});
            weight.push_back(dmap(r, c));
        }
    const std::size_t count = saturation_count(mask_area, patch, alpha, eligible.size());
    std::vector<Center> out;
    out.reserve(count);
    double total = 0.0;
    for (double w : weight) total += w;
    for (std::size_t k = 0; k < count; ++k) {
        const double target = rng.uniform() * total;
        double acc = 0.0;
        std::size_t pick = weight.size();
        std::size_t last_positive = weight.size();
        for (std::size_t i = 0; i < weight.size(); ++i) {
            if (weight[i] <= 0.0) continue;
            last_positive = i;
            acc += weight[i];
            if (target < acc) {
                pick = i;
                break;
            }
        }
        if (pick == weight.size()) pick = last_positive;  // rounding at the top end
        out.push_back(eligible[pick]);
        weight[pick] = 0.0;
        total = 0.0;
        for (double w : weight) total += w;
    }
    return out;
}

std::vector<PatchSequence> extract_patches(const FrameStack& rotation, std::span<const Center> centers, std::size_t start,
                                           std::size_t length, int patch, const std::string& video_id,
                                           const std::string& patient_id, Label label) {
    if (rotation.frames() < start + length) {
        throw DataError("insufficient frames for patch extraction: need " + std::to_string(start + length) + ", have " +
                        std::to_string(rotation.frames()));
    }
    const auto p = std::size_t(patch), half = std::size_t(patch / 2);
    std::vector<PatchSequence> out;
    out.reserve(centers.size());
    for (const auto& c : centers) {
        if (c.row < half || c.col < half || c.row - half + p > rotation.rows() || c.col - half + p > rotation.cols()) {
            throw ShapeError("patch window centred at (" + std::to_string(c.row) + "," + std::to_string(c.col) +
                             ") leaves the " + std::to_string(rotation.rows()) + "x" + std::to_string(rotation.cols()) + " frame");
        }
        PatchSequence s{FrameStack(length, p, p), c, video_id, patient_id, label};
        for (std::size_t t = 0; t < length; ++t)
            s.values.frame(t) = rotation.frame(start + t).block(Eigen::Index(c.row - half), Eigen::Index(c.col - half), Eigen::Index(p), Eigen::Index(p));
        out.push_back(std::move(s));
    }
    return out;
}

void write_patch(const std::filesystem::path& path, const PatchSequence& patch) {
    io::write_tensor(path, io::to_record(patch.values, {{"kind", "patch"},
                                                        {"video_id", patch.video_id},
                                                        {"patient_id", patch.patient_id},
                                                        {"label", label_text(patch.label)},
                                                        {"row", std::to_string(patch.center.row)},
                                                        {"col", std::to_string(patch.center.col)}}));
}

PatchSequence read_patch(const std::filesystem::path& path) {
    const auto rec = io::read_tensor(path);
    PatchSequence p;
    p.values = io::stack_from_record(rec);
    auto get = [&](const char* key) -> std::string {
        auto it = rec.meta.find(key);
        return it == rec.meta.end() ? std::string() : it->second;
    };
    p.video_id = get("video_id");
    p.patient_id = get("patient_id");
    const auto label = get("label");
    p.label = label.empty() ? Label::unknown : parse_label(label);
    if (!get("row").empty()) p.center.row = std::stoul(get("row"));
    if (!get("col").empty()) p.center.col = std::stoul(get("col"));
    return p;
}

void write_patch_manifest(const std::filesystem::path& path, std::span<const PatchRecord> rows) {
    std::ostringstream out;
    out << "# patch_id\tfile\tvideo_id\tpatient_id\tlabel\tfold\trow\tcol\n";
    const auto base = path.parent_path();
    for (const auto& r : rows) {
        out << r.patch_id << '\t' << r.file.lexically_relative(base).generic_string() << '\t' << r.video_id << '\t'
            << r.patient_id << '\t' << to_string(r.label) << '\t' << r.fold << '\t' << r.center.row << '\t'
            << r.center.col << '\n';
    }
    const std::string s = out.str();
    io::write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<PatchRecord> read_patch_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open patch manifest " + path.string());
    std::vector<PatchRecord> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<std::string> cols;
        std::string col;
        while (std::getline(ls, col, '\t')) cols.push_back(col);
        if (cols.size() != 8) {
            throw FormatError(path.string() + " line " + std::to_string(lineno) + ": expected 8 columns, got " +
                              std::to_string(cols.size()));
        }
        PatchRecord r;
        r.patch_id = cols[0];
        r.file = path.parent_path() / cols[1];
        r.video_id = cols[2];
        r.patient_id = cols[3];
        r.label = parse_label(cols[4]);
        try {
            r.fold = std::stoi(cols[5]);
            r.center = {std::stoul(cols[6]), std::stoul(cols[7])};
        } catch (const std::exception&) {
            throw FormatError(path.string() + " line " + std::to_string(lineno) + ": bad numeric column");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace cilia::patches
