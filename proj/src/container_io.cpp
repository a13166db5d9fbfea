#include "cilia/container_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace cilia::io {

namespace {

constexpr char kTensorMagic[5] = {'C', 'I', 'L', 'T', '1'};
constexpr char kCheckpointMagic[5] = {'C', 'I', 'L', 'C', '1'};
constexpr char kMetaMagic[4] = {'M', 'E', 'T', 'A'};
constexpr std::size_t kMaxRank = 5;

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    bool at_end() const { return pos_ == in_.size(); }
    std::size_t remaining() const { return in_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n) {
            throw FormatError(std::string("truncated payload: ") + what + " needs " + std::to_string(n) + " bytes, " +
                              std::to_string(remaining()) + " available");
        }
    }
    std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = in_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const char* what) { return bytes(1, what)[0]; }
    std::uint32_t u32(const char* what) {
        auto b = bytes(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[std::size_t(i)]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        auto b = bytes(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[std::size_t(i)]) << (8 * i);
        return v;
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

void write_meta(Writer& w, const Metadata& meta) {
    std::string text;
    for (const auto& [k, v] : meta) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw FormatError("metadata key/value may not contain '=' (keys) or newlines: " + k);
        }
        text += k + "=" + v + "\n";
    }
    w.bytes(kMetaMagic, 4);
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());
}

Metadata read_meta(Reader& r) {
    auto magic = r.bytes(4, "metadata magic");
    if (std::memcmp(magic.data(), kMetaMagic, 4) != 0) throw FormatError("bad magic: expected metadata block");
    const auto len = r.u32("metadata length");
    auto body = r.bytes(len, "metadata body");
    Metadata meta;
    std::istringstream in(std::string(body.begin(), body.end()));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("malformed metadata line '" + line + "'");
        meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return meta;
}

void encode_body(Writer& w, const TensorRecord& rec) {
    if (rec.extents.size() > kMaxRank) throw FormatError("rank " + std::to_string(rec.extents.size()) + " exceeds 5");
    for (auto e : rec.extents)
        if (e == 0) throw FormatError("tensor extents must be positive");
    if (rec.values.size() != rec.element_count()) {
        throw FormatError("payload holds " + std::to_string(rec.values.size()) + " values, extents need " +
                          std::to_string(rec.element_count()));
    }
    w.bytes(kTensorMagic, 5);
    w.u8(static_cast<std::uint8_t>(rec.dtype));
    w.u8(static_cast<std::uint8_t>(rec.extents.size()));
    for (auto e : rec.extents) w.u32(e);
    for (double v : rec.values) {
        switch (rec.dtype) {
            case DType::f32: w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
            case DType::f64: w.u64(std::bit_cast<std::uint64_t>(v)); break;
            case DType::u8: {
                if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) {
                    throw FormatError("value " + std::to_string(v) + " not representable as u8");
                }
                w.u8(static_cast<std::uint8_t>(v));
                break;
            }
        }
    }
}

TensorRecord decode_body(Reader& r) {
    auto magic = r.bytes(5, "magic");
    if (std::memcmp(magic.data(), kTensorMagic, 5) != 0) throw FormatError("bad magic: not a CILT1 tensor container");
    TensorRecord rec;
    const auto code = r.u8("dtype");
    if (code > 2) throw FormatError("unsupported dtype code " + std::to_string(code));
    rec.dtype = static_cast<DType>(code);
    const auto rank = r.u8("rank");
    if (rank > kMaxRank) throw FormatError("rank " + std::to_string(rank) + " exceeds 5");
    for (int i = 0; i < rank; ++i) {
        rec.extents.push_back(r.u32("extent"));
        if (rec.extents.back() == 0) throw FormatError("tensor extents must be positive");
    }
    const std::size_t n = rec.element_count();
    r.need(n * dtype_size(rec.dtype), "tensor payload");
    rec.values.resize(n);
    for (auto& v : rec.values) {
        switch (rec.dtype) {
            case DType::f32: v = std::bit_cast<float>(r.u32("f32")); break;
            case DType::f64: v = std::bit_cast<double>(r.u64("f64")); break;
            case DType::u8: v = r.u8("u8"); break;
        }
    }
    return rec;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \r\t");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \r\t") - b + 1);
}

}  // namespace

std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw FormatError("unsupported dtype");
}

std::size_t TensorRecord::element_count() const {
    std::size_t n = 1;
    for (auto e : extents) n *= e;
    return n;
}

std::vector<std::uint8_t> encode(const TensorRecord& record) {
    Writer w;
    encode_body(w, record);
    if (!record.meta.empty()) write_meta(w, record.meta);
    return w.take();
}

TensorRecord decode(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    TensorRecord rec = decode_body(r);
    if (!r.at_end()) rec.meta = read_meta(r);
    if (!r.at_end()) throw FormatError("trailing bytes after tensor container");
    return rec;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

void write_tensor(const std::filesystem::path& path, const TensorRecord& record) { write_bytes(path, encode(record)); }

TensorRecord read_tensor(const std::filesystem::path& path) {
    try {
        return decode(read_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---- video -------------------------------------------------------------------

void validate(const VideoClip& clip) {
    if (clip.frames.frames() < 2) {
        throw DataError("video clip needs T >= 2 frames, got " + std::to_string(clip.frames.frames()));
    }
    if (clip.frames.rows() < 16 || clip.frames.cols() < 16) {
        throw DataError("video frames must be at least 16x16, got " + std::to_string(clip.frames.rows()) + "x" +
                        std::to_string(clip.frames.cols()));
    }
    if (!(clip.fps > 0.0)) throw DataError("video fps must be positive");
}

void write_video(const VideoClip& clip, const std::filesystem::path& path) {
    validate(clip);
    if (clip.storage == DType::f32) throw FormatError("unsupported dtype for video: f32");
    TensorRecord rec;
    rec.dtype = clip.storage;
    rec.extents = {static_cast<std::uint32_t>(clip.frames.frames()), static_cast<std::uint32_t>(clip.frames.rows()),
                   static_cast<std::uint32_t>(clip.frames.cols())};
    rec.values.assign(clip.frames.data().begin(), clip.frames.data().end());
    if (clip.storage == DType::u8) {
        for (auto& v : rec.values) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    }
    std::ostringstream fps;
    fps.precision(17);
    fps << clip.fps;
    rec.meta = {{"fps", fps.str()}, {"kind", "video"}, {"patient_id", clip.patient_id}, {"video_id", clip.video_id}};
    write_tensor(path, rec);
}

VideoClip read_video(const std::filesystem::path& path) {
    TensorRecord rec = read_tensor(path);
    if (rec.dtype == DType::f32) throw FormatError(path.string() + ": unsupported dtype for video: f32");
    if (rec.extents.size() != 3) throw FormatError(path.string() + ": video must be rank 3 (T,H,W)");
    VideoClip clip;
    clip.storage = rec.dtype;
    clip.frames = FrameStack(rec.extents[0], rec.extents[1], rec.extents[2]);
    const double scale = rec.dtype == DType::u8 ? 255.0 : 1.0;
    for (std::size_t i = 0; i < rec.values.size(); ++i) clip.frames.data()[Eigen::Index(i)] = rec.values[i] / scale;
    if (auto it = rec.meta.find("fps"); it != rec.meta.end()) clip.fps = std::stod(it->second);
    if (auto it = rec.meta.find("video_id"); it != rec.meta.end()) clip.video_id = it->second;
    if (auto it = rec.meta.find("patient_id"); it != rec.meta.end()) clip.patient_id = it->second;
    if (clip.video_id.empty()) clip.video_id = video_id_from_path(path);
    validate(clip);
    return clip;
}

// ---- rasters ---------------------------------------------------------------

void write_mask(const std::filesystem::path& path, const Mask& mask, const Metadata& meta) {
    TensorRecord rec;
    rec.dtype = DType::u8;
    rec.extents = {static_cast<std::uint32_t>(mask.rows()), static_cast<std::uint32_t>(mask.cols())};
    rec.values.reserve(std::size_t(mask.size()));
    for (Eigen::Index r = 0; r < mask.rows(); ++r)
        for (Eigen::Index c = 0; c < mask.cols(); ++c) rec.values.push_back(mask(r, c));
    rec.meta = meta;
    write_tensor(path, rec);
}

Mask read_mask(const std::filesystem::path& path, Metadata* meta) {
    TensorRecord rec = read_tensor(path);
    if (rec.dtype != DType::u8 || rec.extents.size() != 2) {
        throw FormatError(path.string() + ": mask must be a rank-2 u8 container");
    }
    Mask m(rec.extents[0], rec.extents[1]);
    for (std::size_t i = 0; i < rec.values.size(); ++i) m(Eigen::Index(i / rec.extents[1]), Eigen::Index(i % rec.extents[1])) = std::uint8_t(rec.values[i]);
    if (meta) *meta = rec.meta;
    return m;
}

TensorRecord to_record(const FrameStack& stack, Metadata meta) {
    TensorRecord rec;
    rec.dtype = DType::f64;
    rec.extents = {static_cast<std::uint32_t>(stack.frames()), static_cast<std::uint32_t>(stack.rows()),
                   static_cast<std::uint32_t>(stack.cols())};
    rec.values.assign(stack.data().begin(), stack.data().end());
    rec.meta = std::move(meta);
    return rec;
}

FrameStack stack_from_record(const TensorRecord& rec) {
    if (rec.extents.size() != 3) throw FormatError("frame stack must be rank 3");
    FrameStack s(rec.extents[0], rec.extents[1], rec.extents[2]);
    for (std::size_t i = 0; i < rec.values.size(); ++i) s.data()[Eigen::Index(i)] = rec.values[i];
    return s;
}

// ---- checkpoints -------------------------------------------------------------

const ad::Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return e.tensor;
    throw FormatError("checkpoint has no tensor named '" + name + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    Writer w;
    w.bytes(kCheckpointMagic, 5);
    w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
    for (const auto& e : ckpt.entries) {
        TensorRecord rec;
        rec.dtype = DType::f64;
        for (auto d : e.tensor.shape()) rec.extents.push_back(static_cast<std::uint32_t>(d));
        rec.values.assign(e.tensor.value().begin(), e.tensor.value().end());
        Writer body;
        encode_body(body, rec);
        auto bytes = body.take();
        w.u32(static_cast<std::uint32_t>(e.name.size()));
        w.bytes(e.name.data(), e.name.size());
        w.u32(static_cast<std::uint32_t>(bytes.size()));
        w.bytes(bytes.data(), bytes.size());
    }
    write_meta(w, ckpt.meta);
    write_bytes(path, w.take());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
    const auto raw = read_bytes(path);
    try {
        Reader r(raw);
        auto magic = r.bytes(5, "magic");
        if (std::memcmp(magic.data(), kCheckpointMagic, 5) != 0) throw FormatError("bad magic: not a CILC1 checkpoint");
        Checkpoint ckpt;
        const auto count = r.u32("entry count");
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto name_len = r.u32("name length");
            auto name = r.bytes(name_len, "name");
            const auto len = r.u32("record length");
            Reader body(r.bytes(len, "record"));
            TensorRecord rec = decode_body(body);
            ad::Shape shape(rec.extents.begin(), rec.extents.end());
            ckpt.entries.push_back({std::string(name.begin(), name.end()), ad::Tensor::from(shape, std::span<const double>(rec.values))});
        }
        ckpt.meta = read_meta(r);
        if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
        return ckpt;
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---- manifest ---------------------------------------------------------------

const PatientEntry* DatasetManifest::find(const std::string& patient_id) const {
    for (const auto& p : patients)
        if (p.patient_id == patient_id) return &p;
    return nullptr;
}

std::vector<int> DatasetManifest::folds() const {
    std::set<int> s;
    for (const auto& p : patients) s.insert(p.fold);
    return {s.begin(), s.end()};
}

std::string video_id_from_path(const std::filesystem::path& p) { return p.stem().string(); }

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir, bool check_paths) {
    DatasetManifest m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto resolve = [&](const std::string& s) {
        std::filesystem::path p(s);
        return p.is_absolute() ? p : base_dir / p;
    };
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = "manifest line " + std::to_string(lineno) + ": ";
        if (trim(line).empty() || trim(line)[0] == '#') continue;
        auto cols = split(line, '\t');
        for (auto& c : cols) c = trim(c);
        if (cols.size() < 4 || cols.size() > 5) {
            throw FormatError(where + "expected 4 or 5 tab-separated columns, got " + std::to_string(cols.size()));
        }
        PatientEntry e;
        e.patient_id = cols[0];
        if (e.patient_id.empty()) throw FormatError(where + "empty patient id");
        e.label = parse_label(cols[1]);
        try {
            std::size_t used = 0;
            e.fold = std::stoi(cols[2], &used);
            if (used != cols[2].size() || e.fold < 0) throw std::invalid_argument("fold");
        } catch (const std::exception&) {
            throw FormatError(where + "fold must be a non-negative integer, got '" + cols[2] + "'");
        }
        for (const auto& v : split(cols[3], ','))
            if (!trim(v).empty()) e.videos.push_back(resolve(trim(v)));
        if (e.videos.empty()) throw FormatError(where + "patient " + e.patient_id + " lists no videos");
        if (cols.size() == 5 && cols[4] != "-" && !cols[4].empty()) {
            for (const auto& v : split(cols[4], ',')) e.masks.push_back(resolve(trim(v)));
            if (e.masks.size() != e.videos.size()) {
                throw FormatError(where + "patient " + e.patient_id + " has " + std::to_string(e.videos.size()) +
                                  " videos but " + std::to_string(e.masks.size()) + " masks");
            }
        }
        if (const auto* prev = m.find(e.patient_id)) {
            if (prev->fold != e.fold) {
                throw DataError(where + "patient " + e.patient_id + " split across folds " + std::to_string(prev->fold) +
                                " and " + std::to_string(e.fold));
            }
            throw DataError(where + "duplicate patient id " + e.patient_id);
        }
        if (check_paths) {
            for (const auto& p : e.videos)
                if (!std::filesystem::exists(p)) throw DataError(where + "missing video " + p.string());
            for (const auto& p : e.masks)
                if (!std::filesystem::exists(p)) throw DataError(where + "missing mask " + p.string());
        }
        m.patients.push_back(std::move(e));
    }
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_paths) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), path.parent_path(), check_paths);
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    const auto base = path.parent_path();
    auto rel = [&](const std::filesystem::path& p) { return p.lexically_relative(base).generic_string(); };
    std::ostringstream out;
    out << "# patient_id\tlabel\tfold\tvideos\tmasks\n";
    for (const auto& p : manifest.patients) {
        out << p.patient_id << '\t' << to_string(p.label) << '\t' << p.fold << '\t';
        for (std::size_t i = 0; i < p.videos.size(); ++i) out << (i ? "," : "") << rel(p.videos[i]);
        out << '\t';
        if (p.masks.empty()) out << '-';
        for (std::size_t i = 0; i < p.masks.size(); ++i) out << (i ? "," : "") << rel(p.masks[i]);
        out << '\n';
    }
    const std::string s = out.str();
    write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---- PGM import -------------------------------------------------------------

ImageD read_pgm(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    std::size_t pos = 0;
    auto fail = [&](const std::string& why) -> FormatError { return FormatError(path.string() + ": " + why); };
    auto token = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t += char(bytes[pos++]);
        if (t.empty()) throw fail("truncated PGM header");
        return t;
    };
    auto number = [&]() {
        const auto t = token();
        if (t.find_first_not_of("0123456789") != std::string::npos) throw fail("bad PGM header field '" + t + "'");
        return std::stoul(t);
    };
    const auto magic = token();
    if (magic != "P5" && magic != "P2") throw fail("not a PGM file (magic '" + magic + "')");
    const std::size_t W = number(), H = number(), maxval = number();
    if (W == 0 || H == 0 || maxval == 0 || maxval > 65535) throw fail("bad PGM dimensions or maxval");
    ImageD img(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(W));
    const std::size_t n = W * H;
    if (magic == "P2") {
        for (std::size_t i = 0; i < n; ++i) img.data()[i] = double(number()) / double(maxval);
        return img;
    }
    ++pos;  // single whitespace after maxval
    const std::size_t width = maxval > 255 ? 2 : 1;
    if (bytes.size() < pos + n * width) throw fail("truncated PGM raster");
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t at = pos + i * width;
        const unsigned v = width == 1 ? bytes[at] : (unsigned(bytes[at]) << 8) | bytes[at + 1];
        img.data()[i] = double(v) / double(maxval);
    }
    return img;
}

}  // namespace cilia::io
