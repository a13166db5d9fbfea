#include "cilia/config.hpp"

#include <fstream>
#include <sstream>

#include "cilia/errors.hpp"

namespace cilia::config {

const std::vector<KeySpec>& known_keys() {
    static const std::vector<KeySpec> keys{
        {"seed", Kind::integer, "0", "global seed"},
        {"threads", Kind::integer, "1", "worker threads for per-video and per-patch stages"},
        {"deterministic", Kind::boolean, "true", "ordered reductions; training single-threaded"},
        {"manifest", Kind::text, "", "dataset manifest"},
        {"output_dir", Kind::text, "", "stage output directory"},
        {"seg_checkpoint", Kind::text, "", "segmentation checkpoint"},
        {"clf_dir", Kind::text, "", "directory of per-fold classifier checkpoints"},

        {"flow.alpha", Kind::real, "0.1", "Horn-Schunck smoothness weight"},
        {"flow.iters", Kind::integer, "500", "Horn-Schunck iterations"},

        {"patch.size", Kind::integer, "11", "patch edge in pixels"},
        {"patch.frames", Kind::integer, "250", "patch length in frames"},
        {"patch.start", Kind::integer, "0", "first rotation frame of each patch"},
        {"patch.alpha", Kind::real, "1.0", "saturation multiplier on mask area / patch area"},

        {"seg.growth_rate", Kind::integer, "4", ""},
        {"seg.down", Kind::int_list, "2,2", "layers per down-path dense block"},
        {"seg.bottleneck", Kind::integer, "2", ""},
        {"seg.up", Kind::int_list, "", "layers per up-path block; empty mirrors seg.down"},
        {"seg.initial_filters", Kind::integer, "8", ""},
        {"seg.dropout", Kind::real, "0.2", ""},
        {"seg.crop", Kind::integer, "0", "random training crop edge; 0 keeps full frames"},
        {"seg.flips", Kind::boolean, "true", ""},
        {"seg.epochs", Kind::integer, "100", ""},
        {"seg.batch_size", Kind::integer, "4", ""},
        {"seg.lr", Kind::real, "0.001", ""},
        {"seg.decay", Kind::real, "0.0001", ""},
        {"seg.frames", Kind::integer, "1", "evenly spaced frames whose probabilities are averaged"},

        {"clf.hidden", Kind::integer, "16", ""},
        {"clf.kernel", Kind::integer, "3", ""},
        {"clf.candidate_activation", Kind::text, "tanh", "tanh or sigmoid"},
        {"clf.forget_bias", Kind::real, "1.0", ""},
        {"clf.epochs", Kind::integer, "200", ""},
        {"clf.batch_size", Kind::integer, "4", ""},
        {"clf.lr", Kind::real, "0.001", ""},
        {"clf.decay", Kind::real, "0.0001", ""},
        {"clf.val_fraction", Kind::real, "0.2", "share of each class's training patients held out for validation"},
        {"clf.patience", Kind::integer, "10", "early-stopping patience; 0 disables"},
        {"clf.anneal_patience", Kind::integer, "5", ""},
        {"clf.anneal_factor", Kind::real, "0.5", ""},
        {"clf.flips", Kind::boolean, "true", ""},

        {"eval.threshold", Kind::real, "0.5", ""},
        {"eval.rounded_first", Kind::boolean, "false", "round patch probabilities before the video mean"},
    };
    return keys;
}

namespace {

const KeySpec* find_spec(const std::string& key) {
    for (const auto& k : known_keys())
        if (key == k.key) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, bool* out) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return *out = true, true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return *out = false, true;
    return false;
}

template <typename T, typename F>
bool whole(const std::string& v, F conv, T* out) {
    try {
        std::size_t used = 0;
        *out = conv(v, &used);
        return used == v.size() && !v.empty();
    } catch (const std::logic_error&) {
        return false;
    }
}

bool valid(Kind kind, const std::string& v) {
    switch (kind) {
        case Kind::integer: {
            long long x;
            return whole(v, [](const std::string& s, std::size_t* u) { return std::stoll(s, u); }, &x);
        }
        case Kind::real: {
            double x;
            return whole(v, [](const std::string& s, std::size_t* u) { return std::stod(s, u); }, &x);
        }
        case Kind::boolean: {
            bool b;
            return parse_bool(v, &b);
        }
        case Kind::int_list: {
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) {
                long long x;
                if (!whole(trim(item), [](const std::string& s, std::size_t* u) { return std::stoll(s, u); }, &x)) return false;
            }
            return true;
        }
        case Kind::text: return v.find('\n') == std::string::npos;
    }
    return false;
}

}  // namespace

Config::Config() {
    for (const auto& k : known_keys()) values_[k.key] = k.default_value;
}

void Config::set(const std::string& key, const std::string& value) {
    const KeySpec* spec = find_spec(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    const std::string v = trim(value);
    if (!valid(spec->kind, v)) throw ConfigError("bad value '" + v + "' for config key '" + key + "'");
    values_[key] = v;
}

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void Config::parse_into(const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        try {
            set(trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

Config Config::parse(const std::string& text, const std::string& source) {
    Config c;
    c.parse_into(text, source);
    return c;
}

void Config::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config file not found: " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    parse_into(s.str(), path.string());
}

Config Config::load(const std::filesystem::path& path) {
    Config c;
    c.merge_file(path);
    return c;
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

long Config::get_int(const std::string& key) const { return std::stol(get(key)); }

std::uint64_t Config::get_u64(const std::string& key) const { return static_cast<std::uint64_t>(std::stoll(get(key))); }

double Config::get_double(const std::string& key) const { return std::stod(get(key)); }

bool Config::get_bool(const std::string& key) const {
    bool b = false;
    parse_bool(get(key), &b);
    return b;
}

std::vector<int> Config::get_ints(const std::string& key) const {
    std::vector<int> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ','))
        if (!trim(item).empty()) out.push_back(std::stoi(trim(item)));
    return out;
}

std::string Config::resolved_text() const {
    std::string s;
    for (const auto& k : known_keys()) s += std::string(k.key) + " = " + values_.at(k.key) + "\n";
    return s;
}

void Config::write_resolved(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << resolved_text();
}

}  // namespace cilia::config
