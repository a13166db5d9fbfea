#pragma once

// Plain-text key=value run configuration. Every key has a type and a
// default; unknown keys and malformed values are ConfigErrors.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cilia::config {

enum class Kind { integer, real, boolean, int_list, text };

struct KeySpec {
    const char* key;
    Kind kind;
    const char* default_value;
    const char* help;
};

/// Every recognised key, in resolved-output order.
const std::vector<KeySpec>& known_keys();

class Config {
public:
    Config();

    /// Lines of `key = value`; '#' starts a comment.
    static Config parse(const std::string& text, const std::string& source = "<config>");
    static Config load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    /// "key=value".
    void apply_override(const std::string& assignment);
    void merge_file(const std::filesystem::path& path);

    const std::string& get(const std::string& key) const;
    long get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<int> get_ints(const std::string& key) const;

    /// Every key with its effective value, one `key = value` per line.
    std::string resolved_text() const;
    void write_resolved(const std::filesystem::path& path) const;

    bool operator==(const Config&) const = default;

private:
    void parse_into(const std::string& text, const std::string& source);
    std::map<std::string, std::string> values_;
};

}  // namespace cilia::config
