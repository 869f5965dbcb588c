#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lman {

/// Flat `key = value` configuration. Lines starting with `#` are comments.
/// Later assignments override earlier ones; `--set key=value` overrides
/// are applied through set() after the file has been read.
class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig from_file(const std::filesystem::path& path);
    static KeyValueConfig from_string(const std::string& text);

    /// Parses a single `key=value` assignment (whitespace around both is trimmed).
    void apply_assignment(const std::string& assignment);

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    bool contains(const std::string& key) const { return values_.contains(key); }
    const std::map<std::string, std::string>& entries() const noexcept { return values_; }

    std::optional<std::string> find(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    /// Comma-separated list; empty entries are dropped.
    std::vector<std::string> get_list(const std::string& key) const;

private:
    std::map<std::string, std::string> values_;
};

std::string trim(const std::string& s);
std::vector<std::string> split(const std::string& s, char sep);

}  // namespace lman
