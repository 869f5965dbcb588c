#include "lman/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "lman/error.hpp"

namespace lman {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(s);
    while (std::getline(in, field, sep)) out.push_back(field);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

KeyValueConfig KeyValueConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return from_string(buffer.str());
}

KeyValueConfig KeyValueConfig::from_string(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        if (t.find('=') == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        cfg.apply_assignment(t);
    }
    return cfg;
}

void KeyValueConfig::apply_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    std::string key = trim(assignment.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key in '" + assignment + "'");
    values_[key] = trim(assignment.substr(eq + 1));
}

std::optional<std::string> KeyValueConfig::find(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
    return find(key).value_or(fallback);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
    auto v = find(key);
    if (!v) return fallback;
    double out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw ConfigError("key '" + key + "': not a number: '" + *v + "'");
    }
    return out;
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
    auto v = find(key);
    if (!v) return fallback;
    long long out = 0;
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        throw ConfigError("key '" + key + "': not an integer: '" + *v + "'");
    }
    return out;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
    auto v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigError("key '" + key + "': not a boolean: '" + *v + "'");
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
    std::vector<std::string> out;
    auto v = find(key);
    if (!v) return out;
    for (auto& item : split(*v, ',')) {
        auto t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

}  // namespace lman
