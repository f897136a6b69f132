#include <gaptta/config.hpp>

#include <gaptta/error.hpp>

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace gaptta {

std::string trim(std::string_view text) {
    std::size_t b = 0;
    std::size_t e = text.size();
    while (b < e && std::isspace(static_cast<unsigned char>(text[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(text[e - 1]))) --e;
    return std::string(text.substr(b, e - b));
}

std::vector<std::string> split_list(std::string_view text, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t end = text.find(sep, start);
        const std::string item = trim(text.substr(start, end == std::string_view::npos ? text.size() - start : end - start));
        if (!item.empty()) out.push_back(item);
        if (end == std::string_view::npos) break;
        start = end + 1;
    }
    return out;
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string source) {
    KeyValueConfig cfg;
    cfg.source_ = std::move(source);
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        const std::string where = cfg.source_ + ":" + std::to_string(line_no);
        require(eq != std::string::npos, ErrorKind::Config, where + ": expected 'key = value'");
        std::string key = trim(std::string_view(body).substr(0, eq));
        std::string value = trim(std::string_view(body).substr(eq + 1));
        require(!key.empty(), ErrorKind::Config, where + ": empty key");
        for (char ch : key) {
            require(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_' || ch == '-',
                    ErrorKind::Config, where + ": invalid character in key '" + key + "'");
        }
        require(!cfg.entries_.contains(key), ErrorKind::Config,
                where + ": duplicate field '" + key + "' (first set on line " +
                    std::to_string(cfg.entries_.find(key)->second.line) + ")");
        cfg.entries_.emplace(std::move(key), Entry{std::move(value), line_no});
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open config '" + path.string() + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    KeyValueConfig cfg = parse(buffer.str(), path.string());
    cfg.base_dir_ = path.parent_path();
    return cfg;
}

bool KeyValueConfig::has(std::string_view key) const { return entries_.find(key) != entries_.end(); }

const std::string& KeyValueConfig::required(std::string_view key) const {
    const auto it = entries_.find(key);
    require(it != entries_.end(), ErrorKind::Config,
            source_ + ": missing required field '" + std::string(key) + "'");
    used_.emplace(key);
    return it->second.value;
}

std::optional<std::string> KeyValueConfig::optional(std::string_view key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    used_.emplace(key);
    return it->second.value;
}

void KeyValueConfig::bad_value(std::string_view key, const char* expected) const {
    const auto it = entries_.find(key);
    fail(ErrorKind::Config, source_ + ":" + std::to_string(it->second.line) + ": field '" +
                                std::string(key) + "' expects " + expected + ", got '" +
                                it->second.value + "'");
}

std::string KeyValueConfig::get_string(std::string_view key, std::string fallback) const {
    auto v = optional(key);
    return v ? *v : std::move(fallback);
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
    const auto v = optional(key);
    if (!v) return fallback;
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) bad_value(key, "a number");
    return out;
}

std::uint64_t KeyValueConfig::get_uint(std::string_view key, std::uint64_t fallback) const {
    const auto v = optional(key);
    if (!v) return fallback;
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) bad_value(key, "a non-negative integer");
    return out;
}

bool KeyValueConfig::get_bool(std::string_view key, bool fallback) const {
    const auto v = optional(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    bad_value(key, "true|false");
}

std::vector<std::string> KeyValueConfig::get_list(std::string_view key,
                                                  std::vector<std::string> fallback) const {
    const auto v = optional(key);
    return v ? split_list(*v) : std::move(fallback);
}

void KeyValueConfig::set(std::string key, std::string value) {
    auto it = entries_.find(key);
    if (it != entries_.end()) {
        it->second.value = std::move(value);
    } else {
        entries_.emplace(std::move(key), Entry{std::move(value), 0});
    }
}

void KeyValueConfig::reject_unknown_keys() const {
    for (const auto& [key, entry] : entries_) {
        require(used_.contains(key), ErrorKind::Config,
                source_ + ":" + std::to_string(entry.line) + ": unknown field '" + key + "'");
    }
}

}  // namespace gaptta
