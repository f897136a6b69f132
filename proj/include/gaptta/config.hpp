#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace gaptta {

/// Flat `key = value` text with dotted section names and `#` comments.
/// Every lookup is recorded so unknown (misspelt) keys can be reported.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, std::string source = "<config>");
    static KeyValueConfig load(const std::filesystem::path& path);

    bool has(std::string_view key) const;
    /// Throws Config naming the field when absent.
    const std::string& required(std::string_view key) const;
    std::optional<std::string> optional(std::string_view key) const;

    std::string get_string(std::string_view key, std::string fallback) const;
    double get_double(std::string_view key, double fallback) const;
    std::uint64_t get_uint(std::string_view key, std::uint64_t fallback) const;
    bool get_bool(std::string_view key, bool fallback) const;
    std::vector<std::string> get_list(std::string_view key, std::vector<std::string> fallback) const;

    void set(std::string key, std::string value);

    /// Throws Config for keys no reader asked for, citing their line.
    void reject_unknown_keys() const;

    const std::string& source() const noexcept { return source_; }
    const std::filesystem::path& base_dir() const noexcept { return base_dir_; }

private:
    struct Entry {
        std::string value;
        std::size_t line = 0;
    };
    [[noreturn]] void bad_value(std::string_view key, const char* expected) const;

    std::map<std::string, Entry, std::less<>> entries_;
    mutable std::set<std::string, std::less<>> used_;
    std::string source_;
    std::filesystem::path base_dir_;
};

std::vector<std::string> split_list(std::string_view text, char sep = ',');
std::string trim(std::string_view text);

}  // namespace gaptta
