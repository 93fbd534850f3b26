#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace storygen {

/// Ordered `key = value` settings. Blank lines and lines starting with '#'
/// are ignored; a repeated key overrides the earlier value.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text, const std::string& origin = "config");
    static KeyValueConfig load(const std::string& path);

    bool contains(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& fallback) const;
    void set(const std::string& key, std::string value);

    /// Throws ConfigError naming the first key not in `known`.
    void reject_unknown(const std::set<std::string>& known) const;

    const std::vector<std::string>& keys() const { return order_; }
    std::string to_text() const;

private:
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
    std::string origin_ = "config";
};

std::size_t parse_size(const std::string& text, const std::string& what);
double parse_double(const std::string& text, const std::string& what);
bool parse_bool(const std::string& text, const std::string& what);
std::uint64_t parse_u64(const std::string& text, const std::string& what);

/// Formats a double so that parsing it back yields the same value.
std::string format_double(double value);

}  // namespace storygen
