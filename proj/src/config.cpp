#include "storygen/config.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "storygen/errors.hpp"

namespace storygen {

namespace {

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, const std::string& origin)
{
    KeyValueConfig cfg;
    cfg.origin_ = origin;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        const auto raw = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        const auto line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key(trim(line.substr(0, eq)));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
        cfg.set(key, std::string(trim(line.substr(eq + 1))));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
}

const std::string& KeyValueConfig::get(const std::string& key) const
{
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(origin_ + ": missing key '" + key + "'");
    return it->second;
}

std::string KeyValueConfig::get_or(const std::string& key, const std::string& fallback) const
{
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

void KeyValueConfig::set(const std::string& key, std::string value)
{
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(value);
}

void KeyValueConfig::reject_unknown(const std::set<std::string>& known) const
{
    for (const auto& key : order_) {
        if (!known.count(key)) throw ConfigError(origin_ + ": unknown key '" + key + "'");
    }
}

std::string KeyValueConfig::to_text() const
{
    std::string out;
    for (const auto& key : order_) out += key + " = " + values_.at(key) + "\n";
    return out;
}

std::size_t parse_size(const std::string& text, const std::string& what)
{
    return static_cast<std::size_t>(parse_u64(text, what));
}

std::uint64_t parse_u64(const std::string& text, const std::string& what)
{
    std::uint64_t v = 0;
    const auto t = trim(text);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
        throw ConfigError(what + ": expected a non-negative integer, got '" + text + "'");
    }
    return v;
}

double parse_double(const std::string& text, const std::string& what)
{
    double v = 0;
    const auto t = trim(text);
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
        throw ConfigError(what + ": expected a number, got '" + text + "'");
    }
    return v;
}

bool parse_bool(const std::string& text, const std::string& what)
{
    const auto t = trim(text);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw ConfigError(what + ": expected true/false, got '" + text + "'");
}

std::string format_double(double value)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, ptr);
}

}  // namespace storygen
