#include "run_config.hpp"

#include <algorithm>
#include <exception>
#include <filesystem>
#include <iostream>

#include "storygen/config.hpp"
#include "storygen/errors.hpp"

namespace storygen::cli {

namespace {

bool is_config_flag(const std::string& arg) { return arg == "--config" || arg.rfind("--config=", 0) == 0; }

}  // namespace

std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args)
{
    const auto sub_at = std::find_if(args.begin(), args.end(), [](const std::string& a) { return a.empty() || a[0] != '-'; });
    if (sub_at == args.end()) return args;
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands({})) {
        if (s->get_name() == *sub_at) sub = s;
    }
    if (!sub) return args;

    std::string path;
    auto it = std::find_if(sub_at, args.end(), is_config_flag);
    if (it == args.end()) return args;
    if (*it == "--config") {
        if (std::next(it) == args.end()) throw UsageError("--config needs a file name");
        path = *std::next(it);
    } else {
        path = it->substr(9);
    }

    const auto cfg = KeyValueConfig::load(path);
    std::vector<std::string> injected;
    for (const auto& key : cfg.keys()) {
        std::string name = key;
        std::replace(name.begin(), name.end(), '_', '-');
        const auto* opt = sub->get_option_no_throw("--" + name);
        if (!opt || name == "config" || name == "help") {
            throw ConfigError("unknown config key '" + key + "' in " + path);
        }
        injected.push_back("--" + name + "=" + cfg.get(key));
    }
    args.insert(std::next(sub_at), injected.begin(), injected.end());
    return args;
}

std::string resolved_config(const CLI::App& subcommand)
{
    std::string out;
    for (const auto* opt : subcommand.get_options()) {
        if (opt->get_lnames().empty()) continue;
        const auto& name = opt->get_lnames().front();
        if (name == "help" || name == "config") continue;
        std::string value = opt->count() ? opt->results().back() : opt->get_default_str();
        if (opt->get_expected_min() == 0 && !opt->count()) value = "false";
        if (opt->get_expected_min() == 0 && opt->count() && value.empty()) value = "true";
        out += name + " = " + value + "\n";
    }
    return out;
}

int report_failure()
{
    try {
        throw;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const BoundsError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const LengthError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace storygen::cli
