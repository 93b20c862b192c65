// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <stdexcept>
#include <string>

namespace madapt {

/// Invalid configuration value; `field()` is the dotted path of the culprit.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& why)
        : std::invalid_argument("config field '" + field + "': " + why), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Reads j[key] as T if present, mapping type errors to ConfigError.
template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& prefix = "") {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(prefix + key, e.what());
    }
}

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& prefix = "") {
    if (!j.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError(prefix + it.key(), "unknown field");
    }
}

}  // namespace madapt
