// SPDX-License-Identifier: Apache-2.0
//
// manifest.hpp - append-only run manifests (one JSON object per line) with
// git-style content hashes of the inputs.
#pragma once

#include "madapt/binary_io.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace madapt {

/// SHA-1 of "blob <size>\0<content>", i.e. what `git hash-object` prints.
inline std::string git_blob_hash(std::string_view content) {
    const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 ||
        EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha1 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;  // (path or label, hash)
    std::string inputs_hash;                                  // hash over all input hashes
    std::chrono::system_clock::time_point start = std::chrono::system_clock::now();
    std::chrono::system_clock::time_point end = start;
    std::vector<std::string> artifacts;
    std::string status = "ok";
    int exit_code = 0;
    std::string error;
    nlohmann::json extra = nlohmann::json::object();  // e.g. wall-clock timing

    void add_input_bytes(const std::string& label, std::string_view bytes) {
        inputs.emplace_back(label, git_blob_hash(bytes));
    }

    void add_input_file(const std::filesystem::path& p) { add_input_bytes(p.string(), read_file(p)); }

    nlohmann::json to_json() const {
        std::string all;
        nlohmann::json in = nlohmann::json::array();
        for (const auto& [k, h] : inputs) {
            in.push_back({{"input", k}, {"hash", h}});
            all += h + "\n";
        }
        return {{"command", command},
                {"config", config},
                {"seed", seed},
                {"inputs", in},
                {"inputs_hash", git_blob_hash(all + config.dump())},
                {"start", utc_timestamp(start)},
                {"end", utc_timestamp(end)},
                {"artifacts", artifacts},
                {"status", status},
                {"exit_code", exit_code},
                {"error", error},
                {"extra", extra}};
    }

    /// Appends one line; never rewrites earlier entries.
    void append_to(const std::filesystem::path& file) const {
        if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
        std::ofstream f(file, std::ios::app | std::ios::binary);
        if (!f) throw IoError("cannot open manifest " + file.string());
        f << to_json().dump() << '\n';
        if (!f) throw IoError("cannot write manifest " + file.string());
    }
};

}  // namespace madapt
