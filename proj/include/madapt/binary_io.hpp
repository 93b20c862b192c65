// SPDX-License-Identifier: Apache-2.0
//
// Little-endian byte buffers with position-aware errors.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace madapt {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptFileError : public IoError {
public:
    CorruptFileError(const std::string& what, std::size_t position)
        : IoError(what + " (at byte " + std::to_string(position) + ")"), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

class VersionError : public IoError {
public:
    using IoError::IoError;
};

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    template <class T>
    void pod(T v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void u32(std::uint32_t v) { pod(v); }
    void u64(std::uint64_t v) { pod(v); }
    void f64(double v) { pod(v); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s);
    }

    const std::vector<char>& buffer() const { return buf_; }
    std::string_view view() const { return {buf_.data(), buf_.size()}; }

private:
    std::vector<char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::string_view bytes(std::size_t n, const char* what) {
        need(n, what);
        auto out = data_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    template <class T>
    T pod(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::uint32_t u32(const char* what) { return pod<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return pod<std::uint64_t>(what); }
    double f64(const char* what) { return pod<double>(what); }
    std::string str(const char* what) {
        const auto n = u32(what);
        return std::string(bytes(n, what));
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (data_.size() - pos_ < n)
            throw CorruptFileError(std::string("truncated file while reading ") + what, pos_);
    }

    std::string_view data_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace madapt
