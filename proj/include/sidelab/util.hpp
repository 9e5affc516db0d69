// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.

#ifndef SIDELAB_UTIL_HPP
#define SIDELAB_UTIL_HPP

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sidelab {

class Error : public std::runtime_error {
  public:
    explicit Error(const std::string &what) : std::runtime_error(what) {}
};

/// Per-class confidences; entries are non-negative and sum to 1.
using PredictionVector = std::vector<double>;

inline int argmax(const PredictionVector &d) {
    return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

/// Number of worker threads used by the parallel helpers. Defaults to the
/// hardware count; stages that require bit-exact reproducibility partition
/// work by index so the setting never changes results.
inline std::atomic<unsigned> &thread_count() {
    static std::atomic<unsigned> n{std::max(1u, std::thread::hardware_concurrency())};
    return n;
}

/// Runs fn(i) for i in [0, count) on up to thread_count() threads.
/// Work is split into contiguous index ranges; fn must not throw.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)> &fn) {
    unsigned workers = std::min<std::size_t>(thread_count().load(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i)
            fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::size_t chunk = (count + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        std::size_t begin = w * chunk;
        std::size_t end = std::min(count, begin + chunk);
        if (begin >= end)
            break;
        pool.emplace_back([begin, end, &fn] {
            for (std::size_t i = begin; i < end; ++i)
                fn(i);
        });
    }
    for (auto &t : pool)
        t.join();
}

inline uint64_t fnv1a64(const void *data, std::size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto *p = static_cast<const unsigned char *>(data);
    uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string &s) { return fnv1a64(s.data(), s.size()); }

inline std::string to_hex(uint64_t v) {
    static const char *digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4)
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return out;
}

inline std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path &path, const std::string &content) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot write file: " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline std::string trim(const std::string &s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos)
        return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string &s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    return parts;
}

} // namespace sidelab

#endif
