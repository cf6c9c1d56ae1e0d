// Copyright Contributors to the refsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <string_view>

namespace refsplat {

/// 64-bit FNV-1a. Stable across platforms, used for seeds and run-directory names.
class Fnv1a {
  public:
    void
    bytes(const void *data, std::size_t n) {
        const auto *p = static_cast<const unsigned char *>(data);
        for (std::size_t i = 0; i < n; ++i) {
            mState ^= p[i];
            mState *= 0x100000001b3ULL;
        }
    }
    template <typename T>
    void
    value(const T &v) {
        unsigned char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        bytes(buf, sizeof(T));
    }
    void
    text(std::string_view s) {
        bytes(s.data(), s.size());
    }
    std::uint64_t
    digest() const {
        return mState;
    }

  private:
    std::uint64_t mState = 0xcbf29ce484222325ULL;
};

} // namespace refsplat
