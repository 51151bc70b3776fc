#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "memoir/mat.hpp"
#include "memoir/rng.hpp"

namespace memoir {

// Little-endian binary buffers with a trailing fnv1a64 checksum. Files are
// read whole and verified before any field is interpreted, so a corrupt or
// truncated file never yields partial state.

class BinWriter {
public:
    void u32(uint32_t x) { raw(&x, 4); }
    void u64(uint64_t x) { raw(&x, 8); }
    void i64(int64_t x) { raw(&x, 8); }
    void f64(double x) { raw(&x, 8); }

    void bytes(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void vec(const Vec& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(double));
    }
    void vec_u64(const std::vector<uint64_t>& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(uint64_t));
    }
    void vec_i64(const std::vector<int64_t>& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(int64_t));
    }
    void vec_u32(const std::vector<uint32_t>& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(uint32_t));
    }
    void mat(const Mat& m) {
        u32(static_cast<uint32_t>(m.rows));
        u32(static_cast<uint32_t>(m.cols));
        raw(m.v.data(), m.v.size() * sizeof(double));
    }

    // appends checksum and writes to disk
    void save(const std::string& path);

    const std::vector<unsigned char>& buffer() const { return buf_; }

private:
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<unsigned char> buf_;
};

class BinReader {
public:
    // loads the file, verifies the trailing checksum, throws on mismatch
    static BinReader from_file(const std::string& path);
    explicit BinReader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}

    uint32_t u32() { return get<uint32_t>(); }
    uint64_t u64() { return get<uint64_t>(); }
    int64_t i64() { return get<int64_t>(); }
    double f64() { return get<double>(); }

    std::string bytes() {
        const uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    Vec vec() {
        const uint64_t n = u64();
        Vec v(n);
        copy_out(v.data(), n * sizeof(double));
        return v;
    }
    std::vector<uint64_t> vec_u64() {
        const uint64_t n = u64();
        std::vector<uint64_t> v(n);
        copy_out(v.data(), n * sizeof(uint64_t));
        return v;
    }
    std::vector<int64_t> vec_i64() {
        const uint64_t n = u64();
        std::vector<int64_t> v(n);
        copy_out(v.data(), n * sizeof(int64_t));
        return v;
    }
    std::vector<uint32_t> vec_u32() {
        const uint64_t n = u64();
        std::vector<uint32_t> v(n);
        copy_out(v.data(), n * sizeof(uint32_t));
        return v;
    }
    Mat mat() {
        Mat m;
        m.rows = static_cast<int>(u32());
        m.cols = static_cast<int>(u32());
        m.v.resize(static_cast<size_t>(m.rows) * m.cols);
        copy_out(m.v.data(), m.v.size() * sizeof(double));
        return m;
    }

    bool at_end() const { return pos_ == buf_.size(); }

private:
    template <typename T>
    T get() {
        need(sizeof(T));
        T x;
        std::memcpy(&x, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return x;
    }
    void copy_out(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }
    void need(size_t n) const {
        if (pos_ + n > buf_.size()) throw std::runtime_error("checksum: truncated record");
    }

    std::vector<unsigned char> buf_;
    size_t pos_ = 0;
};

}  // namespace memoir
