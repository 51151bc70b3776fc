#include "memoir/bin_io.hpp"

#include <cstdio>
#include <fstream>

namespace memoir {

void BinWriter::save(const std::string& path) {
    const uint64_t sum = fnv1a64(buf_.data(), buf_.size());
    u64(sum);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("io: cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw std::runtime_error("io: write failed: " + path);
}

BinReader BinReader::from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("io: cannot open: " + path);
    const auto size = static_cast<size_t>(in.tellg());
    if (size < 8) throw std::runtime_error("checksum: file too small: " + path);
    std::vector<unsigned char> buf(size);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    if (!in) throw std::runtime_error("io: read failed: " + path);

    uint64_t stored = 0;
    std::memcpy(&stored, buf.data() + size - 8, 8);
    buf.resize(size - 8);
    const uint64_t actual = fnv1a64(buf.data(), buf.size());
    if (stored != actual) throw std::runtime_error("checksum: mismatch in " + path);
    return BinReader(std::move(buf));
}

}  // namespace memoir
