#pragma once

// Little-endian binary helpers and file utilities shared by the on-disk formats.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace asc {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept;
// Hex FNV-1a-64 of the file contents.
std::string file_digest(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

class ByteWriter {
public:
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    std::size_t size() const noexcept { return buf_.size(); }
    Bytes& bytes() noexcept { return buf_; }

private:
    Bytes buf_;
};

// Bounds-checked reader; throws LoadError on truncation.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    std::span<const std::uint8_t> raw(std::size_t n);
    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return buf_.size() - pos_; }

private:
    std::span<const std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

}  // namespace asc
