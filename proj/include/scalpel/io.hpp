#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <istream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scalpel {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Little-endian binary stream helpers. Matrices are stored as 32-bit IEEE-754
// row-major regardless of the in-memory scalar type.
class BinaryWriter {
  public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}
    void magic(const char tag[4]);
    void u8(std::uint8_t v);
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void matrix(const Eigen::MatrixXd& m);
    void vector(const Eigen::VectorXd& v);

  private:
    void raw(const void* p, std::size_t n);
    std::ostream& os_;
};

class BinaryReader {
  public:
    explicit BinaryReader(std::istream& is) : is_(is) {}
    void expect_magic(const char tag[4]);
    std::uint8_t u8();
    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    Eigen::MatrixXd matrix(Eigen::Index rows, Eigen::Index cols);
    Eigen::VectorXd vector(Eigen::Index n);

  private:
    void raw(void* p, std::size_t n);
    std::istream& is_;
};

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace scalpel
