// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "emend/tensor.hpp"

// Little-endian binary IO for checkpoint and language-model files.

namespace emend {

class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw DataError("cannot open for writing: " + path);
  }

  void bytes(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) {
    std::uint32_t b;
    std::memcpy(&b, &v, 4);
    put_le(b);
  }
  void f64(double v) {
    std::uint64_t b;
    std::memcpy(&b, &v, 8);
    put_le(b);
  }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void f32_array(const std::vector<float>& v) {
    for (float x : v) f32(x);
  }
  void f64_array(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }

  void close() {
    out_.close();
    if (!out_) throw DataError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;

  template <class T>
  void put_le(T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i)
      buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    bytes(buf, sizeof(T));
  }
};

class BinReader {
 public:
  explicit BinReader(const std::string& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open for reading: " + path);
  }

  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n)
      throw DataError("unexpected end of file: " + path_);
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() {
    std::uint32_t b = get_le<std::uint32_t>();
    float v;
    std::memcpy(&v, &b, 4);
    return v;
  }
  double f64() {
    std::uint64_t b = get_le<std::uint64_t>();
    double v;
    std::memcpy(&v, &b, 8);
    return v;
  }
  std::string str() {
    std::uint64_t n = u64();
    if (n > (1ULL << 32)) throw DataError("implausible string length: " + path_);
    std::string s(static_cast<size_t>(n), '\0');
    if (n) bytes(s.data(), static_cast<size_t>(n));
    return s;
  }
  std::vector<float> f32_array(size_t n) {
    std::vector<float> v(n);
    for (float& x : v) x = f32();
    return v;
  }
  std::vector<double> f64_array() {
    std::uint64_t n = u64();
    if (n > (1ULL << 32)) throw DataError("implausible array length: " + path_);
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = f64();
    return v;
  }

  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::ifstream in_;
  std::string path_;

  template <class T>
  T get_le() {
    unsigned char buf[sizeof(T)];
    bytes(buf, sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
  }
};

}  // namespace emend
