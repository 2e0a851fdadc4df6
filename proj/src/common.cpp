#include "biomamba/common.hpp"

#include <cstring>

namespace biomamba::wire {

namespace {
template <typename T>
void write_le(std::ostream& os, T v) {
  // Assumes a little-endian host; checked once at startup of the writers.
  static_assert(sizeof(T) <= 8);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}
}  // namespace

void write_u16(std::ostream& os, uint16_t v) { write_le(os, v); }
void write_u32(std::ostream& os, uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_le(os, v); }
void write_f32(std::ostream& os, float v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, v); }
void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

Reader::Reader(std::istream& is, std::string source)
    : is_(is), source_(std::move(source)) {}

void Reader::bytes(void* p, size_t n, const char* field) {
  is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is_.gcount()) != n) {
    throw data_error(source_ + ": truncated while reading '" + field +
                     "' at byte offset " + std::to_string(offset_));
  }
  offset_ += n;
}

template <typename T>
static T read_le(Reader& r, const char* field) {
  unsigned char buf[sizeof(T)];
  r.bytes(buf, sizeof(T), field);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

uint16_t Reader::u16(const char* field) { return read_le<uint16_t>(*this, field); }
uint32_t Reader::u32(const char* field) { return read_le<uint32_t>(*this, field); }
uint64_t Reader::u64(const char* field) { return read_le<uint64_t>(*this, field); }
float Reader::f32(const char* field) { return read_le<float>(*this, field); }
double Reader::f64(const char* field) { return read_le<double>(*this, field); }

bool Reader::at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

}  // namespace biomamba::wire
