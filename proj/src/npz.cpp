#include "subseg/npz.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace subseg::npz {

namespace {

void put16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint16_t rd16(const unsigned char* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }

uint32_t rd32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

std::string npy_encode(const Array& a) {
  std::string dict = "{'descr': '" + a.dtype + "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < a.shape.size(); ++i) {
    dict += std::to_string(a.shape[i]);
    if (i + 1 < a.shape.size()) dict += ", ";
  }
  if (a.shape.size() == 1) dict += ",";
  dict += "), }";
  const size_t base = 10 + dict.size() + 1;
  const size_t padded = (base + 63) / 64 * 64;
  dict.append(padded - base, ' ');
  dict += '\n';

  std::string out;
  out.reserve(padded + a.raw.size());
  const unsigned char magic[8] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  out.append(reinterpret_cast<const char*>(magic), 8);
  put16(out, static_cast<uint16_t>(dict.size()));
  out += dict;
  out.append(reinterpret_cast<const char*>(a.raw.data()), a.raw.size());
  return out;
}

std::vector<unsigned char> deflate_raw(const unsigned char* data, size_t n) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw FormatError("npz: deflate init failed");
  std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(n)));
  zs.next_in = const_cast<unsigned char*>(data);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError("npz: deflate failed");
  out.resize(out.size() - zs.avail_out);
  return out;
}

std::vector<unsigned char> inflate_raw(const unsigned char* data, size_t n, size_t out_size) {
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK) throw FormatError("npz: inflate init failed");
  std::vector<unsigned char> out(out_size);
  zs.next_in = const_cast<unsigned char*>(data);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out_size);
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.avail_out != 0) throw FormatError("npz: corrupt deflate stream");
  return out;
}

long dtype_size(const std::string& d) {
  if (d.size() < 3) return -1;
  const char code = d[1];
  const long width = d[2] - '0';
  if (d.size() != 3 || width <= 0) return -1;
  if ((code == 'f' && (width == 4 || width == 8)) ||
      ((code == 'i' || code == 'u') && (width == 1 || width == 2 || width == 4 || width == 8)))
    return width;
  return -1;
}

Array parse_npy(const unsigned char* p, size_t n, const std::string& name) {
  if (n < 10 || std::memcmp(p, "\x93NUMPY", 6) != 0)
    throw FormatError("npz: member '" + name + "' is not a .npy array");
  const int major = p[6];
  size_t header_len, header_off;
  if (major == 1) {
    header_len = rd16(p + 8);
    header_off = 10;
  } else if (major == 2) {
    if (n < 12) throw FormatError("npz: truncated header in '" + name + "'");
    header_len = rd32(p + 8);
    header_off = 12;
  } else {
    throw FormatError("npz: unsupported .npy version in '" + name + "'");
  }
  if (header_off + header_len > n) throw FormatError("npz: truncated header in '" + name + "'");
  const std::string hdr(reinterpret_cast<const char*>(p + header_off), header_len);

  auto field = [&](const std::string& key) -> size_t {
    const size_t at = hdr.find("'" + key + "'");
    if (at == std::string::npos)
      throw FormatError("npz: header of '" + name + "' lacks '" + key + "'");
    return hdr.find(':', at) + 1;
  };

  Array a;
  {
    size_t at = field("descr");
    const size_t q0 = hdr.find('\'', at);
    const size_t q1 = hdr.find('\'', q0 + 1);
    a.dtype = hdr.substr(q0 + 1, q1 - q0 - 1);
  }
  {
    size_t at = field("fortran_order");
    if (hdr.find("False", at) != hdr.find_first_not_of(" ", at))
      throw FormatError("npz: fortran-order array '" + name + "' not supported");
  }
  {
    size_t at = field("shape");
    const size_t o = hdr.find('(', at);
    const size_t c = hdr.find(')', o);
    std::string body = hdr.substr(o + 1, c - o - 1);
    size_t pos = 0;
    while (pos < body.size()) {
      while (pos < body.size() && (body[pos] == ' ' || body[pos] == ',')) ++pos;
      if (pos >= body.size()) break;
      size_t end = pos;
      while (end < body.size() && isdigit(static_cast<unsigned char>(body[end]))) ++end;
      if (end == pos) throw FormatError("npz: bad shape in '" + name + "'");
      a.shape.push_back(std::stol(body.substr(pos, end - pos)));
      pos = end;
    }
    if (a.shape.empty()) throw FormatError("npz: scalar array '" + name + "' not supported");
  }
  const long isz = dtype_size(a.dtype);
  if (isz < 0) throw FormatError("npz: unsupported dtype '" + a.dtype + "' in '" + name + "'");
  const size_t want = static_cast<size_t>(a.numel() * isz);
  const size_t data_off = header_off + header_len;
  if (n - data_off != want) throw FormatError("npz: payload size mismatch in '" + name + "'");
  a.raw.assign(p + data_off, p + n);
  return a;
}

}  // namespace

long Array::itemsize() const {
  const long s = dtype_size(dtype);
  if (s < 0) throw FormatError("npz: unsupported dtype '" + dtype + "'");
  return s;
}

Array Array::from_doubles(std::vector<long> shape, const std::vector<double>& v) {
  Array a;
  a.dtype = "<f8";
  a.shape = std::move(shape);
  if (a.numel() != static_cast<long>(v.size()))
    throw FormatError("npz: value count does not match shape");
  a.raw.resize(v.size() * 8);
  std::memcpy(a.raw.data(), v.data(), a.raw.size());
  return a;
}

Array Array::from_bytes(std::vector<long> shape, const std::vector<uint8_t>& v) {
  Array a;
  a.dtype = "|u1";
  a.shape = std::move(shape);
  if (a.numel() != static_cast<long>(v.size()))
    throw FormatError("npz: value count does not match shape");
  a.raw.assign(v.begin(), v.end());
  return a;
}

std::vector<double> Array::as_doubles() const {
  const long n = numel();
  std::vector<double> out(static_cast<size_t>(n));
  const long isz = itemsize();
  const unsigned char* p = raw.data();
  auto get = [&](long i) -> double {
    const unsigned char* q = p + i * isz;
    const char code = dtype[1];
    if (code == 'f') {
      if (isz == 8) {
        double v;
        std::memcpy(&v, q, 8);
        return v;
      }
      float v;
      std::memcpy(&v, q, 4);
      return static_cast<double>(v);
    }
    uint64_t u = 0;
    for (long b = 0; b < isz; ++b) u |= static_cast<uint64_t>(q[b]) << (8 * b);
    if (code == 'u') return static_cast<double>(u);
    // sign-extend
    const int bits = static_cast<int>(isz * 8);
    int64_t s = static_cast<int64_t>(u << (64 - bits)) >> (64 - bits);
    return static_cast<double>(s);
  };
  for (long i = 0; i < n; ++i) out[static_cast<size_t>(i)] = get(i);
  return out;
}

std::vector<uint8_t> Array::as_bytes() const {
  if (dtype != "|u1" && dtype != "|i1")
    throw FormatError("npz: expected 8-bit array, found dtype '" + dtype + "'");
  return std::vector<uint8_t>(raw.begin(), raw.end());
}

void save(const std::string& path, const Archive& arrays) {
  std::string out;
  struct CentralEntry {
    std::string name;
    uint32_t crc, csize, usize, offset;
    uint16_t method;
  };
  std::vector<CentralEntry> central;

  for (const auto& [key, arr] : arrays) {
    const std::string payload = npy_encode(arr);
    const auto* pdata = reinterpret_cast<const unsigned char*>(payload.data());
    const uint32_t crc =
        static_cast<uint32_t>(crc32(0L, pdata, static_cast<uInt>(payload.size())));
    std::vector<unsigned char> packed = deflate_raw(pdata, payload.size());
    uint16_t method = 8;
    if (packed.size() >= payload.size()) {  // store incompressible members
      packed.assign(pdata, pdata + payload.size());
      method = 0;
    }
    const std::string name = key + ".npy";
    CentralEntry ce{name, crc, static_cast<uint32_t>(packed.size()),
                    static_cast<uint32_t>(payload.size()), static_cast<uint32_t>(out.size()),
                    method};
    central.push_back(ce);

    put32(out, 0x04034b50);
    put16(out, 20);      // version needed
    put16(out, 0);       // flags
    put16(out, method);  // compression
    put16(out, 0);       // mod time
    put16(out, 0x21);    // mod date (1980-01-01)
    put32(out, crc);
    put32(out, ce.csize);
    put32(out, ce.usize);
    put16(out, static_cast<uint16_t>(name.size()));
    put16(out, 0);  // extra len
    out += name;
    out.append(reinterpret_cast<const char*>(packed.data()), packed.size());
  }

  const uint32_t cdir_offset = static_cast<uint32_t>(out.size());
  for (const auto& ce : central) {
    put32(out, 0x02014b50);
    put16(out, 20);  // version made by
    put16(out, 20);  // version needed
    put16(out, 0);
    put16(out, ce.method);
    put16(out, 0);
    put16(out, 0x21);
    put32(out, ce.crc);
    put32(out, ce.csize);
    put32(out, ce.usize);
    put16(out, static_cast<uint16_t>(ce.name.size()));
    put16(out, 0);  // extra
    put16(out, 0);  // comment
    put16(out, 0);  // disk number
    put16(out, 0);  // internal attrs
    put32(out, 0);  // external attrs
    put32(out, ce.offset);
    out += ce.name;
  }
  const uint32_t cdir_size = static_cast<uint32_t>(out.size()) - cdir_offset;
  put32(out, 0x06054b50);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<uint16_t>(central.size()));
  put16(out, static_cast<uint16_t>(central.size()));
  put32(out, cdir_size);
  put32(out, cdir_offset);
  put16(out, 0);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("npz: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("npz: short write to '" + path + "'");
}

Archive load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("npz: cannot open '" + path + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 22) throw FormatError("npz: '" + path + "' is not a zip archive");

  size_t eocd = std::string::npos;
  const size_t scan_from = buf.size() >= 22 + 65536 ? buf.size() - 22 - 65536 : 0;
  for (size_t i = buf.size() - 22 + 1; i-- > scan_from;) {
    if (rd32(buf.data() + i) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) throw FormatError("npz: '" + path + "' has no zip directory");
  const uint16_t count = rd16(buf.data() + eocd + 10);
  const uint32_t cdir_off = rd32(buf.data() + eocd + 16);

  Archive arrays;
  size_t p = cdir_off;
  for (uint16_t e = 0; e < count; ++e) {
    if (p + 46 > buf.size() || rd32(buf.data() + p) != 0x02014b50)
      throw FormatError("npz: corrupt central directory in '" + path + "'");
    const uint16_t method = rd16(buf.data() + p + 10);
    const uint32_t crc = rd32(buf.data() + p + 16);
    const uint32_t csize = rd32(buf.data() + p + 20);
    const uint32_t usize = rd32(buf.data() + p + 24);
    const uint16_t fnlen = rd16(buf.data() + p + 28);
    const uint16_t extralen = rd16(buf.data() + p + 30);
    const uint16_t commentlen = rd16(buf.data() + p + 32);
    const uint32_t lho = rd32(buf.data() + p + 42);
    std::string name(reinterpret_cast<const char*>(buf.data() + p + 46), fnlen);
    p += 46 + fnlen + extralen + commentlen;

    if (lho + 30 > buf.size() || rd32(buf.data() + lho) != 0x04034b50)
      throw FormatError("npz: corrupt local header for '" + name + "'");
    const uint16_t lfn = rd16(buf.data() + lho + 26);
    const uint16_t lextra = rd16(buf.data() + lho + 28);
    const size_t data_off = lho + 30 + lfn + lextra;
    if (data_off + csize > buf.size())
      throw FormatError("npz: truncated member '" + name + "'");

    std::vector<unsigned char> payload;
    if (method == 0) {
      payload.assign(buf.begin() + static_cast<long>(data_off),
                     buf.begin() + static_cast<long>(data_off + csize));
    } else if (method == 8) {
      payload = inflate_raw(buf.data() + data_off, csize, usize);
    } else {
      throw FormatError("npz: unsupported compression method in '" + name + "'");
    }
    if (crc32(0L, payload.data(), static_cast<uInt>(payload.size())) != crc)
      throw FormatError("npz: CRC mismatch in '" + name + "'");

    std::string key = name;
    if (key.size() > 4 && key.substr(key.size() - 4) == ".npy") key.resize(key.size() - 4);
    arrays[key] = parse_npy(payload.data(), payload.size(), key);
  }
  return arrays;
}

}  // namespace subseg::npz
