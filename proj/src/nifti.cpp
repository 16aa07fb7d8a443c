#include "pwml/nifti.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace pwml {

namespace {

// nifti_1_header, 348 bytes. Only the fields this codec touches are meaningful;
// everything else stays zero.
#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtFloat32 = 16;

bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

// gzip container with mtime fixed to zero; gzopen() would stamp the current
// time into the header and break byte-level reproducibility.
std::vector<unsigned char> gzip_compress(const unsigned char* data, std::size_t n) {
  std::vector<unsigned char> out;
  const unsigned char header[10] = {0x1f, 0x8b, 8, 0, 0, 0, 0, 0, 0, 255};
  out.insert(out.end(), header, header + 10);

  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  if (deflateInit2(&zs, 4, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw IoError("gzip: deflateInit2 failed");
  zs.next_in = const_cast<unsigned char*>(data);
  zs.avail_in = static_cast<uInt>(n);
  std::vector<unsigned char> buf(1 << 18);
  int rc = Z_OK;
  do {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = deflate(&zs, Z_FINISH);
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
  } while (rc == Z_OK);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IoError("gzip: deflate failed");

  std::uint32_t crc = static_cast<std::uint32_t>(crc32(0, data, static_cast<uInt>(n)));
  std::uint32_t isize = static_cast<std::uint32_t>(n);
  for (std::uint32_t v : {crc, isize})
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
  return out;
}

std::vector<unsigned char> gzip_decompress(const std::vector<unsigned char>& in) {
  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  if (inflateInit2(&zs, 15 + 32) != Z_OK)  // auto-detect gzip/zlib header
    throw FormatError("gzip: inflateInit2 failed");
  zs.next_in = const_cast<unsigned char*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<unsigned char> out;
  std::vector<unsigned char> buf(1 << 18);
  int rc = Z_OK;
  do {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw FormatError("gzip: corrupt or truncated stream (inflate rc=" + std::to_string(rc) + ")");
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
  } while (rc != Z_STREAM_END && zs.avail_in > 0);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END) throw FormatError("gzip: truncated stream, missing end of data");
  return out;
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff n = f.tellg();
  f.seekg(0);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
  if (n > 0) f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw IoError("short read: " + path);
  return bytes;
}

void write_file_bytes(const std::string& path, const unsigned char* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw IoError("short write: " + path);
}

template <typename T>
void write_impl(const Volume<T>& v, const std::string& path, std::int16_t datatype) {
  Nifti1Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(v.nx());
  h.dim[2] = static_cast<std::int16_t>(v.ny());
  h.dim[3] = static_cast<std::int16_t>(v.nz());
  h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
  h.datatype = datatype;
  h.bitpix = static_cast<std::int16_t>(sizeof(T) * 8);
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[1 + a] = static_cast<float>(v.spacing()[a]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // NIFTI_UNITS_MM
  h.sform_code = 1;
  h.srow_x[0] = h.pixdim[1];
  h.srow_y[1] = h.pixdim[2];
  h.srow_z[2] = h.pixdim[3];
  std::memcpy(h.magic, "n+1", 4);

  const std::size_t nbytes = static_cast<std::size_t>(v.size()) * sizeof(T);
  std::vector<unsigned char> raw(352 + nbytes);
  std::memcpy(raw.data(), &h, 348);
  raw[348] = raw[349] = raw[350] = raw[351] = 0;  // no extensions
  std::memcpy(raw.data() + 352, v.data().data(), nbytes);

  if (has_suffix(path, ".gz")) {
    auto gz = gzip_compress(raw.data(), raw.size());
    write_file_bytes(path, gz.data(), gz.size());
  } else {
    write_file_bytes(path, raw.data(), raw.size());
  }
}

template <typename T>
Volume<T> read_impl(const std::string& path, std::int16_t want_datatype) {
  std::vector<unsigned char> raw = read_file_bytes(path);
  if (has_suffix(path, ".gz")) raw = gzip_decompress(raw);

  if (raw.size() < 352)
    throw FormatError(path + ": file holds " + std::to_string(raw.size()) +
                      " bytes, shorter than the 352-byte NIfTI-1 preamble");
  Nifti1Header h;
  std::memcpy(&h, raw.data(), 348);
  if (h.sizeof_hdr != 348)
    throw FormatError(path + ": sizeof_hdr=" + std::to_string(h.sizeof_hdr) +
                      " at offset 0, expected 348");
  if (std::memcmp(h.magic, "n+1", 3) != 0)
    throw FormatError(path + ": bad magic at offset 344, expected \"n+1\"");
  if (h.dim[0] != 3)
    throw FormatError(path + ": dim[0]=" + std::to_string(h.dim[0]) + ", only 3D supported");
  if (h.datatype != want_datatype)
    throw FormatError(path + ": datatype=" + std::to_string(h.datatype) + ", expected " +
                      std::to_string(want_datatype));
  const Index3 shape{h.dim[1], h.dim[2], h.dim[3]};
  if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0)
    throw FormatError(path + ": non-positive dim field");
  const std::size_t offset = static_cast<std::size_t>(h.vox_offset);
  if (offset < 352 || offset > raw.size())
    throw FormatError(path + ": vox_offset=" + std::to_string(offset) + " out of range");
  const std::size_t nvox =
      static_cast<std::size_t>(shape[0]) * shape[1] * static_cast<std::size_t>(shape[2]);
  const std::size_t need = nvox * sizeof(T);
  if (raw.size() - offset < need)
    throw FormatError(path + ": truncated voxel data, have " +
                      std::to_string(raw.size() - offset) + " bytes after offset " +
                      std::to_string(offset) + ", need " + std::to_string(need));

  Volume<T> v(shape, {h.pixdim[1], h.pixdim[2], h.pixdim[3]});
  std::memcpy(v.data().data(), raw.data() + offset, need);
  return v;
}

}  // namespace

void write_volume(const VolumeF& v, const std::string& path) { write_impl(v, path, kDtFloat32); }
void write_volume(const VolumeU8& v, const std::string& path) { write_impl(v, path, kDtUint8); }

template <typename T>
Volume<T> read_volume(const std::string& path) {
  if constexpr (std::is_same_v<T, float>) return read_impl<float>(path, kDtFloat32);
  else return read_impl<std::uint8_t>(path, kDtUint8);
}

template Volume<float> read_volume<float>(const std::string&);
template Volume<std::uint8_t> read_volume<std::uint8_t>(const std::string&);

}  // namespace pwml
