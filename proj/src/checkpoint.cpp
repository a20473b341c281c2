// SPDX-License-Identifier: Apache-2.0

#include "vikdf/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace vikdf {

namespace {

constexpr char kMagic[8] = {'V', 'I', 'K', 'D', 'F', 'C', 'K', 'P'};

}  // namespace

std::uint32_t crc32_bytes(const void* vp, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(vp);
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace {

void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
void put_f64s(std::string& b, const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &p[i], 8);
    put_u64(b, bits);
  }
}
void put_str(std::string& b, const std::string& s) {
  put_u64(b, s.size());
  b.append(s);
}

struct Cursor {
  const unsigned char* p;
  std::size_t n;
  std::size_t pos = 0;

  void need(std::size_t k) const {
    if (pos + k > n) throw IntegrityError("checkpoint truncated");
  }
  std::uint8_t u8() {
    need(1);
    return p[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    std::uint64_t k = u64();
    if (k > n - pos) throw IntegrityError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(p + pos), static_cast<std::size_t>(k));
    pos += static_cast<std::size_t>(k);
    return s;
  }
  void f64s(double* out, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) {
      std::uint64_t bits = u64();
      std::memcpy(&out[i], &bits, 8);
    }
  }
};

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  if (!is.good() && !is.eof()) throw IoError("read failed on '" + path + "'");
  return ss.str();
}

// Verifies magic, version, and checksum; returns a cursor positioned just
// after the version field, spanning only the checksummed body.
Cursor open_body(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8) throw IntegrityError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError("not a checkpoint file (bad magic)");
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(p[body + i]) << (8 * i);
  if (crc32_bytes(p, body) != stored) throw IntegrityError("checkpoint checksum mismatch");
  Cursor c{p, body};
  c.pos = sizeof(kMagic);
  std::uint32_t version = c.u32();
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint format version " + std::to_string(version));
  return c;
}

std::map<std::string, std::string> config_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

// Fields that determine the parameter set and tensor shapes. Schedule and
// data fields may differ between the saving and loading run.
const char* kArchKeys[] = {
    "d_enc",      "enc_layers", "enc_heads", "enc_ffn_mult", "max_text_len", "image_size",
    "image_channels", "patch_size", "n_queries", "d_k",       "iq_layers",    "iq_heads",
    "d_fuse",     "d_lm",       "lm_layers", "lm_heads",     "lm_ffn_mult",  "max_lm_len",
};

}  // namespace

void save_checkpoint(const std::string& path, const VikdfModel& model, const AdamW* opt,
                     std::int64_t step, const Rng& data_rng) {
  std::string b;
  b.append(kMagic, sizeof(kMagic));
  put_u32(b, kCheckpointVersion);
  put_u64(b, static_cast<std::uint64_t>(step));
  put_str(b, model.cfg.serialize());

  const auto& entries = model.reg.entries();
  put_u64(b, entries.size());
  for (const auto& e : entries) {
    put_str(b, e.name);
    put_u8(b, e.frozen ? 1 : 0);
    put_u8(b, 0);  // dtype tag: f64
    put_u32(b, static_cast<std::uint32_t>(e.tensor.shape().size()));
    for (std::int64_t d : e.tensor.shape()) put_u64(b, static_cast<std::uint64_t>(d));
    put_f64s(b, e.tensor.raw(), e.tensor.numel());
  }

  put_u8(b, opt ? 1 : 0);
  if (opt) {
    put_u64(b, static_cast<std::uint64_t>(opt->step_count()));
    put_u64(b, opt->slots().size());
    for (const auto& s : opt->slots()) {
      put_str(b, s.name);
      put_u64(b, s.m.size());
      put_f64s(b, s.m.data(), s.m.size());
      put_f64s(b, s.v.data(), s.v.size());
    }
  }

  Rng::State st = data_rng.state();
  for (std::uint64_t w : st.s) put_u64(b, w);
  put_u8(b, st.has_spare ? 1 : 0);
  put_u64(b, st.spare_bits);

  put_u32(b, crc32_bytes(b.data(), b.size()));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os.good()) throw IoError("write failed on '" + path + "'");
}

ModelConfig peek_checkpoint_config(const std::string& path) {
  std::string bytes = read_file(path);
  Cursor c = open_body(bytes);
  c.u64();  // step
  std::string text = c.str();
  ModelConfig cfg;
  cfg.apply_text(text);
  return cfg;
}

std::int64_t load_checkpoint(const std::string& path, VikdfModel& model, AdamW* opt,
                             Rng& data_rng) {
  std::string bytes = read_file(path);
  Cursor c = open_body(bytes);
  std::int64_t step = static_cast<std::int64_t>(c.u64());

  std::string file_cfg_text = c.str();
  auto file_kv = config_kv(file_cfg_text);
  auto model_kv = config_kv(model.cfg.serialize());
  for (const char* key : kArchKeys) {
    auto fi = file_kv.find(key);
    auto mi = model_kv.find(key);
    if (fi == file_kv.end() || mi == model_kv.end())
      throw IntegrityError(std::string("checkpoint config is missing '") + key + "'");
    if (fi->second != mi->second)
      throw VersionError(std::string("checkpoint config mismatch on '") + key + "': file has " +
                         fi->second + ", model has " + mi->second);
  }

  std::uint64_t count = c.u64();
  auto& entries = model.reg.entries();
  if (count != entries.size())
    throw VersionError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                       std::to_string(entries.size()));
  for (auto& e : entries) {
    std::string name = c.str();
    if (name != e.name)
      throw VersionError("checkpoint tensor '" + name + "' where model expects '" + e.name + "'");
    bool frozen = c.u8() != 0;
    if (frozen != e.frozen)
      throw VersionError("checkpoint frozen flag mismatch on '" + name + "'");
    if (c.u8() != 0) throw VersionError("unsupported dtype tag on '" + name + "'");
    std::uint32_t rank = c.u32();
    Shape s(rank);
    for (std::uint32_t i = 0; i < rank; ++i) s[i] = static_cast<std::int64_t>(c.u64());
    if (s != e.tensor.shape())
      throw VersionError("checkpoint shape mismatch on '" + name + "': file has " + shape_str(s) +
                         ", model has " + shape_str(e.tensor.shape()));
    c.f64s(e.tensor.raw(), e.tensor.numel());
  }

  bool has_opt = c.u8() != 0;
  if (opt) {
    if (!has_opt) throw ContractError("checkpoint has no optimizer state");
    opt->set_step_count(static_cast<std::int64_t>(c.u64()));
    std::uint64_t n_slots = c.u64();
    auto& slots = opt->slots();
    if (n_slots != slots.size())
      throw VersionError("checkpoint holds " + std::to_string(n_slots) +
                         " optimizer slots, model has " + std::to_string(slots.size()));
    for (auto& s : slots) {
      std::string name = c.str();
      if (name != s.name)
        throw VersionError("checkpoint optimizer slot '" + name + "' where model expects '" +
                           s.name + "'");
      std::uint64_t numel = c.u64();
      if (numel != s.m.size())
        throw VersionError("checkpoint optimizer slot size mismatch on '" + name + "'");
      c.f64s(s.m.data(), s.m.size());
      c.f64s(s.v.data(), s.v.size());
    }
  } else if (has_opt) {
    std::uint64_t t = c.u64();
    (void)t;
    std::uint64_t n_slots = c.u64();
    for (std::uint64_t i = 0; i < n_slots; ++i) {
      c.str();
      std::uint64_t numel = c.u64();
      c.need(16 * static_cast<std::size_t>(numel));
      c.pos += 16 * static_cast<std::size_t>(numel);
    }
  }

  Rng::State st;
  for (auto& w : st.s) w = c.u64();
  st.has_spare = c.u8() != 0;
  st.spare_bits = c.u64();
  data_rng.set_state(st);

  if (c.pos != c.n) throw IntegrityError("checkpoint has trailing bytes");
  return step;
}

}  // namespace vikdf
