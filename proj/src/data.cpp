// SPDX-License-Identifier: Apache-2.0

#include "vikdf/data.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "vikdf/tokenizer.hpp"

namespace vikdf {

namespace {

constexpr std::array<std::array<double, 3>, 4> kColors = {{
    {0.85, 0.10, 0.10},  // red
    {0.10, 0.75, 0.10},  // green
    {0.10, 0.20, 0.85},  // blue
    {0.90, 0.85, 0.10},  // yellow
}};
const std::array<std::string, 4> kColorNames = {"red", "green", "blue", "yellow"};
const std::array<std::string, 4> kShapeNames = {"circle", "square", "triangle", "diamond"};
const std::array<std::string, 6> kDistractors = {"today", "now",    "indeed",
                                                 "really", "kindly", "then"};

void check_attribute_count(std::int64_t a) {
  if (a < 2 || a > 16)
    throw InputError("attribute_count must be in [2,16], got " + std::to_string(a));
}

bool in_shape(std::int64_t shape, std::int64_t dx, std::int64_t dy, std::int64_t h) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= h * h;
    case 1: return std::abs(dx) <= h && std::abs(dy) <= h;
    case 2: return std::abs(dy) <= h && 2 * std::abs(dx) <= dy + h;
    default: return std::abs(dx) + std::abs(dy) <= h;
  }
}

std::string fill_template(std::string t, const std::string& color, const std::string& shape) {
  auto replace = [&t](const std::string& key, const std::string& value) {
    auto p = t.find(key);
    if (p != std::string::npos) t.replace(p, key.size(), value);
  };
  replace("{c}", color);
  replace("{s}", shape);
  return t;
}

}  // namespace

const std::string& color_name(std::int64_t attribute) {
  return kColorNames[static_cast<std::size_t>(attribute % 4)];
}

const std::string& shape_name(std::int64_t attribute) {
  return kShapeNames[static_cast<std::size_t>((attribute / 4) % 4)];
}

PairSet generate_synthetic_pairs(std::uint64_t seed, std::int64_t count,
                                 std::int64_t attribute_count, std::int64_t image_size) {
  check_attribute_count(attribute_count);
  if (count < 0) throw InputError("pair count must be non-negative");
  if (image_size < 24)
    throw InputError("image_size must be at least 24, got " + std::to_string(image_size));
  std::int64_t S = image_size;
  Rng rng(seed);
  PairSet set;
  set.image_size = S;
  set.samples.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    PairSample ps;
    ps.attribute = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(attribute_count)));
    ps.image.resize(static_cast<std::size_t>(3 * S * S));
    for (std::int64_t p = 0; p < S * S; ++p) {
      double v = 0.35 + 0.25 * rng.uniform();
      for (std::int64_t c = 0; c < 3; ++c) ps.image[static_cast<std::size_t>(c * S * S + p)] = v;
    }
    std::int64_t h = 6 + static_cast<std::int64_t>(rng.uniform_int(5));
    std::int64_t cx = h + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(S - 2 * h)));
    std::int64_t cy = h + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(S - 2 * h)));
    std::int64_t shape = (ps.attribute / 4) % 4;
    const auto& rgb = kColors[static_cast<std::size_t>(ps.attribute % 4)];
    for (std::int64_t y = cy - h; y <= cy + h; ++y)
      for (std::int64_t x = cx - h; x <= cx + h; ++x)
        if (in_shape(shape, x - cx, y - cy, h))
          for (std::int64_t c = 0; c < 3; ++c)
            ps.image[static_cast<std::size_t>((c * S + y) * S + x)] = rgb[static_cast<std::size_t>(c)];
    ps.caption = "a " + color_name(ps.attribute) + " " + shape_name(ps.attribute) + " on gray";
    std::uint64_t extras = rng.uniform_int(3);
    for (std::uint64_t e = 0; e < extras; ++e)
      ps.caption += " " + kDistractors[rng.uniform_int(kDistractors.size())];
    set.samples.push_back(std::move(ps));
  }
  return set;
}

std::vector<LabeledDialogue> generate_synthetic_dialogues(std::uint64_t seed, std::int64_t count,
                                                          std::int64_t attribute_count) {
  check_attribute_count(attribute_count);
  static const std::array<std::string, 4> ctx = {
      "tell me about the {c} {s}",
      "i am looking at a {c} {s} now",
      "what do you think of the {c} {s}",
      "there is a {c} {s} here",
  };
  static const std::array<std::string, 3> resp = {
      "it is a {c} {s} on gray",
      "a {c} {s} on gray looks nice",
      "i see the {c} {s} on gray",
  };
  Rng rng(seed);
  std::vector<LabeledDialogue> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    LabeledDialogue d;
    d.attribute = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(attribute_count)));
    const std::string& c = color_name(d.attribute);
    const std::string& s = shape_name(d.attribute);
    d.dialogue.context = fill_template(ctx[rng.uniform_int(ctx.size())], c, s);
    d.dialogue.response = fill_template(resp[rng.uniform_int(resp.size())], c, s);
    out.push_back(std::move(d));
  }
  return out;
}

std::int64_t classify_attribute(const std::vector<double>& image, std::int64_t image_size) {
  std::int64_t S = image_size;
  if (static_cast<std::int64_t>(image.size()) != 3 * S * S)
    throw DimensionError("classify_attribute: image size " + std::to_string(image.size()) +
                         " does not match 3*" + std::to_string(S) + "^2");
  std::int64_t x0 = S, x1 = -1, y0 = S, y1 = -1, area = 0;
  double mr = 0.0, mg = 0.0, mb = 0.0;
  std::vector<std::uint8_t> colored(static_cast<std::size_t>(S * S), 0);
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x) {
      double r = image[static_cast<std::size_t>((0 * S + y) * S + x)];
      double g = image[static_cast<std::size_t>((1 * S + y) * S + x)];
      double b = image[static_cast<std::size_t>((2 * S + y) * S + x)];
      double hi = std::max(r, std::max(g, b)), lo = std::min(r, std::min(g, b));
      if (hi - lo <= 0.15) continue;
      colored[static_cast<std::size_t>(y * S + x)] = 1;
      ++area;
      mr += r;
      mg += g;
      mb += b;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (area == 0) throw InputError("classify_attribute: no colored pixels found");
  mr /= static_cast<double>(area);
  mg /= static_cast<double>(area);
  mb /= static_cast<double>(area);
  std::int64_t color = 0;
  double best = 1e300;
  for (std::int64_t c = 0; c < 4; ++c) {
    const auto& t = kColors[static_cast<std::size_t>(c)];
    double d2 = (mr - t[0]) * (mr - t[0]) + (mg - t[1]) * (mg - t[1]) + (mb - t[2]) * (mb - t[2]);
    if (d2 < best) {
      best = d2;
      color = c;
    }
  }
  double fill = static_cast<double>(area) /
                static_cast<double>((x1 - x0 + 1) * (y1 - y0 + 1));
  std::int64_t shape;
  if (fill > 0.9) {
    shape = 1;
  } else if (fill > 0.62) {
    shape = 0;
  } else {
    std::int64_t top_rows = (y1 - y0 + 1) / 2, top = 0;
    for (std::int64_t y = y0; y < y0 + top_rows; ++y)
      for (std::int64_t x = x0; x <= x1; ++x)
        if (colored[static_cast<std::size_t>(y * S + x)]) ++top;
    shape = static_cast<double>(top) / static_cast<double>(area) < 0.375 ? 2 : 3;
  }
  return color + 4 * shape;
}

void shuffle_pair_attributes(PairSet& set, std::uint64_t seed) {
  std::vector<std::int64_t> attrs;
  attrs.reserve(set.samples.size());
  for (const auto& s : set.samples) attrs.push_back(s.attribute);
  Rng rng(seed);
  rng.shuffle(attrs.data(), attrs.size());
  for (std::size_t i = 0; i < attrs.size(); ++i) set.samples[i].attribute = attrs[i];
}

BoolMask mask_image_patches(std::int64_t patch_count, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw InputError("mask ratio must lie in (0,1), got " + std::to_string(ratio));
  if (patch_count <= 0) throw InputError("patch_count must be positive");
  std::int64_t k = static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(patch_count)));
  if (k == 0)
    throw DegenerateMaskError("mask ratio " + std::to_string(ratio) + " selects zero of " +
                              std::to_string(patch_count) + " patches");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(patch_count));
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx.data(), idx.size());
  BoolMask m = BoolMask::full({patch_count}, false);
  for (std::int64_t i = 0; i < k; ++i) m.v[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 1;
  return m;
}

std::vector<double> apply_patch_mask(const std::vector<double>& image, std::int64_t image_size,
                                     std::int64_t patch_size, const BoolMask& patch_mask) {
  std::int64_t S = image_size, g = S / patch_size;
  if (static_cast<std::int64_t>(image.size()) != 3 * S * S)
    throw DimensionError("apply_patch_mask: image size mismatch");
  if (patch_mask.shape != Shape{g * g})
    throw DimensionError("apply_patch_mask: mask must cover " + std::to_string(g * g) + " patches");
  std::vector<double> out = image;
  for (std::int64_t p = 0; p < g * g; ++p) {
    if (!patch_mask.at(static_cast<std::size_t>(p))) continue;
    std::int64_t py = (p / g) * patch_size, px = (p % g) * patch_size;
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t dy = 0; dy < patch_size; ++dy)
        for (std::int64_t dx = 0; dx < patch_size; ++dx)
          out[static_cast<std::size_t>((c * S + py + dy) * S + px + dx)] = 0.0;
  }
  return out;
}

TextMaskResult mask_text_tokens(const std::vector<std::int32_t>& tokens, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0))
    throw InputError("mask ratio must lie in (0,1), got " + std::to_string(ratio));
  if (tokens.empty()) throw InputError("mask_text_tokens: empty sequence");
  std::vector<std::int64_t> maskable;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] >= 0 && tokens[i] < 256) maskable.push_back(static_cast<std::int64_t>(i));
  if (maskable.empty()) throw InputError("mask_text_tokens: no maskable tokens");
  std::int64_t k = static_cast<std::int64_t>(
      std::ceil(ratio * static_cast<double>(maskable.size())));
  rng.shuffle(maskable.data(), maskable.size());
  TextMaskResult r;
  r.masked = tokens;
  r.plan.assign(tokens.size(), 0);
  for (std::int64_t i = 0; i < k; ++i) {
    std::size_t pos = static_cast<std::size_t>(maskable[static_cast<std::size_t>(i)]);
    r.masked[pos] = tok::kMask;
    r.plan[pos] = 1;
  }
  return r;
}

// ---- corpus files ------------------------------------------------------------

std::string json_escape(const std::string& s) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(s.size() + 2);
  for (unsigned char c : s) {
    if (c == '"')
      out += "\\\"";
    else if (c == '\\')
      out += "\\\\";
    else if (c >= 0x20 && c <= 0x7e)
      out += static_cast<char>(c);
    else {
      out += "\\u00";
      out += hex[c >> 4];
      out += hex[c & 0xf];
    }
  }
  return out;
}

namespace {

struct LineParser {
  const std::string& s;
  std::int64_t line_no;
  std::size_t i = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("line " + std::to_string(line_no) + ": " + msg);
  }
  void ws() {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
  }
  bool eat(char c) {
    ws();
    if (i < s.size() && s[i] == c) {
      ++i;
      return true;
    }
    return false;
  }
  void expect(char c) {
    if (!eat(c)) fail(std::string("expected '") + c + "'");
  }
  std::string parse_string() {
    expect('"');
    std::string out;
    while (true) {
      if (i >= s.size()) fail("unterminated string");
      char c = s[i++];
      if (c == '"') break;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (i >= s.size()) fail("dangling escape");
      char e = s[i++];
      switch (e) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case '/': out += '/'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case 'r': out += '\r'; break;
        case 'b': out += '\b'; break;
        case 'f': out += '\f'; break;
        case 'u': {
          if (i + 4 > s.size()) fail("truncated \\u escape");
          unsigned v = 0;
          for (int t = 0; t < 4; ++t) {
            char h = s[i++];
            v <<= 4;
            if (h >= '0' && h <= '9')
              v |= static_cast<unsigned>(h - '0');
            else if (h >= 'a' && h <= 'f')
              v |= static_cast<unsigned>(h - 'a' + 10);
            else if (h >= 'A' && h <= 'F')
              v |= static_cast<unsigned>(h - 'A' + 10);
            else
              fail("bad hex digit in \\u escape");
          }
          if (v > 0xff) fail("escape above \\u00ff is not a byte");
          out += static_cast<char>(v);
          break;
        }
        default: fail("unknown escape");
      }
    }
    return out;
  }
  std::int64_t parse_int() {
    ws();
    bool neg = eat('-');
    ws();
    if (i >= s.size() || s[i] < '0' || s[i] > '9') fail("expected integer");
    std::int64_t v = 0;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') v = v * 10 + (s[i++] - '0');
    return neg ? -v : v;
  }
  void end() {
    ws();
    if (i != s.size()) fail("trailing characters after record");
  }
};

void write_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t read_u64(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

constexpr char kImageMagic[9] = "VIKDFIMG";

}  // namespace

void save_pairs(const PairSet& set, const std::string& records_path,
                const std::string& images_path) {
  std::ofstream rec(records_path, std::ios::binary);
  if (!rec) throw IoError("cannot open '" + records_path + "' for writing");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open '" + images_path + "' for writing");
  std::int64_t S = set.image_size;
  img.write(kImageMagic, 8);
  write_u32(img, 1);
  write_u32(img, 3);
  write_u32(img, static_cast<std::uint32_t>(S));
  write_u32(img, static_cast<std::uint32_t>(S));
  write_u64(img, set.samples.size());
  for (std::size_t i = 0; i < set.samples.size(); ++i) {
    const PairSample& p = set.samples[i];
    if (static_cast<std::int64_t>(p.image.size()) != 3 * S * S)
      throw DimensionError("save_pairs: sample " + std::to_string(i) + " image size mismatch");
    rec << "{\"caption\":\"" << json_escape(p.caption) << "\",\"image\":" << i
        << ",\"attribute\":" << p.attribute << "}\n";
    img.write(reinterpret_cast<const char*>(p.image.data()),
              static_cast<std::streamsize>(p.image.size() * sizeof(double)));
  }
  if (!rec || !img) throw IoError("short write while saving pair corpus");
}

PairSet load_pairs(const std::string& records_path, const std::string& images_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open '" + images_path + "'");
  char magic[8];
  img.read(magic, 8);
  if (!img || std::memcmp(magic, kImageMagic, 8) != 0)
    throw ParseError("'" + images_path + "' is not an image sidecar");
  std::uint32_t version = read_u32(img);
  if (version != 1)
    throw VersionError("image sidecar version " + std::to_string(version) + ", expected 1");
  std::uint32_t channels = read_u32(img);
  std::uint32_t sh = read_u32(img);
  std::uint32_t sw = read_u32(img);
  std::uint64_t count = read_u64(img);
  if (channels != 3 || sh != sw)
    throw ParseError("image sidecar must hold square 3-channel images");
  if (!img) throw IntegrityError("image sidecar header truncated");
  std::size_t per = static_cast<std::size_t>(3) * sh * sw;

  PairSet set;
  set.image_size = static_cast<std::int64_t>(sh);

  std::ifstream rec(records_path, std::ios::binary);
  if (!rec) throw IoError("cannot open '" + records_path + "'");
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(rec, line)) {
    ++line_no;
    if (line.empty()) continue;
    LineParser p{line, line_no};
    p.expect('{');
    bool has_caption = false, has_image = false, has_attr = false;
    PairSample ps;
    std::int64_t image_index = -1;
    while (true) {
      std::string key = p.parse_string();
      p.expect(':');
      if (key == "caption") {
        ps.caption = p.parse_string();
        has_caption = true;
      } else if (key == "image") {
        image_index = p.parse_int();
        has_image = true;
      } else if (key == "attribute") {
        ps.attribute = p.parse_int();
        has_attr = true;
      } else {
        p.fail("unknown field \"" + key + "\"");
      }
      if (!p.eat(',')) break;
    }
    p.expect('}');
    p.end();
    if (!has_caption) p.fail("missing field \"caption\"");
    if (!has_image) p.fail("missing field \"image\"");
    if (!has_attr) p.fail("missing field \"attribute\"");
    if (image_index < 0 || static_cast<std::uint64_t>(image_index) >= count)
      throw IntegrityError("line " + std::to_string(line_no) + ": image index " +
                           std::to_string(image_index) + " outside sidecar count " +
                           std::to_string(count));
    img.seekg(static_cast<std::streamoff>(32 + static_cast<std::uint64_t>(image_index) * per *
                                                   sizeof(double)));
    ps.image.resize(per);
    img.read(reinterpret_cast<char*>(ps.image.data()),
             static_cast<std::streamsize>(per * sizeof(double)));
    if (!img)
      throw IntegrityError("image sidecar truncated at record " + std::to_string(image_index));
    set.samples.push_back(std::move(ps));
  }
  if (set.samples.empty()) throw InputError("empty pair corpus '" + records_path + "'");
  return set;
}

void save_dialogue_corpus(const std::vector<DialogueSample>& samples, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& d : samples)
    f << "{\"context\":\"" << json_escape(d.context) << "\",\"response\":\""
      << json_escape(d.response) << "\"}\n";
  if (!f) throw IoError("short write while saving dialogue corpus");
}

std::vector<DialogueSample> load_dialogue_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::vector<DialogueSample> out;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    LineParser p{line, line_no};
    p.expect('{');
    bool has_ctx = false, has_resp = false;
    DialogueSample d;
    while (true) {
      std::string key = p.parse_string();
      p.expect(':');
      if (key == "context") {
        d.context = p.parse_string();
        has_ctx = true;
      } else if (key == "response") {
        d.response = p.parse_string();
        has_resp = true;
      } else {
        p.fail("unknown field \"" + key + "\"");
      }
      if (!p.eat(',')) break;
    }
    p.expect('}');
    p.end();
    if (!has_ctx) p.fail("missing field \"context\"");
    if (!has_resp) p.fail("missing field \"response\"");
    if (d.context.empty()) p.fail("empty context");
    if (d.response.empty()) p.fail("empty response");
    out.push_back(std::move(d));
  }
  if (out.empty()) throw InputError("empty dialogue corpus '" + path + "'");
  return out;
}

}  // namespace vikdf
