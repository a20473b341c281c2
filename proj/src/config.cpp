// SPDX-License-Identifier: Apache-2.0

#include "vikdf/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace vikdf {
namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Field table: serialization order and typed accessors.
struct Field {
  const char* key;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, const std::string&)> set;
};

std::int64_t parse_i64(const char* key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ParseError(std::string("config: key '") + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const char* key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ParseError(std::string("config: key '") + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

double parse_f64(const char* key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ParseError(std::string("config: key '") + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const char* key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParseError(std::string("config: key '") + key + "' expects true/false, got '" + v + "'");
}

#define F_I64(name) \
  Field{#name, [](const ModelConfig& c) { return std::to_string(c.name); }, \
        [](ModelConfig& c, const std::string& v) { c.name = parse_i64(#name, v); }}
#define F_U64(name) \
  Field{#name, [](const ModelConfig& c) { return std::to_string(c.name); }, \
        [](ModelConfig& c, const std::string& v) { c.name = parse_u64(#name, v); }}
#define F_F64(name) \
  Field{#name, [](const ModelConfig& c) { return fmt_double(c.name); }, \
        [](ModelConfig& c, const std::string& v) { c.name = parse_f64(#name, v); }}
#define F_STR(name) \
  Field{#name, [](const ModelConfig& c) { return c.name; }, \
        [](ModelConfig& c, const std::string& v) { c.name = v; }}
#define F_BOOL(name) \
  Field{#name, [](const ModelConfig& c) { return std::string(c.name ? "true" : "false"); }, \
        [](ModelConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> fs = {
      F_I64(d_enc), F_I64(enc_layers), F_I64(enc_heads), F_I64(enc_ffn_mult), F_I64(max_text_len),
      F_I64(image_size), F_I64(image_channels), F_I64(patch_size),
      F_I64(n_queries), F_I64(d_k), F_I64(iq_layers), F_I64(iq_heads), F_I64(d_fuse),
      F_STR(pooling), F_STR(knowledge_readout),
      F_I64(d_lm), F_I64(lm_layers), F_I64(lm_heads), F_I64(lm_ffn_mult), F_I64(max_lm_len),
      F_F64(mask_ratio_image), F_F64(mask_ratio_text),
      F_F64(lambda_tim), F_F64(lambda_tamim), F_F64(lambda_iamtm), F_F64(lambda_iaci),
      F_F64(lambda_iakr), F_F64(tau_init),
      F_STR(caption_prompt), F_STR(reconstruction_prompt),
      F_F64(lr), F_F64(weight_decay), F_F64(warmup_frac), F_F64(grad_clip),
      F_F64(adam_beta1), F_F64(adam_beta2), F_F64(adam_eps),
      F_I64(total_steps), F_I64(batch_size), F_STR(lr_decay), F_STR(objective_mode),
      F_U64(seed), F_U64(data_seed),
      F_I64(attribute_count), F_I64(train_pairs), F_BOOL(shuffle_attributes),
      F_BOOL(disable_tim), F_BOOL(disable_tamim), F_BOOL(disable_iamtm), F_BOOL(disable_bvif),
      F_I64(max_decode_len),
  };
  return fs;
}

#undef F_I64
#undef F_U64
#undef F_F64
#undef F_STR
#undef F_BOOL

void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError("config: " + msg);
}

}  // namespace

void ModelConfig::validate() const {
  require(d_enc > 0 && d_k > 0 && d_fuse > 0 && d_lm > 0, "model dims must be positive");
  require(enc_layers > 0 && iq_layers > 0 && lm_layers > 0, "layer counts must be positive");
  require(enc_heads > 0 && d_enc % enc_heads == 0, "d_enc must divide evenly into enc_heads");
  require(iq_heads > 0 && d_k % iq_heads == 0, "d_k must divide evenly into iq_heads");
  require(lm_heads > 0 && d_lm % lm_heads == 0, "d_lm must divide evenly into lm_heads");
  require(enc_ffn_mult > 0 && lm_ffn_mult > 0, "ffn multipliers must be positive");
  require(n_queries > 0, "n_queries must be positive");
  require(image_channels == 3, "images must have 3 channels");
  require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
          "image_size must be a positive multiple of patch_size");
  require(max_text_len >= 2, "max_text_len too small");
  require(max_lm_len >= 8, "max_lm_len too small");
  require(mask_ratio_image > 0.0 && mask_ratio_image < 1.0, "mask_ratio_image must be in (0,1)");
  require(mask_ratio_text > 0.0 && mask_ratio_text < 1.0, "mask_ratio_text must be in (0,1)");
  require(lambda_tim >= 0 && lambda_tamim >= 0 && lambda_iamtm >= 0 && lambda_iaci >= 0 &&
              lambda_iakr >= 0,
          "loss weights must be non-negative");
  double l1 = disable_tim ? 0.0 : lambda_tim;
  double l2 = disable_tamim ? 0.0 : lambda_tamim;
  double l3 = disable_iamtm ? 0.0 : lambda_iamtm;
  require(l1 + l2 + l3 > 0.0, "at least one distillation term must be enabled with positive weight");
  double l5 = disable_bvif ? 0.0 : lambda_iakr;
  require(lambda_iaci + l5 > 0.0, "at least one integration term must have positive weight");
  require(tau_init > 0.0, "tau_init must be positive");
  require(!caption_prompt.empty() && !reconstruction_prompt.empty(), "prompts must be non-empty");
  require(lr > 0.0, "lr must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(warmup_frac >= 0.0 && warmup_frac < 1.0, "warmup_frac must be in [0,1)");
  require(grad_clip > 0.0, "grad_clip must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          "adam betas must be in [0,1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(total_steps > 0 && batch_size > 0, "total_steps and batch_size must be positive");
  require(pooling == "mean" || pooling == "max_pairwise", "pooling must be mean or max_pairwise");
  require(knowledge_readout == "slots" || knowledge_readout == "last_tokens",
          "knowledge_readout must be slots or last_tokens");
  require(lr_decay == "none" || lr_decay == "cosine", "lr_decay must be none or cosine");
  require(objective_mode == "joint" || objective_mode == "alternating",
          "objective_mode must be joint or alternating");
  require(attribute_count >= 2 && attribute_count <= 16, "attribute_count must be in [2,16]");
  require(train_pairs > 0, "train_pairs must be positive");
  require(max_decode_len > 0, "max_decode_len must be positive");
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << "\n";
  return os.str();
}

void ModelConfig::apply_assignment(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw ParseError("config: unknown key '" + key + "'");
}

void ModelConfig::apply_text(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError("config: line " + std::to_string(lineno) + " is not a key = value pair");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    apply_assignment(key, value);
  }
}

ModelConfig ModelConfig::paper_preset() {
  ModelConfig c;
  c.d_enc = 768;
  c.d_k = 768;
  c.d_fuse = 768;
  c.d_lm = 768;
  c.enc_heads = 12;
  c.iq_heads = 12;
  c.lm_heads = 12;
  c.n_queries = 32;
  c.image_size = 224;
  c.patch_size = 14;
  c.batch_size = 128;
  c.total_steps = 100000;
  c.lr = 1e-4;
  c.weight_decay = 0.05;
  c.warmup_frac = 0.1;
  return c;
}

ModelConfig ModelConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  ModelConfig c;
  c.apply_text(ss.str());
  return c;
}

}  // namespace vikdf
