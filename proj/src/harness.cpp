#include "harness.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string_view>

#include "json.hpp"

namespace semkb::harness {

namespace {

constexpr std::size_t kCsifHeaderBytes = 32;
constexpr std::uint16_t kCsifVersion = 1;

[[noreturn]] void config_fail(int line, const std::string& msg) {
  fail(errc::config, "config line " + std::to_string(line) + ": " + msg);
}

std::string trim(std::string_view v) {
  const auto first = v.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return "";
  const auto last = v.find_last_not_of(" \t\r");
  return std::string(v.substr(first, last - first + 1));
}

// drop a # comment that starts outside any quoted string
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_string) {
      if (c == '\\') ++i;
      else if (c == '"') in_string = false;
    } else if (c == '"') {
      in_string = true;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

struct TomlValue {
  enum class Kind { boolean, integer, floating, text, array };
  Kind kind = Kind::boolean;
  bool b = false;
  std::uint64_t mag = 0;  // integer magnitude
  bool neg = false;
  double f = 0.0;
  std::string s;
  std::vector<TomlValue> items;
  int line = 0;
};

std::string parse_quoted(const std::string& tok, int line) {
  if (tok.size() < 2 || tok.back() != '"') config_fail(line, "unterminated string " + tok);
  std::string out;
  for (std::size_t i = 1; i + 1 < tok.size(); ++i) {
    char c = tok[i];
    if (c == '"') config_fail(line, "stray quote inside string " + tok);
    if (c == '\\') {
      if (i + 2 >= tok.size()) config_fail(line, "dangling escape in string " + tok);
      const char e = tok[++i];
      switch (e) {
        case '"': c = '"'; break;
        case '\\': c = '\\'; break;
        case 'n': c = '\n'; break;
        case 't': c = '\t'; break;
        default: config_fail(line, std::string("unsupported escape \\") + e);
      }
    }
    out.push_back(c);
  }
  return out;
}

// split `inner` at commas that sit outside strings and nested brackets
std::vector<std::string> split_top_level(const std::string& inner, int line) {
  std::vector<std::string> parts;
  std::string cur;
  bool in_string = false;
  int depth = 0;
  for (std::size_t i = 0; i < inner.size(); ++i) {
    const char c = inner[i];
    if (in_string) {
      cur.push_back(c);
      if (c == '\\' && i + 1 < inner.size()) cur.push_back(inner[++i]);
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') { in_string = true; cur.push_back(c); continue; }
    if (c == '[') ++depth;
    if (c == ']') --depth;
    if (c == ',' && depth == 0) {
      parts.push_back(cur);
      cur.clear();
      continue;
    }
    cur.push_back(c);
  }
  if (in_string || depth != 0) config_fail(line, "unbalanced array or string");
  if (!trim(cur).empty() || !parts.empty()) parts.push_back(cur);
  return parts;
}

TomlValue parse_value(const std::string& raw, int line) {
  const std::string tok = trim(raw);
  if (tok.empty()) config_fail(line, "missing value");
  TomlValue v;
  v.line = line;

  if (tok == "true" || tok == "false") {
    v.kind = TomlValue::Kind::boolean;
    v.b = tok == "true";
    return v;
  }
  if (tok.front() == '"') {
    v.kind = TomlValue::Kind::text;
    v.s = parse_quoted(tok, line);
    return v;
  }
  if (tok.front() == '[') {
    if (tok.back() != ']') config_fail(line, "unterminated array " + tok);
    v.kind = TomlValue::Kind::array;
    for (const auto& part : split_top_level(tok.substr(1, tok.size() - 2), line)) {
      if (trim(part).empty()) config_fail(line, "empty array element");
      v.items.push_back(parse_value(part, line));
    }
    return v;
  }
  if (tok == "inf" || tok == "+inf" || tok == "-inf") {
    v.kind = TomlValue::Kind::floating;
    v.f = tok.front() == '-' ? -std::numeric_limits<double>::infinity()
                             : std::numeric_limits<double>::infinity();
    return v;
  }
  if (tok == "nan" || tok == "+nan" || tok == "-nan")
    config_fail(line, "nan is not an accepted value");

  const bool negative = tok.front() == '-';
  const std::string body = (tok.front() == '-' || tok.front() == '+') ? tok.substr(1) : tok;
  if (!body.empty() && body.find_first_not_of("0123456789") == std::string::npos) {
    v.kind = TomlValue::Kind::integer;
    v.neg = negative;
    const auto res = std::from_chars(body.data(), body.data() + body.size(), v.mag);
    if (res.ec != std::errc() || res.ptr != body.data() + body.size())
      config_fail(line, "integer out of range: " + tok);
    return v;
  }

  v.kind = TomlValue::Kind::floating;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v.f);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    config_fail(line, "malformed value: " + tok);
  return v;
}

std::string kind_name(TomlValue::Kind k) {
  switch (k) {
    case TomlValue::Kind::boolean: return "bool";
    case TomlValue::Kind::integer: return "integer";
    case TomlValue::Kind::floating: return "float";
    case TomlValue::Kind::text: return "string";
    case TomlValue::Kind::array: return "array";
  }
  return "?";
}

[[noreturn]] void type_fail(const TomlValue& v, const std::string& key, const char* wanted) {
  config_fail(v.line, key + " expects " + wanted + ", got " + kind_name(v.kind));
}

std::int64_t get_i64(const TomlValue& v, const std::string& key) {
  if (v.kind != TomlValue::Kind::integer) type_fail(v, key, "an integer");
  const std::uint64_t limit =
      v.neg ? static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()) + 1
            : static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());
  if (v.mag > limit) config_fail(v.line, key + ": integer out of range");
  return v.neg ? -static_cast<std::int64_t>(v.mag - 1) - 1 : static_cast<std::int64_t>(v.mag);
}

int get_int(const TomlValue& v, const std::string& key) {
  const std::int64_t x = get_i64(v, key);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
    config_fail(v.line, key + ": integer out of range");
  return static_cast<int>(x);
}

std::uint64_t get_u64(const TomlValue& v, const std::string& key) {
  if (v.kind != TomlValue::Kind::integer) type_fail(v, key, "an integer");
  if (v.neg) config_fail(v.line, key + " must be non-negative");
  return v.mag;
}

double get_double(const TomlValue& v, const std::string& key) {
  if (v.kind == TomlValue::Kind::floating) return v.f;
  if (v.kind == TomlValue::Kind::integer) {
    const double x = static_cast<double>(v.mag);
    return v.neg ? -x : x;
  }
  type_fail(v, key, "a number");
}

bool get_bool(const TomlValue& v, const std::string& key) {
  if (v.kind != TomlValue::Kind::boolean) type_fail(v, key, "a bool");
  return v.b;
}

std::string get_string(const TomlValue& v, const std::string& key) {
  if (v.kind != TomlValue::Kind::text) type_fail(v, key, "a string");
  return v.s;
}

std::vector<double> get_double_array(const TomlValue& v, const std::string& key) {
  if (v.kind != TomlValue::Kind::array) type_fail(v, key, "an array");
  std::vector<double> out;
  for (const auto& item : v.items) out.push_back(get_double(item, key));
  return out;
}

std::vector<std::uint64_t> get_u64_array(const TomlValue& v, const std::string& key) {
  if (v.kind != TomlValue::Kind::array) type_fail(v, key, "an array");
  std::vector<std::uint64_t> out;
  for (const auto& item : v.items) out.push_back(get_u64(item, key));
  return out;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---- synthetic dataset fixtures ----

constexpr int kAttrs = 8;
constexpr std::array<const char*, kAttrs> kColors = {"red",    "blue",   "green",  "black",
                                                     "white",  "yellow", "purple", "orange"};
constexpr std::array<const char*, kAttrs> kColorSyns = {"crimson", "azure",  "emerald", "ebony",
                                                        "ivory",   "golden", "violet",  "amber"};
constexpr std::array<const char*, kAttrs> kGarments = {"jacket", "dress", "shirt", "skirt",
                                                       "sweater", "coat",  "scarf", "hat"};
constexpr std::array<const char*, kAttrs> kGarmentSyns = {"blazer", "gown",  "blouse", "kilt",
                                                          "jumper", "parka", "shawl",  "cap"};
constexpr std::array<const char*, 15> kFiller = {"a",         "person", "wearing", "someone",
                                                 "dressed",   "in",     "the",     "looks",
                                                 "elegant",   "pedestrian", "walks", "by",
                                                 "this",      "fits",   "well"};
constexpr std::array<const char*, 5> kTemplates = {
    "a person wearing a {color} {garment}",   "someone dressed in a {color} {garment}",
    "the {color} {garment} looks elegant",    "a pedestrian in a {color} {garment} walks by",
    "this {color} {garment} fits well",
};

std::string fill_template(std::string text, const std::string& color, const std::string& garment) {
  const auto replace = [&text](const std::string& slot, const std::string& word) {
    const auto pos = text.find(slot);
    text = text.substr(0, pos) + word + text.substr(pos + slot.size());
  };
  replace("{color}", color);
  replace("{garment}", garment);
  return text;
}

// ---- CSIF1 byte helpers ----

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint16_t get_u16(const std::string& d, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(d[off]) |
                                    (static_cast<unsigned char>(d[off + 1]) << 8));
}

std::uint32_t get_u32(const std::string& d, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(d[off + i]);
  return v;
}

std::uint64_t get_u64_le(const std::string& d, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(d[off + i]);
  return v;
}

float get_f32(const std::string& d, std::size_t off) {
  return std::bit_cast<float>(get_u32(d, off));
}

// ---- result serialization ----

std::string jsonl_row(const MetricRow& r) {
  std::string line = "{\"seed\":" + std::to_string(r.seed);
  line += ",\"snr_db\":" + format_double(r.snr_db);
  line += ",\"variant\":\"" + r.variant + "\"";
  line += ",\"map\":" + format_double(r.map);
  line += ",\"rank1\":" + format_double(r.rank1);
  line += ",\"rank5\":" + format_double(r.rank5);
  line += ",\"rank10\":" + format_double(r.rank10);
  line += ",\"nmse\":" + format_double(r.nmse);
  line += "}";
  return line;
}

std::string csv_row(const MetricRow& r) {
  return std::to_string(r.seed) + "," + format_double(r.snr_db) + "," + r.variant + "," +
         format_double(r.map) + "," + format_double(r.rank1) + "," + format_double(r.rank5) +
         "," + format_double(r.rank10) + "," + format_double(r.nmse);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(errc::io, "cannot write " + path);
  return f;
}

void finish_out(std::ofstream& f, const std::string& path) {
  f.flush();
  if (!f.good()) fail(errc::io, "write failed for " + path);
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) fail(errc::numeric, "cannot format nan");
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void ExperimentConfig::validate() const {
  const auto bad = [](const std::string& msg) { fail(errc::config, "config: " + msg); };

  if (channel.model_tag != "los_like" && channel.model_tag != "nlos_like")
    bad("channel.model_tag must be los_like or nlos_like, got '" + channel.model_tag + "'");
  if (std::isnan(channel.k_factor_db)) bad("channel.k_factor_db must not be nan");
  const bool scatter_only = channel.k_factor_db == -std::numeric_limits<double>::infinity();
  if (channel.model_tag == "nlos_like" && !scatter_only)
    bad("channel.model_tag nlos_like requires k_factor_db = -inf");
  if (channel.model_tag == "los_like" && scatter_only)
    bad("channel.model_tag los_like requires k_factor_db > -inf");
  if (channel.n_r < 1 || channel.n_t < 1) bad("channel.n_r and channel.n_t must be >= 1");
  if (!(channel.doppler_hz >= 0.0) || std::isinf(channel.doppler_hz))
    bad("channel.doppler_hz must be finite and >= 0");
  if (!(channel.sample_interval_ms > 0.0) || std::isinf(channel.sample_interval_ms))
    bad("channel.sample_interval_ms must be finite and > 0");

  if (mimo.d < 1) bad("mimo.d must be >= 1");
  if (mimo.d > std::min(channel.n_r, channel.n_t))
    bad("mimo.d must not exceed min(channel.n_r, channel.n_t)");
  if (mimo.feedback_bits < -1 || mimo.feedback_bits == 0)
    bad("mimo.feedback_bits must be -1 (unquantized) or >= 1");

  if (cdg.l_patch < 1) bad("cdg.l_patch must be >= 1");
  if (cdg.t_his < cdg.l_patch) bad("cdg.t_his must be >= cdg.l_patch");
  if (cdg.t_pre < 1) bad("cdg.t_pre must be >= 1");
  if (cdg.stride < 1) bad("cdg.stride must be >= 1");
  if (cdg.d_e < 1) bad("cdg.d_e must be >= 1");
  if (!(cdg.lambda >= 0.0) || std::isinf(cdg.lambda)) bad("cdg.lambda must be finite and >= 0");
  if (cdg.epochs < 0) bad("cdg.epochs must be >= 0");
  if (!(cdg.lr > 0.0) || std::isinf(cdg.lr)) bad("cdg.lr must be finite and > 0");

  if (sdg.backend != "mock" && sdg.backend != "toy" && sdg.backend != "remote")
    bad("sdg.backend must be mock, toy, or remote, got '" + sdg.backend + "'");
  if (!(sdg.tau >= 0.0) || std::isinf(sdg.tau)) bad("sdg.tau must be finite and >= 0");
  if (sdg.max_len < 1) bad("sdg.max_len must be >= 1");
  if (!(sdg.hallucination_rate >= 0.0 && sdg.hallucination_rate <= 1.0))
    bad("sdg.hallucination_rate must be in [0, 1]");

  if (!(cdfc.gamma >= -1.0 && cdfc.gamma <= 1.0)) bad("cdfc.gamma must be in [-1, 1]");
  if (cdfc.max_retries < 0) bad("cdfc.max_retries must be >= 0");
  if (cdfc.fusion_pairing != "cross" && cdfc.fusion_pairing != "matched")
    bad("cdfc.fusion_pairing must be cross or matched, got '" + cdfc.fusion_pairing + "'");
  if (cdfc.n_feat < 2 || cdfc.n_feat % 2 != 0) bad("cdfc.n_feat must be even and >= 2");
  if (cdfc.epochs < 0) bad("cdfc.epochs must be >= 0");
  if (!(cdfc.lr > 0.0) || std::isinf(cdfc.lr)) bad("cdfc.lr must be finite and > 0");

  if (sweep.snr_grid_db.empty()) bad("sweep.snr_grid_db must not be empty");
  for (const double snr : sweep.snr_grid_db)
    if (std::isnan(snr) || snr == -std::numeric_limits<double>::infinity())
      bad("sweep.snr_grid_db entries must be finite or +inf");
  if (sweep.seeds.empty()) bad("sweep.seeds must not be empty");

  if (dataset.n_classes < 2) bad("dataset.n_classes must be >= 2");
  if (dataset.n_classes > kAttrs * kAttrs)
    bad("dataset.n_classes must be <= " + std::to_string(kAttrs * kAttrs) +
        " (the attribute grid)");
  if (dataset.captions_per_class < 1) bad("dataset.captions_per_class must be >= 1");
  if (dataset.vocab_size < 1) bad("dataset.vocab_size must be >= 1");
}

mimo::ChannelModelParams ExperimentConfig::channel_params() const {
  mimo::ChannelModelParams p;
  p.n_r = channel.n_r;
  p.n_t = channel.n_t;
  p.doppler_hz = channel.doppler_hz;
  p.k_factor_db = channel.k_factor_db;
  p.sample_interval_ms = channel.sample_interval_ms;
  return p;
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  const std::set<std::string> sections = {"channel", "mimo", "cdg",     "sdg",
                                          "cdfc",    "sweep", "dataset", "ablations"};
  std::string section;
  std::set<std::string> seen;

  std::istringstream stream(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(stream, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') config_fail(line_no, "unterminated section header " + line);
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) config_fail(line_no, "unknown section [" + section + "]");
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string::npos) config_fail(line_no, "expected key = value, got '" + line + "'");
    if (section.empty()) config_fail(line_no, "key outside any [section]");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) config_fail(line_no, "empty key");
    const std::string qual = section + "." + key;
    if (!seen.insert(qual).second) config_fail(line_no, "duplicate key " + qual);
    const TomlValue v = parse_value(line.substr(eq + 1), line_no);

    bool known = true;
    if (section == "channel") {
      if (key == "model_tag") cfg.channel.model_tag = get_string(v, qual);
      else if (key == "n_r") cfg.channel.n_r = get_int(v, qual);
      else if (key == "n_t") cfg.channel.n_t = get_int(v, qual);
      else if (key == "doppler_hz") cfg.channel.doppler_hz = get_double(v, qual);
      else if (key == "k_factor_db") cfg.channel.k_factor_db = get_double(v, qual);
      else if (key == "sample_interval_ms") cfg.channel.sample_interval_ms = get_double(v, qual);
      else known = false;
    } else if (section == "mimo") {
      if (key == "d") cfg.mimo.d = get_int(v, qual);
      else if (key == "equalize") cfg.mimo.equalize = get_bool(v, qual);
      else if (key == "feedback_bits") cfg.mimo.feedback_bits = get_i64(v, qual);
      else known = false;
    } else if (section == "cdg") {
      if (key == "t_his") cfg.cdg.t_his = get_int(v, qual);
      else if (key == "t_pre") cfg.cdg.t_pre = get_int(v, qual);
      else if (key == "l_patch") cfg.cdg.l_patch = get_int(v, qual);
      else if (key == "stride") cfg.cdg.stride = get_int(v, qual);
      else if (key == "d_e") cfg.cdg.d_e = get_int(v, qual);
      else if (key == "lambda") cfg.cdg.lambda = get_double(v, qual);
      else if (key == "epochs") cfg.cdg.epochs = get_int(v, qual);
      else if (key == "lr") cfg.cdg.lr = get_double(v, qual);
      else known = false;
    } else if (section == "sdg") {
      if (key == "backend") cfg.sdg.backend = get_string(v, qual);
      else if (key == "tau") cfg.sdg.tau = get_double(v, qual);
      else if (key == "max_len") cfg.sdg.max_len = get_int(v, qual);
      else if (key == "hallucination_rate") cfg.sdg.hallucination_rate = get_double(v, qual);
      else known = false;
    } else if (section == "cdfc") {
      if (key == "gamma") cfg.cdfc.gamma = get_double(v, qual);
      else if (key == "max_retries") cfg.cdfc.max_retries = get_int(v, qual);
      else if (key == "fusion_pairing") cfg.cdfc.fusion_pairing = get_string(v, qual);
      else if (key == "n_feat") cfg.cdfc.n_feat = get_int(v, qual);
      else if (key == "epochs") cfg.cdfc.epochs = get_int(v, qual);
      else if (key == "lr") cfg.cdfc.lr = get_double(v, qual);
      else known = false;
    } else if (section == "sweep") {
      if (key == "snr_grid_db") cfg.sweep.snr_grid_db = get_double_array(v, qual);
      else if (key == "seeds") cfg.sweep.seeds = get_u64_array(v, qual);
      else known = false;
    } else if (section == "dataset") {
      if (key == "n_classes") cfg.dataset.n_classes = get_int(v, qual);
      else if (key == "captions_per_class") cfg.dataset.captions_per_class = get_int(v, qual);
      else if (key == "vocab_size") cfg.dataset.vocab_size = get_int(v, qual);
      else known = false;
    } else if (section == "ablations") {
      if (key == "disable_sdg") cfg.ablations.disable_sdg = get_bool(v, qual);
      else if (key == "disable_cdg") cfg.ablations.disable_cdg = get_bool(v, qual);
      else known = false;
    }
    if (!known) config_fail(line_no, "unknown key '" + key + "' in [" + section + "]");
  }

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(errc::io, "cannot open config " + path);
  std::ostringstream buffer;
  buffer << f.rdbuf();
  return parse_config(buffer.str());
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::string canon;
  const auto kv = [&canon](const char* key, const std::string& value) {
    canon += key;
    canon += '=';
    canon += value;
    canon += '\n';
  };
  kv("channel.model_tag", cfg.channel.model_tag);
  kv("channel.n_r", std::to_string(cfg.channel.n_r));
  kv("channel.n_t", std::to_string(cfg.channel.n_t));
  kv("channel.doppler_hz", format_double(cfg.channel.doppler_hz));
  kv("channel.k_factor_db", format_double(cfg.channel.k_factor_db));
  kv("channel.sample_interval_ms", format_double(cfg.channel.sample_interval_ms));
  kv("mimo.d", std::to_string(cfg.mimo.d));
  kv("mimo.equalize", cfg.mimo.equalize ? "true" : "false");
  kv("mimo.feedback_bits", std::to_string(cfg.mimo.feedback_bits));
  kv("cdg.t_his", std::to_string(cfg.cdg.t_his));
  kv("cdg.t_pre", std::to_string(cfg.cdg.t_pre));
  kv("cdg.l_patch", std::to_string(cfg.cdg.l_patch));
  kv("cdg.stride", std::to_string(cfg.cdg.stride));
  kv("cdg.d_e", std::to_string(cfg.cdg.d_e));
  kv("cdg.lambda", format_double(cfg.cdg.lambda));
  kv("cdg.epochs", std::to_string(cfg.cdg.epochs));
  kv("cdg.lr", format_double(cfg.cdg.lr));
  kv("sdg.backend", cfg.sdg.backend);
  kv("sdg.tau", format_double(cfg.sdg.tau));
  kv("sdg.max_len", std::to_string(cfg.sdg.max_len));
  kv("sdg.hallucination_rate", format_double(cfg.sdg.hallucination_rate));
  kv("cdfc.gamma", format_double(cfg.cdfc.gamma));
  kv("cdfc.max_retries", std::to_string(cfg.cdfc.max_retries));
  kv("cdfc.fusion_pairing", cfg.cdfc.fusion_pairing);
  kv("cdfc.n_feat", std::to_string(cfg.cdfc.n_feat));
  kv("cdfc.epochs", std::to_string(cfg.cdfc.epochs));
  kv("cdfc.lr", format_double(cfg.cdfc.lr));
  std::string grid;
  for (const double snr : cfg.sweep.snr_grid_db) {
    if (!grid.empty()) grid += ',';
    grid += format_double(snr);
  }
  kv("sweep.snr_grid_db", grid);
  std::string seeds;
  for (const std::uint64_t s : cfg.sweep.seeds) {
    if (!seeds.empty()) seeds += ',';
    seeds += std::to_string(s);
  }
  kv("sweep.seeds", seeds);
  kv("dataset.n_classes", std::to_string(cfg.dataset.n_classes));
  kv("dataset.captions_per_class", std::to_string(cfg.dataset.captions_per_class));
  kv("dataset.vocab_size", std::to_string(cfg.dataset.vocab_size));
  kv("ablations.disable_sdg", cfg.ablations.disable_sdg ? "true" : "false");
  kv("ablations.disable_cdg", cfg.ablations.disable_cdg ? "true" : "false");

  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canon)));
  return std::string(buf);
}

RetrievalCorpus synth_dataset(const ExperimentConfig::Dataset& cfg, int d_emb, int d_proto,
                              std::uint64_t seed) {
  if (cfg.n_classes < 2) fail(errc::config, "dataset: n_classes must be >= 2");
  if (cfg.n_classes > kAttrs * kAttrs)
    fail(errc::config, "dataset: n_classes exceeds the attribute grid of " +
                           std::to_string(kAttrs * kAttrs));
  if (cfg.captions_per_class < 1) fail(errc::config, "dataset: captions_per_class must be >= 1");
  if (d_emb < 1 || d_proto < 1) fail(errc::config, "dataset: embedding dims must be >= 1");

  // caption-bearing words first, then their anti-tokens, then prompt words
  std::vector<std::string> words;
  for (const char* w : kColors) words.emplace_back(w);
  for (const char* w : kColorSyns) words.emplace_back(w);
  for (const char* w : kGarments) words.emplace_back(w);
  for (const char* w : kGarmentSyns) words.emplace_back(w);
  for (const char* w : kFiller) words.emplace_back(w);
  const std::size_t caption_words = words.size();
  for (std::size_t i = 0; i < caption_words; ++i) words.push_back("~" + words[i]);
  words.emplace_back("Rewrite");
  words.emplace_back("caption");

  const int natural = static_cast<int>(words.size()) + 2;  // <unk> and <end>
  if (cfg.vocab_size < natural)
    fail(errc::config, "dataset: vocab_size " + std::to_string(cfg.vocab_size) +
                           " is too small for the template vocabulary (needs >= " +
                           std::to_string(natural) + ")");
  for (int i = 0; i < cfg.vocab_size - natural; ++i) words.push_back("pad_" + std::to_string(i));

  RetrievalCorpus corpus;
  corpus.n_classes = cfg.n_classes;
  corpus.vocab = lmkb::Vocab::from_words(words);

  // base rows random, synonyms correlated with their base word, anti-tokens
  // exactly negated
  const int v_total = corpus.vocab.size();
  rmat e(v_total, d_emb);
  Rng base_rng(derive_seed(seed, "dataset.embed"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_emb));
  for (int r = 0; r < v_total; ++r)
    for (int c = 0; c < d_emb; ++c) e(r, c) = scale * base_rng.gaussian();
  Rng syn_rng(derive_seed(seed, "dataset.synonym"));
  for (int i = 0; i < kAttrs; ++i) {
    for (const auto& [syn, base] :
         {std::pair{kColorSyns[i], kColors[i]}, std::pair{kGarmentSyns[i], kGarments[i]}}) {
      rvec jitter(d_emb);
      for (int c = 0; c < d_emb; ++c) jitter(c) = scale * syn_rng.gaussian();
      e.row(corpus.vocab.id_of(syn)) = e.row(corpus.vocab.id_of(base)) + 0.05 * jitter.transpose();
    }
  }
  for (std::size_t i = 0; i < caption_words; ++i) {
    const int anti = corpus.vocab.id_of("~" + words[i]);
    e.row(anti) = -e.row(corpus.vocab.id_of(words[i]));
  }
  corpus.table = lmkb::EmbeddingTable{std::move(e)};

  const auto color_of = [](int c) { return c % kAttrs; };
  const auto garment_of = [](int c) { return (c / kAttrs + c % kAttrs) % kAttrs; };

  // each gallery row is the unit-normalised random projection of its class
  // descriptor (color word + garment word), so prototype geometry mirrors
  // caption geometry instead of being an arbitrary codebook
  Rng gallery_rng(derive_seed(seed, "dataset.gallery"));
  rmat proj(d_proto, d_emb);
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(d_emb));
  for (int r = 0; r < d_proto; ++r)
    for (int c = 0; c < d_emb; ++c) proj(r, c) = proj_scale * gallery_rng.gaussian();
  corpus.gallery = rmat(cfg.n_classes, d_proto);
  for (int c = 0; c < cfg.n_classes; ++c) {
    const rvec desc =
        (corpus.table.e_word.row(corpus.vocab.id_of(kColors[color_of(c)])) +
         corpus.table.e_word.row(corpus.vocab.id_of(kGarments[garment_of(c)])))
            .transpose();
    const rvec p = proj * desc;
    const double norm = p.norm();
    if (!(norm > 0.0)) fail(errc::numeric, "dataset: degenerate class prototype");
    corpus.gallery.row(c) = (p / norm).transpose();
  }

  for (int i = 0; i < kAttrs; ++i) {
    corpus.thesaurus[kColors[i]] = {kColorSyns[i]};
    corpus.thesaurus[kColorSyns[i]] = {kColors[i]};
    corpus.thesaurus[kGarments[i]] = {kGarmentSyns[i]};
    corpus.thesaurus[kGarmentSyns[i]] = {kGarments[i]};
  }

  const int n_train = cfg.captions_per_class * 4 / 5;  // 80/20 by caption
  for (int c = 0; c < cfg.n_classes; ++c) {
    const int color = color_of(c);
    const int garment = garment_of(c);
    for (int j = 0; j < cfg.captions_per_class; ++j) {
      Rng rng(derive_seed(seed, "dataset.caption",
                          (static_cast<std::uint64_t>(c) << 16) | static_cast<std::uint64_t>(j)));
      const std::string color_word = rng.below(2) == 0 ? kColors[color] : kColorSyns[color];
      const std::string garment_word = rng.below(2) == 0 ? kGarments[garment] : kGarmentSyns[garment];
      cdfc::TrainSample sample;
      // rotate template assignment by class so every template shows up in the
      // train split and the held-out caption is a fresh template/class pairing
      sample.text =
          fill_template(kTemplates[(c + j) % kTemplates.size()], color_word, garment_word);
      sample.tokens = sdg::tokenize(sample.text, corpus.vocab);
      sample.label = c;
      (j < n_train ? corpus.train : corpus.test).push_back(std::move(sample));
    }
  }
  return corpus;
}

void save_csi(const mimo::ChannelTrace& trace, const std::string& path) {
  if (trace.length() == 0) fail(errc::invalid_input, "cannot save an empty trace");
  trace.validate();
  const std::int64_t t0 = trace.realizations.front().t_index;
  for (std::size_t i = 0; i < trace.length(); ++i) {
    const auto& r = trace.realizations[i];
    if (r.t_index != t0 + static_cast<std::int64_t>(i))
      fail(errc::invalid_input, "trace sample indices must be consecutive to serialize");
    if (r.sample_interval_ms != trace.sample_interval_ms())
      fail(errc::invalid_input, "trace sample intervals must agree to serialize");
  }
  if (trace.n_r() > 0xffff || trace.n_t() > 0xffff)
    fail(errc::invalid_input, "antenna counts exceed the file format");
  if (trace.length() > 0xffffffffull) fail(errc::invalid_input, "trace too long for the file format");

  std::string out;
  out.reserve(kCsifHeaderBytes + trace.length() * trace.n_r() * trace.n_t() * 8);
  out += "CSIF";
  put_u16(out, kCsifVersion);
  put_u16(out, static_cast<std::uint16_t>(trace.n_r()));
  put_u16(out, static_cast<std::uint16_t>(trace.n_t()));
  put_u32(out, static_cast<std::uint32_t>(trace.length()));
  put_f32(out, static_cast<float>(trace.sample_interval_ms()));
  put_u64(out, static_cast<std::uint64_t>(t0));
  for (int i = 0; i < 6; ++i) out.push_back('\0');

  for (const auto& r : trace.realizations)
    for (Eigen::Index row = 0; row < r.h.rows(); ++row)
      for (Eigen::Index col = 0; col < r.h.cols(); ++col) {
        put_f32(out, static_cast<float>(r.h(row, col).real()));
        put_f32(out, static_cast<float>(r.h(row, col).imag()));
      }

  auto f = open_out(path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  finish_out(f, path);
}

mimo::ChannelTrace load_csi(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(errc::io, "cannot open " + path);
  std::ostringstream buffer;
  buffer << f.rdbuf();
  const std::string data = buffer.str();

  if (data.size() < kCsifHeaderBytes)
    fail(errc::format, path + ": truncated header, expected at least " +
                           std::to_string(kCsifHeaderBytes) + " bytes, got " +
                           std::to_string(data.size()));
  if (data.compare(0, 4, "CSIF") != 0) fail(errc::format, path + ": bad magic, expected CSIF");
  const std::uint16_t version = get_u16(data, 4);
  if (version != kCsifVersion)
    fail(errc::format, path + ": unsupported version " + std::to_string(version));
  const int n_r = get_u16(data, 6);
  const int n_t = get_u16(data, 8);
  const std::uint32_t length = get_u32(data, 10);
  const double interval = get_f32(data, 14);
  const std::int64_t t0 = static_cast<std::int64_t>(get_u64_le(data, 18));
  if (n_r == 0 || n_t == 0 || length == 0)
    fail(errc::format, path + ": zero antenna count or length");
  if (!(interval > 0.0) || !std::isfinite(interval))
    fail(errc::format, path + ": bad sample interval");

  const std::size_t expected =
      kCsifHeaderBytes + static_cast<std::size_t>(length) * n_r * n_t * 8;
  if (data.size() != expected)
    fail(errc::format, path + ": expected " + std::to_string(expected) + " bytes, got " +
                           std::to_string(data.size()));

  mimo::ChannelTrace trace;
  trace.model_tag = mimo::ModelTag::from_file;
  trace.realizations.reserve(length);
  std::size_t off = kCsifHeaderBytes;
  for (std::uint32_t i = 0; i < length; ++i) {
    mimo::ChannelRealization r;
    r.t_index = t0 + i;
    r.sample_interval_ms = interval;
    r.h = cmat(n_r, n_t);
    for (int row = 0; row < n_r; ++row)
      for (int col = 0; col < n_t; ++col) {
        const float re = get_f32(data, off);
        const float im = get_f32(data, off + 4);
        if (!std::isfinite(re) || !std::isfinite(im))
          fail(errc::format, path + ": non-finite gain at byte offset " + std::to_string(off));
        r.h(row, col) = cplx(re, im);
        off += 8;
      }
    trace.realizations.push_back(std::move(r));
  }
  trace.validate();
  return trace;
}

bool RunRecord::same_payload(const RunRecord& other) const {
  return config_hash == other.config_hash && variant == other.variant && seeds == other.seeds &&
         metrics == other.metrics && cdg_losses == other.cdg_losses &&
         cdfc_losses == other.cdfc_losses && filter == other.filter &&
         user_nmse == other.user_nmse;
}

std::vector<std::string> emit_results(const RunRecord& record, const std::string& out_dir,
                                      EmitFormat format) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(errc::io, "cannot create " + out_dir + ": " + ec.message());

  std::vector<std::string> written;
  const auto path_of = [&out_dir](const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
  };

  if (format == EmitFormat::jsonl || format == EmitFormat::both) {
    const std::string path = path_of("metrics.jsonl");
    auto f = open_out(path);
    for (const auto& row : record.metrics) f << jsonl_row(row) << '\n';
    finish_out(f, path);
    written.push_back(path);
  }

  if (format == EmitFormat::csv || format == EmitFormat::both) {
    const std::string path = path_of("metrics.csv");
    auto f = open_out(path);
    f << "seed,snr_db,variant,map,rank1,rank5,rank10,nmse\n";
    for (const auto& row : record.metrics) f << csv_row(row) << '\n';
    finish_out(f, path);
    written.push_back(path);
  }

  {
    // mean-over-seeds series for this variant, SNR ascending
    std::map<double, std::array<double, 6>> agg;  // map, r1, r5, r10, nmse, count
    for (const auto& row : record.metrics) {
      auto& a = agg[row.snr_db];
      a[0] += row.map;
      a[1] += row.rank1;
      a[2] += row.rank5;
      a[3] += row.rank10;
      a[4] += row.nmse;
      a[5] += 1.0;
    }
    const std::string path = path_of("plot.tsv");
    auto f = open_out(path);
    f << "snr_db\tvariant\tmap_mean\trank1_mean\trank5_mean\trank10_mean\tnmse_mean\n";
    for (const auto& [snr, a] : agg) {
      f << format_double(snr) << '\t' << record.variant;
      for (int i = 0; i < 5; ++i) f << '\t' << format_double(a[i] / a[5]);
      f << '\n';
    }
    finish_out(f, path);
    written.push_back(path);
  }

  {
    nlohmann::ordered_json j;
    j["config_hash"] = record.config_hash;
    j["variant"] = record.variant;
    j["seeds"] = record.seeds;
    j["wall_clock_s"] = record.wall_clock_s;
    j["filter"] = {{"samples", record.filter.samples},
                   {"accepted", record.filter.accepted},
                   {"fallbacks", record.filter.fallbacks},
                   {"generation_calls", record.filter.generation_calls},
                   {"accept_rate", record.filter.accept_rate()},
                   {"fallback_rate", record.filter.fallback_rate()}};
    j["metrics"] = nlohmann::ordered_json::array();
    for (const auto& row : record.metrics)
      j["metrics"].push_back({{"seed", row.seed},
                              {"snr_db", row.snr_db},
                              {"variant", row.variant},
                              {"map", row.map},
                              {"rank1", row.rank1},
                              {"rank5", row.rank5},
                              {"rank10", row.rank10},
                              {"nmse", row.nmse}});
    j["cdg_losses"] = nlohmann::ordered_json::array();
    for (const auto& row : record.cdg_losses)
      j["cdg_losses"].push_back({{"seed", row.seed},
                                 {"epoch", row.epoch},
                                 {"total", row.total},
                                 {"ce", row.ce},
                                 {"nmse", row.nmse}});
    j["cdfc_losses"] = nlohmann::ordered_json::array();
    for (const auto& row : record.cdfc_losses)
      j["cdfc_losses"].push_back(
          {{"seed", row.seed}, {"snr_db", row.snr_db}, {"step", row.step}, {"loss", row.loss}});
    j["user_nmse"] = nlohmann::ordered_json::array();
    for (const auto& row : record.user_nmse)
      j["user_nmse"].push_back(
          {{"user_id", row.user_id}, {"position", row.position}, {"nmse", row.nmse}});

    const std::string path = path_of("run.json");
    auto f = open_out(path);
    f << j.dump(2) << '\n';
    finish_out(f, path);
    written.push_back(path);
  }

  return written;
}

std::vector<MetricRow> read_metrics_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(errc::io, "cannot open " + path);
  std::vector<MetricRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MetricRow row;
      row.seed = j.at("seed").get<std::uint64_t>();
      row.snr_db = j.at("snr_db").get<double>();
      row.variant = j.at("variant").get<std::string>();
      row.map = j.at("map").get<double>();
      row.rank1 = j.at("rank1").get<double>();
      row.rank5 = j.at("rank5").get<double>();
      row.rank10 = j.at("rank10").get<double>();
      row.nmse = j.at("nmse").get<double>();
      rows.push_back(std::move(row));
    } catch (const nlohmann::json::exception& e) {
      fail(errc::format, path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

namespace {

// owns the transformer the sampling backend borrows
class owning_toy_backend : public lmkb::TextBackend {
 public:
  owning_toy_backend(const RetrievalCorpus& corpus, std::uint64_t seed)
      : net_(toy_config(corpus, seed)),
        w_out_(toy_head(corpus, seed)),
        inner_(&net_, &corpus.vocab, &corpus.table, w_out_) {}

  std::string generate_text(const std::string& prompt, double temperature, int max_tokens,
                            std::uint64_t seed) override {
    return inner_.generate_text(prompt, temperature, max_tokens, seed);
  }
  const char* tag() const override { return inner_.tag(); }

 private:
  static lmkb::BackboneConfig toy_config(const RetrievalCorpus& corpus, std::uint64_t seed) {
    lmkb::BackboneConfig c;
    c.l_depth = 1;
    c.d_llm = corpus.table.dim();
    c.heads = 1;
    c.max_seq = 48;
    c.seed = derive_seed(seed, "backend.toy");
    return c;
  }
  static rmat toy_head(const RetrievalCorpus& corpus, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "backend.head"));
    rmat w(corpus.table.dim(), corpus.vocab.size());
    const double scale = 1.0 / std::sqrt(static_cast<double>(corpus.table.dim()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.gaussian();
    return w;
  }

  lmkb::ToyTransformer net_;
  rmat w_out_;
  sdg::ToyTextBackend inner_;
};

}  // namespace

std::unique_ptr<lmkb::TextBackend> make_backend(const ExperimentConfig::Sdg& cfg,
                                                const RetrievalCorpus& corpus,
                                                std::uint64_t seed) {
  if (cfg.backend == "mock")
    return std::make_unique<sdg::MockParaphraser>(corpus.thesaurus, cfg.hallucination_rate);
  if (cfg.backend == "toy") return std::make_unique<owning_toy_backend>(corpus, seed);
  if (cfg.backend == "remote") {
    const char* url = std::getenv("SEMKB_BACKEND_URL");
    if (url == nullptr || *url == '\0')
      fail(errc::config, "backend 'remote' requires SEMKB_BACKEND_URL to be set");
    return std::make_unique<lmkb::RemoteBackend>(url);
  }
  fail(errc::config, "unknown backend '" + cfg.backend + "'");
}

}  // namespace semkb::harness
