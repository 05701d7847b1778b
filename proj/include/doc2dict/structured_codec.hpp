#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "doc2dict/rng.hpp"

namespace d2d {

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Format { json, xml, yaml, pyliteral };
enum class RecordShape { dict, tuple_set };

inline const char* format_name(Format f) {
  switch (f) {
    case Format::json: return "json";
    case Format::xml: return "xml";
    case Format::yaml: return "yaml";
    case Format::pyliteral: return "pyliteral";
  }
  return "?";
}

inline std::optional<Format> parse_format_name(std::string_view s) {
  if (s == "json") return Format::json;
  if (s == "xml") return Format::xml;
  if (s == "yaml") return Format::yaml;
  if (s == "pyliteral") return Format::pyliteral;
  return std::nullopt;
}

inline std::optional<RecordShape> parse_shape_name(std::string_view s) {
  if (s == "dict") return RecordShape::dict;
  if (s == "tuples" || s == "tuple_set") return RecordShape::tuple_set;
  return std::nullopt;
}

namespace detail {

// -?(0|[1-9][0-9]*)(\.[0-9]+)?([eE][+-]?[0-9]+)?
inline bool is_number_text(std::string_view s) {
  std::size_t i = 0;
  auto digits = [&] {
    const std::size_t b = i;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
    return i - b;
  };
  if (i < s.size() && s[i] == '-') ++i;
  if (i >= s.size()) return false;
  if (s[i] == '0') {
    ++i;
  } else if (digits() == 0) {
    return false;
  }
  if (i < s.size() && s[i] == '.') {
    ++i;
    if (digits() == 0) return false;
  }
  if (i < s.size() && (s[i] == 'e' || s[i] == 'E')) {
    ++i;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
    if (digits() == 0) return false;
  }
  return i == s.size();
}

}  // namespace detail

// A scalar value. Numbers keep their decimal text verbatim.
struct Value {
  std::string text;
  bool is_number = false;

  static Value string(std::string s) { return {std::move(s), false}; }

  static Value number(double v) {
    if (!std::isfinite(v)) throw CodecError("non-finite number cannot be serialized");
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    std::string t(buf, res.ptr);
    // to_chars may print "1e+20"; the grammar accepts that form.
    return {t, true};
  }

  static Value number_text(std::string s) {
    if (!detail::is_number_text(s)) throw CodecError("not a decimal number: '" + s + "'");
    return {std::move(s), true};
  }

  friend bool operator==(const Value&, const Value&) = default;
  friend auto operator<=>(const Value&, const Value&) = default;
};

struct Record {
  RecordShape shape = RecordShape::dict;
  std::vector<std::pair<std::string, Value>> pairs;

  std::size_t size() const { return pairs.size(); }
  Record& add(std::string key, Value v) {
    pairs.emplace_back(std::move(key), std::move(v));
    return *this;
  }

  friend bool operator==(const Record&, const Record&) = default;
};

// Pairs sorted by (key, value text). Evaluation compares values as text.
inline Record canonicalize(const Record& r) {
  Record out = r;
  std::sort(out.pairs.begin(), out.pairs.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    if (a.second.text != b.second.text) return a.second.text < b.second.text;
    return a.second.is_number < b.second.is_number;
  });
  return out;
}

inline bool canonically_equal(const Record& a, const Record& b) {
  if (a.size() != b.size()) return false;
  const Record ca = canonicalize(a);
  const Record cb = canonicalize(b);
  for (std::size_t i = 0; i < ca.size(); ++i) {
    if (ca.pairs[i].first != cb.pairs[i].first || ca.pairs[i].second.text != cb.pairs[i].second.text) return false;
  }
  return true;
}

// Seeded Fisher-Yates permutation of the pairs.
inline Record shuffle_pairs(const Record& r, std::uint64_t seed) {
  Record out = r;
  const std::uint64_t key = mix_seed({seed, 0x5348554646ull});
  for (std::size_t i = out.pairs.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(counter_uniform(key, i) * static_cast<double>(i));
    std::swap(out.pairs[i - 1], out.pairs[std::min(j, i - 1)]);
  }
  return out;
}

enum class FailureKind { tokenizer_artifact, grammar_violation, duplicate_key, type_error };

inline const char* failure_name(FailureKind k) {
  switch (k) {
    case FailureKind::tokenizer_artifact: return "tokenizer-artifact";
    case FailureKind::grammar_violation: return "grammar-violation";
    case FailureKind::duplicate_key: return "duplicate-key";
    case FailureKind::type_error: return "type-error";
  }
  return "?";
}

struct ParseOutcome {
  std::optional<Record> record;
  std::optional<FailureKind> failure;
  std::string message;

  bool ok() const { return record.has_value(); }
};

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline void validate_record(const Record& r) {
  std::set<std::string> keys;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& [k, v] : r.pairs) {
    if (k.empty()) throw CodecError("record key must be nonempty");
    if (v.is_number && !is_number_text(v.text)) throw CodecError("invalid number text '" + v.text + "'");
    if (r.shape == RecordShape::dict && !keys.insert(k).second) throw CodecError("duplicate key '" + k + "'");
    if (r.shape == RecordShape::tuple_set && !seen.insert({k, v.text}).second) {
      throw CodecError("duplicate pair ('" + k + "', '" + v.text + "')");
    }
  }
}

inline std::string json_quote(const std::string& s) {
  return nlohmann::json(s).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline std::string py_quote(const std::string& s) {
  std::string out = "'";
  for (char ch : s) {
    switch (ch) {
      case '\'': out += "\\'"; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += ch;
    }
  }
  return out + "'";
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    const auto u = static_cast<unsigned char>(ch);
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default:
        if (u < 0x20) {
          out += "&#" + std::to_string(u) + ";";
        } else {
          out += ch;
        }
    }
  }
  return out;
}

inline bool is_plain_key(const std::string& k) {
  if (k.empty()) return false;
  auto ident = [](char c, bool first) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || (!first && c >= '0' && c <= '9');
  };
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (!ident(k[i], i == 0)) return false;
  }
  return true;
}

inline std::string yaml_key(const std::string& k) { return is_plain_key(k) ? k : json_quote(k); }

}  // namespace detail

// pyliteral: {'k': v, ...} or {('k', v), ...}
// json:      {"k": v, ...} or [["k", v], ...]
// xml:       <record><field name="k">v</field>...</record>
// yaml:      k: v lines or - [k, v] lines; strings double-quoted; empty is {} or []
inline std::string serialize(const Record& r, Format format) {
  detail::validate_record(r);
  const bool dict = r.shape == RecordShape::dict;
  std::string out;
  switch (format) {
    case Format::pyliteral: {
      out = "{";
      for (std::size_t i = 0; i < r.size(); ++i) {
        const auto& [k, v] = r.pairs[i];
        if (i) out += ", ";
        const std::string val = v.is_number ? v.text : detail::py_quote(v.text);
        out += dict ? detail::py_quote(k) + ": " + val : "(" + detail::py_quote(k) + ", " + val + ")";
      }
      return out + "}";
    }
    case Format::json: {
      out = dict ? "{" : "[";
      for (std::size_t i = 0; i < r.size(); ++i) {
        const auto& [k, v] = r.pairs[i];
        if (i) out += ", ";
        const std::string val = v.is_number ? v.text : detail::json_quote(v.text);
        out += dict ? detail::json_quote(k) + ": " + val : "[" + detail::json_quote(k) + ", " + val + "]";
      }
      return out + (dict ? "}" : "]");
    }
    case Format::xml: {
      out = "<record>";
      for (const auto& [k, v] : r.pairs) {
        out += "<field name=\"" + detail::xml_escape(k) + "\">" + detail::xml_escape(v.text) + "</field>";
      }
      return out + "</record>";
    }
    case Format::yaml: {
      if (r.pairs.empty()) return dict ? "{}" : "[]";
      for (std::size_t i = 0; i < r.size(); ++i) {
        const auto& [k, v] = r.pairs[i];
        if (i) out += '\n';
        const std::string val = v.is_number ? v.text : detail::json_quote(v.text);
        out += dict ? detail::yaml_key(k) + ": " + val : "- [" + detail::yaml_key(k) + ", " + val + "]";
      }
      return out;
    }
  }
  throw CodecError("unknown format");
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

struct Fail {
  FailureKind kind;
  std::string message;
};

class Cursor {
 public:
  explicit Cursor(std::string_view s) : s_(s) {}

  bool eof() const { return i_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[i_]; }
  std::size_t pos() const { return i_; }
  std::string_view rest() const { return s_.substr(i_); }
  void advance(std::size_t n = 1) { i_ += n; }

  void skip_ws() {
    while (!eof() && (s_[i_] == ' ' || s_[i_] == '\t' || s_[i_] == '\n' || s_[i_] == '\r')) ++i_;
  }
  void skip_spaces() {
    while (!eof() && s_[i_] == ' ') ++i_;
  }
  bool accept(std::string_view lit) {
    if (s_.substr(i_, lit.size()) == lit) {
      i_ += lit.size();
      return true;
    }
    return false;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw Fail{FailureKind::grammar_violation, what + " at offset " + std::to_string(i_)};
  }
  void expect(std::string_view lit) {
    if (!accept(lit)) fail("expected '" + std::string(lit) + "'");
  }

  // Longest run matching the number grammar's alphabet.
  std::string take_number_like() {
    const std::size_t b = i_;
    while (!eof()) {
      const char c = s_[i_];
      if ((c >= '0' && c <= '9') || c == '-' || c == '+' || c == '.' || c == 'e' || c == 'E') {
        ++i_;
      } else {
        break;
      }
    }
    return std::string(s_.substr(b, i_ - b));
  }

 private:
  std::string_view s_;
  std::size_t i_ = 0;
};

[[noreturn]] inline void type_fail(const std::string& what) { throw Fail{FailureKind::type_error, what}; }

inline Value parse_number_token(Cursor& cur) {
  const std::size_t at = cur.pos();
  std::string t = cur.take_number_like();
  if (!is_number_text(t)) {
    throw Fail{FailureKind::grammar_violation, "malformed number '" + t + "' at offset " + std::to_string(at)};
  }
  return {std::move(t), true};
}

// Values that are well-formed in the host language but not scalars here.
inline bool looks_like_nonscalar(std::string_view rest) {
  for (std::string_view w : {"True", "False", "None", "true", "false", "null"}) {
    if (rest.substr(0, w.size()) == w) return true;
  }
  return !rest.empty() && (rest[0] == '[' || rest[0] == '{' || rest[0] == '(');
}

// ---- pyliteral

inline std::string py_string(Cursor& cur) {
  cur.expect("'");
  std::string out;
  while (true) {
    if (cur.eof()) cur.fail("unterminated string");
    const char c = cur.peek();
    cur.advance();
    if (c == '\'') return out;
    if (c == '\n') cur.fail("newline in string");
    if (c != '\\') {
      out += c;
      continue;
    }
    if (cur.eof()) cur.fail("unterminated escape");
    const char e = cur.peek();
    cur.advance();
    switch (e) {
      case '\'': out += '\''; break;
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: cur.fail(std::string("invalid escape \\") + e);
    }
  }
}

inline Value py_value(Cursor& cur) {
  if (cur.peek() == '\'') return Value::string(py_string(cur));
  if (looks_like_nonscalar(cur.rest())) type_fail("value must be a string or number");
  return parse_number_token(cur);
}

inline std::string py_key(Cursor& cur) {
  if (cur.peek() != '\'') {
    if (cur.peek() == '-' || (cur.peek() >= '0' && cur.peek() <= '9') || looks_like_nonscalar(cur.rest())) {
      type_fail("key must be a string");
    }
    cur.fail("expected quoted key");
  }
  return py_string(cur);
}

inline void parse_pyliteral(Cursor& cur, Record& r) {
  cur.skip_ws();
  cur.expect("{");
  cur.skip_ws();
  if (cur.accept("}")) return;
  while (true) {
    cur.skip_ws();
    if (r.shape == RecordShape::dict) {
      std::string k = py_key(cur);
      cur.skip_ws();
      cur.expect(":");
      cur.skip_ws();
      r.add(std::move(k), py_value(cur));
    } else {
      cur.expect("(");
      cur.skip_ws();
      std::string k = py_key(cur);
      cur.skip_ws();
      cur.expect(",");
      cur.skip_ws();
      Value v = py_value(cur);
      cur.skip_ws();
      cur.expect(")");
      r.add(std::move(k), std::move(v));
    }
    cur.skip_ws();
    if (cur.accept("}")) return;
    cur.expect(",");
  }
}

// ---- json (via the vendored SAX parser)

class JsonSax : public nlohmann::json_sax<nlohmann::json> {
 public:
  explicit JsonSax(Record& r) : r_(r) {}

  std::optional<Fail> failure;

  bool null() override { return scalar_fail(); }
  bool boolean(bool) override { return scalar_fail(); }
  bool number_integer(number_integer_t v) override { return number(std::to_string(v)); }
  bool number_unsigned(number_unsigned_t v) override { return number(std::to_string(v)); }
  bool number_float(number_float_t, const string_t& s) override { return number(s); }
  bool binary(binary_t&) override { return scalar_fail(); }

  bool string(string_t& s) override {
    if (r_.shape == RecordShape::dict) {
      if (depth_ != 1 || !pending_key_) return type("string outside a key/value slot");
      r_.add(std::move(*pending_key_), Value::string(s));
      pending_key_.reset();
      return true;
    }
    if (depth_ != 2) return type("string outside a pair");
    return tuple_item(Value::string(s));
  }

  bool start_object(std::size_t) override {
    if (r_.shape != RecordShape::dict || depth_ != 0) return type("unexpected object");
    ++depth_;
    return true;
  }
  bool key(string_t& k) override {
    pending_key_ = k;
    return true;
  }
  bool end_object() override {
    --depth_;
    return true;
  }
  bool start_array(std::size_t) override {
    if (r_.shape != RecordShape::tuple_set || depth_ > 1) return type("unexpected array");
    ++depth_;
    item_ = 0;
    return true;
  }
  bool end_array() override {
    if (depth_ == 2 && item_ != 2) return type("pair must have exactly two elements");
    --depth_;
    return true;
  }
  bool parse_error(std::size_t pos, const std::string&, const nlohmann::detail::exception& ex) override {
    if (!failure) failure = Fail{FailureKind::grammar_violation, "json: " + std::string(ex.what()) + " at " + std::to_string(pos)};
    return false;
  }

 private:
  bool type(const std::string& what) {
    failure = Fail{FailureKind::type_error, "json: " + what};
    return false;
  }
  bool scalar_fail() { return type("value must be a string or number"); }
  bool number(std::string text) {
    if (!is_number_text(text)) return type("number outside decimal grammar");
    Value v{std::move(text), true};
    if (r_.shape == RecordShape::dict) {
      if (depth_ != 1 || !pending_key_) return type("number outside a key/value slot");
      r_.add(std::move(*pending_key_), std::move(v));
      pending_key_.reset();
      return true;
    }
    if (depth_ != 2) return type("number outside a pair");
    return tuple_item(std::move(v));
  }
  bool tuple_item(Value v) {
    if (item_ == 0) {
      if (v.is_number) return type("pair key must be a string");
      tuple_key_ = std::move(v.text);
    } else if (item_ == 1) {
      r_.add(std::move(tuple_key_), std::move(v));
    } else {
      return type("pair must have exactly two elements");
    }
    ++item_;
    return true;
  }

  Record& r_;
  int depth_ = 0;
  int item_ = 0;
  std::optional<std::string> pending_key_;
  std::string tuple_key_;
};

inline void parse_json(std::string_view s, Record& r) {
  JsonSax sax(r);
  const bool ok = nlohmann::json::sax_parse(s.begin(), s.end(), &sax, nlohmann::json::input_format_t::json, true);
  if (sax.failure) throw *sax.failure;
  if (!ok) throw Fail{FailureKind::grammar_violation, "json: malformed input"};
}

// ---- xml

inline std::string xml_text(Cursor& cur, char terminator) {
  std::string out;
  while (true) {
    if (cur.eof()) cur.fail("unterminated text");
    const char c = cur.peek();
    if (c == terminator) return out;
    if (c == '<' || c == '>' || c == '"') cur.fail(std::string("unescaped '") + c + "'");
    cur.advance();
    if (c != '&') {
      out += c;
      continue;
    }
    if (cur.accept("amp;")) out += '&';
    else if (cur.accept("lt;")) out += '<';
    else if (cur.accept("gt;")) out += '>';
    else if (cur.accept("quot;")) out += '"';
    else if (cur.accept("apos;")) out += '\'';
    else if (cur.accept("#")) {
      std::string digits;
      while (cur.peek() >= '0' && cur.peek() <= '9' && digits.size() < 3) {
        digits += cur.peek();
        cur.advance();
      }
      cur.expect(";");
      if (digits.empty() || std::stoi(digits) >= 0x20) cur.fail("unsupported character reference");
      out += static_cast<char>(std::stoi(digits));
    } else {
      cur.fail("unknown entity");
    }
  }
}

inline void parse_xml(Cursor& cur, Record& r) {
  cur.skip_ws();
  cur.expect("<record>");
  while (true) {
    cur.skip_ws();
    if (cur.accept("</record>")) break;
    cur.expect("<field name=\"");
    std::string k = xml_text(cur, '"');
    cur.expect("\">");
    std::string text = xml_text(cur, '<');
    cur.expect("</field>");
    Value v = is_number_text(text) ? Value{std::move(text), true} : Value::string(std::move(text));
    r.add(std::move(k), std::move(v));
  }
}

// ---- yaml

// Advances past a double-quoted JSON-style string on one line.
inline void skip_json_string(Cursor& cur) {
  if (cur.peek() != '"') cur.fail("expected '\"'");
  cur.advance();
  while (true) {
    if (cur.eof() || cur.peek() == '\n') cur.fail("unterminated string");
    const char c = cur.peek();
    cur.advance();
    if (c == '\\') {
      if (cur.eof()) cur.fail("unterminated escape");
      cur.advance();
    } else if (c == '"') {
      return;
    }
  }
}

inline std::string yaml_string(Cursor& cur, std::string_view src) {
  const std::size_t b = cur.pos();
  skip_json_string(cur);
  try {
    const auto j = nlohmann::json::parse(src.substr(b, cur.pos() - b));
    return j.get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw Fail{FailureKind::grammar_violation, "yaml: malformed quoted string at offset " + std::to_string(b)};
  }
}

inline std::string yaml_key(Cursor& cur, std::string_view src) {
  if (cur.peek() == '"') return yaml_string(cur, src);
  std::string k;
  while (!cur.eof()) {
    const char c = cur.peek();
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || (!k.empty() && c >= '0' && c <= '9');
    if (!ok) break;
    k += c;
    cur.advance();
  }
  if (k.empty()) {
    if (cur.peek() == '-' || (cur.peek() >= '0' && cur.peek() <= '9')) type_fail("yaml: key must be a string");
    cur.fail("expected key");
  }
  return k;
}

inline Value yaml_value(Cursor& cur, std::string_view src) {
  if (cur.peek() == '"') return Value::string(yaml_string(cur, src));
  if (looks_like_nonscalar(cur.rest())) type_fail("yaml: value must be a string or number");
  return parse_number_token(cur);
}

inline void parse_yaml(Cursor& cur, std::string_view src, Record& r) {
  const bool dict = r.shape == RecordShape::dict;
  if (cur.rest() == (dict ? "{}" : "[]")) {
    cur.advance(2);
    return;
  }
  while (true) {
    if (dict) {
      std::string k = yaml_key(cur, src);
      cur.expect(":");
      if (cur.peek() != ' ') cur.fail("expected space after ':'");
      cur.skip_spaces();
      r.add(std::move(k), yaml_value(cur, src));
    } else {
      cur.expect("- [");
      std::string k = yaml_key(cur, src);
      cur.expect(",");
      cur.skip_spaces();
      Value v = yaml_value(cur, src);
      cur.expect("]");
      r.add(std::move(k), std::move(v));
    }
    cur.skip_spaces();
    if (cur.eof()) return;
    cur.expect("\n");
    if (cur.eof()) return;  // one trailing newline
  }
}

inline bool has_tokenizer_artifact(std::string_view s) {
  for (std::string_view marker : {std::string_view("\xEF\xBF\xBD"), std::string_view("<unk>"),
                                  std::string_view("<pad>"), std::string_view("<bos>"),
                                  std::string_view("<eos>"), std::string_view("<extra_id_")}) {
    if (s.find(marker) != std::string_view::npos) return true;
  }
  return false;
}

}  // namespace detail

// Optional key vocabulary. Keys outside it are grammar violations, so a
// corrupted key name cannot parse as a different record.
using KeySchema = std::set<std::string>;

// Strict parse; never throws. Failure returns no record.
inline ParseOutcome parse(std::string_view s, Format format, RecordShape shape, const KeySchema* schema = nullptr) {
  ParseOutcome out;
  if (detail::has_tokenizer_artifact(s)) {
    out.failure = FailureKind::tokenizer_artifact;
    out.message = "output contains a replacement character or special-token marker";
    return out;
  }
  Record r;
  r.shape = shape;
  try {
    detail::Cursor cur(s);
    switch (format) {
      case Format::pyliteral: detail::parse_pyliteral(cur, r); break;
      case Format::json: detail::parse_json(s, r); cur.advance(s.size()); break;
      case Format::xml: detail::parse_xml(cur, r); break;
      case Format::yaml: detail::parse_yaml(cur, s, r); break;
    }
    if (format != Format::yaml) cur.skip_ws();
    if (!cur.eof()) cur.fail("trailing content");

    std::set<std::string> keys;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& [k, v] : r.pairs) {
      if (k.empty()) throw detail::Fail{FailureKind::type_error, "empty key"};
      if (schema && !schema->count(k)) throw detail::Fail{FailureKind::grammar_violation, "unknown key '" + k + "'"};
      if (shape == RecordShape::dict && !keys.insert(k).second) {
        throw detail::Fail{FailureKind::duplicate_key, "duplicate key '" + k + "'"};
      }
      if (shape == RecordShape::tuple_set && !seen.insert({k, v.text}).second) {
        throw detail::Fail{FailureKind::duplicate_key, "duplicate pair for key '" + k + "'"};
      }
    }
  } catch (const detail::Fail& f) {
    out.failure = f.kind;
    out.message = f.message;
    return out;
  } catch (const std::exception& e) {
    out.failure = FailureKind::grammar_violation;
    out.message = e.what();
    return out;
  }
  out.record = std::move(r);
  return out;
}

}  // namespace d2d
