#pragma once

#include <locale>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace d2d {

namespace detail {

inline const std::ctype<wchar_t>* unicode_ctype() {
  static const std::locale loc = [] {
    for (const char* name : {"C.UTF-8", "C.utf8", "en_US.UTF-8"}) {
      try {
        return std::locale(name);
      } catch (const std::runtime_error&) {
      }
    }
    return std::locale::classic();
  }();
  return &std::use_facet<std::ctype<wchar_t>>(loc);
}

// Decodes one UTF-8 code point at s[i]; returns its length, or 0 if malformed.
inline std::size_t utf8_decode(std::string_view s, std::size_t i, char32_t& cp) {
  const auto b = static_cast<unsigned char>(s[i]);
  std::size_t n = b < 0x80 ? 1 : (b >> 5) == 0x6 ? 2 : (b >> 4) == 0xE ? 3 : (b >> 3) == 0x1E ? 4 : 0;
  if (n == 0 || i + n > s.size()) return 0;
  cp = n == 1 ? b : n == 2 ? (b & 0x1F) : n == 3 ? (b & 0x0F) : (b & 0x07);
  for (std::size_t k = 1; k < n; ++k) {
    const auto c = static_cast<unsigned char>(s[i + k]);
    if ((c >> 6) != 0x2) return 0;
    cp = (cp << 6) | (c & 0x3F);
  }
  return n;
}

inline void utf8_encode(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

}  // namespace detail

// Simple (one-to-one) Unicode lowercase over UTF-8. Malformed bytes pass
// through unchanged.
inline std::string lowercase_transform(std::string_view text) {
  const auto* ct = detail::unicode_ctype();
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    char32_t cp = 0;
    const std::size_t n = detail::utf8_decode(text, i, cp);
    if (n == 0) {
      out += text[i++];
      continue;
    }
    if (cp < 0x80) {
      out += static_cast<char>(cp >= 'A' && cp <= 'Z' ? cp + 32 : cp);
    } else {
      detail::utf8_encode(static_cast<char32_t>(ct->tolower(static_cast<wchar_t>(cp))), out);
    }
    i += n;
  }
  return out;
}

// Deletes every comma that directly follows a digit in the output, so
// "1,,2" becomes "12" and the transform is idempotent.
inline std::string strip_numeric_commas(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    if (c == ',' && !out.empty() && out.back() >= '0' && out.back() <= '9') continue;
    out += c;
  }
  return out;
}

inline std::string prepend_slots(const std::vector<std::string>& keys, std::string_view text) {
  if (keys.empty()) throw std::invalid_argument("prepend_slots: key list must be nonempty");
  std::string out = "slots: ";
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (i) out += " | ";
    out += keys[i];
  }
  out += '\n';
  out += text;
  return out;
}

struct PreprocessOptions {
  bool lowercase = false;
  bool strip_commas = false;
  bool slot_prefix = false;
};

// Source-side pipeline: value transforms, then the slot prefix.
inline std::string preprocess_input(std::string_view text, const PreprocessOptions& opt,
                                    const std::vector<std::string>& slot_keys = {}) {
  std::string s(text);
  if (opt.lowercase) s = lowercase_transform(s);
  if (opt.strip_commas) s = strip_numeric_commas(s);
  if (opt.slot_prefix && !slot_keys.empty()) s = prepend_slots(slot_keys, s);
  return s;
}

// Target-side values get the same character transforms.
inline std::string preprocess_value(std::string_view text, const PreprocessOptions& opt) {
  std::string s(text);
  if (opt.lowercase) s = lowercase_transform(s);
  if (opt.strip_commas) s = strip_numeric_commas(s);
  return s;
}

}  // namespace d2d
