#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace d2d {

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TokenSeq {
  std::vector<int> ids;
  // Byte offset of each token in the source text (debugging aid).
  std::vector<std::size_t> offsets;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

// Id layout:
//   0..3    pad, bos, eos, unk
//   4..23   extra-id slots, assignable to structural symbols
//   24..    base characters (tab, newline, carriage return, printable ASCII),
//           then learned merges in creation order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kFirstExtra = 4;
  static constexpr int kExtraSlots = 20;
  static constexpr int kFirstLearned = kFirstExtra + kExtraSlots;
  static constexpr int kBaseChars = 3 + (126 - 32 + 1);
  static constexpr int kCoverageMinimum = kFirstLearned + kBaseChars;

  // Rendering of an unknown byte on detokenize (U+FFFD).
  static constexpr std::string_view kUnkText = "\xEF\xBF\xBD";

  static bool covered(char c) {
    const auto u = static_cast<unsigned char>(c);
    return (u >= 32 && u <= 126) || c == '\t' || c == '\n' || c == '\r';
  }

  // Single-character vocabulary.
  static Vocab characters(bool digit_split = true) {
    Vocab v;
    v.digit_split_ = digit_split;
    v.tokens_.resize(kFirstLearned);
    v.extra_symbols_.assign(kExtraSlots, "");
    for (char c : std::string("\t\n\r")) v.add_learned(std::string(1, c));
    for (int c = 32; c <= 126; ++c) v.add_learned(std::string(1, static_cast<char>(c)));
    v.rebuild_index();
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  bool digit_split() const { return digit_split_; }

  // Surface text of a learned token, or the assigned symbol of a reserved slot.
  const std::string& surface(int id) const {
    if (id >= kFirstExtra && id < kFirstLearned) return extra_symbols_[id - kFirstExtra];
    return tokens_.at(static_cast<std::size_t>(id));
  }

  std::optional<int> reserved_id(const std::string& symbol) const {
    for (int i = 0; i < kExtraSlots; ++i) {
      if (!extra_symbols_[i].empty() && extra_symbols_[i] == symbol) return kFirstExtra + i;
    }
    return std::nullopt;
  }

  std::optional<int> token_id(const std::string& text) const {
    if (auto r = reserved_id(text)) return r;
    for (int id = kFirstLearned; id < size(); ++id) {
      if (tokens_[id] == text && !shadowed_[id]) return id;
    }
    return std::nullopt;
  }

  const std::vector<std::string>& extra_symbols() const { return extra_symbols_; }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.digit_split_ == b.digit_split_ && a.tokens_ == b.tokens_ &&
           a.extra_symbols_ == b.extra_symbols_;
  }

  // Greedy longest match, reserved symbols first.
  TokenSeq tokenize(std::string_view text) const {
    TokenSeq out;
    std::size_t i = 0;
    while (i < text.size()) {
      auto [rid, rlen] = longest(reserved_trie_, text, i);
      if (rlen > 0) {
        out.ids.push_back(rid);
        out.offsets.push_back(i);
        i += rlen;
        continue;
      }
      auto [tid, tlen] = longest(trie_, text, i);
      if (tlen == 0) {
        out.ids.push_back(kUnk);
        out.offsets.push_back(i);
        ++i;
        continue;
      }
      out.ids.push_back(tid);
      out.offsets.push_back(i);
      i += tlen;
    }
    return out;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPad || id == kBos || id == kEos) continue;
      if (id == kUnk) {
        out += kUnkText;
      } else if (id >= 0 && id < size()) {
        out += surface(id);
      } else {
        out += kUnkText;
      }
    }
    return out;
  }

  std::string to_text() const;
  static Vocab from_text(std::string_view text);

  friend Vocab build_vocab(std::span<const std::string> corpus, int size, bool digit_split);
  friend Vocab inject_structural_tokens(const Vocab& v, std::vector<std::string> symbols);

 private:
  struct Trie {
    std::vector<std::array<std::int32_t, 128>> next;
    std::vector<std::int32_t> id;
    Trie() { clear(); }
    void clear() {
      next.assign(1, {});
      next[0].fill(-1);
      id.assign(1, -1);
    }
    void insert(const std::string& s, int token) {
      std::size_t node = 0;
      for (char c : s) {
        const auto u = static_cast<unsigned char>(c);
        if (next[node][u] < 0) {
          next[node][u] = static_cast<std::int32_t>(next.size());
          next.emplace_back();
          next.back().fill(-1);
          id.push_back(-1);
        }
        node = static_cast<std::size_t>(next[node][u]);
      }
      id[node] = token;
    }
  };

  static std::pair<int, std::size_t> longest(const Trie& t, std::string_view text, std::size_t pos) {
    std::size_t node = 0;
    int best = -1;
    std::size_t best_len = 0;
    for (std::size_t j = pos; j < text.size(); ++j) {
      const auto u = static_cast<unsigned char>(text[j]);
      if (u >= 128) break;
      const auto nx = t.next[node][u];
      if (nx < 0) break;
      node = static_cast<std::size_t>(nx);
      if (t.id[node] >= 0) {
        best = t.id[node];
        best_len = j - pos + 1;
      }
    }
    return {best, best_len};
  }

  void add_learned(std::string s) { tokens_.push_back(std::move(s)); }

  void rebuild_index() {
    static const std::array<std::string, kFirstLearned> names = [] {
      std::array<std::string, kFirstLearned> n;
      n[kPad] = "<pad>";
      n[kBos] = "<bos>";
      n[kEos] = "<eos>";
      n[kUnk] = "<unk>";
      for (int i = 0; i < kExtraSlots; ++i) n[kFirstExtra + i] = "<extra_id_" + std::to_string(i) + ">";
      return n;
    }();
    for (int i = 0; i < kFirstLearned; ++i) tokens_[i] = names[i];
    shadowed_.assign(tokens_.size(), false);
    trie_.clear();
    reserved_trie_.clear();
    for (int i = 0; i < kExtraSlots; ++i) {
      if (!extra_symbols_[i].empty()) reserved_trie_.insert(extra_symbols_[i], kFirstExtra + i);
    }
    for (int id = kFirstLearned; id < size(); ++id) {
      for (const auto& sym : extra_symbols_) {
        if (!sym.empty() && tokens_[id].find(sym) != std::string::npos) shadowed_[id] = true;
      }
      if (!shadowed_[id]) trie_.insert(tokens_[id], id);
    }
  }

  bool digit_split_ = false;
  std::vector<std::string> tokens_;
  std::vector<std::string> extra_symbols_;
  std::vector<bool> shadowed_;
  Trie trie_;
  Trie reserved_trie_;
};

namespace detail {

inline bool has_digit(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// Pre-tokenization: whitespace attaches to the following word; tab, newline
// and carriage return stand alone.
inline void split_words(std::string_view text, std::map<std::string, std::int64_t>& counts) {
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    if (end > start) {
      std::string_view w = text.substr(start, end - start);
      if (std::all_of(w.begin(), w.end(), Vocab::covered)) ++counts[std::string(w)];
    }
    start = end;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n' || c == '\t' || c == '\r') {
      flush(i);
      flush(i + 1);
    } else if (c == ' ' && i > start && text[i - 1] != ' ') {
      flush(i);
    }
  }
  flush(text.size());
}

}  // namespace detail

// Frequency-greedy merge vocabulary of at most `size` ids. Under digit_split no
// merged token contains a digit.
inline Vocab build_vocab(std::span<const std::string> corpus, int size, bool digit_split) {
  if (size < Vocab::kCoverageMinimum) {
    throw VocabError("vocab size " + std::to_string(size) + " below character coverage minimum " +
                     std::to_string(Vocab::kCoverageMinimum));
  }
  Vocab v = Vocab::characters(digit_split);
  std::map<std::string, std::int64_t> counts;
  for (const auto& text : corpus) detail::split_words(text, counts);

  std::unordered_map<char, int> char_id;
  for (int id = Vocab::kFirstLearned; id < v.size(); ++id) char_id[v.tokens_[id][0]] = id;

  struct Word {
    std::vector<int> syms;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(counts.size());
  for (const auto& [w, n] : counts) {
    Word word{{}, n};
    for (char c : w) word.syms.push_back(char_id.at(c));
    words.push_back(std::move(word));
  }

  while (v.size() < size) {
    std::unordered_map<std::uint64_t, std::int64_t> pairs;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
        const auto key = (std::uint64_t(std::uint32_t(w.syms[i])) << 32) | std::uint32_t(w.syms[i + 1]);
        pairs[key] += w.count;
      }
    }
    // Highest count wins; ties go to the smaller merged string, then pair key.
    std::int64_t best_count = 0;
    std::string best_text;
    std::uint64_t best_key = 0;
    for (const auto& [key, n] : pairs) {
      if (n < 2 || n < best_count) continue;
      const int a = static_cast<int>(key >> 32), b = static_cast<int>(key & 0xffffffffu);
      std::string merged = v.tokens_[a] + v.tokens_[b];
      if (digit_split && detail::has_digit(merged)) continue;
      const bool better = n > best_count || merged < best_text || (merged == best_text && key < best_key);
      if (better) {
        best_count = n;
        best_text = std::move(merged);
        best_key = key;
      }
    }
    if (best_text.empty() || best_count < 2) break;
    const int a = static_cast<int>(best_key >> 32), b = static_cast<int>(best_key & 0xffffffffu);
    // Different pairs may spell the same string; keep the first id.
    int new_id = -1;
    for (int id = Vocab::kFirstLearned; id < v.size(); ++id) {
      if (v.tokens_[id] == best_text) new_id = id;
    }
    if (new_id < 0) {
      new_id = v.size();
      v.add_learned(best_text);
    }
    for (auto& w : words) {
      std::vector<int> merged;
      merged.reserve(w.syms.size());
      for (std::size_t i = 0; i < w.syms.size(); ++i) {
        if (i + 1 < w.syms.size() && w.syms[i] == a && w.syms[i + 1] == b) {
          merged.push_back(new_id);
          ++i;
        } else {
          merged.push_back(w.syms[i]);
        }
      }
      w.syms = std::move(merged);
    }
  }
  v.rebuild_index();
  return v;
}

// Assigns each symbol (in sorted order) to the next free extra-id slot.
inline Vocab inject_structural_tokens(const Vocab& v, std::vector<std::string> symbols) {
  if (symbols.empty()) throw VocabError("inject_structural_tokens: no symbols given");
  std::sort(symbols.begin(), symbols.end());
  Vocab out = v;
  for (const auto& sym : symbols) {
    if (sym.empty()) throw VocabError("inject_structural_tokens: empty symbol");
    if (!std::all_of(sym.begin(), sym.end(), Vocab::covered)) {
      throw VocabError("inject_structural_tokens: symbol '" + sym + "' has uncovered characters");
    }
    if (out.reserved_id(sym)) {
      throw VocabError("inject_structural_tokens: symbol '" + sym + "' is already reserved");
    }
    auto slot = std::find(out.extra_symbols_.begin(), out.extra_symbols_.end(), std::string());
    if (slot == out.extra_symbols_.end()) {
      throw VocabError("inject_structural_tokens: no free reserved slots for '" + sym + "'");
    }
    *slot = sym;
  }
  out.rebuild_index();
  return out;
}

inline TokenSeq tokenize(std::string_view text, const Vocab& v) { return v.tokenize(text); }

inline std::string detokenize(std::span<const int> ids, const Vocab& v) { return v.detokenize(ids); }

// ---------------------------------------------------------------------------
// Vocab file: one token per line, backslash escapes for \\, \n, \t, \r.

namespace detail {

inline std::string escape_line(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string unescape_line(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i >= s.size()) throw VocabError("vocab file: dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: throw VocabError(std::string("vocab file: bad escape \\") + s[i]);
    }
  }
  return out;
}

}  // namespace detail

inline std::string Vocab::to_text() const {
  std::string out = "#D2D-VOCAB 1\n#DIGIT_SPLIT " + std::to_string(digit_split_ ? 1 : 0) + "\n#RESERVED\n";
  for (int i = 0; i < kFirstExtra; ++i) out += tokens_[i] + "\n";
  for (int i = 0; i < kExtraSlots; ++i) {
    out += tokens_[kFirstExtra + i];
    if (!extra_symbols_[i].empty()) out += "=" + detail::escape_line(extra_symbols_[i]);
    out += "\n";
  }
  out += "#TOKENS\n";
  for (int id = kFirstLearned; id < size(); ++id) out += detail::escape_line(tokens_[id]) + "\n";
  return out;
}

inline Vocab Vocab::from_text(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) throw VocabError("vocab file: missing trailing newline");
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  if (lines.size() < 3 + kFirstLearned + 1 || lines[0] != "#D2D-VOCAB 1" || lines[2] != "#RESERVED") {
    throw VocabError("vocab file: bad header");
  }
  Vocab v;
  if (lines[1] == "#DIGIT_SPLIT 1") {
    v.digit_split_ = true;
  } else if (lines[1] != "#DIGIT_SPLIT 0") {
    throw VocabError("vocab file: bad digit-split line");
  }
  v.tokens_.resize(kFirstLearned);
  v.extra_symbols_.assign(kExtraSlots, "");
  v.rebuild_index();  // fills reserved names
  for (int i = 0; i < kFirstExtra; ++i) {
    if (lines[3 + i] != v.tokens_[i]) throw VocabError("vocab file: bad reserved line " + std::to_string(i));
  }
  for (int i = 0; i < kExtraSlots; ++i) {
    std::string_view line = lines[3 + kFirstExtra + i];
    const std::string& name = v.tokens_[kFirstExtra + i];
    if (line.substr(0, name.size()) != name) throw VocabError("vocab file: bad extra-id line");
    line.remove_prefix(name.size());
    if (!line.empty()) {
      if (line[0] != '=' || line.size() < 2) throw VocabError("vocab file: bad extra-id assignment");
      v.extra_symbols_[i] = detail::unescape_line(line.substr(1));
    }
  }
  if (lines[3 + kFirstLearned] != "#TOKENS") throw VocabError("vocab file: missing #TOKENS");
  for (std::size_t i = 4 + kFirstLearned; i < lines.size(); ++i) {
    std::string tok = detail::unescape_line(lines[i]);
    if (tok.empty()) throw VocabError("vocab file: empty token line");
    v.add_learned(std::move(tok));
  }
  if (v.size() < kCoverageMinimum) throw VocabError("vocab file: missing base characters");
  Vocab base = characters();
  for (int id = kFirstLearned; id < kCoverageMinimum; ++id) {
    if (v.tokens_[id] != base.tokens_[id]) throw VocabError("vocab file: base characters out of order");
  }
  v.rebuild_index();
  return v;
}

}  // namespace d2d
