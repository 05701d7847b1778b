#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "doc2dict/rng.hpp"
#include "doc2dict/structured_codec.hpp"

namespace d2d {

// Reference location of a value in the input, when known.
struct SpanLabel {
  std::string key;
  std::size_t start = 0;
  std::size_t end = 0;
};

struct Example {
  std::string input;
  Record record;
  std::vector<SpanLabel> spans;
};

enum class Split { train, eval };

namespace detail {

// Portable bounded draw (std distributions differ across standard libraries).
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline constexpr std::array<const char*, 12> kMonths = {"January", "February", "March",     "April",
                                                        "May",     "June",     "July",      "August",
                                                        "September", "October", "November", "December"};
inline constexpr std::array<const char*, 12> kMonthAbbr = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                                                           "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
inline constexpr std::array<const char*, 7> kWeekdays = {"Sunday",   "Monday", "Tuesday", "Wednesday",
                                                         "Thursday", "Friday", "Saturday"};

inline std::string two(unsigned v) { return (v < 10 ? "0" : "") + std::to_string(v); }

inline std::string ordinal(unsigned d) {
  const char* suffix = (d % 100 >= 11 && d % 100 <= 13) ? "th" : d % 10 == 1 ? "st" : d % 10 == 2 ? "nd" : d % 10 == 3 ? "rd" : "th";
  return std::to_string(d) + suffix;
}

}  // namespace detail

struct Date {
  int year;
  unsigned month;
  unsigned day;

  std::chrono::sys_days days() const {
    return std::chrono::sys_days(std::chrono::year_month_day(std::chrono::year(year), std::chrono::month(month),
                                                             std::chrono::day(day)));
  }
  static Date from_days(std::chrono::sys_days d) {
    const std::chrono::year_month_day ymd(d);
    return {static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day())};
  }
  std::string canonical() const { return std::to_string(year) + "/" + detail::two(month) + "/" + detail::two(day); }
};

inline constexpr int kDateFormatCount = 10;

// The ten input renderings, by index:
//   0 "May 7th, 2019"   1 "07/05/2019" (day first)   2 "2019-05-07"
//   3 "7 May 2019"      4 "May 7, 2019" (abbreviated) 5 "07.05.19"
//   6 "Tuesday, May 7, 2019"   7 "the 7th of May, 2019"
//   8 "20190507"        9 "05-07-2019" (month first)
inline std::string format_date(const Date& d, int format) {
  using detail::two;
  const std::string month = detail::kMonths[d.month - 1];
  const std::string y = std::to_string(d.year);
  switch (format) {
    case 0: return month + " " + detail::ordinal(d.day) + ", " + y;
    case 1: return two(d.day) + "/" + two(d.month) + "/" + y;
    case 2: return y + "-" + two(d.month) + "-" + two(d.day);
    case 3: return std::to_string(d.day) + " " + month + " " + y;
    case 4: return std::string(detail::kMonthAbbr[d.month - 1]) + " " + std::to_string(d.day) + ", " + y;
    case 5: return two(d.day) + "." + two(d.month) + "." + two(static_cast<unsigned>(d.year % 100));
    case 6: {
      const std::chrono::weekday wd(d.days());
      return std::string(detail::kWeekdays[wd.c_encoding()]) + ", " + month + " " + std::to_string(d.day) + ", " + y;
    }
    case 7: return "the " + detail::ordinal(d.day) + " of " + month + ", " + y;
    case 8: return y + two(d.month) + two(d.day);
    case 9: return two(d.month) + "-" + two(d.day) + "-" + y;
  }
  throw std::invalid_argument("format_date: unknown format " + std::to_string(format));
}

inline Date random_date(std::mt19937_64& rng) {
  const auto lo = Date{1950, 1, 1}.days();
  const auto hi = Date{2021, 12, 31}.days();
  const auto span = static_cast<std::uint64_t>((hi - lo).count()) + 1;
  return Date::from_days(lo + std::chrono::days(static_cast<long>(detail::uniform_below(rng, span))));
}

inline Record single_field(const std::string& key, std::string value) {
  Record r;
  r.add(key, Value::string(std::move(value)));
  return r;
}

inline std::vector<Example> gen_dates(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_dates: n must be >= 1");
  std::mt19937_64 rng(mix_seed({seed, 0xDA7E}));
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Date d = random_date(rng);
    const int fmt = static_cast<int>(detail::uniform_below(rng, kDateFormatCount));
    out.push_back({format_date(d, fmt), single_field("date", d.canonical()), {}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Names

namespace detail {

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> v = {
      "james", "mary", "john", "patricia", "robert", "jennifer", "michael", "linda", "william", "elizabeth",
      "david", "barbara", "richard", "susan", "joseph", "jessica", "thomas", "sarah", "charles", "karen",
      "christopher", "nancy", "daniel", "lisa", "matthew", "betty", "anthony", "margaret", "mark", "sandra",
      "donald", "ashley", "steven", "kimberly", "paul", "emily", "andrew", "donna", "joshua", "michelle",
      "kenneth", "dorothy", "kevin", "carol", "brian", "amanda", "george", "melissa", "edward", "deborah",
      "ronald", "stephanie", "timothy", "rebecca", "jason", "sharon", "jeffrey", "laura", "ryan", "cynthia",
      "jacob", "kathleen", "gary", "amy", "nicholas", "shirley", "eric", "angela", "jonathan", "helen",
      "stephen", "anna", "larry", "brenda", "justin", "pamela", "scott", "nicole", "brandon", "emma",
      "benjamin", "samantha", "samuel", "katherine", "gregory", "christine", "frank", "debra", "alexander", "rachel",
      "raymond", "catherine", "patrick", "carolyn", "jack", "janet", "dennis", "ruth", "jerry", "maria",
      "tyler", "heather", "aaron", "diane", "jose", "virginia", "adam", "julie", "henry", "joyce",
      "nathan", "victoria", "douglas", "olivia", "zachary", "kelly", "peter", "christina", "barack", "evelyn"};
  return v;
}

inline const std::vector<std::string>& surnames() {
  static const std::vector<std::string> v = {
      "smith", "johnson", "williams", "brown", "jones", "garcia", "miller", "davis", "rodriguez", "martinez",
      "hernandez", "lopez", "gonzalez", "wilson", "anderson", "thomas", "taylor", "moore", "jackson", "martin",
      "lee", "perez", "thompson", "white", "harris", "sanchez", "clark", "ramirez", "lewis", "robinson",
      "walker", "young", "allen", "king", "wright", "scott", "torres", "nguyen", "hill", "flores",
      "green", "adams", "nelson", "baker", "hall", "rivera", "campbell", "mitchell", "carter", "roberts",
      "gomez", "phillips", "evans", "turner", "diaz", "parker", "cruz", "edwards", "collins", "reyes",
      "stewart", "morris", "morales", "murphy", "cook", "rogers", "gutierrez", "ortiz", "morgan", "cooper",
      "peterson", "bailey", "reed", "kelly", "howard", "ramos", "kim", "cox", "ward", "richardson",
      "watson", "brooks", "chavez", "wood", "james", "bennett", "gray", "mendoza", "ruiz", "hughes",
      "price", "alvarez", "castillo", "sanders", "patel", "myers", "long", "ross", "foster", "jimenez",
      "powell", "jenkins", "perry", "russell", "sullivan", "bell", "coleman", "butler", "henderson", "barnes",
      "gonzales", "fisher", "vasquez", "simmons", "romero", "jordan", "patterson", "alexander", "hamilton", "graham",
      "reynolds", "griffin", "wallace", "moreno", "west", "cole", "hayes", "bryant", "herrera", "gibson",
      "ellis", "tran", "medina", "aguilar", "stevens", "murray", "ford", "castro", "marshall", "owens",
      "harrison", "fernandez", "mcdonald", "woods", "washington", "kennedy", "wells", "vargas", "henry", "obama"};
  return v;
}

inline std::string title_case(const std::string& s) {
  std::string out = s;
  bool start = true;
  for (char& c : out) {
    if (start && c >= 'a' && c <= 'z') c = static_cast<char>(c - 32);
    start = c == ' ';
  }
  return out;
}

inline std::string upper_case(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 32);
  }
  return out;
}

}  // namespace detail

// Two-token names, lowercase. One in ten entries (by a fixed hash) is held
// out for evaluation.
inline std::vector<std::string> gazetteer(Split split) {
  std::vector<std::string> out;
  const auto& f = detail::first_names();
  const auto& s = detail::surnames();
  for (std::size_t i = 0; i < f.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool held_out = splitmix64(i * 1000 + j) % 10 == 0;
      if (held_out == (split == Split::eval)) out.push_back(f[i] + " " + s[j]);
    }
  }
  return out;
}

inline std::size_t gazetteer_size() { return detail::first_names().size() * detail::surnames().size(); }

enum class Casing { lower, upper, title };

// 5% lowercase, 20% uppercase, 75% title case.
inline Casing draw_casing(std::mt19937_64& rng) {
  const double u = detail::uniform01(rng);
  return u < 0.05 ? Casing::lower : u < 0.25 ? Casing::upper : Casing::title;
}

inline std::string apply_casing(const std::string& lower, Casing c) {
  switch (c) {
    case Casing::lower: return lower;
    case Casing::upper: return detail::upper_case(lower);
    case Casing::title: return detail::title_case(lower);
  }
  return lower;
}

inline std::vector<Example> gen_names(std::size_t n, std::uint64_t seed, Split split = Split::train) {
  if (n < 1) throw std::invalid_argument("gen_names: n must be >= 1");
  const auto names = gazetteer(split);
  std::mt19937_64 rng(mix_seed({seed, 0x4E414D45}));
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& name = names[detail::uniform_below(rng, names.size())];
    out.push_back({apply_casing(name, draw_casing(rng)), single_field("name", name), {}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Numbers

inline std::string with_thousands(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

inline std::vector<Example> gen_numbers(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_numbers: n must be >= 1");
  std::mt19937_64 rng(mix_seed({seed, 0x4E554D}));
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t v = 1000 + detail::uniform_below(rng, 1000000000ull - 1000 + 1);
    out.push_back({std::to_string(v), single_field("number", with_thousands(v) + ".00"), {}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Long documents

inline const std::vector<std::string>& longdoc_fields() {
  static const std::vector<std::string> v = {"due_date", "amount", "party"};
  return v;
}

namespace detail {

inline const std::vector<std::string>& filler_sentences() {
  static const std::vector<std::string> v = {
      "This agreement sets out the terms agreed between the parties.",
      "All notices shall be delivered in writing to the address on file.",
      "The services will be performed with reasonable care and skill.",
      "Neither party may assign this agreement without prior consent.",
      "Any dispute shall first be referred to good faith negotiation.",
      "The supplier shall keep accurate records of all work performed.",
      "Confidential information must not be disclosed to third parties.",
      "This document supersedes all prior understandings on the subject.",
      "Headings are for convenience only and do not affect meaning.",
      "Each party shall bear its own costs in connection with this matter.",
      "The customer may request changes to the scope of work at any time.",
      "Payment terms are described in the schedule attached hereto.",
      "Goods remain the property of the seller until paid in full.",
      "The parties shall cooperate to resolve any billing questions.",
      "No waiver of any provision shall be effective unless in writing.",
      "Invoices not paid on time may accrue a late charge.",
      "The remaining provisions stay in force if one is held invalid.",
      "This statement reflects all charges for the current period.",
  };
  return v;
}

// Date renderings used inside documents (month-name and ISO forms).
inline constexpr std::array<int, 3> kDocDateFormats = {0, 2, 3};

}  // namespace detail

struct PlantedField {
  std::string key;
  std::string surface;  // text as it appears in the document
  std::size_t offset;   // character offset of the surface form
};

struct LongDoc {
  Example example;
  std::vector<PlantedField> planted;
  std::string distractor;  // surface text of the near-match line, if any
};

// Filler sentences with field sentences inserted at uniformly random sentence
// boundaries. The amount appears twice (subtotal and total lines) with the
// same value. Documents are cut to at most `target_len_tokens` characters
// (one token per character under a character vocabulary) without cutting
// through a planted sentence.
inline std::vector<LongDoc> gen_longdoc_detailed(std::size_t n, std::uint64_t seed, std::size_t target_len_tokens,
                                                 const std::vector<std::string>& fields) {
  if (target_len_tokens < 64) throw std::invalid_argument("gen_longdoc: target_len_tokens must be >= 64");
  if (fields.empty()) throw std::invalid_argument("gen_longdoc: fields must be nonempty");
  for (const auto& f : fields) {
    if (std::find(longdoc_fields().begin(), longdoc_fields().end(), f) == longdoc_fields().end()) {
      throw std::invalid_argument("gen_longdoc: unknown field '" + f + "'");
    }
  }
  const auto& filler = detail::filler_sentences();
  const auto names = gazetteer(Split::train);
  std::mt19937_64 rng(mix_seed({seed, 0x4C4F4E47}));
  std::vector<LongDoc> out;
  for (std::size_t e = 0; e < n; ++e) {
    struct Planted {
      std::string sentence, key, surface;
    };
    std::vector<Planted> plants;
    Record rec;
    std::string distractor;
    for (const auto& f : fields) {
      if (f == "due_date") {
        const Date d = random_date(rng);
        const int fmt = detail::kDocDateFormats[detail::uniform_below(rng, detail::kDocDateFormats.size())];
        const std::string s = format_date(d, fmt);
        plants.push_back({"Payment is due on " + s + ".", f, s});
        rec.add(f, Value::string(d.canonical()));
      } else if (f == "amount") {
        const std::uint64_t dollars = 10 + detail::uniform_below(rng, 99990);
        const std::uint64_t cents = detail::uniform_below(rng, 100);
        const std::string plain = std::to_string(dollars) + "." + detail::two(static_cast<unsigned>(cents));
        const std::string s = with_thousands(dollars) + "." + detail::two(static_cast<unsigned>(cents));
        distractor = "Subtotal: $" + s + ".";
        plants.push_back({distractor, "", s});
        plants.push_back({"Total: $" + s + ".", f, s});
        rec.add(f, Value::string(plain));
      } else {
        const std::string& name = names[detail::uniform_below(rng, names.size())];
        const Casing c = detail::uniform01(rng) < 0.5 ? Casing::title : Casing::upper;
        const std::string s = apply_casing(name, c);
        plants.push_back({"Prepared for " + s + ".", f, s});
        rec.add(f, Value::string(name));
      }
    }
    std::size_t planted_len = 0;
    for (const auto& p : plants) planted_len += p.sentence.size() + 1;
    // Filler sentences up to the length budget.
    std::vector<std::string> sentences;
    std::size_t len = planted_len;
    while (true) {
      const std::string& s = filler[detail::uniform_below(rng, filler.size())];
      if (len + s.size() + 1 > target_len_tokens) break;
      sentences.push_back(s);
      len += s.size() + 1;
    }
    // Random insertion points; the subtotal line sits just before the total.
    std::vector<int> is_plant(sentences.size(), -1);
    for (std::size_t k = 0; k < plants.size(); ++k) {
      const bool pair_with_next = plants[k].key.empty();
      const std::size_t at = detail::uniform_below(rng, sentences.size() + 1);
      sentences.insert(sentences.begin() + static_cast<std::ptrdiff_t>(at), plants[k].sentence);
      is_plant.insert(is_plant.begin() + static_cast<std::ptrdiff_t>(at), static_cast<int>(k));
      if (pair_with_next) {
        ++k;
        sentences.insert(sentences.begin() + static_cast<std::ptrdiff_t>(at) + 1, plants[k].sentence);
        is_plant.insert(is_plant.begin() + static_cast<std::ptrdiff_t>(at) + 1, static_cast<int>(k));
      }
    }
    LongDoc doc;
    std::string text;
    for (std::size_t k = 0; k < sentences.size(); ++k) {
      if (k) text += ' ';
      if (is_plant[k] >= 0) {
        const Planted& p = plants[static_cast<std::size_t>(is_plant[k])];
        if (!p.key.empty()) {
          doc.planted.push_back({p.key, p.surface, text.size() + p.sentence.find(p.surface)});
        }
      }
      text += sentences[k];
    }
    doc.example = {std::move(text), std::move(rec), {}};
    for (const auto& p : doc.planted) doc.example.spans.push_back({p.key, p.offset, p.offset + p.surface.size()});
    doc.distractor = distractor;
    out.push_back(std::move(doc));
  }
  return out;
}

inline std::vector<Example> gen_longdoc(std::size_t n, std::uint64_t seed, std::size_t target_len_tokens,
                                        const std::vector<std::string>& fields) {
  std::vector<Example> out;
  for (auto& d : gen_longdoc_detailed(n, seed, target_len_tokens, fields)) out.push_back(std::move(d.example));
  return out;
}

// ---------------------------------------------------------------------------
// JSONL: {"input": string, "record": [[key, value], ...]}

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string example_to_json(const Example& ex) {
  nlohmann::ordered_json j;
  j["input"] = ex.input;
  nlohmann::ordered_json rec = nlohmann::ordered_json::array();
  for (const auto& [k, v] : ex.record.pairs) {
    rec.push_back(v.is_number ? nlohmann::ordered_json::array({k, nlohmann::ordered_json::parse(v.text)})
                              : nlohmann::ordered_json::array({k, v.text}));
  }
  j["record"] = rec;
  if (!ex.spans.empty()) {
    nlohmann::ordered_json spans = nlohmann::ordered_json::array();
    for (const auto& s : ex.spans) spans.push_back(nlohmann::ordered_json::array({s.key, s.start, s.end}));
    j["spans"] = spans;
  }
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline Example example_from_json(const std::string& line, std::size_t line_no) {
  auto fail = [line_no](const std::string& what) {
    return DatasetError("dataset line " + std::to_string(line_no) + ": " + what);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw fail(e.what());
  }
  if (!j.is_object() || !j.contains("input") || !j["input"].is_string() || !j.contains("record") ||
      !j["record"].is_array()) {
    throw fail("expected {\"input\": string, \"record\": [[key, value], ...]}");
  }
  Example ex;
  ex.input = j["input"].get<std::string>();
  for (const auto& p : j["record"]) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_string()) throw fail("record entries must be [key, value]");
    if (p[1].is_string()) {
      ex.record.add(p[0].get<std::string>(), Value::string(p[1].get<std::string>()));
    } else if (p[1].is_number()) {
      ex.record.add(p[0].get<std::string>(), Value::number_text(p[1].dump()));
    } else {
      throw fail("record values must be strings or numbers");
    }
  }
  if (j.contains("spans")) {
    if (!j["spans"].is_array()) throw fail("spans must be [[key, start, end], ...]");
    for (const auto& s : j["spans"]) {
      if (!s.is_array() || s.size() != 3 || !s[0].is_string() || !s[1].is_number_unsigned() ||
          !s[2].is_number_unsigned()) {
        throw fail("spans must be [[key, start, end], ...]");
      }
      SpanLabel l{s[0].get<std::string>(), s[1].get<std::size_t>(), s[2].get<std::size_t>()};
      if (l.start >= l.end || l.end > ex.input.size()) throw fail("span outside the input");
      ex.spans.push_back(std::move(l));
    }
  }
  return ex;
}

inline void write_jsonl(const std::string& path, const std::vector<Example>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + path);
  for (const auto& ex : data) f << example_to_json(ex) << '\n';
}

inline std::vector<Example> read_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot read " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(f, line)) {
    ++no;
    if (line.empty()) continue;
    out.push_back(example_from_json(line, no));
  }
  return out;
}

}  // namespace d2d
