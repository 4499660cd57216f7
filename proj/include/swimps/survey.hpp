#pragma once

// ISO/IEC 25010 Likert scoring: per-characteristic means on a two-decimal
// grid, verbal interpretation bands, and the overall mean of the eight
// characteristic means.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace swimps::survey {

/// A mean on the two-decimal grid, stored as an integer count of
/// hundredths so band lookup and rounding are exact.
class Score {
public:
  constexpr Score() = default;
  static constexpr Score from_hundredths(std::int64_t h) noexcept { return Score(h); }

  /// Rounds num/den half-up to hundredths (num, den >= 0, den > 0).
  static constexpr Score from_ratio(std::int64_t num, std::int64_t den) noexcept {
    return Score((200 * num + den) / (2 * den));
  }

  /// Parses "4.5", "4.50" or "4" (at most two decimals).
  static std::optional<Score> parse(std::string_view s) {
    std::int64_t whole = 0;
    std::int64_t frac = 0;
    int frac_digits = 0;
    bool dot = false;
    bool any = false;
    for (char c : s) {
      if (c == '.' && !dot) {
        dot = true;
      } else if (std::isdigit(static_cast<unsigned char>(c))) {
        any = true;
        if (!dot) {
          whole = whole * 10 + (c - '0');
          if (whole > 1'000'000) return std::nullopt;
        } else {
          if (++frac_digits > 2) return std::nullopt;
          frac = frac * 10 + (c - '0');
        }
      } else {
        return std::nullopt;
      }
    }
    if (!any) return std::nullopt;
    if (frac_digits == 1) frac *= 10;
    return Score(whole * 100 + frac);
  }

  constexpr std::int64_t hundredths() const noexcept { return h_; }
  double value() const noexcept { return static_cast<double>(h_) / 100.0; }

  std::string str() const {
    std::string frac = std::to_string(h_ % 100);
    if (frac.size() < 2) frac.insert(0, "0");
    return std::to_string(h_ / 100) + "." + frac;
  }

  friend constexpr auto operator<=>(Score, Score) = default;

private:
  constexpr explicit Score(std::int64_t h) : h_(h) {}
  std::int64_t h_ = 0;
};

enum class Band { Excellent, VeryGood, Good, Fair, Poor };

constexpr std::string_view to_string(Band b) noexcept {
  switch (b) {
  case Band::Excellent: return "Excellent";
  case Band::VeryGood: return "Very Good";
  case Band::Good: return "Good";
  case Band::Fair: return "Fair";
  case Band::Poor: return "Poor";
  }
  return "Poor";
}

struct BandRange {
  Band band;
  Score lo;
  Score hi;
};

/// Band edges, inclusive on both ends, on the two-decimal grid.
inline constexpr std::array<BandRange, 5> band_table{{
    {Band::Excellent, Score::from_hundredths(420), Score::from_hundredths(500)},
    {Band::VeryGood, Score::from_hundredths(340), Score::from_hundredths(419)},
    {Band::Good, Score::from_hundredths(260), Score::from_hundredths(339)},
    {Band::Fair, Score::from_hundredths(180), Score::from_hundredths(259)},
    {Band::Poor, Score::from_hundredths(100), Score::from_hundredths(179)},
}};

/// Throws std::out_of_range outside [1.00, 5.00].
inline Band interpret_band(Score mean) {
  for (const auto& r : band_table)
    if (r.lo <= mean && mean <= r.hi) return r.band;
  throw std::out_of_range("mean " + mean.str() + " is outside [1.00, 5.00]");
}

/// The eight ISO/IEC 25010 product-quality characteristics, in table order.
inline constexpr std::array<std::string_view, 8> characteristics{
    "Functional Suitability", "Performance Efficiency", "Compatibility", "Usability",
    "Reliability",            "Security",               "Maintainability", "Portability",
};

namespace detail {

inline std::string fold(std::string_view s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c)) && c != '_' && c != '-')
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

/// One CSV record; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw std::invalid_argument("unterminated quoted field");
  out.emplace_back(trim(cur));
  return out;
}

} // namespace detail

/// Canonical characteristic name for `name`, matched ignoring case, spaces,
/// '_' and '-'.
inline std::optional<std::string_view> canonical_characteristic(std::string_view name) {
  const auto key = detail::fold(name);
  for (auto c : characteristics)
    if (detail::fold(c) == key) return c;
  return std::nullopt;
}

class SurveyError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Respondents x items, ratings in 1..5, each item tagged with one
/// characteristic.
struct ResponseSheet {
  std::vector<std::string> item_ids;
  std::vector<std::string> item_characteristic; ///< canonical names, parallel to item_ids
  std::vector<std::vector<int>> ratings;        ///< one row per respondent

  /// CSV: row 1 item ids, row 2 characteristic per item, then one row per
  /// respondent. Blank lines are ignored. Errors name the line.
  static ResponseSheet parse_csv(std::istream& in) {
    ResponseSheet sheet;
    std::string line;
    std::size_t line_no = 0;
    int rows = 0;
    auto fail = [&](const std::string& msg) -> void {
      throw SurveyError("line " + std::to_string(line_no) + ": " + msg);
    };
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (detail::trim(line).empty()) continue;
      std::vector<std::string> cells;
      try {
        cells = detail::split_csv_line(line);
      } catch (const std::exception& e) {
        fail(e.what());
      }
      if (rows == 0) {
        sheet.item_ids = std::move(cells);
      } else if (rows == 1) {
        if (cells.size() != sheet.item_ids.size()) fail("characteristic row has the wrong number of columns");
        for (const auto& c : cells) {
          auto canon = canonical_characteristic(c);
          if (!canon) fail("unknown characteristic '" + c + "'");
          sheet.item_characteristic.emplace_back(*canon);
        }
      } else {
        if (cells.size() != sheet.item_ids.size()) fail("respondent row has the wrong number of columns");
        std::vector<int> row;
        for (const auto& c : cells) {
          if (c.size() != 1 || c[0] < '1' || c[0] > '5') fail("rating '" + c + "' is not an integer in 1..5");
          row.push_back(c[0] - '0');
        }
        sheet.ratings.push_back(std::move(row));
      }
      ++rows;
    }
    if (rows < 2) throw SurveyError("expected an item-id row and a characteristic row");
    return sheet;
  }
};

/// Mean of every rating given to the characteristic's items, rounded
/// half-up to two decimals. Throws SurveyError when there is nothing to
/// average.
inline Score item_mean(const ResponseSheet& sheet, std::string_view characteristic) {
  const auto canon = canonical_characteristic(characteristic);
  std::int64_t sum = 0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < sheet.item_characteristic.size(); ++i) {
    if (!canon || sheet.item_characteristic[i] != *canon) continue;
    for (const auto& row : sheet.ratings) {
      sum += row.at(i);
      ++count;
    }
  }
  if (count == 0) throw SurveyError("no ratings for characteristic '" + std::string(characteristic) + "'");
  return Score::from_ratio(sum, count);
}

struct CharacteristicScore {
  std::string characteristic;
  Score mean;
  Band band = Band::Poor;
};

struct ScoreTable {
  std::vector<CharacteristicScore> rows;
  Score overall;
  Band overall_band = Band::Poor;
};

/// Rows for the eight characteristics (in canonical order) plus the
/// overall mean of the row means, rounded half-up.
inline ScoreTable score_table(std::span<const Score> means) {
  if (means.size() != characteristics.size())
    throw SurveyError("expected 8 characteristic means, got " + std::to_string(means.size()));
  ScoreTable t;
  std::int64_t total = 0;
  for (std::size_t i = 0; i < means.size(); ++i) {
    t.rows.push_back({std::string(characteristics[i]), means[i], interpret_band(means[i])});
    total += means[i].hundredths();
  }
  t.overall = Score::from_ratio(total, 100 * static_cast<std::int64_t>(means.size()));
  t.overall_band = interpret_band(t.overall);
  return t;
}

inline ScoreTable score_sheet(const ResponseSheet& sheet) {
  std::vector<Score> means;
  for (auto c : characteristics) means.push_back(item_mean(sheet, c));
  return score_table(means);
}

inline nlohmann::ordered_json to_json(const ScoreTable& t) {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : t.rows) {
    nlohmann::ordered_json row;
    row["characteristic"] = r.characteristic;
    row["mean"] = r.mean.str();
    row["interpretation"] = to_string(r.band);
    j["rows"].push_back(row);
  }
  j["overall"] = {{"characteristic", "Overall Weighted Mean"},
                  {"mean", t.overall.str()},
                  {"interpretation", to_string(t.overall_band)}};
  return j;
}

} // namespace swimps::survey
