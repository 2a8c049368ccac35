#pragma once

// Line-oriented helpers shared by the text formats (meshes, patch tables,
// resample tables, pairing files, configs, checkpoint manifests).

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include <fmt/format.h>

#include "sit/error.hpp"

namespace sit {

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  /// Whitespace-split tokens of the next non-blank line. Views stay valid
  /// until the next call. Fails at end of input.
  std::vector<std::string_view> tokens() {
    if (!next_line()) fail("unexpected end of input");
    return split();
  }

  /// Like tokens() but returns false at end of input.
  bool try_tokens(std::vector<std::string_view>& out) {
    if (!next_line()) return false;
    out = split();
    return true;
  }

  /// Raw text of the current line.
  const std::string& line() const { return line_; }
  std::size_t line_number() const { return line_number_; }

  template <typename T>
  T parse(std::string_view token) const {
    T value{};
    const char* first = token.data();
    const char* last = token.data() + token.size();
    std::from_chars_result r;
    if constexpr (std::is_floating_point_v<T>) {
      r = std::from_chars(first, last, value, std::chars_format::general);
    } else {
      r = std::from_chars(first, last, value);
    }
    if (r.ec != std::errc() || r.ptr != last) {
      fail("cannot parse '" + std::string(token) + "' as a number");
    }
    return value;
  }

  void expect_end() {
    if (next_line()) fail("unexpected trailing content");
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError(message, line_number_);
  }

 private:
  bool next_line() {
    while (std::getline(in_, line_)) {
      ++line_number_;
      if (!line_.empty() && line_.back() == '\r') line_.pop_back();
      if (line_.find_first_not_of(" \t") != std::string::npos) return true;
    }
    return false;
  }

  std::vector<std::string_view> split() const {
    std::vector<std::string_view> out;
    std::string_view s(line_);
    std::size_t i = 0;
    while (i < s.size()) {
      while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
      std::size_t j = i;
      while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
      if (j > i) out.push_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  }

  std::istream& in_;
  std::string line_;
  std::size_t line_number_ = 0;
};

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path,
                                 std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Value of a `key = value` setting; ConfigurationError when malformed.
template <typename T>
T parse_setting(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    r = std::from_chars(first, last, out, std::chars_format::general);
  } else {
    r = std::from_chars(first, last, out);
  }
  if (r.ec != std::errc() || r.ptr != last) {
    throw ConfigurationError(fmt::format("setting '{}': cannot parse '{}'", key, value));
  }
  return out;
}

inline bool parse_setting_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigurationError(fmt::format("setting '{}': expected a boolean, got '{}'", key, value));
}

/// Feeds each `key = value` line to `apply`; '#' starts a comment. Errors
/// from `apply` are re-raised with the line number.
template <typename Fn>
void read_settings(std::istream& in, Fn&& apply) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(fmt::format("expected 'key = value', got '{}'", line), number);
    try {
      apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigurationError& e) {
      throw ConfigurationError(fmt::format("line {}: {}", number, e.detail()));
    }
  }
}

}  // namespace sit
