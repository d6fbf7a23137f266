#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace podwatch {

/// Shortest decimal form that parses back to the identical double.
std::string formatNumber(double v);

/// Strict full-string parse; throws podwatch::Error("ParseError") on junk.
double parseNumber(std::string_view s);
std::int64_t parseInteger(std::string_view s);

/// Fixed-width, zero-padded decimal. Keeps record keys in chronological
/// lexicographic order.
std::string zeroPad(std::int64_t v, int width = 10);

std::vector<std::string_view> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);
bool startsWith(std::string_view s, std::string_view prefix);

/// Printf-style "%.6g" used by the canonical frame encoding.
std::string formatSignificant(double v, int digits = 6);

}  // namespace podwatch
