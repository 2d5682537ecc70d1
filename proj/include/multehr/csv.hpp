#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace multehr::csv {

// RFC 4180 fields: commas inside double quotes, "" as an escaped quote.
std::vector<std::string> split_line(std::string_view line);
std::string escape(std::string_view field);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based, header is line 1

  // Column index by name, nullopt if absent.
  std::optional<std::size_t> column(std::string_view name) const;
};

// Throws DataError if the file cannot be opened or is empty.
Table read(const std::filesystem::path& path);

}  // namespace multehr::csv
