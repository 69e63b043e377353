#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace aggsum::cli {

enum ExitCode : int { kOk = 0, kUsageError = 1, kDataError = 2, kRuntimeError = 3 };

struct CorpusRecord {
  std::string article;
  std::string summary;
};

// JSON Lines with "article" and "summary" strings. Blank lines are skipped.
// Throws InputError naming the file and line of a bad record.
std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path, bool require_summary = true);

// One record per line; a .jsonl file yields the given field of each record.
std::vector<std::string> read_records(const std::filesystem::path& path, const std::string& jsonl_field);

// "key = value" lines with # comments. Throws ConfigError with the line number.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path);

// Runs one command line (args exclude the program name) and returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aggsum::cli
