#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace aggsum {

using Tokens = std::vector<std::string>;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// F1 = 2PR / (P + R), or 0 when P + R = 0.
RougeScore make_rouge_score(double precision, double recall);

// Clipped n-gram overlap. Sequences shorter than n score 0.
RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
// Whole-sequence longest common subsequence.
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);

struct NoveltyReport {
  std::vector<std::size_t> n_values;
  std::vector<double> ngram_ratio;  // aligned with n_values
  std::vector<std::size_t> novel_ngrams, total_ngrams;
  double sentence_ratio = 0.0;
  std::size_t novel_sentences = 0, total_sentences = 0;
};

// Share of summary n-grams (and sentences) that do not occur in the paired
// source, aggregated by total counts. Sentences end at delimiter tokens.
NoveltyReport novelty_stats(std::span<const Tokens> summaries, std::span<const Tokens> sources,
                            std::vector<std::size_t> n_values = {1, 2, 3, 4},
                            std::vector<std::string> sentence_delimiters = {".", "!", "?"});

struct CorpusScores {
  RougeScore rouge1, rouge2, rougeL;
  std::size_t pairs = 0;
};

// Mean of per-pair scores. Throws InputError on an empty corpus or a
// length mismatch.
CorpusScores evaluate_corpus(std::span<const Tokens> candidates, std::span<const Tokens> references);

// "key<TAB>value" lines.
std::string rouge_report_text(const CorpusScores& scores);
std::string novelty_report_text(const NoveltyReport& report);
// {"rouge1": {"p", "r", "f1"}, "rouge2": ..., "rougeL": ...}
std::string rouge_report_json(const CorpusScores& scores);
// {"novelty": {"1gram": r, ..., "sentence": r}}
std::string novelty_report_json(const NoveltyReport& report);

}  // namespace aggsum
