#include "aggsum/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "aggsum/error.hpp"
#include "json.hpp"

namespace aggsum {

namespace {

using Gram = std::vector<std::string>;

std::map<Gram, std::size_t> count_ngrams(std::span<const std::string> tokens, std::size_t n) {
  std::map<Gram, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Gram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

std::string fixed(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

}  // namespace

RougeScore make_rouge_score(double precision, double recall) {
  RougeScore s{precision, recall, 0.0};
  if (precision + recall > 0) s.f1 = 2.0 * precision * recall / (precision + recall);
  return s;
}

RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n) {
  if (n == 0) throw ContractError("rouge_n needs n >= 1");
  const auto cand = count_ngrams(candidate, n);
  const auto ref = count_ngrams(reference, n);
  std::size_t overlap = 0, cand_total = 0, ref_total = 0;
  for (const auto& [g, c] : cand) {
    cand_total += c;
    if (auto it = ref.find(g); it != ref.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [g, c] : ref) ref_total += c;
  return make_rouge_score(ratio(static_cast<double>(overlap), static_cast<double>(cand_total)),
                          ratio(static_cast<double>(overlap), static_cast<double>(ref_total)));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return {};
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  return make_rouge_score(lcs / static_cast<double>(candidate.size()), lcs / static_cast<double>(reference.size()));
}

NoveltyReport novelty_stats(std::span<const Tokens> summaries, std::span<const Tokens> sources,
                            std::vector<std::size_t> n_values, std::vector<std::string> sentence_delimiters) {
  if (summaries.size() != sources.size()) {
    throw InputError("novelty_stats: " + std::to_string(summaries.size()) + " summaries but " +
                     std::to_string(sources.size()) + " sources");
  }
  NoveltyReport r;
  r.n_values = std::move(n_values);
  r.novel_ngrams.assign(r.n_values.size(), 0);
  r.total_ngrams.assign(r.n_values.size(), 0);
  const std::set<std::string> delims(sentence_delimiters.begin(), sentence_delimiters.end());
  for (std::size_t k = 0; k < summaries.size(); ++k) {
    const Tokens& sum = summaries[k];
    const Tokens& src = sources[k];
    for (std::size_t i = 0; i < r.n_values.size(); ++i) {
      const std::size_t n = r.n_values[i];
      if (n == 0) throw ContractError("novelty n must be >= 1");
      const auto src_grams = count_ngrams(src, n);
      for (const auto& [g, c] : count_ngrams(sum, n)) {
        r.total_ngrams[i] += c;
        if (!src_grams.count(g)) r.novel_ngrams[i] += c;
      }
    }
    Tokens sentence;
    auto flush = [&] {
      if (sentence.empty()) return;
      ++r.total_sentences;
      if (std::search(src.begin(), src.end(), sentence.begin(), sentence.end()) == src.end()) ++r.novel_sentences;
      sentence.clear();
    };
    for (const auto& tok : sum) {
      if (delims.count(tok)) {
        flush();
      } else {
        sentence.push_back(tok);
      }
    }
    flush();
  }
  for (std::size_t i = 0; i < r.n_values.size(); ++i) {
    r.ngram_ratio.push_back(ratio(static_cast<double>(r.novel_ngrams[i]), static_cast<double>(r.total_ngrams[i])));
  }
  r.sentence_ratio = ratio(static_cast<double>(r.novel_sentences), static_cast<double>(r.total_sentences));
  return r;
}

CorpusScores evaluate_corpus(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.size() != references.size()) {
    throw InputError("evaluate_corpus: " + std::to_string(candidates.size()) + " candidates but " +
                     std::to_string(references.size()) + " references");
  }
  if (candidates.empty()) throw InputError("evaluate_corpus: empty corpus");
  CorpusScores out;
  out.pairs = candidates.size();
  auto acc = [](RougeScore& total, const RougeScore& s) {
    total.precision += s.precision;
    total.recall += s.recall;
    total.f1 += s.f1;
  };
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    acc(out.rouge1, rouge_n(candidates[i], references[i], 1));
    acc(out.rouge2, rouge_n(candidates[i], references[i], 2));
    acc(out.rougeL, rouge_l(candidates[i], references[i]));
  }
  const double n = static_cast<double>(out.pairs);
  for (RougeScore* s : {&out.rouge1, &out.rouge2, &out.rougeL}) {
    s->precision /= n;
    s->recall /= n;
    s->f1 /= n;
  }
  return out;
}

std::string rouge_report_text(const CorpusScores& scores) {
  std::string out;
  auto line = [&](const char* name, const RougeScore& s) {
    out += std::string(name) + "_p\t" + fixed(s.precision) + "\n";
    out += std::string(name) + "_r\t" + fixed(s.recall) + "\n";
    out += std::string(name) + "_f1\t" + fixed(s.f1) + "\n";
  };
  line("rouge1", scores.rouge1);
  line("rouge2", scores.rouge2);
  line("rougeL", scores.rougeL);
  out += "pairs\t" + std::to_string(scores.pairs) + "\n";
  return out;
}

std::string novelty_report_text(const NoveltyReport& report) {
  std::string out;
  for (std::size_t i = 0; i < report.n_values.size(); ++i) {
    out += "novel_" + std::to_string(report.n_values[i]) + "gram\t" + fixed(report.ngram_ratio[i]) + "\n";
  }
  out += "novel_sentence\t" + fixed(report.sentence_ratio) + "\n";
  return out;
}

std::string rouge_report_json(const CorpusScores& scores) {
  auto obj = [](const RougeScore& s) { return nlohmann::json{{"p", s.precision}, {"r", s.recall}, {"f1", s.f1}}; };
  nlohmann::json j{{"rouge1", obj(scores.rouge1)}, {"rouge2", obj(scores.rouge2)}, {"rougeL", obj(scores.rougeL)}};
  return j.dump(2) + "\n";
}

std::string novelty_report_json(const NoveltyReport& report) {
  nlohmann::json ratios = nlohmann::json::object();
  for (std::size_t i = 0; i < report.n_values.size(); ++i) {
    ratios[std::to_string(report.n_values[i]) + "gram"] = report.ngram_ratio[i];
  }
  ratios["sentence"] = report.sentence_ratio;
  return nlohmann::json{{"novelty", ratios}}.dump(2) + "\n";
}

}  // namespace aggsum
