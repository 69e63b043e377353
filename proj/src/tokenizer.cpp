#include "aggsum/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "aggsum/error.hpp"

namespace aggsum {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials{"<pad>", "<unk>", "<s>", "</s>"};
  return specials;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---- Vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary() : tokens_(special_tokens()) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<TokenId>(i));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const auto& specials = special_tokens();
  if (tokens.size() < kNumSpecials || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw LoadError("vocabulary must start with the special tokens <pad> <unk> <s> </s>");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.ids_.clear();
  v.ids_.reserve(v.tokens_.size());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const std::string& tok = v.tokens_[i];
    if (tok.empty() || tok.find_first_of(" \t\r\n") != std::string::npos) {
      throw LoadError("invalid vocabulary token at id " + std::to_string(i));
    }
    if (!v.ids_.emplace(tok, static_cast<TokenId>(i)).second) {
      throw LoadError("duplicate vocabulary token '" + tok + "' at id " + std::to_string(i));
    }
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

bool Vocabulary::contains(std::string_view token) const {
  return ids_.find(std::string(token)) != ids_.end();
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()), id);
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 1099511628211ULL;
  };
  for (const auto& t : tokens_) {
    for (char c : t) mix(static_cast<unsigned char>(c));
    mix('\n');
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

Vocabulary build_vocab_from_tokens(std::span<const std::vector<std::string>> token_lists, std::size_t max_size) {
  if (max_size < kNumSpecials + 1) {
    throw ConfigError("vocabulary size must be at least " + std::to_string(kNumSpecials + 1) + ", got " +
                      std::to_string(max_size));
  }
  if (token_lists.empty()) throw InputError("cannot build a vocabulary from an empty corpus");
  const auto& specials = special_tokens();
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& list : token_lists) {
    for (const auto& t : list) {
      if (std::find(specials.begin(), specials.end(), t) != specials.end()) continue;
      ++counts[t];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens = specials;
  for (std::size_t i = 0; i < ranked.size() && tokens.size() < max_size; ++i) tokens.push_back(ranked[i].first);
  return Vocabulary::from_tokens(std::move(tokens));
}

Vocabulary build_word_vocab(std::span<const std::string> corpus, std::size_t max_size) {
  std::vector<std::vector<std::string>> lists;
  lists.reserve(corpus.size());
  for (const auto& text : corpus) lists.push_back(tokenize(text));
  return build_vocab_from_tokens(lists, max_size);
}

// ---- BPE -------------------------------------------------------------------

std::vector<std::string> bpe_symbols(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) {
      len = 4;
    } else if (c >= 0xE0) {
      len = 3;
    } else if (c >= 0xC0) {
      len = 2;
    }
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  if (!out.empty()) out.back() += kEndOfWord;
  return out;
}

namespace {

// Replaces every non-overlapping occurrence of (left, right), scanning left to right.
void apply_merge(std::vector<std::string>& symbols, const BpeModel::Merge& merge) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
      out.push_back(symbols[i] + symbols[i + 1]);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace

BpeModel::BpeModel(std::vector<Merge> merges) : merges_(std::move(merges)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) ranks_.emplace(merges_[i], i);
}

std::vector<std::string> BpeModel::encode(std::string_view word) const {
  std::vector<std::string> symbols = bpe_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = merges_.size();
    const Merge* best = nullptr;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = ranks_.find(Merge{symbols[i], symbols[i + 1]});
      if (it != ranks_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = &it->first;
      }
    }
    if (!best) break;
    apply_merge(symbols, *best);
  }
  return symbols;
}

std::vector<std::string> BpeModel::encode_words(std::span<const std::string> words) const {
  std::vector<std::string> out;
  for (const auto& w : words) {
    auto pieces = encode(w);
    out.insert(out.end(), std::make_move_iterator(pieces.begin()), std::make_move_iterator(pieces.end()));
  }
  return out;
}

BpeModel BpeModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read merges file " + path.string());
  std::vector<Merge> merges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    Merge m;
    std::string extra;
    if (!(ls >> m.first >> m.second) || (ls >> extra)) {
      throw LoadError("malformed merge at " + path.string() + ":" + std::to_string(lineno));
    }
    merges.push_back(std::move(m));
  }
  return BpeModel(std::move(merges));
}

void BpeModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write merges file " + path.string());
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
}

BpeModel bpe_learn(std::span<const std::string> corpus, std::size_t num_merges) {
  std::map<std::string, std::size_t> freq;
  for (const auto& text : corpus) {
    for (auto& w : tokenize(text)) ++freq[w];
  }
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  words.reserve(freq.size());
  for (const auto& [w, c] : freq) words.emplace_back(bpe_symbols(w), c);

  std::vector<BpeModel::Merge> merges;
  while (merges.size() < num_merges) {
    std::map<BpeModel::Merge, std::size_t> pairs;
    for (const auto& [syms, c] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += c;
    }
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    const BpeModel::Merge* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [p, c] : pairs) {
      if (c > best_count) {
        best_count = c;
        best = &p;
      }
    }
    if (!best || best_count < 2) break;
    BpeModel::Merge m = *best;
    for (auto& entry : words) apply_merge(entry.first, m);
    merges.push_back(std::move(m));
  }
  return BpeModel(std::move(merges));
}

std::string bpe_decode(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (t.size() >= kEndOfWord.size() && t.compare(t.size() - kEndOfWord.size(), kEndOfWord.size(), kEndOfWord) == 0) {
      out.append(t, 0, t.size() - kEndOfWord.size());
      out.push_back(' ');
    } else {
      out += t;
    }
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

// ---- encoding --------------------------------------------------------------

EncodedPair encode_source(std::span<const std::string> tokens, const Vocabulary& vocab, std::size_t truncate_len) {
  const std::size_t n = std::min(tokens.size(), truncate_len);
  if (n == 0) throw InputError("source text is empty after tokenization");
  EncodedPair pair;
  pair.source_ids.reserve(n);
  pair.source_ext_ids.reserve(n);
  std::map<std::string_view, TokenId> slots;
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId id = vocab.id(tokens[i]);
    pair.source_ids.push_back(id);
    if (id != kUnk || vocab.contains(tokens[i])) {
      pair.source_ext_ids.push_back(id);
      continue;
    }
    auto [it, inserted] = slots.emplace(tokens[i], static_cast<TokenId>(vocab.size() + slots.size()));
    if (inserted) pair.oov_map.emplace(it->second, tokens[i]);
    pair.source_ext_ids.push_back(it->second);
  }
  return pair;
}

EncodedPair encode_source(std::string_view text, const Vocabulary& vocab, std::size_t truncate_len) {
  return encode_source(tokenize(text), vocab, truncate_len);
}

void encode_target(EncodedPair& pair, std::span<const std::string> tokens, const Vocabulary& vocab,
                   std::size_t max_len) {
  const std::size_t n = std::min(tokens.size(), max_len);
  std::map<std::string_view, TokenId> slots;
  for (const auto& [id, word] : pair.oov_map) slots.emplace(word, id);
  pair.target_ids.assign(1, kBos);
  pair.target_ext_ids.assign(1, kBos);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId id = vocab.id(tokens[i]);
    pair.target_ids.push_back(id);
    if (id == kUnk && !vocab.contains(tokens[i])) {
      auto it = slots.find(tokens[i]);
      pair.target_ext_ids.push_back(it == slots.end() ? kUnk : it->second);
    } else {
      pair.target_ext_ids.push_back(id);
    }
  }
  pair.target_ids.push_back(kEos);
  pair.target_ext_ids.push_back(kEos);
}

std::vector<std::string> decode_tokens(std::span<const TokenId> ids, const Vocabulary& vocab, const OovMap& oov_map) {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (id >= 0 && static_cast<std::size_t>(id) >= vocab.size()) {
      auto it = oov_map.find(id);
      if (it == oov_map.end()) throw MappingError("extended id " + std::to_string(id) + " has no out-of-vocabulary entry");
      out.push_back(it->second);
      continue;
    }
    out.push_back(vocab.token(id));
  }
  return out;
}

std::string decode_ids(std::span<const TokenId> ids, const Vocabulary& vocab, const OovMap& oov_map) {
  std::string out;
  for (const auto& t : decode_tokens(ids, vocab, oov_map)) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

std::string to_string(TokenizerMode mode) { return mode == TokenizerMode::word ? "word" : "bpe"; }

TokenizerMode parse_tokenizer_mode(std::string_view name) {
  if (name == "word") return TokenizerMode::word;
  if (name == "bpe") return TokenizerMode::bpe;
  throw ConfigError("unknown tokenizer mode '" + std::string(name) + "' (expected word or bpe)");
}

TextCodec::TextCodec(TokenizerMode mode, Vocabulary vocab, BpeModel bpe)
    : mode_(mode), vocab_(std::move(vocab)), bpe_(std::move(bpe)) {}

std::vector<std::string> TextCodec::segment(std::string_view text) const {
  auto words = tokenize(text);
  if (mode_ == TokenizerMode::word) return words;
  return bpe_.encode_words(words);
}

std::string TextCodec::join(std::span<const std::string> tokens) const {
  if (mode_ == TokenizerMode::bpe) return bpe_decode(tokens);
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

EncodedPair TextCodec::encode_article(std::string_view article, std::size_t truncate_len) const {
  return encode_source(segment(article), vocab_, truncate_len);
}

EncodedPair TextCodec::encode_pair(std::string_view article, std::string_view summary, std::size_t truncate_len,
                                   std::size_t target_len) const {
  EncodedPair pair = encode_article(article, truncate_len);
  encode_target(pair, segment(summary), vocab_, target_len);
  return pair;
}

std::string TextCodec::decode(std::span<const TokenId> ids, const OovMap& oov_map) const {
  const auto tokens = decode_tokens(ids, vocab_, oov_map);
  return join(tokens);
}

}  // namespace aggsum
