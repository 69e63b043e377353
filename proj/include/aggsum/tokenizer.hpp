#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace aggsum {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr std::size_t kNumSpecials = 4;
inline constexpr std::size_t kDefaultVocabSize = 50000;
inline constexpr std::size_t kDefaultTruncateLen = 500;
inline constexpr std::string_view kEndOfWord = "</w>";

// Surface strings of PAD, UNK, BOS, EOS in vocabulary files.
const std::vector<std::string>& special_tokens();

// Lowercases ASCII letters and splits on whitespace. Input is expected to
// have punctuation already separated into tokens.
std::vector<std::string> tokenize(std::string_view text);

// Token <-> id mapping. Ids are dense in [0, size()) and the four special
// tokens always occupy ids 0..3.
class Vocabulary {
 public:
  Vocabulary();

  // tokens[0..3] must be the special tokens; the rest must be unique.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  // One token per line; line number is the id.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(std::string_view token) const;
  // UNK for unknown tokens.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // FNV-1a over the file representation; identifies a vocabulary in checkpoints.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

std::string hash_hex(std::uint64_t hash);

// The max_size - 4 most frequent tokens (ties by lexicographic order) plus
// the specials.
Vocabulary build_vocab_from_tokens(std::span<const std::vector<std::string>> token_lists, std::size_t max_size);
Vocabulary build_word_vocab(std::span<const std::string> corpus, std::size_t max_size);

// Learned character-level merge table with a Sennrich-style end-of-word marker.
class BpeModel {
 public:
  using Merge = std::pair<std::string, std::string>;

  BpeModel() = default;
  explicit BpeModel(std::vector<Merge> merges);

  const std::vector<Merge>& merges() const noexcept { return merges_; }

  // Segments one word; the final symbol carries the end-of-word marker.
  std::vector<std::string> encode(std::string_view word) const;
  // Segments every whitespace token of an already tokenized text.
  std::vector<std::string> encode_words(std::span<const std::string> words) const;

  // "left right" per line, in rank order.
  static BpeModel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<Merge> merges_;
  std::map<Merge, std::size_t> ranks_;
};

// Splits a word into UTF-8 code points and marks the last one as word end.
std::vector<std::string> bpe_symbols(std::string_view word);

// Greedy merge learning over the word-frequency table of the corpus. Stops
// after num_merges merges or when no pair occurs at least twice.
BpeModel bpe_learn(std::span<const std::string> corpus, std::size_t num_merges);
inline std::vector<std::string> bpe_encode(const BpeModel& model, std::string_view word) { return model.encode(word); }
// Concatenates subwords; every end-of-word marker becomes a word boundary.
std::string bpe_decode(std::span<const std::string> tokens);

// Extended id -> surface word for source tokens outside the vocabulary.
using OovMap = std::map<TokenId, std::string>;

struct EncodedPair {
  std::vector<TokenId> source_ids;
  std::vector<TokenId> source_ext_ids;
  // BOS ... EOS, vocabulary ids (UNK for unknown words).
  std::vector<TokenId> target_ids;
  // Same as target_ids but unknown words found in the source use their
  // extended id.
  std::vector<TokenId> target_ext_ids;
  OovMap oov_map;

  std::size_t oov_count() const noexcept { return oov_map.size(); }
};

// Truncates to truncate_len tokens, maps to ids and assigns extended ids to
// unknown tokens in first-occurrence order. Throws InputError when empty.
EncodedPair encode_source(std::span<const std::string> tokens, const Vocabulary& vocab,
                          std::size_t truncate_len = kDefaultTruncateLen);
EncodedPair encode_source(std::string_view text, const Vocabulary& vocab, std::size_t truncate_len = kDefaultTruncateLen);

// Fills the target fields from summary tokens (at most max_len tokens are kept).
void encode_target(EncodedPair& pair, std::span<const std::string> tokens, const Vocabulary& vocab,
                   std::size_t max_len);

// Tokens for ids; specials are dropped and extended ids resolve through oov_map.
std::vector<std::string> decode_tokens(std::span<const TokenId> ids, const Vocabulary& vocab, const OovMap& oov_map);
std::string decode_ids(std::span<const TokenId> ids, const Vocabulary& vocab, const OovMap& oov_map);

enum class TokenizerMode { word, bpe };

std::string to_string(TokenizerMode mode);
TokenizerMode parse_tokenizer_mode(std::string_view name);

// Text <-> model tokens for a given tokenizer mode.
class TextCodec {
 public:
  TextCodec(TokenizerMode mode, Vocabulary vocab, BpeModel bpe = {});

  TokenizerMode mode() const noexcept { return mode_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const BpeModel& bpe() const noexcept { return bpe_; }

  std::vector<std::string> segment(std::string_view text) const;
  std::string join(std::span<const std::string> tokens) const;

  EncodedPair encode_pair(std::string_view article, std::string_view summary, std::size_t truncate_len,
                          std::size_t target_len) const;
  EncodedPair encode_article(std::string_view article, std::size_t truncate_len) const;
  std::string decode(std::span<const TokenId> ids, const OovMap& oov_map) const;

 private:
  TokenizerMode mode_;
  Vocabulary vocab_;
  BpeModel bpe_;
};

}  // namespace aggsum
