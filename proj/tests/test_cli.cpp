#include <filesystem>
#include <fstream>
#include <sstream>

#include "aggsum/checkpoint.hpp"
#include "aggsum/cli.hpp"
#include "aggsum/decoding.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace aggsum;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("aggsum_cli_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string operator/(const std::string& f) const { return (path_ / f).string(); }

 private:
  fs::path path_;
};

void write(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::string read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::string toy_corpus(int n, int offset = 0) {
  static const char* words[] = {"the", "cat", "dog", "sat", "ran", "on", "mat", "park", "big", "small"};
  std::string out;
  for (int i = 0; i < n; ++i) {
    std::string article, summary;
    for (int k = 0; k < 7; ++k) article += std::string(words[(i + offset + 3 * k) % 10]) + " ";
    article += "name" + std::to_string(i) + " .";
    summary = std::string(words[(i + offset) % 10]) + " name" + std::to_string(i) + " " + words[(i + offset + 3) % 10];
    out += json{{"article", article}, {"summary", summary}}.dump() + "\n";
  }
  return out;
}

const std::vector<std::string> kTinyModel{"--d-model", "8",  "--heads",   "2",  "--enc-layers", "2",
                                          "--dec-layers", "2", "--d-ff", "16", "--max-positions", "64",
                                          "--batch-size", "4", "--lr", "0.001", "--seed", "3"};

std::vector<std::string> train_args(const TempDir& d, const std::string& out_dir, std::vector<std::string> extra = {}) {
  std::vector<std::string> a{"train", "--train", d / "train.jsonl", "--valid", d / "valid.jsonl",
                             "--vocab", d / "vocab.txt", "--out-dir", d / out_dir};
  a.insert(a.end(), kTinyModel.begin(), kTinyModel.end());
  a.insert(a.end(), extra.begin(), extra.end());
  return a;
}

void prepare(const TempDir& d) {
  write(d / "train.jsonl", toy_corpus(10));
  write(d / "valid.jsonl", toy_corpus(4, 5));
  REQUIRE(run({"build-vocab", "--corpus", d / "train.jsonl", "--vocab-out", d / "vocab.txt", "--vocab-size", "30"}).code ==
          0);
}

}  // namespace

TEST_CASE("defaults mirror the reference setup") {
  ModelConfig m;
  CHECK(m.n_enc == 4);
  CHECK(m.n_dec == 4);
  CHECK(m.vocab_size == 50000);
  TrainConfig t;
  CHECK(t.learning_rate == 1e-4);
  CHECK(t.dropout == 0.1);
  CHECK(t.truncate_len == 500);
  BeamConfig b;
  CHECK(b.beam_size == 10);
  CHECK(b.no_repeat_ngram == 3);
  CHECK(b.length_penalty_alpha == 2.0);
  CHECK(b.min_len == 50);
  CHECK(b.max_len == 120);
}

TEST_CASE("build-vocab") {
  TempDir d("vocab");
  write(d / "c.jsonl", "{\"article\": \"a b c\", \"summary\": \"a d\"}\n\n{\"article\": \"e\", \"summary\": \"f g\"}\n"
                       "{\"article\": \"a\", \"summary\": \"h\"}\n");
  auto r = run({"build-vocab", "--corpus", d / "c.jsonl", "--vocab-out", d / "v.txt"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("records\t3") != std::string::npos);
  auto v = Vocabulary::load(d / "v.txt");
  CHECK(v.size() == 4 + 8);
  for (const char* w : {"a", "b", "c", "d", "e", "f", "g", "h"}) CHECK(v.contains(w));
  CHECK(r.out.find("oov_rate\t0.000000") != std::string::npos);
  CHECK(r.out.find("vocab_hash\t" + hash_hex(v.hash())) != std::string::npos);

  // Every word once, capacity for half of them.
  std::string distinct;
  for (int i = 0; i < 10; ++i)
    distinct += json{{"article", "w" + std::to_string(2 * i)}, {"summary", "w" + std::to_string(2 * i + 1)}}.dump() + "\n";
  write(d / "distinct.jsonl", distinct);
  auto half = run({"build-vocab", "--corpus", d / "distinct.jsonl", "--vocab-out", d / "h.txt", "--vocab-size", "14"});
  REQUIRE(half.code == 0);
  CHECK(half.out.find("oov_rate\t0.500000") != std::string::npos);

  auto bpe = run({"build-vocab", "--corpus", d / "c.jsonl", "--vocab-out", d / "bv.txt", "--tokenizer", "bpe",
                  "--bpe-out", d / "m.txt", "--merges", "5"});
  CHECK(bpe.code == 0);
  CHECK(fs::exists(d / "m.txt"));
}

TEST_CASE("corpus errors carry line numbers") {
  TempDir d("corpus");
  write(d / "bad.jsonl", "{\"article\": \"a\", \"summary\": \"b\"}\n{\"article\": \"a\"}\n");
  auto r = run({"build-vocab", "--corpus", d / "bad.jsonl", "--vocab-out", d / "v.txt"});
  CHECK(r.code == cli::kDataError);
  CHECK(r.err.find("bad.jsonl:2: missing \"summary\"") != std::string::npos);
  CHECK_FALSE(fs::exists(d / "v.txt"));

  write(d / "empty.jsonl", "{\"article\": \"  \", \"summary\": \"b\"}\n");
  CHECK(run({"build-vocab", "--corpus", d / "empty.jsonl", "--vocab-out", d / "v.txt"}).err.find(":1:") !=
        std::string::npos);
  write(d / "junk.jsonl", "not json\n");
  CHECK(run({"build-vocab", "--corpus", d / "junk.jsonl", "--vocab-out", d / "v.txt"}).code == cli::kDataError);
  CHECK(run({"build-vocab", "--corpus", d / "missing.jsonl", "--vocab-out", d / "v.txt"}).code == cli::kDataError);
}

TEST_CASE("usage errors") {
  CHECK(run({}).code == cli::kUsageError);
  CHECK(run({"frobnicate"}).code == cli::kUsageError);
  CHECK(run({"evaluate", "--no-such-flag"}).code == cli::kUsageError);
  CHECK(run({"train", "--pointer", "maybe"}).code == cli::kUsageError);
  CHECK(run({"evaluate"}).code == cli::kUsageError);
  CHECK(run({"--help"}).code == cli::kOk);
}

TEST_CASE("config files") {
  TempDir d("config");
  prepare(d);
  write(d / "run.cfg", "# tiny run\nepochs = 3\nagg_method = add\npointer = off\n");
  auto r = run(train_args(d, "out", {"--config", d / "run.cfg", "--epochs", "1"}));
  REQUIRE(r.code == 0);
  CHECK(count_lines(read(d / "out/metrics.jsonl")) == 1);
  auto ck = load_checkpoint(d / "out/last.ckpt");
  CHECK(ck.model.agg_method == AggMethod::add);
  CHECK_FALSE(ck.model.use_pointer);

  write(d / "bad.cfg", "epochs = 1\nwarp_speed = 9\n");
  auto bad = run(train_args(d, "out2", {"--config", d / "bad.cfg"}));
  CHECK(bad.code == cli::kUsageError);
  CHECK(bad.err.find("warp-speed") != std::string::npos);
  CHECK_FALSE(fs::exists(d / "out2"));

  write(d / "syntax.cfg", "epochs 1\n");
  auto syn = run(train_args(d, "out3", {"--config", d / "syntax.cfg"}));
  CHECK(syn.code == cli::kUsageError);
  CHECK(syn.err.find("syntax.cfg:1") != std::string::npos);
}

TEST_CASE("invalid configurations have no side effects") {
  TempDir d("invalid");
  prepare(d);
  auto r = run(train_args(d, "out", {"--heads", "3"}));
  CHECK(r.code == cli::kUsageError);
  CHECK_FALSE(fs::exists(d / "out"));
  auto agg = run(train_args(d, "out", {"--agg-layers", "2"}));
  CHECK(agg.code == cli::kUsageError);
  CHECK_FALSE(fs::exists(d / "out"));
}

TEST_CASE("training is reproducible and resumable") {
  TempDir d("train");
  prepare(d);
  REQUIRE(run(train_args(d, "a", {"--epochs", "3"})).code == 0);
  REQUIRE(run(train_args(d, "b", {"--epochs", "3"})).code == 0);
  const auto metrics = read(d / "a/metrics.jsonl");
  CHECK(count_lines(metrics) == 3);
  CHECK(metrics == read(d / "b/metrics.jsonl"));
  CHECK(read(d / "a/last.ckpt") == read(d / "b/last.ckpt"));
  CHECK(fs::exists(d / "a/best.ckpt"));

  // Interrupt mid-epoch, then resume.
  auto first = run(train_args(d, "c", {"--epochs", "3", "--max-steps", "4"}));
  REQUIRE(first.code == 0);
  CHECK(first.out.find("stopped after step 4") != std::string::npos);
  REQUIRE(run(train_args(d, "c", {"--epochs", "3", "--resume"})).code == 0);
  std::istringstream ra(metrics), rc(read(d / "c/metrics.jsonl"));
  std::string la, lc;
  std::size_t n = 0;
  while (std::getline(ra, la)) {
    REQUIRE(std::getline(rc, lc));
    const auto ja = json::parse(la), jc = json::parse(lc);
    for (const char* k : {"train_loss", "val_loss", "lr", "next_lr"})
      CHECK(std::abs(ja[k].get<double>() - jc[k].get<double>()) <= 1e-6);
    CHECK(ja["step"] == jc["step"]);
    ++n;
  }
  CHECK(n == 3);
  CHECK(read(d / "a/last.ckpt") == read(d / "c/last.ckpt"));

  auto none = run(train_args(d, "missing", {"--resume"}));
  CHECK(none.code == cli::kDataError);
}

TEST_CASE("summarize") {
  TempDir d("summarize");
  prepare(d);
  REQUIRE(run(train_args(d, "m", {"--epochs", "1"})).code == 0);
  const std::string ckpt = d / "m/last.ckpt";
  write(d / "in.jsonl", "{\"article\": \"the cat sat on the mat .\"}\n{\"article\": \"a zebra ran in the park .\"}\n"
                        "{\"article\": \"dog\", \"summary\": \"ignored\"}\n");
  const std::vector<std::string> base{"summarize", "--checkpoint", ckpt, "--vocab", d / "vocab.txt",
                                      "--input", d / "in.jsonl", "--min-len", "2", "--max-len", "5"};
  auto beam = run(base);
  REQUIRE(beam.code == 0);
  CHECK(count_lines(beam.out) == 3);

  auto greedy = base;
  greedy.push_back("--greedy");
  auto one = base;
  one.insert(one.end(), {"--beam-size", "1"});
  const auto g = run(greedy), o1 = run(one);
  CHECK(g.code == 0);
  CHECK(g.out == o1.out);

  auto to_file = base;
  to_file.insert(to_file.end(), {"--output", d / "out.txt", "--threads", "2"});
  REQUIRE(run(to_file).code == 0);
  CHECK(read(d / "out.txt") == beam.out);

  // A different vocabulary is refused with both hashes.
  write(d / "other.jsonl", "{\"article\": \"x y z\", \"summary\": \"x\"}\n");
  REQUIRE(run({"build-vocab", "--corpus", d / "other.jsonl", "--vocab-out", d / "other.txt"}).code == 0);
  auto wrong = base;
  wrong[4] = d / "other.txt";
  auto mismatch = run(wrong);
  CHECK(mismatch.code == cli::kDataError);
  const auto expected = hash_hex(load_checkpoint(ckpt).vocab_hash);
  const auto other = hash_hex(Vocabulary::load(d / "other.txt").hash());
  CHECK(mismatch.err.find(expected) != std::string::npos);
  CHECK(mismatch.err.find(other) != std::string::npos);

  auto bad_len = base;
  bad_len.insert(bad_len.end(), {"--min-len", "9"});
  CHECK(run(bad_len).code == cli::kUsageError);
  write(d / "bad_ckpt", "AGTF");
  auto corrupt = base;
  corrupt[2] = d / "bad_ckpt";
  CHECK(run(corrupt).code == cli::kDataError);
}

TEST_CASE("evaluate and stats") {
  TempDir d("evaluate");
  write(d / "ref.txt", "the cat sat\nthe dog ran\n");
  write(d / "one.txt", "the cat sat\n");
  auto same = run({"evaluate", "--candidates", d / "ref.txt", "--references", d / "ref.txt", "--json", d / "r.json"});
  REQUIRE(same.code == 0);
  for (const char* k : {"rouge1_f1\t1.000000", "rouge2_f1\t1.000000", "rougeL_f1\t1.000000"})
    CHECK(same.out.find(k) != std::string::npos);
  const auto j = json::parse(read(d / "r.json"));
  CHECK(j.size() == 3);
  for (const char* m : {"rouge1", "rouge2", "rougeL"}) {
    CHECK(j.at(m).size() == 3);
    for (const char* k : {"p", "r", "f1"}) CHECK(j.at(m).at(k).get<double>() == 1.0);
  }

  auto mismatch = run({"evaluate", "--candidates", d / "one.txt", "--references", d / "ref.txt"});
  CHECK(mismatch.code == cli::kDataError);
  CHECK(mismatch.err.find("1 candidates vs 2 references") != std::string::npos);

  write(d / "src.txt", "a b c d\n");
  write(d / "sum.txt", "a b c x y\n");
  auto st = run({"stats", "--summaries", d / "sum.txt", "--sources", d / "src.txt", "--json", d / "n.json"});
  REQUIRE(st.code == 0);
  CHECK(st.out.find("novel_2gram\t0.500000") != std::string::npos);
  const auto nj = json::parse(read(d / "n.json"));
  CHECK(nj.at("novelty").at("2gram").get<double>() == 0.5);

  write(d / "src.jsonl", "{\"article\": \"a b c d\", \"summary\": \"q\"}\n");
  CHECK(run({"stats", "--summaries", d / "sum.txt", "--sources", d / "src.jsonl"}).out == st.out);
  CHECK(run({"stats", "--summaries", d / "ref.txt", "--sources", d / "src.txt"}).code == cli::kDataError);
}
