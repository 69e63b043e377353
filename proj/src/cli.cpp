#include "aggsum/cli.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>

#include <omp.h>

#include "CLI11.hpp"
#include "aggsum/checkpoint.hpp"
#include "aggsum/decoding.hpp"
#include "aggsum/error.hpp"
#include "aggsum/evaluation.hpp"
#include "json.hpp"

namespace aggsum::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- input files ----------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  return in;
}

std::string where(const fs::path& path, std::size_t line) { return path.string() + ":" + std::to_string(line); }

bool has_suffix(const fs::path& path, std::string_view suffix) { return path.extension() == suffix; }

}  // namespace

std::vector<CorpusRecord> read_corpus(const fs::path& path, bool require_summary) {
  auto in = open_input(path);
  std::vector<CorpusRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw InputError(where(path, n) + ": not a JSON object");
    }
    if (!j.is_object()) throw InputError(where(path, n) + ": not a JSON object");
    CorpusRecord r;
    for (auto [key, dst, required] : {std::tuple{"article", &r.article, true},
                                      std::tuple{"summary", &r.summary, require_summary}}) {
      if (!j.contains(key)) {
        if (required) throw InputError(where(path, n) + ": missing \"" + key + "\"");
        continue;
      }
      if (!j.at(key).is_string()) throw InputError(where(path, n) + ": \"" + key + "\" is not a string");
      *dst = j.at(key).get<std::string>();
      if (required && trim(*dst).empty()) throw InputError(where(path, n) + ": \"" + key + "\" is empty");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::string> read_records(const fs::path& path, const std::string& jsonl_field) {
  if (has_suffix(path, ".jsonl")) {
    std::vector<std::string> out;
    for (auto& r : read_corpus(path, jsonl_field == "summary")) {
      out.push_back(jsonl_field == "summary" ? std::move(r.summary) : std::move(r.article));
    }
    return out;
  }
  auto in = open_input(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where(path, n) + ": expected 'key = value'");
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError(where(path, n) + ": empty key");
    std::replace(key.begin(), key.end(), '_', '-');
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

// ---- options ----------------------------------------------------------------------

namespace {

struct Options {
  ModelConfig model;
  TrainConfig train;
  BeamConfig beam;
  std::string tokenizer = "word";
  std::string agg_method = "attention";
  std::string pointer = "on";
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t merges = 10000;
  std::uint64_t seed = 1;
  bool resume = false;
  bool greedy = false;
  std::size_t max_steps = 0;
  std::size_t save_every = 0;
  int threads = 0;

  std::string config, corpus, vocab_out, bpe_out, train_path, valid_path, vocab, bpe, out_dir, checkpoint, input,
      output, candidates, references, summaries, sources, json_out;
};

void add_config(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "key = value file; command-line flags take precedence");
  cmd->add_option("--threads", o.threads, "OpenMP threads (0 = runtime default)")->check(CLI::NonNegativeNumber);
}

void add_tokenizer(CLI::App* cmd, Options& o) {
  cmd->add_option("--tokenizer", o.tokenizer, "word or bpe")->check(CLI::IsMember({"word", "bpe"}));
}

void add_model(CLI::App* cmd, Options& o) {
  cmd->add_option("--d-model", o.model.d_model, "model width");
  cmd->add_option("--heads", o.model.n_heads, "attention heads");
  cmd->add_option("--enc-layers", o.model.n_enc, "encoder layers");
  cmd->add_option("--dec-layers", o.model.n_dec, "decoder layers");
  cmd->add_option("--d-ff", o.model.d_ff, "feed-forward width");
  cmd->add_option("--dropout", o.train.dropout, "dropout probability");
  cmd->add_option("--agg-method", o.agg_method, "none, add, projection or attention")
      ->check(CLI::IsMember({"none", "add", "projection", "attention"}));
  cmd->add_option("--agg-layers", o.model.agg_layers, "aggregated layers L");
  cmd->add_option("--pointer", o.pointer, "on or off")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--max-positions", o.model.max_positions, "longest sequence the model accepts");
}

void add_train(CLI::App* cmd, Options& o) {
  cmd->add_option("--lr", o.train.learning_rate, "initial learning rate");
  cmd->add_option("--beta1", o.train.beta1, "Adam beta1");
  cmd->add_option("--beta2", o.train.beta2, "Adam beta2");
  cmd->add_option("--adam-eps", o.train.adam_eps, "Adam epsilon");
  cmd->add_option("--batch-size", o.train.batch_size, "pairs per step");
  cmd->add_option("--epochs", o.train.max_epochs, "epochs to train");
  cmd->add_option("--truncate", o.train.truncate_len, "source tokens kept");
  cmd->add_option("--target-len", o.train.target_len, "summary tokens kept");
  cmd->add_option("--seed", o.seed, "seed for initialization, shuffling and dropout");
  cmd->add_option("--patience", o.train.patience_epochs, "epochs without improvement before the rate halves");
  cmd->add_option("--lr-decay", o.train.lr_decay_factor, "learning-rate decay factor");
  cmd->add_option("--clip-norm", o.train.clip_norm, "global gradient norm limit (0 disables)");
}

void add_beam(CLI::App* cmd, Options& o) {
  cmd->add_option("--beam-size", o.beam.beam_size, "beam width");
  cmd->add_option("--no-repeat-ngram", o.beam.no_repeat_ngram, "blocked n-gram size (0 disables)");
  cmd->add_option("--length-penalty", o.beam.length_penalty_alpha, "length penalty alpha");
  cmd->add_option("--min-len", o.beam.min_len, "minimum summary tokens");
  cmd->add_option("--max-len", o.beam.max_len, "maximum summary tokens");
  cmd->add_flag("--greedy", o.greedy, "argmax decoding (beam size 1)");
  cmd->add_option("--truncate", o.train.truncate_len, "source tokens kept");
}

// Moves the settings from a --config file in front of the command-line
// arguments of the chosen subcommand.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  std::size_t sub_pos = args.size();
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    for (const CLI::App* s : app.get_subcommands({})) {
      if (s->get_name() == args[i]) {
        sub_pos = i;
        sub = s;
        break;
      }
    }
    if (sub) break;
  }
  if (!sub) return args;
  std::string path;
  for (std::size_t i = sub_pos + 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::vector<std::string> injected;
  for (const auto& [key, value] : read_config_file(path)) {
    if (key == "config") throw ConfigError("config files cannot include other config files");
    const CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (!opt) throw ConfigError("unknown key '" + key + "' in config file '" + path + "' for " + sub->get_name());
    injected.push_back("--" + key + "=" + value);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos + 1), injected.begin(), injected.end());
  return args;
}

// Completes and validates the model/train configuration from flags.
void finish_configs(Options& o, std::size_t vocab_size) {
  o.model.agg_method = parse_agg_method(o.agg_method);
  o.model.use_pointer = o.pointer == "on";
  o.model.dropout = o.train.dropout;
  o.model.vocab_size = vocab_size;
  o.train.seed = o.seed;
  if (o.model.agg_method == AggMethod::none) o.model.agg_layers = std::max<std::size_t>(o.model.agg_layers, 1);
  o.model.validate();
  o.train.validate();
}

TextCodec load_codec(const Options& o) {
  const TokenizerMode mode = parse_tokenizer_mode(o.tokenizer);
  if (o.vocab.empty()) throw ConfigError("--vocab is required");
  Vocabulary vocab = Vocabulary::load(o.vocab);
  BpeModel bpe;
  if (mode == TokenizerMode::bpe) {
    if (o.bpe.empty()) throw ConfigError("--bpe is required with --tokenizer bpe");
    bpe = BpeModel::load(o.bpe);
  }
  return TextCodec(mode, std::move(vocab), std::move(bpe));
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string(flag) + " is required");
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

std::string fmt(double x) {
  std::ostringstream ss;
  ss.precision(6);
  ss << std::fixed << x;
  return ss.str();
}

// ---- commands -------------------------------------------------------------------

int cmd_build_vocab(const Options& o, std::ostream& out) {
  require(o.corpus, "--corpus");
  require(o.vocab_out, "--vocab-out");
  const TokenizerMode mode = parse_tokenizer_mode(o.tokenizer);
  if (mode == TokenizerMode::bpe) require(o.bpe_out, "--bpe-out");
  if (o.vocab_size <= kNumSpecials) throw ConfigError("--vocab-size must exceed " + std::to_string(kNumSpecials));

  const auto records = read_corpus(o.corpus);
  if (records.empty()) throw InputError("corpus '" + o.corpus + "' has no records");
  std::vector<std::string> texts;
  for (const auto& r : records) {
    texts.push_back(r.article);
    texts.push_back(r.summary);
  }
  BpeModel bpe;
  if (mode == TokenizerMode::bpe) bpe = bpe_learn(texts, o.merges);
  const TextCodec segmenter(mode, Vocabulary(), bpe);
  std::vector<std::vector<std::string>> lists;
  lists.reserve(texts.size());
  for (const auto& t : texts) lists.push_back(segmenter.segment(t));
  const Vocabulary vocab = build_vocab_from_tokens(lists, o.vocab_size);

  std::size_t total = 0, oov = 0;
  for (const auto& l : lists) {
    total += l.size();
    for (const auto& t : l) oov += vocab.contains(t) ? 0 : 1;
  }
  vocab.save(o.vocab_out);
  if (mode == TokenizerMode::bpe) bpe.save(o.bpe_out);
  out << "records\t" << records.size() << "\n";
  out << "tokens\t" << total << "\n";
  out << "vocab_size\t" << vocab.size() << "\n";
  if (mode == TokenizerMode::bpe) out << "merges\t" << bpe.merges().size() << "\n";
  out << "oov_rate\t" << fmt(total ? static_cast<double>(oov) / static_cast<double>(total) : 0.0) << "\n";
  out << "vocab_hash\t" << hash_hex(vocab.hash()) << "\n";
  return kOk;
}

std::vector<EncodedPair> encode_corpus(const TextCodec& codec, const std::vector<CorpusRecord>& records,
                                       const TrainConfig& tc) {
  std::vector<EncodedPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(codec.encode_pair(r.article, r.summary, tc.truncate_len, tc.target_len));
  return out;
}

void check_vocab(std::uint64_t expected, const Vocabulary& vocab) {
  if (expected != vocab.hash()) {
    throw InputError("vocabulary mismatch: checkpoint expects " + hash_hex(expected) + ", vocabulary file has " +
                     hash_hex(vocab.hash()));
  }
}

int cmd_train(Options& o, std::ostream& out) {
  require(o.train_path, "--train");
  require(o.valid_path, "--valid");
  require(o.out_dir, "--out-dir");
  const TextCodec codec = load_codec(o);
  finish_configs(o, codec.vocab().size());

  const fs::path dir(o.out_dir);
  const fs::path last = dir / "last.ckpt";
  const fs::path best = dir / "best.ckpt";
  const fs::path metrics = dir / "metrics.jsonl";

  std::optional<Checkpoint> resumed;
  if (o.resume) {
    if (!fs::exists(last)) throw InputError("--resume given but '" + last.string() + "' does not exist");
    resumed = load_checkpoint(last);
    check_vocab(resumed->vocab_hash, codec.vocab());
  }
  const TrainConfig tc = resumed ? resumed->train : o.train;
  const std::size_t max_epochs = o.train.max_epochs;
  const auto train_data = encode_corpus(codec, read_corpus(o.train_path), tc);
  const auto valid_data = encode_corpus(codec, read_corpus(o.valid_path), tc);
  if (train_data.empty()) throw ConfigError("training corpus '" + o.train_path + "' is empty");
  if (valid_data.empty()) throw ConfigError("validation corpus '" + o.valid_path + "' is empty");

  fs::create_directories(dir);
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<Trainer<float>> trainer;
  if (resumed) {
    model = std::make_unique<Model<float>>(resumed->model, std::move(resumed->params));
    if (!resumed->has_optimizer) throw InputError("'" + last.string() + "' has no optimizer state to resume from");
    trainer = std::make_unique<Trainer<float>>(*model, tc, std::move(resumed->adam), resumed->state);
  } else {
    model = std::make_unique<Model<float>>(o.model, o.seed);
    trainer = std::make_unique<Trainer<float>>(*model, tc);
    write_file(metrics, "");
  }
  const std::uint64_t vhash = codec.vocab().hash();

  while (trainer->state().epoch < max_epochs) {
    std::size_t budget = static_cast<std::size_t>(-1);
    if (o.max_steps > 0) {
      if (trainer->state().step >= o.max_steps) break;
      budget = static_cast<std::size_t>(o.max_steps - trainer->state().step);
    }
    if (o.save_every > 0) budget = std::min(budget, o.save_every);
    const double lr_used = trainer->state().lr;
    double train_loss = 0.0;
    if (!trainer->train_epoch_partial(train_data, budget, &train_loss)) {
      save_checkpoint(last, make_checkpoint(*model, *trainer, vhash));
      continue;
    }
    const double val_loss = trainer->evaluate_loss(valid_data);
    const bool improved = val_loss < trainer->state().best_val_loss;
    const double next_lr = trainer->end_epoch(val_loss);
    const Checkpoint ckpt = make_checkpoint(*model, *trainer, vhash);
    save_checkpoint(last, ckpt);
    if (improved) save_checkpoint(best, ckpt);
    const json rec{{"epoch", trainer->state().epoch}, {"step", trainer->state().step}, {"train_loss", train_loss},
                   {"val_loss", val_loss},          {"lr", lr_used},                  {"next_lr", next_lr}};
    std::ofstream(metrics, std::ios::app) << rec.dump() << "\n";
    out << "epoch " << trainer->state().epoch << " train_loss " << fmt(train_loss) << " val_loss " << fmt(val_loss)
        << " lr " << lr_used << (improved ? " (best)" : "") << "\n";
  }
  if (o.max_steps > 0 && trainer->state().step >= o.max_steps && trainer->state().epoch < max_epochs) {
    save_checkpoint(last, make_checkpoint(*model, *trainer, vhash));
    out << "stopped after step " << trainer->state().step << "\n";
  }
  return kOk;
}

int cmd_summarize(Options& o, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.input, "--input");
  if (o.greedy) o.beam.beam_size = 1;
  o.beam.validate();
  if (o.train.truncate_len == 0) throw ConfigError("--truncate must be at least 1");
  const TextCodec codec = load_codec(o);
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  check_vocab(ckpt.vocab_hash, codec.vocab());
  const auto records = read_corpus(o.input, false);
  const Model<float> model(ckpt.model, std::move(ckpt.params));
  const std::size_t truncate = std::min(o.train.truncate_len, ckpt.model.max_positions);

  std::vector<std::string> lines(records.size());
  std::vector<std::exception_ptr> errors(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      const EncodedPair src = codec.encode_article(records[i].article, truncate);
      const Hypothesis h = summarize_ids(model, src, o.beam);
      lines[i] = codec.decode(h.tokens, src.oov_map);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const InputError& e) {
      throw InputError("record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  if (o.output.empty()) {
    out << text;
  } else {
    write_file(o.output, text);
  }
  return kOk;
}

std::vector<Tokens> tokenized(const std::vector<std::string>& lines) {
  std::vector<Tokens> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(tokenize(l));
  return out;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  require(o.candidates, "--candidates");
  require(o.references, "--references");
  const auto cands = read_records(o.candidates, "summary");
  const auto refs = read_records(o.references, "summary");
  if (cands.size() != refs.size()) {
    throw InputError("record count mismatch: " + std::to_string(cands.size()) + " candidates vs " +
                     std::to_string(refs.size()) + " references");
  }
  const auto scores = evaluate_corpus(tokenized(cands), tokenized(refs));
  out << rouge_report_text(scores);
  if (!o.json_out.empty()) write_file(o.json_out, rouge_report_json(scores));
  return kOk;
}

int cmd_stats(const Options& o, std::ostream& out) {
  require(o.summaries, "--summaries");
  require(o.sources, "--sources");
  const auto sums = read_records(o.summaries, "summary");
  const auto srcs = read_records(o.sources, "article");
  if (sums.size() != srcs.size()) {
    throw InputError("record count mismatch: " + std::to_string(sums.size()) + " summaries vs " +
                     std::to_string(srcs.size()) + " sources");
  }
  const auto report = novelty_stats(tokenized(sums), tokenized(srcs));
  out << novelty_report_text(report);
  if (!o.json_out.empty()) write_file(o.json_out, novelty_report_json(report));
  return kOk;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kUsageError;
  if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const LoadError*>(&e) ||
      dynamic_cast<const MappingError*>(&e) || dynamic_cast<const LengthError*>(&e) ||
      dynamic_cast<const IndexError*>(&e)) {
    return kDataError;
  }
  return kRuntimeError;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app("Aggregation Transformer summarization toolkit", "aggsum");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  auto* vocab = app.add_subcommand("build-vocab", "Build a vocabulary (and BPE merges) from a corpus");
  add_config(vocab, o);
  add_tokenizer(vocab, o);
  vocab->add_option("--corpus", o.corpus, "JSON Lines corpus");
  vocab->add_option("--vocab-out", o.vocab_out, "vocabulary file to write");
  vocab->add_option("--bpe-out", o.bpe_out, "merge file to write (bpe)");
  vocab->add_option("--vocab-size", o.vocab_size, "vocabulary capacity including special tokens");
  vocab->add_option("--merges", o.merges, "BPE merges to learn");

  auto* train = app.add_subcommand("train", "Train a model");
  add_config(train, o);
  add_tokenizer(train, o);
  add_model(train, o);
  add_train(train, o);
  train->add_option("--train", o.train_path, "training corpus (JSON Lines)");
  train->add_option("--valid", o.valid_path, "validation corpus (JSON Lines)");
  train->add_option("--vocab", o.vocab, "vocabulary file");
  train->add_option("--bpe", o.bpe, "merge file (bpe)");
  train->add_option("--out-dir", o.out_dir, "directory for checkpoints and metrics");
  train->add_flag("--resume", o.resume, "continue from <out-dir>/last.ckpt");
  train->add_option("--max-steps", o.max_steps, "stop after this many optimizer steps in total (0 = no limit)");
  train->add_option("--save-every", o.save_every, "also checkpoint every N steps (0 = epoch ends only)");

  auto* summarize = app.add_subcommand("summarize", "Generate summaries with beam search");
  add_config(summarize, o);
  add_tokenizer(summarize, o);
  add_beam(summarize, o);
  summarize->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  summarize->add_option("--vocab", o.vocab, "vocabulary file");
  summarize->add_option("--bpe", o.bpe, "merge file (bpe)");
  summarize->add_option("--input", o.input, "JSON Lines with \"article\" (\"summary\" optional)");
  summarize->add_option("--output", o.output, "output file (default stdout)");

  auto* evaluate = app.add_subcommand("evaluate", "ROUGE-1/2/L of candidates against references");
  add_config(evaluate, o);
  evaluate->add_option("--candidates", o.candidates, "one summary per line (or .jsonl)");
  evaluate->add_option("--references", o.references, "one summary per line (or .jsonl)");
  evaluate->add_option("--json", o.json_out, "also write a JSON report");

  auto* stats = app.add_subcommand("stats", "Novel n-gram and sentence ratios");
  add_config(stats, o);
  stats->add_option("--summaries", o.summaries, "one summary per line (or .jsonl)");
  stats->add_option("--sources", o.sources, "one article per line (or .jsonl)");
  stats->add_option("--json", o.json_out, "also write a JSON report");

  try {
    std::vector<std::string> args = expand_config(app, raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }

  try {
    if (o.threads > 0) omp_set_num_threads(o.threads);
    if (vocab->parsed()) return cmd_build_vocab(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (summarize->parsed()) return cmd_summarize(o, out);
    if (evaluate->parsed()) return cmd_evaluate(o, out);
    if (stats->parsed()) return cmd_stats(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kUsageError;
}

}  // namespace aggsum::cli
