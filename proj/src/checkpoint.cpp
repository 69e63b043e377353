#include "aggsum/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "aggsum/error.hpp"
#include "json.hpp"

namespace aggsum {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'A', 'G', 'T', 'F'};

json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

double number_or_inf(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_enc", c.n_enc},
              {"n_dec", c.n_dec},
              {"d_ff", c.d_ff},
              {"dropout", c.dropout},
              {"agg_layers", c.agg_layers},
              {"agg_method", to_string(c.agg_method)},
              {"use_pointer", c.use_pointer},
              {"vocab_size", c.vocab_size},
              {"max_positions", c.max_positions},
              {"layer_norm_eps", c.layer_norm_eps}};
}

json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"dropout", c.dropout},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"truncate_len", c.truncate_len},
              {"target_len", c.target_len},
              {"seed", c.seed},
              {"patience_epochs", c.patience_epochs},
              {"lr_decay_factor", c.lr_decay_factor},
              {"plateau_eps", c.plateau_eps},
              {"clip_norm", c.clip_norm}};
}

json to_json(const TrainState& s) {
  return json{{"epoch", s.epoch},
              {"batch_in_epoch", s.batch_in_epoch},
              {"step", s.step},
              {"lr", s.lr},
              {"plateau_best", number_or_null(s.plateau.best)},
              {"plateau_bad_epochs", s.plateau.bad_epochs},
              {"epoch_loss_sum", s.epoch_loss_sum},
              {"epoch_tokens", s.epoch_tokens}};
}

// Reads `key` from `obj`, reporting the dotted path on failure.
template <typename V>
V field(const json& obj, const std::string& section, const char* key) {
  const std::string where = section.empty() ? std::string(key) : section + "." + key;
  if (!obj.is_object() || !obj.contains(key)) throw LoadError("checkpoint header is missing '" + where + "'");
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw LoadError("checkpoint header field '" + where + "' has the wrong type");
  }
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  const std::string s = "model";
  c.d_model = field<std::size_t>(j, s, "d_model");
  c.n_heads = field<std::size_t>(j, s, "n_heads");
  c.n_enc = field<std::size_t>(j, s, "n_enc");
  c.n_dec = field<std::size_t>(j, s, "n_dec");
  c.d_ff = field<std::size_t>(j, s, "d_ff");
  c.dropout = field<double>(j, s, "dropout");
  c.agg_layers = field<std::size_t>(j, s, "agg_layers");
  try {
    c.agg_method = parse_agg_method(field<std::string>(j, s, "agg_method"));
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint header field 'model.agg_method': ") + e.what());
  }
  c.use_pointer = field<bool>(j, s, "use_pointer");
  c.vocab_size = field<std::size_t>(j, s, "vocab_size");
  c.max_positions = field<std::size_t>(j, s, "max_positions");
  c.layer_norm_eps = field<double>(j, s, "layer_norm_eps");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint model config is invalid: ") + e.what());
  }
  return c;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  const std::string s = "train";
  c.learning_rate = field<double>(j, s, "learning_rate");
  c.beta1 = field<double>(j, s, "beta1");
  c.beta2 = field<double>(j, s, "beta2");
  c.adam_eps = field<double>(j, s, "adam_eps");
  c.dropout = field<double>(j, s, "dropout");
  c.batch_size = field<std::size_t>(j, s, "batch_size");
  c.max_epochs = field<std::size_t>(j, s, "max_epochs");
  c.truncate_len = field<std::size_t>(j, s, "truncate_len");
  c.target_len = field<std::size_t>(j, s, "target_len");
  c.seed = field<std::uint64_t>(j, s, "seed");
  c.patience_epochs = field<std::size_t>(j, s, "patience_epochs");
  c.lr_decay_factor = field<double>(j, s, "lr_decay_factor");
  c.plateau_eps = field<double>(j, s, "plateau_eps");
  c.clip_norm = field<double>(j, s, "clip_norm");
  return c;
}

TrainState state_from_json(const json& j) {
  TrainState st;
  const std::string s = "state";
  st.epoch = field<std::size_t>(j, s, "epoch");
  st.batch_in_epoch = field<std::size_t>(j, s, "batch_in_epoch");
  st.step = field<std::uint64_t>(j, s, "step");
  st.lr = field<double>(j, s, "lr");
  if (!j.contains("plateau_best")) throw LoadError("checkpoint header is missing 'state.plateau_best'");
  st.plateau.best = number_or_inf(j.at("plateau_best"));
  st.plateau.bad_epochs = field<std::size_t>(j, s, "plateau_bad_epochs");
  st.epoch_loss_sum = field<double>(j, s, "epoch_loss_sum");
  st.epoch_tokens = field<double>(j, s, "epoch_tokens");
  return st;
}

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

void put_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xFFFF) throw Error("tensor name too long: " + name);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  const auto data = t.data();
  out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }

  std::string take(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) throw LoadError("truncated checkpoint while reading " + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json header{{"model", to_json(ckpt.model)},
              {"train", to_json(ckpt.train)},
              {"state", to_json(ckpt.state)},
              {"epoch", ckpt.state.epoch},
              {"best_val_loss", number_or_null(ckpt.state.best_val_loss)},
              {"vocab_hash", hash_hex(ckpt.vocab_hash)},
              {"has_optimizer", ckpt.has_optimizer},
              {"adam_t", ckpt.adam.t}};
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  const auto& entries = ckpt.params.entries();
  const std::uint64_t count = entries.size() * (ckpt.has_optimizer ? 3 : 1);
  put<std::uint64_t>(out, count);
  for (const auto& [name, t] : entries) put_tensor(out, name, t);
  if (ckpt.has_optimizer) {
    if (ckpt.adam.m.size() != entries.size() || ckpt.adam.v.size() != entries.size()) {
      throw Error("optimizer state does not match parameters");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) put_tensor(out, entries[i].first + ".m", ckpt.adam.m[i]);
    for (std::size_t i = 0; i < entries.size(); ++i) put_tensor(out, entries[i].first + ".v", ckpt.adam.v[i]);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != std::string(kMagic, 4)) throw LoadError("not a checkpoint file (bad magic)");
  const auto version = in.get<std::uint32_t>("format version");
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = in.get<std::uint64_t>("header length");
  if (header_len > bytes.size()) throw LoadError("truncated checkpoint while reading header");
  const std::string text = in.take(static_cast<std::size_t>(header_len), "header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  if (!header.contains("model")) throw LoadError("checkpoint header is missing 'model'");
  if (!header.contains("train")) throw LoadError("checkpoint header is missing 'train'");
  if (!header.contains("state")) throw LoadError("checkpoint header is missing 'state'");
  ckpt.model = model_from_json(header.at("model"));
  ckpt.train = train_from_json(header.at("train"));
  ckpt.state = state_from_json(header.at("state"));
  ckpt.state.epoch = field<std::size_t>(header, "", "epoch");
  if (!header.contains("best_val_loss")) throw LoadError("checkpoint header is missing 'best_val_loss'");
  ckpt.state.best_val_loss = number_or_inf(header.at("best_val_loss"));
  const auto hash_text = field<std::string>(header, "", "vocab_hash");
  try {
    std::size_t used = 0;
    ckpt.vocab_hash = std::stoull(hash_text, &used, 16);
    if (used != hash_text.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw LoadError("checkpoint header field 'vocab_hash' is not hexadecimal");
  }
  ckpt.has_optimizer = field<bool>(header, "", "has_optimizer");
  ckpt.adam.t = field<std::uint64_t>(header, "", "adam_t");

  const auto shapes = parameter_shapes(ckpt.model);
  const std::uint64_t expected = shapes.size() * (ckpt.has_optimizer ? 3 : 1);
  const auto count = in.get<std::uint64_t>("tensor count");
  if (count != expected) {
    throw LoadError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                    std::to_string(expected));
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::size_t slot = static_cast<std::size_t>(k % shapes.size());
    const std::size_t part = static_cast<std::size_t>(k / shapes.size());
    const auto& [pname, shape] = shapes[slot];
    const std::string expected_name = part == 0 ? pname : pname + (part == 1 ? ".m" : ".v");
    const auto name_len = in.get<std::uint16_t>("name length of tensor " + std::to_string(k));
    const std::string name = in.take(name_len, "name of tensor " + std::to_string(k));
    if (name != expected_name) {
      throw LoadError("tensor " + std::to_string(k) + " is '" + name + "', expected '" + expected_name + "'");
    }
    const auto rank = in.get<std::uint8_t>("rank of '" + name + "'");
    Shape dims(rank);
    for (auto& d : dims) d = static_cast<std::size_t>(in.get<std::uint64_t>("dims of '" + name + "'"));
    if (dims != shape) {
      throw LoadError("tensor '" + name + "' has shape " + shape_str(dims) + ", config implies " + shape_str(shape));
    }
    const std::size_t n = shape_numel(shape);
    const std::string raw = in.take(n * sizeof(float), "data of '" + name + "'");
    std::vector<float> data(n);
    std::memcpy(data.data(), raw.data(), raw.size());
    Tensor<float> t(shape, std::move(data));
    if (part == 0) {
      ckpt.params.add(name, std::move(t));
    } else if (part == 1) {
      ckpt.adam.m.push_back(std::move(t));
    } else {
      ckpt.adam.v.push_back(std::move(t));
    }
  }
  if (!in.done()) throw LoadError("trailing bytes after the last tensor");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const Model<float>& model, const Trainer<float>& trainer, std::uint64_t vocab_hash) {
  Checkpoint c;
  c.model = model.config();
  c.train = trainer.config();
  c.state = trainer.state();
  c.vocab_hash = vocab_hash;
  c.params = model.parameters().cast<float>();
  c.has_optimizer = true;
  c.adam = trainer.adam();
  return c;
}

Checkpoint make_checkpoint(const Model<float>& model, const TrainConfig& train, std::uint64_t vocab_hash) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.vocab_hash = vocab_hash;
  c.params = model.parameters().cast<float>();
  return c;
}

}  // namespace aggsum
