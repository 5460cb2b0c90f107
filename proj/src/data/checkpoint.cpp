#include "csmx/checkpoint.h"

#include <bit>
#include <fstream>
#include <iterator>
#include <map>

namespace csmx::data {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void table(const std::vector<TensorRecord>& records) {
    u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
      str(r.name);
      u32(static_cast<std::uint32_t>(r.shape.size()));
      for (auto e : r.shape) u64(e);
      for (double v : r.values) f64(v);
    }
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_), in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::vector<TensorRecord> table() {
    std::vector<TensorRecord> records(u32());
    for (auto& r : records) {
      r.name = str();
      const std::uint32_t rank = u32();
      if (rank == 0 || rank > 8) throw CheckpointError("checkpoint: tensor '" + r.name + "' has invalid rank");
      std::uint64_t numel = 1;
      for (std::uint32_t i = 0; i < rank; ++i) {
        r.shape.push_back(u64());
        if (r.shape.back() == 0) throw CheckpointError("checkpoint: tensor '" + r.name + "' has a zero extent");
        if (r.shape.back() > in_.size() / 8 || numel > in_.size() / 8 / r.shape.back()) {
          throw CheckpointError("checkpoint: tensor '" + r.name + "' is larger than the file");
        }
        numel *= r.shape.back();
      }
      need(numel * 8);
      r.values.resize(numel);
      for (auto& v : r.values) v = f64();
    }
    return records;
  }
  void magic() {
    need(4);
    if (!std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), in_.begin())) {
      throw CheckpointError("checkpoint: bad magic (expected CSMX)");
    }
    pos_ = 4;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) {
    if (n > in_.size() - pos_) {
      throw CheckpointError("checkpoint: truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                            " more bytes, " + std::to_string(in_.size() - pos_) + " available)");
    }
  }
  std::uint64_t le(int bytes) {
    need(static_cast<std::uint64_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

TensorRecord record_of(const std::string& name, const Tensor& t) {
  return {name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

std::vector<TensorRecord> records_of(const std::vector<NamedParameter>& params, const std::vector<Tensor>& tensors) {
  std::vector<TensorRecord> out;
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back(record_of(params[i].name, tensors[i]));
  return out;
}

// Matches records to the model's parameter order by name.
std::vector<const TensorRecord*> match(const std::vector<NamedParameter>& params,
                                       const std::vector<TensorRecord>& records, const char* what) {
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) {
    if (!by_name.emplace(r.name, &r).second) {
      throw CheckpointError(std::string("checkpoint: duplicate ") + what + " entry '" + r.name + "'");
    }
  }
  std::vector<const TensorRecord*> ordered;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError(std::string("checkpoint: ") + what + " lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw CheckpointError(std::string("checkpoint: shape mismatch for parameter '") + p.name + "': stored " +
                            shape_str(it->second->shape) + ", model expects " + shape_str(p.tensor.shape()));
    }
    ordered.push_back(it->second);
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw CheckpointError(std::string("checkpoint: unknown parameter name '") + by_name.begin()->first + "' in " + what);
  }
  return ordered;
}

std::vector<Tensor> tensors_from(const std::vector<NamedParameter>& params, const std::vector<TensorRecord>& records,
                                 const char* what) {
  std::vector<Tensor> out;
  for (const TensorRecord* r : match(params, records, what)) out.emplace_back(r->shape, r->values);
  return out;
}

}  // namespace

Checkpoint capture(const Model& model, const training::EmaState* ema, const training::OptimizerState* optimizer,
                   const Rng* rng, std::uint64_t epoch) {
  const auto params = model.parameters();
  Checkpoint ck;
  ck.config = model.config();
  ck.epoch = epoch;
  if (rng) ck.rng_state = rng->state();
  for (const auto& p : params) ck.params.push_back(record_of(p.name, p.tensor));
  if (ema) ck.ema = EmaSnapshot{ema->decay, records_of(params, ema->shadow)};
  if (optimizer) {
    ck.optimizer = OptimizerSnapshot{optimizer->hyper, optimizer->step, records_of(params, optimizer->first),
                                     records_of(params, optimizer->second)};
  }
  return ck;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  for (char c : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.str(ck.config.to_text());
  w.u64(ck.epoch);
  w.str(ck.rng_state);
  w.table(ck.params);
  w.u8(ck.ema ? 1 : 0);
  if (ck.ema) {
    w.f64(ck.ema->decay);
    w.table(ck.ema->shadow);
  }
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    w.u64(o.step);
    w.f64(o.hyper.beta1);
    w.f64(o.hyper.beta2);
    w.f64(o.hyper.eps);
    w.f64(o.hyper.weight_decay);
    w.table(o.first);
    w.table(o.second);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.magic();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  try {
    ck.config = parse_config(r.str());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: invalid embedded config: ") + e.what());
  }
  ck.epoch = r.u64();
  ck.rng_state = r.str();
  ck.params = r.table();
  if (r.u8()) {
    EmaSnapshot e;
    e.decay = r.f64();
    e.shadow = r.table();
    ck.ema = std::move(e);
  }
  if (r.u8()) {
    OptimizerSnapshot o;
    o.step = r.u64();
    o.hyper.beta1 = r.f64();
    o.hyper.beta2 = r.f64();
    o.hyper.eps = r.f64();
    o.hyper.weight_decay = r.f64();
    o.first = r.table();
    o.second = r.table();
    ck.optimizer = std::move(o);
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after offset " + std::to_string(r.pos()));
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void restore_parameters(const Model& model, const std::vector<TensorRecord>& records) {
  const auto params = model.parameters();
  const auto ordered = match(params, records, "parameter table");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(ordered[i]->values.begin(), ordered[i]->values.end(), t.mutable_data().begin());
  }
}

training::EmaState restore_ema(const Model& model, const EmaSnapshot& snapshot) {
  training::EmaState e;
  e.decay = snapshot.decay;
  e.shadow = tensors_from(model.parameters(), snapshot.shadow, "EMA table");
  return e;
}

training::OptimizerState restore_optimizer(const Model& model, const OptimizerSnapshot& snapshot) {
  training::OptimizerState s;
  s.hyper = snapshot.hyper;
  s.step = snapshot.step;
  const auto params = model.parameters();
  s.first = tensors_from(params, snapshot.first, "optimizer first moments");
  s.second = tensors_from(params, snapshot.second, "optimizer second moments");
  return s;
}

}  // namespace csmx::data
