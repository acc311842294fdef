#include "hvm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace hvm {

namespace {

constexpr char kMagic[8] = {'H', 'V', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr char kDtype[4] = {'f', '3', '2', '\0'};

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const TensorRecord& r) {
    str(r.name);
    bytes(kDtype, 4);
    u32(static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) u64(d);
    for (float v : r.data) f32(v);
  }
  void section(const char tag[4], const Writer& body) {
    bytes(tag, 4);
    u64(body.buf_.size());
    bytes(body.buf_.data(), body.buf_.size());
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const char* p, std::size_t n) : p_(p), end_(p + n) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  const char* take(std::size_t n) {
    if (static_cast<std::size_t>(end_ - p_) < n) throw CheckpointError("checkpoint is truncated");
    const char* at = p_;
    p_ += n;
    return at;
  }
  std::string str() {
    const auto n = u32();
    const char* at = take(n);
    return std::string(at, n);
  }
  TensorRecord tensor() {
    TensorRecord r;
    r.name = str();
    if (std::memcmp(take(4), kDtype, 4) != 0) throw CheckpointError("tensor '" + r.name + "' has an unsupported dtype");
    const auto rank = u32();
    if (rank > 8) throw CheckpointError("tensor '" + r.name + "' has implausible rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.shape.push_back(u64());
      n *= r.shape.back();
    }
    if (n * 4 > remaining()) throw CheckpointError("tensor '" + r.name + "' is truncated");
    r.data.resize(n);
    for (auto& v : r.data) v = f32();
    return r;
  }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }
  bool done() const { return p_ == end_; }

 private:
  std::uint64_t get(int n) {
    const char* at = take(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(at[i])) << (8 * i);
    return v;
  }
  const char* p_;
  const char* end_;
};

void write_records(Writer& w, const std::vector<TensorRecord>& records) {
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) w.tensor(r);
}

std::vector<TensorRecord> read_records(Reader& r) {
  std::vector<TensorRecord> out(r.u32());
  for (auto& rec : out) rec = r.tensor();
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 8);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.config_hash);
  w.str(ckpt.config);

  Writer params;
  write_records(params, ckpt.params);
  w.section("PARM", params);

  if (ckpt.optimizer) {
    Writer opt;
    opt.u64(ckpt.optimizer->step);
    write_records(opt, ckpt.optimizer->first_moment);
    write_records(opt, ckpt.optimizer->second_moment);
    w.section("OPTM", opt);
  }

  Writer meta;
  meta.u32(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    meta.str(k);
    meta.str(v);
  }
  w.section("META", meta);

  // Write to a sibling file and rename so a crash never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw CheckpointError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(buf.data(), buf.size());
  if (buf.size() < 8 || std::memcmp(r.take(8), kMagic, 8) != 0) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint file");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_hash = r.u64();
  ckpt.config = r.str();
  bool have_params = false;
  while (!r.done()) {
    const std::string tag(r.take(4), 4);
    const auto size = r.u64();
    if (size > r.remaining()) throw CheckpointError("section " + tag + " is truncated");
    Reader body(r.take(size), size);
    if (tag == "PARM") {
      ckpt.params = read_records(body);
      have_params = true;
    } else if (tag == "OPTM") {
      OptimizerRecord opt;
      opt.step = body.u64();
      opt.first_moment = read_records(body);
      opt.second_moment = read_records(body);
      ckpt.optimizer = std::move(opt);
    } else if (tag == "META") {
      const auto n = body.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        auto k = body.str();
        ckpt.meta[k] = body.str();
      }
    }  // unknown sections are skipped for forward compatibility
    if (tag == "PARM" || tag == "OPTM" || tag == "META") {
      if (!body.done()) throw CheckpointError("section " + tag + " has trailing bytes");
    }
  }
  if (!have_params) throw CheckpointError("checkpoint has no parameter section");
  return ckpt;
}

template <class T>
std::vector<TensorRecord> capture_parameters(const Module<T>& module) {
  std::vector<TensorRecord> out;
  for (const auto& p : module.parameters()) {
    TensorRecord r{p.name, p.tensor.shape(), {}};
    r.data.reserve(p.tensor.numel());
    for (auto v : p.tensor.data()) r.data.push_back(static_cast<float>(v));
    out.push_back(std::move(r));
  }
  return out;
}

template <class T>
void restore_parameters(Module<T>& module, const std::vector<TensorRecord>& records) {
  auto params = module.parameters();
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) {
    if (!by_name.emplace(r.name, &r).second) throw CheckpointError("duplicate tensor '" + r.name + "' in checkpoint");
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw CheckpointError("parameter '" + p.name + "' has shape " + shape_str(it->second->shape) +
                            " in checkpoint, model expects " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->data[i]);
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw CheckpointError("checkpoint has unknown parameter '" + by_name.begin()->first + "'");
  }
}

template std::vector<TensorRecord> capture_parameters(const Module<float>&);
template std::vector<TensorRecord> capture_parameters(const Module<double>&);
template void restore_parameters(Module<float>&, const std::vector<TensorRecord>&);
template void restore_parameters(Module<double>&, const std::vector<TensorRecord>&);

}  // namespace hvm
