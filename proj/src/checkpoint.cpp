#include "dmtd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <boost/crc.hpp>

#include "dmtd/errors.hpp"

namespace dmtd {

namespace {

constexpr char kMagic[8] = {'D', 'M', 'T', 'D', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    return out;
  } else {
    return v;
  }
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof v);
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_bytes(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void put_tensor(const std::string& name, const std::vector<std::int64_t>& shape, std::span<const float> data) {
    put_bytes(name);
    put(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put(static_cast<std::uint64_t>(d));
    for (float f : data) put_f32(f);
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return to_little(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_bytes() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  SavedTensor get_tensor() {
    SavedTensor t;
    t.name = get_bytes();
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw DataError("checkpoint: implausible rank for " + t.name);
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const auto d = get<std::uint64_t>();
      if (d == 0 || d > (std::uint64_t{1} << 32)) throw DataError("checkpoint: bad dimension for " + t.name);
      t.shape.push_back(static_cast<std::int64_t>(d));
      numel *= d;
    }
    need(numel * 4);
    t.data.resize(numel);
    for (auto& f : t.data) f = get_f32();
    return t;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw DataError("checkpoint: truncated file");
  }

  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(const char* p, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(p, n);
  return crc.checksum();
}

std::vector<std::int64_t> shape_of(const Tensor& t) { return {t.shape().begin(), t.shape().end()}; }

void copy_into(const SavedTensor& saved, Tensor& target, const std::string& expected_name) {
  if (saved.name != expected_name) {
    throw DataError("checkpoint: expected tensor " + expected_name + ", found " + saved.name);
  }
  if (saved.shape != shape_of(target)) throw DataError("checkpoint: shape mismatch for " + saved.name);
  auto dst = target.mutable_data();
  std::copy(saved.data.begin(), saved.data.end(), dst.begin());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const RunConfig& config, const Model<float>& model,
                     const AdamW<float>* optimizer, std::int64_t step) {
  const auto params = model.named_parameters();
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.put(kCheckpointVersion);
  w.put_bytes(to_ini(config));
  w.put(static_cast<std::uint64_t>(step));
  const std::size_t count = params.size() * (optimizer ? 3 : 1);
  w.put(static_cast<std::uint32_t>(count));
  for (const auto& p : params) w.put_tensor(p.name, shape_of(p.tensor), p.tensor.data());
  if (optimizer) {
    if (optimizer->size() != params.size()) throw ContractError("save_checkpoint: optimizer does not match model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.put_tensor("optim.m." + params[i].name, shape_of(params[i].tensor), optimizer->first_moment(i));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.put_tensor("optim.v." + params[i].name, shape_of(params[i].tensor), optimizer->second_moment(i));
    }
  }
  const std::uint32_t crc = crc32(w.buffer().data(), w.buffer().size());
  w.put(crc);

  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  auto tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw DataError("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < sizeof kMagic + 4 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("not a checkpoint file: " + file.string());
  }
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body, 4);
  stored = to_little(stored);
  if (stored != crc32(buf.data(), body)) throw ChecksumError("checkpoint checksum mismatch: " + file.string());

  Reader r(buf, body);
  for (std::size_t i = 0; i < sizeof kMagic; ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  RunConfig config = parse_run_config(r.get_bytes());
  const auto step = static_cast<std::int64_t>(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();

  LoadedCheckpoint ck{config, Model<float>(config.model), step, {}, {}};
  auto params = ck.model.named_parameters();
  if (count != params.size() && count != 3 * params.size()) {
    throw DataError("checkpoint: unexpected tensor count " + std::to_string(count));
  }
  for (auto& p : params) copy_into(r.get_tensor(), p.tensor, p.name);
  if (count == 3 * params.size()) {
    for (const char* prefix : {"optim.m.", "optim.v."}) {
      auto& dst = prefix[6] == 'm' ? ck.first_moments : ck.second_moments;
      for (auto& p : params) {
        auto t = r.get_tensor();
        if (t.name != prefix + p.name || t.shape != shape_of(p.tensor)) {
          throw DataError("checkpoint: optimizer tensor mismatch at " + t.name);
        }
        dst.push_back(std::move(t));
      }
    }
  }
  if (r.position() != body) throw DataError("checkpoint: trailing bytes before checksum");
  return ck;
}

void restore_optimizer(const LoadedCheckpoint& checkpoint, AdamW<float>& optimizer) {
  if (!checkpoint.has_optimizer_state()) throw DataError("checkpoint has no optimizer state to resume from");
  if (checkpoint.first_moments.size() != optimizer.size()) {
    throw ContractError("restore_optimizer: parameter count mismatch");
  }
  for (std::size_t i = 0; i < optimizer.size(); ++i) {
    auto m = optimizer.first_moment(i);
    auto v = optimizer.second_moment(i);
    std::copy(checkpoint.first_moments[i].data.begin(), checkpoint.first_moments[i].data.end(), m.begin());
    std::copy(checkpoint.second_moments[i].data.begin(), checkpoint.second_moments[i].data.end(), v.begin());
  }
  optimizer.set_step_count(checkpoint.step);
}

}  // namespace dmtd
