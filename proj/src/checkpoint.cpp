#include "sfiqa/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <sstream>

#include "sfiqa/io.hpp"
#include "sfiqa/rng.hpp"

namespace sfiqa {

namespace {

class Writer {
 public:
  template <typename U>
  void raw(U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    out_.append(reinterpret_cast<const char*>(bytes), sizeof(U));
  }
  void u8(std::uint8_t v) { raw(v); }
  void u32(std::uint32_t v) { raw(v); }
  void u64(std::uint64_t v) { raw(v); }
  void f32(float v) { raw(v); }
  void f64(double v) { raw(v); }
  void f32s(const std::vector<float>& v) {
    for (const float x : v) f32(x);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void bytes(const char* data, std::size_t n) { out_.append(data, n); }
  const std::string& data() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  template <typename U>
  U raw() {
    require(pos_ + sizeof(U) <= data_.size(), ErrorKind::kData, "truncated checkpoint '" + origin_ + "'");
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    pos_ += sizeof(U);
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
  }
  std::uint8_t u8() { return raw<std::uint8_t>(); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  float f32() { return raw<float>(); }
  double f64() { return raw<double>(); }
  std::vector<float> f32s(std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    require(pos_ + n <= data_.size(), ErrorKind::kData, "truncated checkpoint '" + origin_ + "'");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string bytes(std::size_t n) {
    require(pos_ + n <= data_.size(), ErrorKind::kData, "truncated checkpoint '" + origin_ + "'");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

void write_header(Writer& w, const nn::ModelParams<float>& p) {
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const auto& s = p.spec;
  w.u32(static_cast<std::uint32_t>(s.in_channels));
  w.u32(static_cast<std::uint32_t>(s.height));
  w.u32(static_cast<std::uint32_t>(s.width));
  w.u32(static_cast<std::uint32_t>(s.block_channels.size()));
  for (const int c : s.block_channels) w.u32(static_cast<std::uint32_t>(c));
  w.u32(static_cast<std::uint32_t>(s.hidden));
  w.u32(static_cast<std::uint32_t>(s.levels));
  w.f64(s.epsilon);
  w.f64(s.ema_alpha);
  w.str(p.source_domain);
}

void write_body(Writer& w, const nn::ModelParams<float>& p, const std::set<std::string>& exclude) {
  for (const auto& c : p.convs) {
    w.f32s(c.weight);
    w.f32s(c.bias);
  }
  w.f32s(p.hidden.weight);
  w.f32s(p.hidden.bias);
  w.f32s(p.head.weight);
  w.f32s(p.head.bias);
  std::uint32_t count = 0;
  for (const auto& [name, br] : p.branches) count += exclude.count(name) ? 0 : 1;
  w.u32(count);
  for (const auto& [name, br] : p.branches) {
    if (exclude.count(name)) continue;
    w.str(name);
    w.f32(br.epsilon);
    w.f32(br.ema_alpha);
    for (const auto& l : br.layers) {
      w.u8(l.initialized ? 1 : 0);
      w.f32s(l.gamma);
      w.f32s(l.beta);
      w.f32s(l.running_mean);
      w.f32s(l.running_var);
    }
  }
}

}  // namespace

std::string serialize_params(const nn::ModelParams<float>& params, const std::set<std::string>& exclude_branches) {
  Writer w;
  write_body(w, params, exclude_branches);
  return w.data();
}

std::uint64_t params_hash(const nn::ModelParams<float>& params, const std::set<std::string>& exclude_branches) {
  return stable_hash(serialize_params(params, exclude_branches));
}

void save_checkpoint(const std::filesystem::path& path, const nn::ModelParams<float>& params,
                     const optim::AdamState* optimizer) {
  Writer w;
  write_header(w, params);
  write_body(w, params, {});
  w.u8(optimizer ? 1 : 0);
  if (optimizer) {
    w.bytes("ADAM", 4);
    w.f64(optimizer->hyper.learning_rate);
    w.f64(optimizer->hyper.beta1);
    w.f64(optimizer->hyper.beta2);
    w.f64(optimizer->hyper.epsilon);
    w.u64(optimizer->step);
    w.u32(static_cast<std::uint32_t>(optimizer->first_moment.size()));
    for (const auto& [id, m] : optimizer->first_moment) {
      w.u8(static_cast<std::uint8_t>(id.kind));
      w.u32(static_cast<std::uint32_t>(id.layer));
      w.str(id.domain);
      w.u32(static_cast<std::uint32_t>(m.size()));
      for (const double v : m) w.f64(v);
      for (const double v : optimizer->second_moment.at(id)) w.f64(v);
    }
  }
  io::write_text(path, w.data());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(io::read_text(path), path.string());
  require(r.bytes(sizeof kCheckpointMagic) == std::string(kCheckpointMagic, sizeof kCheckpointMagic), ErrorKind::kData,
          "'" + path.string() + "' is not a checkpoint");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorKind::kData, "unsupported checkpoint version " + std::to_string(version));
  nn::NetworkSpec spec;
  spec.in_channels = static_cast<int>(r.u32());
  spec.height = static_cast<int>(r.u32());
  spec.width = static_cast<int>(r.u32());
  spec.block_channels.resize(r.u32());
  for (auto& c : spec.block_channels) c = static_cast<int>(r.u32());
  spec.hidden = static_cast<int>(r.u32());
  spec.levels = static_cast<int>(r.u32());
  spec.epsilon = r.f64();
  spec.ema_alpha = r.f64();
  spec.validate();
  const std::string source = r.str();
  // shapes come from a freshly initialised model; values are overwritten below
  Checkpoint ck{nn::init_params<float>(spec, source, 0), std::nullopt};
  auto& p = ck.params;
  p.branches.clear();
  for (auto& c : p.convs) {
    c.weight = r.f32s(c.weight.size());
    c.bias = r.f32s(c.bias.size());
  }
  p.hidden.weight = r.f32s(p.hidden.weight.size());
  p.hidden.bias = r.f32s(p.hidden.bias.size());
  p.head.weight = r.f32s(p.head.weight.size());
  p.head.bias = r.f32s(p.head.bias.size());
  const std::uint32_t nbranches = r.u32();
  for (std::uint32_t b = 0; b < nbranches; ++b) {
    const std::string name = r.str();
    nn::DomainBranch<float> br;
    br.epsilon = r.f32();
    br.ema_alpha = r.f32();
    for (const int ch : spec.block_channels) {
      nn::BranchLayer<float> l;
      l.initialized = r.u8() != 0;
      const auto n = static_cast<std::size_t>(ch);
      l.gamma = r.f32s(n);
      l.beta = r.f32s(n);
      l.running_mean = r.f32s(n);
      l.running_var = r.f32s(n);
      br.layers.push_back(std::move(l));
    }
    require(p.branches.emplace(name, std::move(br)).second, ErrorKind::kData, "duplicate branch '" + name + "'");
  }
  require(p.has_branch(source), ErrorKind::kData, "checkpoint lacks its source branch '" + source + "'");
  if (r.u8() != 0) {
    require(r.bytes(4) == "ADAM", ErrorKind::kData, "malformed optimizer section");
    optim::AdamState st;
    st.hyper.learning_rate = r.f64();
    st.hyper.beta1 = r.f64();
    st.hyper.beta2 = r.f64();
    st.hyper.epsilon = r.f64();
    st.step = r.u64();
    const std::uint32_t entries = r.u32();
    for (std::uint32_t e = 0; e < entries; ++e) {
      nn::ParamId id;
      id.kind = static_cast<nn::ParamKind>(r.u8());
      id.layer = static_cast<int>(r.u32());
      id.domain = r.str();
      const std::uint32_t n = r.u32();
      std::vector<double> m(n), v(n);
      for (auto& x : m) x = r.f64();
      for (auto& x : v) x = r.f64();
      st.first_moment.emplace(id, std::move(m));
      st.second_moment.emplace(id, std::move(v));
    }
    ck.optimizer = std::move(st);
  }
  require(r.done(), ErrorKind::kData, "trailing bytes in checkpoint '" + path.string() + "'");
  return ck;
}

}  // namespace sfiqa
