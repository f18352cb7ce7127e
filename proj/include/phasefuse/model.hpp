#pragma once

// Multiphase progressive-fusion non-local restoration network.
//
//   phases x_0..x_{N-1}  [b,1,d,h,w] each, x_{N-1} is portal venous
//   (a) non-local attention over the channel-stacked phases, residual
//   (b) shared 3^3 head conv per phase -> `channels` features
//   (c) n_pfrb progressive fusion residual blocks
//   (d) concat branches, 1^3 merge conv -> channels * scale^3
//   (e) voxel shuffle by `scale`   (f) 3^3 tail conv -> 1 channel
//   (g) + trilinear upsample of x_{N-1}
//
// Leaky ReLU (slope 0.2) follows the head, both PFRB convs, the distillation
// conv and the merge conv.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/ops.hpp"
#include "phasefuse/optim.hpp"
#include "phasefuse/rng.hpp"
#include "phasefuse/tensor.hpp"

namespace phasefuse {

struct pfnl_config {
  std::uint32_t n_phases = 3;
  std::uint32_t channels = 16;
  std::uint32_t n_pfrb = 4;
  std::uint32_t scale = 4;
  std::uint32_t nonlocal_max_positions = 4096;

  void validate() const {
    detail::require(n_phases >= 1, "pfnl_config: n_phases must be >= 1");
    detail::require(channels >= 4, "pfnl_config: channels must be >= 4");
    detail::require(n_pfrb >= 1, "pfnl_config: n_pfrb must be >= 1");
    detail::require(scale == 1 || scale == 2 || scale == 4, "pfnl_config: scale must be 1, 2 or 4");
    detail::require(nonlocal_max_positions >= 1, "pfnl_config: nonlocal_max_positions must be >= 1");
  }

  friend bool operator==(const pfnl_config&, const pfnl_config&) = default;
};

/// Parameter names and shapes in canonical order.
inline std::vector<std::pair<std::string, shape_t>> parameter_layout(const pfnl_config& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_phases, c = cfg.channels, s3 = std::size_t{cfg.scale} * cfg.scale * cfg.scale;
  std::vector<std::pair<std::string, shape_t>> out;
  auto conv = [&](const std::string& name, std::size_t co, std::size_t ci, std::size_t k) {
    out.emplace_back(name + ".weight", shape_t{co, ci, k, k, k});
    out.emplace_back(name + ".bias", shape_t{co});
  };
  for (const char* p : {"nonlocal.theta", "nonlocal.phi", "nonlocal.g", "nonlocal.out"}) conv(p, n, n, 1);
  conv("head", c, 1, 3);
  for (std::size_t b = 0; b < cfg.n_pfrb; ++b) {
    const std::string pre = "pfrb" + std::to_string(b) + ".";
    for (std::size_t j = 0; j < n; ++j) conv(pre + "conv1." + std::to_string(j), c, c, 3);
    conv(pre + "distill", c, n * c, 1);
    for (std::size_t j = 0; j < n; ++j) conv(pre + "conv2." + std::to_string(j), c, 2 * c, 3);
  }
  conv("merge", c * s3, n * c, 1);
  conv("tail", 1, c, 3);
  return out;
}

/// Scale applied to the He std of the final reconstruction conv, so the
/// residual branch starts small relative to the upsampled skip path.
inline constexpr double tail_init_gain = 0.3;

/// He-normal weights (std sqrt(2 / fan_in), times tail_init_gain for
/// tail.weight) and zero biases. Parameter k in layout order draws from
/// stream k of counter_rng(seed).
template <class T = float>
param_store<T> init_params(const pfnl_config& cfg, std::uint64_t seed) {
  param_store<T> ps;
  std::uint64_t stream = 0;
  for (auto& [name, shape] : parameter_layout(cfg)) {
    std::vector<T> d(shape_numel(shape), T{0});
    if (shape.size() == 5) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3] * shape[4]);
      const double gain = name == "tail.weight" ? tail_init_gain : 1.0;
      const double stddev = gain * std::sqrt(2.0 / fan_in);
      counter_rng rng(seed, stream);
      for (auto& v : d) v = static_cast<T>(rng.normal() * stddev);
    }
    ++stream;
    ps.add(name, tensor<T>(shape, std::move(d)));
  }
  return ps;
}

/// Smallest stride s such that ceil(d/s) * ceil(h/s) * ceil(w/s) <= budget.
inline std::size_t attention_stride(std::size_t d, std::size_t h, std::size_t w, std::size_t budget) {
  for (std::size_t s = 1;; ++s) {
    const std::size_t p = ((d + s - 1) / s) * ((h + s - 1) / s) * ((w + s - 1) / s);
    if (p <= budget) return s;
  }
}

template <class T>
tensor<T> pfnl_forward(const param_store<T>& params, const pfnl_config& cfg, std::span<const tensor<T>> phases) {
  cfg.validate();
  detail::require(phases.size() == cfg.n_phases, "forward: expected " + std::to_string(cfg.n_phases) + " phase inputs, got " +
                                                     std::to_string(phases.size()));
  for (const auto& x : phases) {
    detail::require(x.ndim() == 5 && x.dim(1) == 1, "forward: phase inputs must be [b,1,d,h,w], got " + shape_str(x.shape()));
    detail::require(x.shape() == phases[0].shape(), "forward: phase inputs differ in shape: " + shape_str(x.shape()) + " vs " +
                                                        shape_str(phases[0].shape()));
  }
  auto P = [&](const std::string& name) -> const tensor<T>& { return params.at(name); };
  auto conv = [&](const tensor<T>& x, const std::string& name) { return conv3d(x, P(name + ".weight"), P(name + ".bias")); };
  auto act = [](const tensor<T>& x) { return leaky_relu(x, T(0.2)); };
  const std::size_t n = cfg.n_phases;

  // (a) non-local attention across phases
  tensor<T> stacked = concat_channels(std::vector<tensor<T>>(phases.begin(), phases.end()));
  const nonlocal_params<T> nl{P("nonlocal.theta.weight"), P("nonlocal.theta.bias"), P("nonlocal.phi.weight"),
                              P("nonlocal.phi.bias"),     P("nonlocal.g.weight"),     P("nonlocal.g.bias"),
                              P("nonlocal.out.weight"),   P("nonlocal.out.bias")};
  const std::size_t d = stacked.dim(2), h = stacked.dim(3), w = stacked.dim(4);
  const std::size_t stride = attention_stride(d, h, w, cfg.nonlocal_max_positions);
  if (stride == 1) {
    stacked = nonlocal_attention(stacked, nl, cfg.nonlocal_max_positions);
  } else {
    auto response = nonlocal_response(subsample(stacked, stride), nl);
    stacked = add(stacked, trilinear_resize(response, {d, h, w}));
  }

  // (b) shared head
  std::vector<tensor<T>> branch(n);
  for (std::size_t j = 0; j < n; ++j) branch[j] = act(conv(slice_channels(stacked, j, 1), "head"));

  // (c) progressive fusion residual blocks
  for (std::size_t b = 0; b < cfg.n_pfrb; ++b) {
    const std::string pre = "pfrb" + std::to_string(b) + ".";
    std::vector<tensor<T>> first(n);
    for (std::size_t j = 0; j < n; ++j) first[j] = act(conv(branch[j], pre + "conv1." + std::to_string(j)));
    const tensor<T> distilled = act(conv(concat_channels(first), pre + "distill"));
    for (std::size_t j = 0; j < n; ++j) {
      const auto fused = act(conv(concat_channels(std::vector<tensor<T>>{first[j], distilled}), pre + "conv2." + std::to_string(j)));
      branch[j] = add(branch[j], fused);
    }
  }

  // (d)-(g) merge, upsample, reconstruct, global skip
  const auto merged = act(conv(concat_channels(branch), "merge"));
  const auto residual = conv(voxel_shuffle(merged, cfg.scale), "tail");
  return add(residual, trilinear_upsample(phases[n - 1], cfg.scale));
}

/// Convenience overload for the standard three phases (noncontrast, arterial, portal venous).
template <class T>
tensor<T> pfnl_forward(const param_store<T>& params, const pfnl_config& cfg, const tensor<T>& x0, const tensor<T>& x1,
                       const tensor<T>& x2) {
  const std::array<tensor<T>, 3> phases{x0, x1, x2};
  return pfnl_forward(params, cfg, std::span<const tensor<T>>(phases));
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "PFNL3D\0\0"  u32 version=1
//   u32 n_phases, channels, n_pfrb, scale, nonlocal_max_positions
//   u32 tensor count, then per tensor:
//     u16 name length, name (UTF-8), u8 ndim, u64 extents[ndim], f32 data
//   trailer: u64 step, u8 has_optimizer, u64 adam_t
//
// Optimizer moments, when present, are stored as tensors "adam.m/<param>" and
// "adam.v/<param>" following the parameters. All integers little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'P', 'F', 'N', 'L', '3', 'D', '\0', '\0'};

struct checkpoint {
  pfnl_config config;
  param_store<float> params;
  std::uint64_t step = 0;
  std::optional<adam_state> optimizer;
};

namespace detail {

class byte_writer {
 public:
  template <class U>
  void put(U v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  const std::vector<unsigned char>& bytes() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class byte_reader {
 public:
  byte_reader(std::vector<unsigned char> buf, std::string origin) : buf_(std::move(buf)), origin_(std::move(origin)) {}

  template <class U>
  U get() {
    U v;
    get_bytes(&v, sizeof(U));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (n > buf_.size() - pos_) fail(origin_ + ": truncated checkpoint (need " + std::to_string(n) + " bytes at offset " +
                                     std::to_string(pos_) + ", file has " + std::to_string(buf_.size()) + ")");
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<unsigned char> buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline void write_tensor(byte_writer& w, const std::string& name, const shape_t& shape, std::span<const float> data) {
  require(name.size() <= 0xFFFF, "checkpoint: tensor name too long");
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (std::size_t e : shape) w.put<std::uint64_t>(e);
  w.put_bytes(data.data(), data.size() * sizeof(float));
}

}  // namespace detail

inline void save_checkpoint(const checkpoint& ck, const std::string& path) {
  detail::byte_writer w;
  w.put_bytes(kCheckpointMagic, 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  for (std::uint32_t v : {ck.config.n_phases, ck.config.channels, ck.config.n_pfrb, ck.config.scale,
                          ck.config.nonlocal_max_positions})
    w.put<std::uint32_t>(v);
  const std::size_t count = ck.params.size() * (ck.optimizer ? 3 : 1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(count));
  for (const auto& [name, t] : ck.params) detail::write_tensor(w, name, t.shape(), t.data());
  if (ck.optimizer) {
    detail::require(ck.optimizer->m.size() == ck.params.size() && ck.optimizer->v.size() == ck.params.size(),
                    "checkpoint: optimizer state does not match parameters");
    std::size_t k = 0;
    for (const auto& [name, t] : ck.params) detail::write_tensor(w, "adam.m/" + name, t.shape(), ck.optimizer->m[k++]);
    k = 0;
    for (const auto& [name, t] : ck.params) detail::write_tensor(w, "adam.v/" + name, t.shape(), ck.optimizer->v[k++]);
  }
  w.put<std::uint64_t>(ck.step);
  w.put<std::uint8_t>(ck.optimizer ? 1 : 0);
  w.put<std::uint64_t>(ck.optimizer ? ck.optimizer->t : 0);
  std::ofstream out(path, std::ios::binary);
  if (!out) detail::fail("cannot write " + path);
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) detail::fail("write failed: " + path);
}

inline checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::fail("cannot open " + path);
  detail::byte_reader r(std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()),
                        path);
  char magic[8];
  r.get_bytes(magic, 8);
  detail::require(std::memcmp(magic, kCheckpointMagic, 8) == 0, path + ": not a PFNL3D checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  detail::require(version == kCheckpointVersion, path + ": checkpoint version " + std::to_string(version) +
                                                     " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  checkpoint ck;
  ck.config.n_phases = r.get<std::uint32_t>();
  ck.config.channels = r.get<std::uint32_t>();
  ck.config.n_pfrb = r.get<std::uint32_t>();
  ck.config.scale = r.get<std::uint32_t>();
  ck.config.nonlocal_max_positions = r.get<std::uint32_t>();
  const auto layout = parameter_layout(ck.config);
  std::map<std::string, std::pair<shape_t, std::vector<float>>> found;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint16_t>(), '\0');
    r.get_bytes(name.data(), name.size());
    shape_t shape(r.get<std::uint8_t>());
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::size_t numel = 1;
    for (std::size_t e : shape) {
      detail::require(e > 0, path + ": zero extent in tensor '" + name + "'");
      if (e > r.remaining() || numel > r.remaining() / e) {
        numel = r.remaining() + 1;
        break;
      }
      numel *= e;
    }
    if (numel > r.remaining() / sizeof(float))
      detail::fail(path + ": truncated checkpoint (tensor '" + name + "' extends past the end of the file)");
    std::vector<float> data(numel);
    r.get_bytes(data.data(), numel * sizeof(float));
    detail::require(found.emplace(name, std::make_pair(std::move(shape), std::move(data))).second,
                    path + ": duplicate tensor '" + name + "'");
  }
  ck.step = r.get<std::uint64_t>();
  const auto has_opt = r.get<std::uint8_t>();
  const auto adam_t = r.get<std::uint64_t>();
  detail::require(r.done(), path + ": trailing bytes after checkpoint trailer");

  if (has_opt) ck.optimizer = adam_state{{}, {}, adam_t};
  for (const auto& [name, shape] : layout) {
    auto it = found.find(name);
    detail::require(it != found.end(), path + ": missing parameter '" + name + "'");
    detail::require(it->second.first == shape, path + ": parameter '" + name + "' has shape " + shape_str(it->second.first) +
                                                   ", config expects " + shape_str(shape));
    ck.params.add(name, tensor<float>(shape, std::move(it->second.second)));
    found.erase(it);
    if (has_opt) {
      for (const char* pfx : {"adam.m/", "adam.v/"}) {
        auto mit = found.find(pfx + name);
        detail::require(mit != found.end(), path + ": missing optimizer tensor '" + pfx + name + "'");
        detail::require(mit->second.first == shape, path + ": optimizer tensor '" + pfx + name + "' shape mismatch");
        (pfx[5] == 'm' ? ck.optimizer->m : ck.optimizer->v).push_back(std::move(mit->second.second));
        found.erase(mit);
      }
    }
  }
  detail::require(found.empty(), path + ": unexpected tensor '" + (found.empty() ? "" : found.begin()->first) + "'");
  return ck;
}

}  // namespace phasefuse
