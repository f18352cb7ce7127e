#pragma once

// Patch-based training of the restoration network: configuration, dataset
// assembly (phantom synthesis or NIfTI case folders), patch sampling with
// in-plane rotation augmentation, Adam updates, validation and checkpointing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "phasefuse/degrade.hpp"
#include "phasefuse/error.hpp"
#include "phasefuse/keyvalue.hpp"
#include "phasefuse/loss.hpp"
#include "phasefuse/metrics.hpp"
#include "phasefuse/model.hpp"
#include "phasefuse/nifti.hpp"
#include "phasefuse/optim.hpp"
#include "phasefuse/rng.hpp"
#include "phasefuse/tensor.hpp"
#include "phasefuse/volume.hpp"

namespace phasefuse {

struct train_config {
  std::string preset = "desk";
  std::uint64_t seed = 0;
  std::size_t epochs = 50;
  std::size_t batch_size = 2;
  std::size_t steps_per_epoch = 32;
  std::size_t max_steps = 0;  // 0: epochs * steps_per_epoch
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  double lambda_edge = kDefaultEdgeWeight;
  std::size_t patch = 16;  // low-resolution patch extent
  std::uint32_t scale = 4;
  std::uint32_t channels = 16;
  std::uint32_t n_pfrb = 4;
  std::uint32_t nonlocal_max_positions = 4096;
  bool augment = true;
  std::string data_dir;  // case folders; empty: synthesize phantoms
  std::string val_dir;
  std::string out_dir;
  std::size_t checkpoint_every = 10;  // epochs; 0 disables cadence checkpoints
  std::size_t train_cases = 4;        // phantom cases when data_dir is empty
  std::size_t val_cases = 1;
  std::size_t phantom_dims = 64;

  pfnl_config model() const { return {3, channels, n_pfrb, scale, nonlocal_max_positions}; }
  adam_config adam() const { return {lr, beta1, beta2, eps_adam}; }
  std::size_t total_steps() const {
    const std::size_t full = epochs * steps_per_epoch;
    return max_steps ? std::min(max_steps, full) : full;
  }

  void validate() const {
    detail::require(lr >= 0.0 && std::isfinite(lr), "train config: lr must be >= 0");
    detail::require(beta1 >= 0.0 && beta1 < 1.0, "train config: beta1 must lie in [0, 1)");
    detail::require(beta2 >= 0.0 && beta2 < 1.0, "train config: beta2 must lie in [0, 1)");
    detail::require(eps_adam > 0.0, "train config: eps_adam must be positive");
    detail::require(lambda_edge >= 0.0, "train config: lambda_edge must be >= 0");
    detail::require(epochs >= 1 && batch_size >= 1 && steps_per_epoch >= 1, "train config: epochs, batch_size and steps_per_epoch must be >= 1");
    detail::require(patch >= 1, "train config: patch must be >= 1");
    model().validate();
    if (data_dir.empty()) {
      detail::require(train_cases >= 1, "train config: train_cases must be >= 1");
      detail::require(phantom_dims >= 16 && patch * scale <= phantom_dims,
                      "train config: patch * scale must fit inside phantom_dims (>= 16)");
    }
  }
};

/// Base values for a named preset; later keys in a config file override them.
inline train_config train_preset(const std::string& name) {
  train_config c;
  c.preset = name;
  if (name == "desk") return c;
  if (name == "paper") {
    c.epochs = 1000;
    c.batch_size = 8;
    return c;
  }
  if (name == "smoke") {
    c.scale = 2;
    c.epochs = 7;
    c.max_steps = 200;
    c.train_cases = 1;
    c.phantom_dims = 48;
    c.checkpoint_every = 0;
    return c;
  }
  throw usage_error("unknown preset '" + name + "' (expected desk|paper|smoke)");
}

inline train_config train_config_from_kv(const kv_pairs& kv) {
  train_config c;
  for (const auto& [k, v] : kv)
    if (k == "preset") c = train_preset(v);
  for (const auto& [k, v] : kv) {
    if (k == "preset") continue;
    else if (k == "seed") c.seed = parse_int<std::uint64_t>(k, v);
    else if (k == "epochs") c.epochs = parse_int<std::size_t>(k, v);
    else if (k == "batch_size") c.batch_size = parse_int<std::size_t>(k, v);
    else if (k == "steps_per_epoch") c.steps_per_epoch = parse_int<std::size_t>(k, v);
    else if (k == "max_steps") c.max_steps = parse_int<std::size_t>(k, v);
    else if (k == "lr") c.lr = parse_double(k, v);
    else if (k == "beta1") c.beta1 = parse_double(k, v);
    else if (k == "beta2") c.beta2 = parse_double(k, v);
    else if (k == "eps_adam") c.eps_adam = parse_double(k, v);
    else if (k == "lambda_edge") c.lambda_edge = parse_double(k, v);
    else if (k == "patch") c.patch = parse_int<std::size_t>(k, v);
    else if (k == "scale") c.scale = parse_int<std::uint32_t>(k, v);
    else if (k == "channels") c.channels = parse_int<std::uint32_t>(k, v);
    else if (k == "n_pfrb") c.n_pfrb = parse_int<std::uint32_t>(k, v);
    else if (k == "nonlocal_max_positions") c.nonlocal_max_positions = parse_int<std::uint32_t>(k, v);
    else if (k == "augment") c.augment = parse_bool(k, v);
    else if (k == "data_dir") c.data_dir = v;
    else if (k == "val_dir") c.val_dir = v;
    else if (k == "out_dir") c.out_dir = v;
    else if (k == "checkpoint_every") c.checkpoint_every = parse_int<std::size_t>(k, v);
    else if (k == "train_cases") c.train_cases = parse_int<std::size_t>(k, v);
    else if (k == "val_cases") c.val_cases = parse_int<std::size_t>(k, v);
    else if (k == "phantom_dims") c.phantom_dims = parse_int<std::size_t>(k, v);
    else throw usage_error("train config: unknown key '" + k + "'");
  }
  try {
    c.validate();
  } catch (const data_error& e) {
    throw usage_error(e.what());
  }
  return c;
}

/// Reads a `key=value` training config. Absent keys keep their defaults;
/// unknown keys, malformed lines and out-of-range values are rejected.
inline train_config parse_config(const std::string& path) { return train_config_from_kv(read_kv_file(path)); }

inline kv_pairs train_config_to_kv(const train_config& c) {
  return {{"preset", c.preset},
          {"seed", std::to_string(c.seed)},
          {"epochs", std::to_string(c.epochs)},
          {"batch_size", std::to_string(c.batch_size)},
          {"steps_per_epoch", std::to_string(c.steps_per_epoch)},
          {"max_steps", std::to_string(c.max_steps)},
          {"lr", format_double(c.lr)},
          {"beta1", format_double(c.beta1)},
          {"beta2", format_double(c.beta2)},
          {"eps_adam", format_double(c.eps_adam)},
          {"lambda_edge", format_double(c.lambda_edge)},
          {"patch", std::to_string(c.patch)},
          {"scale", std::to_string(c.scale)},
          {"channels", std::to_string(c.channels)},
          {"n_pfrb", std::to_string(c.n_pfrb)},
          {"nonlocal_max_positions", std::to_string(c.nonlocal_max_positions)},
          {"augment", c.augment ? "1" : "0"},
          {"data_dir", c.data_dir},
          {"val_dir", c.val_dir},
          {"out_dir", c.out_dir},
          {"checkpoint_every", std::to_string(c.checkpoint_every)},
          {"train_cases", std::to_string(c.train_cases)},
          {"val_cases", std::to_string(c.val_cases)},
          {"phantom_dims", std::to_string(c.phantom_dims)}};
}

// ---------------------------------------------------------------------------
// Data

/// Degraded phases (noncontrast, arterial, portal venous) and the original
/// portal venous volume.
struct training_case {
  std::string id;
  std::array<volume, 3> lr;
  volume hr;
};

/// One phantom study: each phase degraded independently with seeds derived from `seed`.
inline training_case synthesize_case(std::uint64_t seed, std::size_t dims, int scale, const std::string& id = "",
                                     const degradation_options& opt = {}) {
  training_case c;
  c.id = id.empty() ? "phantom" + std::to_string(seed) : id;
  const dims3 d{dims, dims, dims};
  for (int p = 0; p < 3; ++p) {
    const volume clean = make_phantom(seed, d, static_cast<phase>(p));
    c.lr[static_cast<std::size_t>(p)] = degrade_second_order(clean, mix_seed(seed, 100 + static_cast<std::uint64_t>(p)), scale, opt).image;
    if (p == 2) c.hr = clean;
  }
  return c;
}

/// Case folders under `dir`, each holding nc.nii, art.nii, pv.nii (degraded)
/// and ref.nii (original portal venous), visited in name order.
inline std::vector<training_case> load_cases(const std::string& dir) {
  namespace fs = std::filesystem;
  detail::require(fs::is_directory(dir), "data directory not found: " + dir);
  std::vector<fs::path> folders;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) folders.push_back(e.path());
  std::sort(folders.begin(), folders.end());
  std::vector<training_case> out;
  for (const auto& f : folders) {
    training_case c;
    c.id = f.filename().string();
    c.lr[0] = read_nifti((f / "nc.nii").string());
    c.lr[1] = read_nifti((f / "art.nii").string());
    c.lr[2] = read_nifti((f / "pv.nii").string());
    c.hr = read_nifti((f / "ref.nii").string());
    for (const auto& v : c.lr)
      detail::require(v.dims() == c.lr[0].dims(), c.id + ": degraded phases differ in dims");
    out.push_back(std::move(c));
  }
  detail::require(!out.empty(), "no case folders in " + dir);
  return out;
}

struct patch_set {
  std::array<volume, 3> lr;
  volume hr;
  dims3 lr_corner{}, hr_corner{};
};

/// Crops the same LR corner from all phases and the matching HR patch
/// (corner * scale, extent patch * scale) from the reference.
inline patch_set extract_patch_triplet(const training_case& c, const dims3& corner, std::size_t patch, std::size_t scale) {
  patch_set ps;
  ps.lr_corner = corner;
  dims3 hi{}, hlo{}, hhi{};
  for (int a = 0; a < 3; ++a) {
    hi[a] = corner[a] + patch;
    hlo[a] = corner[a] * scale;
    hhi[a] = hi[a] * scale;
  }
  ps.hr_corner = hlo;
  for (int p = 0; p < 3; ++p) ps.lr[static_cast<std::size_t>(p)] = crop(c.lr[static_cast<std::size_t>(p)], corner, hi);
  ps.hr = crop(c.hr, hlo, hhi);
  return ps;
}

inline patch_set sample_patch_triplet(const training_case& c, std::size_t patch, std::size_t scale, counter_rng& rng) {
  dims3 corner{};
  for (int a = 0; a < 3; ++a) {
    const std::size_t lr_extent = std::min(c.lr[0].dims()[a], c.hr.dims()[a] / scale);
    detail::require(lr_extent >= patch, "patch " + std::to_string(patch) + " exceeds volume " + to_string(c.lr[0].dims()) +
                                            " of case " + c.id);
    corner[a] = static_cast<std::size_t>(rng.below(lr_extent - patch + 1));
  }
  return extract_patch_triplet(c, corner, patch, scale);
}

/// Rotates a grid by quarter_turns * 90 degrees in the (y, x) plane.
template <class T>
grid<T> rotate_inplane(const grid<T>& v, int quarter_turns) {
  const auto& d = v.dims();
  detail::require(d[1] == d[2], "rotate: in-plane extents must be square, got " + to_string(d));
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return v;
  const std::size_t n = d[1];
  std::vector<T> out(v.size());
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        std::size_t sy = y, sx = x;
        if (k == 1) sy = x, sx = n - 1 - y;
        else if (k == 2) sy = n - 1 - y, sx = n - 1 - x;
        else sy = n - 1 - x, sx = y;
        out[(z * n + y) * n + x] = v(z, sy, sx);
      }
  return grid<T>(v.geom(), std::move(out));
}

/// Applies one rotation, drawn uniformly from {0, 90, 180, 270} degrees, to
/// every patch of the set. Returns the number of quarter turns.
inline int augment_rotate(patch_set& ps, counter_rng& rng) {
  const int k = static_cast<int>(rng.below(4));
  for (auto& v : ps.lr) v = rotate_inplane(v, k);
  ps.hr = rotate_inplane(ps.hr, k);
  return k;
}

inline tensorf volume_tensor(const volume& v) {
  const auto& d = v.dims();
  return tensorf({1, 1, d[0], d[1], d[2]}, std::vector<float>(v.data().begin(), v.data().end()));
}

/// Stacks same-shaped volumes into a [n, 1, d, h, w] batch.
inline tensorf batch_tensor(const std::vector<const volume*>& vs) {
  const auto& d = vs.at(0)->dims();
  std::vector<float> data;
  data.reserve(vs.size() * vs[0]->size());
  for (const auto* v : vs) {
    detail::require(v->dims() == d, "batch: volumes differ in dims");
    data.insert(data.end(), v->data().begin(), v->data().end());
  }
  return tensorf({vs.size(), 1, d[0], d[1], d[2]}, std::move(data));
}

inline volume tensor_volume(const tensorf& t, geometry g) {
  detail::require(t.numel() == g.voxels(), "tensor does not match volume geometry");
  return volume(g, std::vector<float>(t.data().begin(), t.data().end()));
}

/// Restores the portal venous phase at scale x the input resolution.
inline volume enhance(const param_store<float>& params, const pfnl_config& cfg, const volume& nc, const volume& art,
                      const volume& pv) {
  detail::require(nc.dims() == pv.dims() && art.dims() == pv.dims(),
                  "enhance: input dims differ (nc " + to_string(nc.dims()) + ", art " + to_string(art.dims()) + ", pv " +
                      to_string(pv.dims()) + ")");
  no_grad_guard ng;
  const tensorf out = pfnl_forward(params, cfg, volume_tensor(nc), volume_tensor(art), volume_tensor(pv));
  geometry g = pv.geom();
  for (int a = 0; a < 3; ++a) {
    g.dims[a] *= cfg.scale;
    g.spacing[a] /= cfg.scale;
  }
  return tensor_volume(out, g);
}

/// Trilinear upsampling of a degraded volume; the skip path of the network.
inline volume upsample_baseline(const volume& lr, std::uint32_t scale) {
  no_grad_guard ng;
  const tensorf out = trilinear_upsample(volume_tensor(lr), scale);
  geometry g = lr.geom();
  for (int a = 0; a < 3; ++a) {
    g.dims[a] *= scale;
    g.spacing[a] /= scale;
  }
  return tensor_volume(out, g);
}

/// Crops an upsampled output to the reference dims and adopts its geometry.
inline volume match_reference(const volume& v, const volume& ref) {
  for (int a = 0; a < 3; ++a)
    detail::require(v.dims()[a] >= ref.dims()[a], "output " + to_string(v.dims()) + " smaller than reference " + to_string(ref.dims()));
  const volume c = v.dims() == ref.dims() ? v : crop(v, {0, 0, 0}, ref.dims());
  return volume(ref.geom(), std::vector<float>(c.data().begin(), c.data().end()));
}

struct validation_result {
  double psnr = 0.0;
  double ssim = 0.0;
  std::vector<metric_row> rows;
};

/// Full-volume enhancement of each case, scored against its reference.
inline validation_result validate(const param_store<float>& params, const pfnl_config& cfg, const std::vector<training_case>& cases) {
  validation_result r;
  for (const auto& c : cases) {
    const volume out = match_reference(enhance(params, cfg, c.lr[0], c.lr[1], c.lr[2]), c.hr);
    metric_row row;
    row.case_id = c.id;
    row.psnr = psnr(c.hr, out);
    row.ssim = ssim3d(c.hr, out);
    r.psnr += row.psnr;
    r.ssim += row.ssim;
    r.rows.push_back(row);
  }
  if (!cases.empty()) {
    r.psnr /= static_cast<double>(cases.size());
    r.ssim /= static_cast<double>(cases.size());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

struct loss_log_row {
  std::size_t epoch = 0, step = 0;
  double loss = 0.0, edge_term = 0.0, intensity_term = 0.0;
};

struct epoch_log_row {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_psnr = std::numeric_limits<double>::quiet_NaN();
  double val_ssim = std::numeric_limits<double>::quiet_NaN();
};

struct train_result {
  checkpoint final;
  std::vector<loss_log_row> log;
  std::vector<epoch_log_row> epochs;
  double best_val_psnr = -std::numeric_limits<double>::infinity();
};

inline void write_loss_log(std::ostream& os, const std::vector<loss_log_row>& log) {
  os << "epoch,step,loss,edge_term,intensity_term\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g\n", r.epoch, r.step, r.loss, r.edge_term, r.intensity_term);
    os << buf;
  }
}

inline void write_epoch_log(std::ostream& os, const std::vector<epoch_log_row>& log) {
  os << "epoch,mean_loss,val_psnr,val_ssim\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.mean_loss, r.val_psnr, r.val_ssim);
    os << buf;
  }
}

struct train_hooks {
  /// Called after every optimizer step.
  std::function<void(const loss_log_row&)> on_step;
};

/// Runs the configured number of steps. Deterministic given cfg.seed. When
/// cfg.out_dir is set, writes loss.csv, epochs.csv and checkpoints there.
inline train_result train(const train_config& cfg, const std::vector<training_case>& dataset,
                          const std::vector<training_case>& val = {}, const train_hooks& hooks = {}) {
  cfg.validate();
  detail::require(!dataset.empty(), "train: empty dataset");
  namespace fs = std::filesystem;
  const bool write = !cfg.out_dir.empty();
  if (write) fs::create_directories(cfg.out_dir);
  auto out_path = [&](const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); };

  const pfnl_config mcfg = cfg.model();
  train_result res;
  res.final.config = mcfg;
  res.final.params = init_params<float>(mcfg, mix_seed(cfg.seed, 1));
  adam_state opt;
  const adam_config acfg = cfg.adam();
  counter_rng rng(mix_seed(cfg.seed, 2), 0);
  const std::size_t total = cfg.total_steps();

  auto snapshot = [&](const std::string& name) {
    if (!write) return;
    checkpoint ck{mcfg, res.final.params.cast<float>(), res.final.step, opt};
    save_checkpoint(ck, out_path(name));
  };
  auto flush_logs = [&] {
    if (!write) return;
    std::ofstream l(out_path("loss.csv"), std::ios::binary);
    write_loss_log(l, res.log);
    std::ofstream e(out_path("epochs.csv"), std::ios::binary);
    write_epoch_log(e, res.epochs);
  };

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t s = 0; s < cfg.steps_per_epoch && step < total; ++s) {
      std::vector<patch_set> batch;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const auto& c = dataset[static_cast<std::size_t>(rng.below(dataset.size()))];
        batch.push_back(sample_patch_triplet(c, cfg.patch, cfg.scale, rng));
        if (cfg.augment) augment_rotate(batch.back(), rng);
      }
      std::array<std::vector<const volume*>, 3> phases;
      std::vector<const volume*> targets;
      for (const auto& p : batch) {
        for (int k = 0; k < 3; ++k) phases[static_cast<std::size_t>(k)].push_back(&p.lr[static_cast<std::size_t>(k)]);
        targets.push_back(&p.hr);
      }
      const tensorf y = batch_tensor(targets);
      const tensorf pred = pfnl_forward(res.final.params, mcfg, batch_tensor(phases[0]), batch_tensor(phases[1]),
                                        batch_tensor(phases[2]));
      auto terms = combined_loss_terms(y, pred, cfg.lambda_edge);
      const double loss = terms.total.item();
      ++step;
      if (!std::isfinite(loss)) {
        res.final.step = step;
        snapshot("checkpoint_diverged.pfnl");
        flush_logs();
        detail::fail("train: non-finite loss at step " + std::to_string(step) +
                     (write ? "; diagnostic checkpoint written to " + out_path("checkpoint_diverged.pfnl") : ""));
      }
      backward(terms.total);
      adam_step(res.final.params, opt, acfg);
      res.final.step = step;
      const loss_log_row row{epoch, step, loss, terms.edge, terms.intensity};
      res.log.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
      epoch_loss += loss;
      ++epoch_steps;
    }
    epoch_log_row er;
    er.epoch = epoch;
    er.mean_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_steps, 1));
    if (!val.empty()) {
      const auto v = validate(res.final.params, mcfg, val);
      er.val_psnr = v.psnr;
      er.val_ssim = v.ssim;
      if (v.psnr > res.best_val_psnr) {
        res.best_val_psnr = v.psnr;
        snapshot("checkpoint_best.pfnl");
      }
    }
    res.epochs.push_back(er);
    if (cfg.checkpoint_every && epoch % cfg.checkpoint_every == 0) snapshot("checkpoint_epoch" + std::to_string(epoch) + ".pfnl");
    flush_logs();
  }
  res.final.optimizer = opt;
  snapshot("checkpoint_final.pfnl");
  flush_logs();
  return res;
}

/// Training and validation cases for a config: NIfTI folders when data_dir /
/// val_dir are set, otherwise seeded phantoms.
inline std::pair<std::vector<training_case>, std::vector<training_case>> assemble_dataset(const train_config& cfg) {
  std::vector<training_case> tr, va;
  const int scale = static_cast<int>(cfg.scale);
  if (!cfg.data_dir.empty()) {
    tr = load_cases(cfg.data_dir);
  } else {
    for (std::size_t i = 0; i < cfg.train_cases; ++i)
      tr.push_back(synthesize_case(mix_seed(cfg.seed, 1000 + i), cfg.phantom_dims, scale, "train" + std::to_string(i)));
  }
  if (!cfg.val_dir.empty()) {
    va = load_cases(cfg.val_dir);
  } else if (cfg.data_dir.empty()) {
    for (std::size_t i = 0; i < cfg.val_cases; ++i)
      va.push_back(synthesize_case(mix_seed(cfg.seed, 2000 + i), cfg.phantom_dims, scale, "val" + std::to_string(i)));
  }
  return {std::move(tr), std::move(va)};
}

}  // namespace phasefuse
