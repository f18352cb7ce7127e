// phasefuse: phantom -> degrade -> train -> enhance -> evaluate -> statistics.
//
// Exit codes: 0 success, 1 usage error, 2 data or validation error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "phasefuse.hpp"

#ifndef PHASEFUSE_VERSION
#define PHASEFUSE_VERSION "0.0.0"
#endif

namespace pf = phasefuse;
namespace fs = std::filesystem;

namespace {

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw pf::data_error("cannot open " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

/// Provenance sidecar `<output>.prov`: command, tool version, every flag
/// value and a content hash of every input. No timestamps, so reruns with the
/// same arguments produce identical sidecars.
class provenance {
 public:
  explicit provenance(std::string command) { kv_.emplace_back("command", std::move(command)); }

  provenance& set(const std::string& k, const std::string& v) {
    kv_.emplace_back(k, v);
    return *this;
  }
  provenance& set(const std::string& k, double v) { return set(k, pf::format_double(v)); }
  provenance& set_int(const std::string& k, std::uint64_t v) { return set(k, std::to_string(v)); }
  provenance& input(const std::string& k, const std::string& path) {
    set("input." + k, path);
    return set("input." + k + ".fnv1a64", hex64(fnv1a_file(path)));
  }

  void write_for(const std::string& output) const {
    pf::kv_pairs kv{{"tool", "phasefuse"}, {"version", PHASEFUSE_VERSION}};
    kv.insert(kv.end(), kv_.begin(), kv_.end());
    kv.emplace_back("output", output);
    kv.emplace_back("output.fnv1a64", hex64(fnv1a_file(output)));
    pf::write_kv_file(output + ".prov", kv);
  }

 private:
  pf::kv_pairs kv_;
};

pf::dims3 parse_dims(const std::vector<std::size_t>& v) {
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw pf::usage_error("--dims takes one extent or three (d h w)");
}

std::string dims_str(const pf::dims3& d) { return pf::to_string(d); }

pf::volume read_volume(const std::string& path, const char* what) {
  try {
    return pf::read_nifti(path);
  } catch (const pf::data_error& e) {
    throw pf::data_error(std::string(what) + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct phantom_args {
  std::uint64_t seed = 0;
  std::vector<std::size_t> dims{64};
  std::string phase = "pv";
  std::string out;
  double spacing = 1.0;
  std::string dtype = "float32";
};

void run_phantom(const phantom_args& a) {
  const auto d = parse_dims(a.dims);
  const auto ph = pf::parse_phase(a.phase);
  if (!(a.spacing > 0.0)) throw pf::usage_error("--spacing must be positive");
  const auto v = pf::make_phantom(a.seed, d, ph, {a.spacing, a.spacing, a.spacing});
  pf::write_nifti(v, a.out, pf::parse_nifti_dtype(a.dtype));
  provenance("phantom")
      .set_int("seed", a.seed)
      .set("dims", dims_str(d))
      .set("phase", pf::phase_name(ph))
      .set("spacing", a.spacing)
      .set("dtype", a.dtype)
      .write_for(a.out);
}

struct degrade_args {
  std::string in, out, recipe_out, replay;
  std::uint64_t seed = 0;
  int final_scale = 4;
  pf::degradation_options opt;
};

void run_degrade(const degrade_args& a) {
  const auto v = read_volume(a.in, "input");
  pf::degraded result;
  provenance prov("degrade");
  prov.input("volume", a.in);
  if (!a.replay.empty()) {
    pf::degradation_recipe r;
    try {
      r = pf::recipe_from_kv(pf::read_kv_file(a.replay));
    } catch (const pf::usage_error& e) {
      throw pf::data_error(a.replay + ": " + e.what());
    }
    result = {pf::replay_recipe(v, r), r};
    prov.input("recipe", a.replay);
  } else {
    result = pf::degrade_second_order(v, a.seed, a.final_scale, a.opt);
    prov.set_int("seed", a.seed)
        .set_int("final_scale", static_cast<std::uint64_t>(a.final_scale))
        .set("p_blur", a.opt.p_blur)
        .set("p_resize", a.opt.p_resize)
        .set("p_noise", a.opt.p_noise)
        .set("sigma_range", pf::format_double(a.opt.sigma_min) + "," + pf::format_double(a.opt.sigma_max))
        .set("gauss_range", pf::format_double(a.opt.gauss_min) + "," + pf::format_double(a.opt.gauss_max))
        .set("poisson_range", pf::format_double(a.opt.poisson_min) + "," + pf::format_double(a.opt.poisson_max))
        .set("resize_range", pf::format_double(a.opt.resize_min) + "," + pf::format_double(a.opt.resize_max));
  }
  pf::write_nifti(result.image, a.out);
  const std::string recipe_path = a.recipe_out.empty() ? a.out + ".recipe" : a.recipe_out;
  pf::write_kv_file(recipe_path, pf::recipe_to_kv(result.recipe));
  prov.set("recipe", recipe_path);
  prov.write_for(a.out);
  prov.write_for(recipe_path);
}

struct train_args {
  std::string config, out_dir;
};

void run_train(const train_args& a) {
  auto cfg = pf::parse_config(a.config);
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (cfg.out_dir.empty()) throw pf::usage_error("train: set out_dir in the config or pass --out-dir");
  fs::create_directories(cfg.out_dir);
  const auto [tr, va] = pf::assemble_dataset(cfg);
  std::fprintf(stderr, "train: %zu training case(s), %zu validation case(s), %zu steps\n", tr.size(), va.size(),
               cfg.total_steps());
  const auto res = pf::train(cfg, tr, va, pf::train_hooks{[](const pf::loss_log_row& r) {
                                if (r.step % 10 == 0)
                                  std::fprintf(stderr, "step %zu  loss %.5f  edge %.5f  intensity %.5f\n", r.step, r.loss,
                                               r.edge_term, r.intensity_term);
                              }});
  const std::string resolved = (fs::path(cfg.out_dir) / "config.resolved").string();
  pf::write_kv_file(resolved, pf::train_config_to_kv(cfg));
  provenance prov("train");
  prov.input("config", a.config);
  for (const auto& [k, v] : pf::train_config_to_kv(cfg)) prov.set("config." + k, v);
  for (const char* f : {"loss.csv", "epochs.csv", "checkpoint_final.pfnl", "checkpoint_best.pfnl", "config.resolved"}) {
    const auto p = (fs::path(cfg.out_dir) / f).string();
    if (fs::exists(p)) prov.write_for(p);
  }
  if (!va.empty()) std::printf("best_val_psnr=%.6f\n", res.best_val_psnr);
  std::printf("steps=%zu\n", res.final.step);
}

struct enhance_args {
  std::string model, nc, art, pv, out, match;
  bool zero_model = false;
  std::uint32_t scale = 4;
  std::uint32_t channels = 16, n_pfrb = 4;
};

void run_enhance(const enhance_args& a) {
  if (a.zero_model == !a.model.empty()) throw pf::usage_error("enhance: pass exactly one of --model or --zero-model");
  const auto nc = read_volume(a.nc, "--nc"), art = read_volume(a.art, "--art"), pv = read_volume(a.pv, "--pv");
  if (nc.dims() != pv.dims() || art.dims() != pv.dims())
    throw pf::data_error("enhance: input dims differ: nc " + dims_str(nc.dims()) + ", art " + dims_str(art.dims()) +
                         ", pv " + dims_str(pv.dims()));
  provenance prov("enhance");
  pf::checkpoint ck;
  if (a.zero_model) {
    ck.config = {3, a.channels, a.n_pfrb, a.scale, 4096};
    ck.params = pf::init_params<float>(ck.config, 0);
    for (auto& [_, t] : ck.params)
      for (auto& v : t.data()) v = 0.0f;
    prov.set("model", "zero").set_int("scale", a.scale).set_int("channels", a.channels).set_int("n_pfrb", a.n_pfrb);
  } else {
    ck = pf::load_checkpoint(a.model);
    prov.input("model", a.model);
  }
  auto out = pf::enhance(ck.params, ck.config, nc, art, pv);
  if (!a.match.empty()) {
    out = pf::match_reference(out, read_volume(a.match, "--match"));
    prov.input("match", a.match);
  }
  pf::write_nifti(out, a.out);
  prov.input("nc", a.nc).input("art", a.art).input("pv", a.pv).write_for(a.out);
}

struct metrics_args {
  std::string which, ref, test;
  double range = 1.0;
};

void run_metrics(const metrics_args& a) {
  const auto ref = read_volume(a.ref, "reference"), test = read_volume(a.test, "test");
  if (ref.dims() != test.dims())
    throw pf::data_error("metrics: dims differ: reference " + dims_str(ref.dims()) + ", test " + dims_str(test.dims()));
  if (a.which == "psnr") {
    const double v = pf::psnr(ref, test, a.range);
    std::printf("psnr=%s\n", std::isinf(v) ? "inf" : pf::format_double(v).c_str());
  } else {
    pf::ssim_options o;
    o.data_range = a.range;
    std::printf("ssim=%s\n", pf::format_double(pf::ssim3d(ref, test, o)).c_str());
  }
}

struct seg_args {
  std::string pred, ref, out, id = "case";
  double tau = 2.0;
};

void run_seg_eval(const seg_args& a) {
  if (!(a.tau > 0.0)) throw pf::usage_error("--tau must be positive");
  const auto pred = pf::read_nifti_mask(a.pred), ref = pf::read_nifti_mask(a.ref);
  if (pred.geom() != ref.geom())
    throw pf::data_error("seg-eval: geometry differs: pred " + dims_str(pred.dims()) + ", ref " + dims_str(ref.dims()));
  pf::metric_report rep;
  rep.tau_mm = a.tau;
  pf::metric_row row;
  row.case_id = a.id;
  row.dice = pf::dice(pred, ref);
  row.nsd = pf::nsd(pred, ref, a.tau);
  rep.rows.push_back(row);
  std::printf("dice=%s\nnsd=%s\ntau_mm=%s\n", pf::format_double(row.dice).c_str(), pf::format_double(row.nsd).c_str(),
              pf::format_double(a.tau).c_str());
  if (!a.out.empty()) {
    std::ofstream os(a.out, std::ios::binary);
    if (!os) throw pf::data_error("cannot write " + a.out);
    rep.write_csv(os);
    os.close();
    provenance("seg-eval").set("tau_mm", a.tau).set("id", a.id).input("pred", a.pred).input("ref", a.ref).write_for(a.out);
  }
}

struct wilcoxon_args {
  std::string a, b;
};

void run_wilcoxon(const wilcoxon_args& a) {
  const auto x = pf::read_value_column(a.a), y = pf::read_value_column(a.b);
  const auto r = pf::wilcoxon_signed_rank(x, y);
  std::printf("n_effective=%zu\nw=%s\nw_plus=%s\nw_minus=%s\np_two_sided=%.17g\nmethod=%s\n", r.n_effective,
              pf::format_double(r.w).c_str(), pf::format_double(r.w_plus).c_str(), pf::format_double(r.w_minus).c_str(),
              r.p_two_sided, pf::method_name(r.method));
}

struct gradcheck_args {
  std::size_t seeds = 3;
  bool no_model = false;
};

int run_gradcheck(const gradcheck_args& a) {
  pf::gradient_suite_options o;
  o.seeds = a.seeds;
  o.include_model = !a.no_model;
  const auto res = pf::run_gradient_suite(o, [](const pf::gradient_suite_entry& e) {
    std::printf("%s %-20s seed %llu  max rel err %.3e (tol %.0e)  checked %zu  skipped %zu\n", e.passed ? "ok  " : "FAIL",
                e.op.c_str(), static_cast<unsigned long long>(e.seed), e.report.max_rel_error, e.tol, e.report.checked,
                e.report.skipped);
    std::fflush(stdout);
  });
  std::printf("ops max rel err %.3e; model max rel err %.3e; %.1f s\n", res.max_rel_error(false), res.max_rel_error(true),
              res.seconds);
  return res.passed ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiphase CT restoration toolkit"};
  app.set_version_flag("--version", PHASEFUSE_VERSION);
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  int code = 0;

  phantom_args ph;
  auto* c_ph = app.add_subcommand("phantom", "Write a seeded synthetic abdominal phantom (windowed to [0,1])");
  c_ph->add_option("--seed", ph.seed);
  c_ph->add_option("--dims", ph.dims, "One extent or three (d h w)")->expected(1, 3);
  c_ph->add_option("--phase", ph.phase, "nc | art | pv");
  c_ph->add_option("--spacing", ph.spacing, "Isotropic voxel spacing in mm");
  c_ph->add_option("--dtype", ph.dtype, "float32 | int16 | uint8");
  c_ph->add_option("-o,--out", ph.out)->required();
  c_ph->callback([&] { run_phantom(ph); });

  degrade_args dg;
  auto* c_dg = app.add_subcommand("degrade", "Apply the seeded two-stage degradation (or replay a recipe)");
  c_dg->add_option("-i,--in", dg.in)->required();
  c_dg->add_option("-o,--out", dg.out)->required();
  c_dg->add_option("--seed", dg.seed);
  c_dg->add_option("--final-scale", dg.final_scale)->check(CLI::IsMember({1, 2, 4}));
  c_dg->add_option("--recipe", dg.recipe_out, "Recipe output path (default <out>.recipe)");
  c_dg->add_option("--replay", dg.replay, "Reproduce the degradation recorded in a recipe");
  c_dg->add_option("--p-blur", dg.opt.p_blur);
  c_dg->add_option("--p-resize", dg.opt.p_resize);
  c_dg->add_option("--p-noise", dg.opt.p_noise);
  c_dg->add_option("--sigma-min", dg.opt.sigma_min);
  c_dg->add_option("--sigma-max", dg.opt.sigma_max);
  c_dg->add_option("--gauss-min", dg.opt.gauss_min);
  c_dg->add_option("--gauss-max", dg.opt.gauss_max);
  c_dg->add_option("--poisson-min", dg.opt.poisson_min);
  c_dg->add_option("--poisson-max", dg.opt.poisson_max);
  c_dg->add_option("--resize-min", dg.opt.resize_min);
  c_dg->add_option("--resize-max", dg.opt.resize_max);
  c_dg->callback([&] {
    try {
      dg.opt.validate();
    } catch (const pf::data_error& e) {
      throw pf::usage_error(e.what());
    }
    run_degrade(dg);
  });

  train_args tr;
  auto* c_tr = app.add_subcommand("train", "Train from a key=value config");
  c_tr->add_option("--config", tr.config)->required();
  c_tr->add_option("--out-dir", tr.out_dir, "Overrides out_dir from the config");
  c_tr->callback([&] { run_train(tr); });

  enhance_args en;
  auto* c_en = app.add_subcommand("enhance", "Restore the portal venous phase from three degraded phases");
  c_en->add_option("--model", en.model, "Checkpoint file");
  c_en->add_flag("--zero-model", en.zero_model, "Use an all-zero network (output = trilinear upsampling of --pv)");
  c_en->add_option("--scale", en.scale, "Upsampling factor for --zero-model")->check(CLI::IsMember({1, 2, 4}));
  c_en->add_option("--nc", en.nc)->required();
  c_en->add_option("--art", en.art)->required();
  c_en->add_option("--pv", en.pv)->required();
  c_en->add_option("--match", en.match, "Crop the output to this reference volume's grid");
  c_en->add_option("-o,--out", en.out)->required();
  c_en->callback([&] { run_enhance(en); });

  metrics_args me;
  auto* c_me = app.add_subcommand("metrics", "Image quality of a test volume against a reference");
  c_me->add_option("metric", me.which)->required()->check(CLI::IsMember({"psnr", "ssim"}));
  c_me->add_option("ref", me.ref)->required();
  c_me->add_option("test", me.test)->required();
  c_me->add_option("--range", me.range, "Data range");
  c_me->callback([&] { run_metrics(me); });

  seg_args se;
  auto* c_se = app.add_subcommand("seg-eval", "Dice and normalized surface distance of two binary masks");
  c_se->add_option("pred", se.pred)->required();
  c_se->add_option("ref", se.ref)->required();
  c_se->add_option("--tau", se.tau, "Surface tolerance in mm");
  c_se->add_option("--id", se.id, "Case id for the report row");
  c_se->add_option("--out", se.out, "Write a report CSV");
  c_se->callback([&] { run_seg_eval(se); });

  wilcoxon_args wi;
  auto* c_wi = app.add_subcommand("wilcoxon", "Paired Wilcoxon signed-rank test on two single-column CSVs");
  c_wi->add_option("a", wi.a)->required();
  c_wi->add_option("b", wi.b)->required();
  c_wi->callback([&] { run_wilcoxon(wi); });

  gradcheck_args gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference verification of every op and the network");
  c_gc->add_option("--seeds", gc.seeds);
  c_gc->add_flag("--no-model", gc.no_model, "Skip the end-to-end network check");
  c_gc->callback([&] { code = run_gradcheck(gc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int r = app.exit(e);
    return r == 0 ? 0 : 1;
  } catch (const pf::usage_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const pf::data_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return code;
}
