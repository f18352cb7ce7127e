#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "phasefuse/optim.hpp"
#include "phasefuse/train.hpp"

using namespace phasefuse;
namespace fs = std::filesystem;

namespace {

param_store<float> zero_params(const pfnl_config& cfg) {
  auto ps = init_params<float>(cfg, 0);
  for (auto& [_, t] : ps)
    for (auto& v : t.data()) v = 0.0f;
  return ps;
}

train_config tiny_config() {
  train_config c;
  c.channels = 4;
  c.n_pfrb = 1;
  c.scale = 2;
  c.patch = 4;
  c.batch_size = 2;
  c.epochs = 2;
  c.steps_per_epoch = 3;
  c.phantom_dims = 16;
  c.train_cases = 1;
  c.checkpoint_every = 1;
  return c;
}

std::string temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("phasefuse_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

volume random_volume(dims3 d, std::uint64_t seed) {
  counter_rng rng(seed, 0);
  std::vector<float> data(voxel_count(d));
  for (auto& v : data) v = static_cast<float>(rng.uniform());
  return volume(geometry{d}, std::move(data));
}

}  // namespace

TEST(Adam, ClosedFormFirstStep) {
  param_store<float> ps;
  auto& p = ps.add("w", tensorf({5}, 0.25f));
  for (auto& g : p.grad()) g = 1.0f;
  adam_state st;
  adam_step(ps, st, adam_config{});
  for (float v : p.data()) EXPECT_NEAR(v, 0.25f - 1e-3f, 1e-7f);
  EXPECT_EQ(st.t, 1u);
  EXPECT_FALSE(p.has_grad());
}

TEST(Adam, ZeroGradientNoChange) {
  param_store<float> ps;
  auto& p = ps.add("w", tensorf({4}, std::vector<float>{1, -2, 3, 0.5f}));
  p.grad();
  adam_state st;
  adam_step(ps, st, adam_config{});
  EXPECT_EQ(std::vector<float>(p.data().begin(), p.data().end()), (std::vector<float>{1, -2, 3, 0.5f}));
}

TEST(Adam, QuadraticDecreases) {
  param_store<float> ps;
  auto& p = ps.add("theta", tensorf({1}, 1.0f));
  adam_state st;
  adam_config cfg;
  cfg.lr = 0.1;
  double prev = 1.0;
  for (int i = 0; i < 2; ++i) {
    p.grad()[0] = p.data()[0];  // d/dθ of θ²/2
    adam_step(ps, st, cfg);
    EXPECT_LT(std::fabs(p.data()[0]), prev);
    prev = std::fabs(p.data()[0]);
  }
  EXPECT_EQ(st.t, 2u);
}

TEST(Adam, MatchesFloat64Reference) {
  counter_rng rng(9, 0);
  param_store<float> ps;
  ps.add("a", tensorf({7}, 0.0f));
  ps.add("b", tensorf({3, 2}, 0.0f));
  std::vector<std::vector<double>> theta, m, v;
  for (auto& [_, p] : ps) {
    for (auto& x : p.data()) x = static_cast<float>(rng.normal());
    theta.emplace_back(p.data().begin(), p.data().end());
    m.emplace_back(p.numel(), 0.0);
    v.emplace_back(p.numel(), 0.0);
  }
  adam_state st;
  const adam_config cfg{2e-3, 0.9, 0.999, 1e-8};
  for (int t = 1; t <= 10; ++t) {
    std::size_t k = 0;
    for (auto& [_, p] : ps) {
      auto g = p.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = static_cast<float>(rng.normal());
        const double gd = g[i];
        m[k][i] = 0.9 * m[k][i] + 0.1 * gd;
        v[k][i] = 0.999 * v[k][i] + 0.001 * gd * gd;
        const double mh = m[k][i] / (1 - std::pow(0.9, t)), vh = v[k][i] / (1 - std::pow(0.999, t));
        theta[k][i] -= 2e-3 * mh / (std::sqrt(vh) + 1e-8);
      }
      ++k;
    }
    adam_step(ps, st, cfg);
    k = 0;
    for (auto& [_, p] : ps) {
      for (std::size_t i = 0; i < p.numel(); ++i)
        EXPECT_LE(std::fabs(p.data()[i] - theta[k][i]), 1e-6 * std::max(1.0, std::fabs(theta[k][i])));
      ++k;
    }
  }
}

TEST(Adam, RejectsNanGradient) {
  param_store<float> ps;
  auto& p = ps.add("w", tensorf({2}, 1.0f));
  p.grad()[1] = std::nanf("");
  adam_state st;
  EXPECT_THROW(adam_step(ps, st, adam_config{}), data_error);
  EXPECT_EQ(p.data()[0], 1.0f);
}

TEST(Patches, CornerArithmetic) {
  training_case c;
  c.id = "c";
  for (std::size_t p = 0; p < 3; ++p) c.lr[p] = random_volume({10, 10, 10}, p);
  c.hr = random_volume({20, 20, 20}, 7);
  const auto a = extract_patch_triplet(c, {0, 0, 0}, 4, 2);
  EXPECT_EQ(a.hr_corner, (dims3{0, 0, 0}));
  const auto b = extract_patch_triplet(c, {2, 3, 4}, 4, 2);
  EXPECT_EQ(b.hr_corner, (dims3{4, 6, 8}));
  EXPECT_EQ(b.hr.dims(), (dims3{8, 8, 8}));
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(b.lr[p](i, j, k), c.lr[p](2 + i, 3 + j, 4 + k));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(b.hr(i, i, i), c.hr(4 + i, 6 + i, 8 + i));
}

TEST(Patches, SampledCornersStayInBounds) {
  training_case c;
  for (std::size_t p = 0; p < 3; ++p) c.lr[p] = random_volume({6, 9, 7}, p);
  c.hr = random_volume({12, 18, 14}, 9);
  counter_rng rng(1, 0);
  for (int i = 0; i < 200; ++i) {
    const auto ps = sample_patch_triplet(c, 5, 2, rng);
    for (int a = 0; a < 3; ++a) {
      EXPECT_LE(ps.lr_corner[a] + 5, c.lr[0].dims()[a]);
      EXPECT_EQ(ps.hr_corner[a], 2 * ps.lr_corner[a]);
    }
    EXPECT_EQ(ps.lr[1](0, 0, 0), c.lr[1](ps.lr_corner[0], ps.lr_corner[1], ps.lr_corner[2]));
  }
  EXPECT_THROW(sample_patch_triplet(c, 7, 2, rng), data_error);
}

TEST(Rotation, GroupProperties) {
  const auto v = random_volume({3, 4, 4}, 11);
  EXPECT_EQ(rotate_inplane(v, 0).data()[5], v.data()[5]);
  auto r = v;
  for (int i = 0; i < 4; ++i) r = rotate_inplane(r, 1);
  EXPECT_TRUE(std::equal(r.data().begin(), r.data().end(), v.data().begin()));
  const auto h = rotate_inplane(v, 2);
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(h(z, y, x), v(z, 3 - y, 3 - x));
  const auto q = rotate_inplane(rotate_inplane(v, 1), 1);
  EXPECT_TRUE(std::equal(q.data().begin(), q.data().end(), h.data().begin()));
  const auto m = rotate_inplane(v, -1), t = rotate_inplane(v, 3);
  EXPECT_TRUE(std::equal(m.data().begin(), m.data().end(), t.data().begin()));
  EXPECT_THROW(rotate_inplane(random_volume({3, 4, 5}, 1), 1), data_error);
}

TEST(Rotation, AugmentAppliesOneAngleToAll) {
  training_case c;
  for (std::size_t p = 0; p < 3; ++p) c.lr[p] = random_volume({8, 8, 8}, 20 + p);
  c.hr = random_volume({16, 16, 16}, 30);
  counter_rng rng(2, 0);
  std::array<int, 4> hist{};
  for (int i = 0; i < 400; ++i) {
    auto ps = extract_patch_triplet(c, {1, 1, 1}, 4, 2);
    const auto orig = ps;
    const int k = augment_rotate(ps, rng);
    ASSERT_GE(k, 0);
    ASSERT_LT(k, 4);
    ++hist[static_cast<std::size_t>(k)];
    for (std::size_t p = 0; p < 3; ++p) {
      const auto e = rotate_inplane(orig.lr[p], k);
      EXPECT_TRUE(std::equal(e.data().begin(), e.data().end(), ps.lr[p].data().begin()));
    }
    const auto e = rotate_inplane(orig.hr, k);
    EXPECT_TRUE(std::equal(e.data().begin(), e.data().end(), ps.hr.data().begin()));
  }
  for (int n : hist) EXPECT_GT(n, 60);
}

TEST(Rotation, ZeroModelLossInvariant) {
  const pfnl_config cfg{3, 4, 1, 2, 4096};
  const auto params = zero_params(cfg);
  training_case c;
  for (std::size_t p = 0; p < 3; ++p) c.lr[p] = random_volume({6, 6, 6}, 40 + p);
  c.hr = random_volume({12, 12, 12}, 50);
  auto ps = extract_patch_triplet(c, {0, 0, 0}, 6, 2);
  auto loss_of = [&](const patch_set& s) {
    no_grad_guard ng;
    const auto pred = pfnl_forward(params, cfg, volume_tensor(s.lr[0]), volume_tensor(s.lr[1]), volume_tensor(s.lr[2]));
    return combined_loss(volume_tensor(s.hr), pred).item();
  };
  const double base = loss_of(ps);
  for (int k = 1; k < 4; ++k) {
    patch_set r = ps;
    for (auto& v : r.lr) v = rotate_inplane(v, k);
    r.hr = rotate_inplane(r.hr, k);
    EXPECT_NEAR(loss_of(r), base, 1e-6 * base);
  }
}

TEST(Config, Parsing) {
  const auto dir = temp_dir("cfg");
  const auto p = dir + "/c.cfg";
  std::ofstream(p) << "";
  const auto d = parse_config(p);
  EXPECT_EQ(d.lr, 1e-3);
  EXPECT_EQ(d.lambda_edge, 0.7);
  EXPECT_EQ(d.beta1, 0.9);
  EXPECT_EQ(d.beta2, 0.999);
  EXPECT_EQ(d.eps_adam, 1e-8);
  EXPECT_EQ(d.epochs, 50u);
  EXPECT_EQ(d.batch_size, 2u);
  EXPECT_EQ(d.patch, 16u);

  std::ofstream(p) << "lr=0\n";
  EXPECT_EQ(parse_config(p).lr, 0.0);

  std::ofstream(p) << "unknown_key=1\n";
  try {
    parse_config(p);
    FAIL();
  } catch (const usage_error& e) {
    EXPECT_NE(std::string(e.what()).find("unknown_key"), std::string::npos);
  }
  std::ofstream(p) << "lr=-1\n";
  EXPECT_THROW(parse_config(p), usage_error);
  std::ofstream(p) << "beta1=1\n";
  EXPECT_THROW(parse_config(p), usage_error);
  std::ofstream(p) << "patch=40\nscale=2\nphantom_dims=64\n";
  EXPECT_THROW(parse_config(p), usage_error);
  std::ofstream(p) << "no equals sign\n";
  EXPECT_ANY_THROW(parse_config(p));

  std::ofstream(p) << "seed=3\npreset=smoke\n";
  const auto s = parse_config(p);
  EXPECT_EQ(s.scale, 2u);
  EXPECT_EQ(s.max_steps, 200u);
  EXPECT_EQ(s.seed, 3u);
  EXPECT_EQ(s.total_steps(), 200u);
  EXPECT_EQ(train_preset("paper").epochs, 1000u);
  EXPECT_EQ(train_preset("paper").batch_size, 8u);

  const auto round = train_config_from_kv(train_config_to_kv(s));
  EXPECT_EQ(train_config_to_kv(round), train_config_to_kv(s));
  fs::remove_all(dir);
}

TEST(Train, LrZeroLeavesParamsIdentical) {
  auto cfg = tiny_config();
  cfg.lr = 0.0;
  const auto [tr, va] = assemble_dataset(cfg);
  const auto before = init_params<float>(cfg.model(), mix_seed(cfg.seed, 1));
  const auto res = train(cfg, tr);
  EXPECT_EQ(res.final.step, cfg.total_steps());
  auto it = before.begin();
  for (const auto& [name, t] : res.final.params) {
    EXPECT_EQ(name, it->first);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), it->second.data().begin())) << name;
    ++it;
  }
}

TEST(Train, DeterministicArtifacts) {
  auto cfg = tiny_config();
  cfg.seed = 5;
  const auto [tr, va] = assemble_dataset(cfg);
  ASSERT_EQ(tr.size(), 1u);
  ASSERT_EQ(va.size(), 1u);
  std::array<std::string, 2> dirs{temp_dir("det_a"), temp_dir("det_b")};
  for (const auto& d : dirs) {
    cfg.out_dir = d;
    train(cfg, tr, va);
  }
  for (const char* f : {"loss.csv", "epochs.csv", "checkpoint_final.pfnl", "checkpoint_best.pfnl", "checkpoint_epoch1.pfnl",
                        "checkpoint_epoch2.pfnl"}) {
    const auto a = slurp(dirs[0] + "/" + f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, slurp(dirs[1] + "/" + f)) << f;
  }
  const auto log = slurp(dirs[0] + "/loss.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,step,loss,edge_term,intensity_term");
  EXPECT_EQ(static_cast<std::size_t>(std::count(log.begin(), log.end(), '\n')), 1 + cfg.total_steps());
  const auto ck = load_checkpoint(dirs[0] + "/checkpoint_final.pfnl");
  EXPECT_EQ(ck.step, cfg.total_steps());
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->t, cfg.total_steps());
  for (const auto& d : dirs) fs::remove_all(d);
}

TEST(Train, LossTermsConsistent) {
  auto cfg = tiny_config();
  const auto [tr, va] = assemble_dataset(cfg);
  std::size_t calls = 0;
  const auto res = train(cfg, tr, {}, train_hooks{[&](const loss_log_row&) { ++calls; }});
  EXPECT_EQ(calls, cfg.total_steps());
  for (const auto& r : res.log) {
    EXPECT_NEAR(r.loss, r.intensity_term + cfg.lambda_edge * r.edge_term, 1e-5 * r.loss);
    EXPECT_GE(r.edge_term, 0.0);
  }
  EXPECT_EQ(res.epochs.size(), cfg.epochs);
  EXPECT_TRUE(std::isnan(res.epochs[0].val_psnr));
}

TEST(Train, AugmentOnAndOffFinite) {
  for (bool aug : {false, true}) {
    auto cfg = tiny_config();
    cfg.augment = aug;
    const auto [tr, va] = assemble_dataset(cfg);
    for (const auto& r : train(cfg, tr).log) EXPECT_TRUE(std::isfinite(r.loss));
  }
}

TEST(Train, DivergenceWritesDiagnosticCheckpoint) {
  auto cfg = tiny_config();
  cfg.lr = 1e30;
  cfg.epochs = 3;
  cfg.out_dir = temp_dir("diverge");
  const auto [tr, va] = assemble_dataset(cfg);
  EXPECT_THROW(train(cfg, tr), data_error);
  EXPECT_TRUE(fs::exists(cfg.out_dir + "/checkpoint_diverged.pfnl"));
  fs::remove_all(cfg.out_dir);
}

TEST(Train, EmptyDatasetRejected) { EXPECT_THROW(train(tiny_config(), {}), data_error); }

TEST(Validate, ZeroModelEqualsBaseline) {
  const auto cfg = tiny_config();
  const auto [tr, va] = assemble_dataset(cfg);
  const auto params = zero_params(cfg.model());
  const auto v = validate(params, cfg.model(), va);
  const auto& c = va[0];
  const auto base = match_reference(upsample_baseline(c.lr[2], cfg.scale), c.hr);
  EXPECT_EQ(v.psnr, psnr(c.hr, base));
  EXPECT_EQ(v.ssim, ssim3d(c.hr, base));
  validate(params, cfg.model(), va);
  for (const auto& [name, t] : params)
    for (float x : t.data()) EXPECT_EQ(x, 0.0f) << name;
}

TEST(Validate, EnhanceGeometry) {
  const pfnl_config cfg{3, 4, 1, 2, 4096};
  const auto params = zero_params(cfg);
  geometry g{{5, 6, 7}, {2.0, 1.0, 3.0}};
  const volume v(g, 0.5f);
  const auto out = enhance(params, cfg, v, v, v);
  EXPECT_EQ(out.dims(), (dims3{10, 12, 14}));
  EXPECT_EQ(out.spacing()[0], 1.0);
  EXPECT_EQ(out.spacing()[2], 1.5);
  EXPECT_THROW(enhance(params, cfg, volume(geometry{{5, 6, 8}}), v, v), data_error);
}
