#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "psec/compose.hpp"
#include "psec/skills.hpp"

using namespace psec;

namespace {

struct Rig {
  NoisePredictor base;
  DiffusionSchedule sched = build_schedule(5);
  std::vector<LoraAdapter> skills;

  Rig(std::size_t k, SeededRng& rng, std::size_t hidden = 8, std::size_t layers = 2) {
    base = make_noise_predictor(2, 2, hidden, layers, rng);
    for (std::size_t i = 0; i < k; ++i) {
      skills.push_back(init_adapter(base.spec, 2, rng));
      for (Matrix& m : skills.back().b_mats)
        for (double& v : m.data) v = rng.uniform(-0.05, 0.05);
    }
  }

  std::vector<const LoraAdapter*> ptrs() const {
    std::vector<const LoraAdapter*> p;
    for (const LoraAdapter& s : skills) p.push_back(&s);
    return p;
  }
};

}  // namespace

TEST_CASE("alpha_forward: zero-initialized head gives the zero vector; purity") {
  SeededRng rng(1);
  CompositionNet net = make_composition_net(4, 3, 16, 2, rng);
  std::vector<double> s{0.2, -1.0, 0.5, 2.0};
  auto a = alpha_forward(net, s);
  REQUIRE(a.size() == 3);
  for (double v : a) CHECK(v == 0.0);
  CHECK(alpha_forward(net, s) == alpha_forward(net, s));
  CHECK_THROWS_AS(make_composition_net(4, 0, 16, 2, rng), std::invalid_argument);
}

TEST_CASE("parameter composition: zero alphas reproduce the base bit-exactly") {
  SeededRng rng(2);
  Rig rig(2, rng);
  std::vector<double> s{0.3, -0.4}, a_t{0.1, 0.9};
  auto composed =
      composed_noise_parameter(rig.base, rig.ptrs(), {0.0, 0.0}, a_t, 3, 5, s);
  CHECK(composed == rig.base.eval(s, a_t, 3, 5));
}

TEST_CASE("parameter composition: unit vector e_i recovers skill i") {
  SeededRng rng(3);
  Rig rig(3, rng);
  std::vector<double> s{0.3, -0.4}, a_t{0.1, 0.9};
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> alphas(3, 0.0);
    alphas[i] = 1.0;
    auto composed = composed_noise_parameter(rig.base, rig.ptrs(), alphas, a_t, 2, 5, s);
    auto skill_only =
        rig.base.eval(s, a_t, 2, 5, {rig.skills[i].ref(rig.skills[i].scale)});
    for (std::size_t j = 0; j < composed.size(); ++j)
      CHECK(std::abs(composed[j] - skill_only[j]) < 1e-12);
  }
  CHECK_THROWS_AS(composed_noise_parameter(rig.base, rig.ptrs(), {1.0}, a_t, 2, 5, s),
                  std::invalid_argument);
}

TEST_CASE("parameter composition on a linear predictor equals eps0 + sum alpha_i (eps_i - eps0)") {
  SeededRng rng(4);
  // single linear layer, no hidden nonlinearity
  NoisePredictor base;
  base.state_dim = 2;
  base.action_dim = 2;
  base.spec.layer_dims = {2 + 2 + kTimeEmbedDim, 2};
  base.params = init_mlp_params(base.spec, rng);
  std::vector<LoraAdapter> skills;
  for (int i = 0; i < 2; ++i) {
    skills.push_back(init_adapter(base.spec, 2, rng));
    for (Matrix& m : skills.back().b_mats)
      for (double& v : m.data) v = rng.uniform(-0.05, 0.05);
  }
  std::vector<const LoraAdapter*> ptrs{&skills[0], &skills[1]};
  std::vector<double> s{0.7, -0.2}, a_t{0.4, -0.9};
  std::vector<double> alphas{0.6, -1.3};
  auto composed = composed_noise_parameter(base, ptrs, alphas, a_t, 3, 5, s);
  auto eps0 = base.eval(s, a_t, 3, 5);
  std::vector<double> expect = eps0;
  for (std::size_t i = 0; i < 2; ++i) {
    auto eps_i = base.eval(s, a_t, 3, 5, {skills[i].ref(skills[i].scale)});
    for (std::size_t j = 0; j < 2; ++j) expect[j] += alphas[i] * (eps_i[j] - eps0[j]);
  }
  for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(composed[j] - expect[j]) < 1e-10);
}

TEST_CASE("noise composition: zero alphas give eps0; alpha=1 gives eps0 + eps1") {
  SeededRng rng(5);
  Rig rig(1, rng);
  std::vector<double> s{0.3, -0.4}, a_t{0.1, 0.9};
  auto zero = composed_noise_noise_level(rig.base, rig.ptrs(), {0.0}, a_t, 4, 5, s);
  auto eps0 = rig.base.eval(s, a_t, 4, 5);
  CHECK(zero == eps0);
  auto one = composed_noise_noise_level(rig.base, rig.ptrs(), {1.0}, a_t, 4, 5, s);
  auto eps1 = rig.base.eval(s, a_t, 4, 5, {rig.skills[0].ref(rig.skills[0].scale)});
  for (std::size_t j = 0; j < 2; ++j)
    CHECK(one[j] == doctest::Approx(eps0[j] + eps1[j]).epsilon(1e-12));
}

TEST_CASE("noise composition costs k+1 forward passes, parameter composition costs 1") {
  SeededRng rng(6);
  Rig rig(2, rng);
  std::vector<double> s{0.3, -0.4}, a_t{0.1, 0.9};
  MlpEvalCounter::forward_calls = 0;
  composed_noise_parameter(rig.base, rig.ptrs(), {0.5, 0.5}, a_t, 2, 5, s);
  CHECK(MlpEvalCounter::forward_calls == 1);
  MlpEvalCounter::forward_calls = 0;
  composed_noise_noise_level(rig.base, rig.ptrs(), {0.5, 0.5}, a_t, 2, 5, s);
  CHECK(MlpEvalCounter::forward_calls == 3);
}

TEST_CASE("action composition: zero alphas match a plain base sample on the same seed") {
  SeededRng rng(7);
  Rig rig(1, rng);
  std::vector<double> s{0.3, -0.4};
  SeededRng r1(55), r2(55);
  auto composed =
      composed_action_action_level(rig.base, rig.ptrs(), {0.0}, rig.sched, s, r1, true);
  auto plain = sample_action(rig.base, s, rig.sched, r2, false);
  for (double& v : plain) v = std::clamp(v, -1.0, 1.0);
  CHECK(composed == plain);
  // with no skills at all the streams align end to end
  SeededRng r3(55), r4(55);
  auto none = composed_action_action_level(rig.base, {}, {}, rig.sched, s, r3, true);
  auto plain2 = sample_action(rig.base, s, rig.sched, r4, true);
  CHECK(none == plain2);
}

TEST_CASE("action composition: exact clamped vector sum of the per-policy samples") {
  SeededRng rng(8);
  Rig rig(2, rng);
  std::vector<double> s{0.3, -0.4};
  std::vector<double> alphas{7.0, -5.0};  // large to exercise the clamp
  SeededRng r1(91), r2(91);
  auto composed =
      composed_action_action_level(rig.base, rig.ptrs(), alphas, rig.sched, s, r1, true);
  // replay the same draws by hand
  std::vector<double> expect = sample_action(rig.base, s, rig.sched, r2, false);
  for (std::size_t i = 0; i < 2; ++i) {
    auto a_i = sample_action(rig.base, s, rig.sched, r2, false,
                             {rig.skills[i].ref(rig.skills[i].scale)});
    axpy(expect, alphas[i], a_i);
  }
  for (double& v : expect) v = std::clamp(v, -1.0, 1.0);
  CHECK(composed == expect);
}

TEST_CASE("composer gradients match finite differences (parameter and noise modes)") {
  SeededRng rng(9);
  Rig rig(2, rng, 8, 1);
  for (CompositionMode mode : {CompositionMode::ParameterLevel, CompositionMode::NoiseLevel}) {
    ComposedPolicy policy;
    policy.base = &rig.base;
    policy.sched = &rig.sched;
    policy.skills = rig.ptrs();
    policy.mode = mode;
    policy.composer = make_composition_net(2, 2, 8, 1, rng);
    // give the head nonzero values so the alphas actually vary
    for (const auto& n : policy.composer.params.names)
      for (double& v : policy.composer.params.at(n).data) v += 0.1 * rng.normal();
    std::vector<double> s{0.4, -0.3}, a0{0.5, -0.2}, eps{0.8, -1.2};
    const std::size_t t = 3;

    ParamStore grads = policy.composer.params.zeros_like();
    composer_sample_grad(policy, s, a0, t, eps, 1.0, &grads);

    auto f = [&](const ParamStore& p) {
      ComposedPolicy probe = policy;
      probe.composer.params = p;
      return composer_sample_grad(probe, s, a0, t, eps, 1.0, nullptr);
    };
    ParamStore fd = finite_diff_grad(f, policy.composer.params, 1e-6);
    double worst = 0.0;
    for (const auto& n : grads.names)
      for (std::size_t i = 0; i < grads.at(n).data.size(); ++i) {
        const double a = grads.at(n).data[i], b = fd.at(n).data[i];
        worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}));
      }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("filter_top_trajectories: hand-enumerated example and edge cases") {
  TrajectoryDataset ds;
  const double rets[] = {1, 5, 3, 9, 7};
  const double costs[] = {0, 9, 1, 2, 3};
  for (int ep = 0; ep < 5; ++ep) {
    Transition tr;
    tr.ep = ep;
    tr.t = 0;
    tr.s = {static_cast<double>(ep)};
    tr.a = {0.0};
    tr.r = rets[ep];
    tr.c = costs[ep];
    tr.s_next = tr.s;
    ds.transitions.push_back(tr);
  }
  FilterResult res = filter_top_trajectories(ds, 2, 5.0);
  CHECK_FALSE(res.truncated_warning);
  REQUIRE(res.dataset.transitions.size() == 2);
  CHECK(res.dataset.episode_return(3) == doctest::Approx(9.0));
  CHECK(res.dataset.episode_return(4) == doctest::Approx(7.0));

  FilterResult none = filter_top_trajectories(ds, 2, 0.0);  // everything violates
  CHECK(none.truncated_warning);
  CHECK(none.dataset.transitions.empty());

  FilterResult all = filter_top_trajectories(ds, 50, 5.0);  // K above qualifying count
  CHECK(all.truncated_warning);
  CHECK(all.dataset.transitions.size() == 4);
}

TEST_CASE("train_composer: steps=0 unchanged, Fixed mode errors, library stays frozen") {
  SeededRng rng(10);
  Rig rig(2, rng);
  ComposedPolicy policy;
  policy.base = &rig.base;
  policy.sched = &rig.sched;
  policy.skills = rig.ptrs();
  policy.mode = CompositionMode::ParameterLevel;
  policy.composer = make_composition_net(2, 2, 8, 1, rng);

  std::vector<std::vector<double>> states{{0.1, 0.2}, {0.3, -0.1}};
  std::vector<std::vector<double>> actions{{0.5, 0.0}, {-0.5, 0.2}};

  const std::string theta0 = param_store_sha(policy.composer.params);
  train_composer(policy, states, actions, 0, 1e-3, 4, rng);
  CHECK(param_store_sha(policy.composer.params) == theta0);

  const std::string base_hash = param_store_sha(rig.base.params);
  const std::string skill_hash = param_store_sha(rig.skills[0].as_params());
  train_composer(policy, states, actions, 50, 1e-3, 4, rng);
  CHECK(param_store_sha(rig.base.params) == base_hash);
  CHECK(param_store_sha(rig.skills[0].as_params()) == skill_hash);

  ComposedPolicy fixed = policy;
  fixed.mode = CompositionMode::Fixed;
  fixed.fixed_alphas = {0.5, 0.5};
  CHECK_THROWS_AS(train_composer(fixed, states, actions, 10, 1e-3, 4, rng),
                  std::invalid_argument);
  CHECK_THROWS_AS(train_composer(policy, {}, {}, 10, 1e-3, 4, rng), std::invalid_argument);
}

namespace {

// base emits action 0; skill +0.8 everywhere; skill -0.8 everywhere
struct ToyWorld {
  NoisePredictor base;
  DiffusionSchedule sched = build_schedule(5);
  LoraAdapter pos, neg;

  explicit ToyWorld(SeededRng& rng) {
    base = make_noise_predictor(1, 1, 32, 2, rng);
    std::vector<double> st{0.0}, a0{0.0};
    AdamState adam = AdamState::init(base.params);
    for (int step = 0; step < 1200; ++step) {
      std::vector<DenoiseBatchItem> batch(16, DenoiseBatchItem{&st, &a0, 1.0});
      ParamStore grads = base.params.zeros_like();
      diffusion_loss(base, sched, batch, rng, {}, &grads);
      adam_step(base.params, grads, adam, 1e-3);
    }
    pos = train_const(0.8, rng);
    neg = train_const(-0.8, rng);
  }

  LoraAdapter train_const(double target, SeededRng& rng) {
    LoraAdapter ad = init_adapter(base.spec, 4, rng);
    std::vector<std::vector<double>> states, actions;
    for (int i = 0; i < 64; ++i) {
      states.push_back({i % 2 == 0 ? -1.0 : 1.0});
      actions.push_back({target});
    }
    std::vector<double> w(states.size(), 1.0);
    train_skill(base, sched, ad, states, actions, w, 1500, 1e-3, 16, rng);
    return ad;
  }
};

}  // namespace

TEST_CASE("train_composer learns state-dependent weights and cuts the held-out loss") {
  SeededRng rng(2029);
  ToyWorld world(rng);
  // demos: action tracks the sign of the state
  std::vector<std::vector<double>> states, actions;
  SeededRng drng(30);
  for (int i = 0; i < 128; ++i) {
    const double s = i % 2 == 0 ? -1.0 : 1.0;
    states.push_back({s});
    actions.push_back({0.8 * s});
  }
  ComposedPolicy policy;
  policy.base = &world.base;
  policy.sched = &world.sched;
  policy.skills = {&world.pos, &world.neg};
  policy.mode = CompositionMode::ParameterLevel;
  policy.composer = make_composition_net(1, 2, 32, 2, rng);

  SeededRng e1(40);
  const double loss_before = composed_denoise_loss(policy, states, actions, e1, 400);
  train_composer(policy, states, actions, 1000, 1e-3, 16, rng);
  SeededRng e2(40);
  const double loss_after = composed_denoise_loss(policy, states, actions, e2, 400);
  CHECK(loss_after < 0.7 * loss_before);

  // directional check: the +0.8 skill gets more weight where demos go positive
  auto a_pos = policy.alphas_for({1.0});
  auto a_neg = policy.alphas_for({-1.0});
  CHECK(a_pos[0] > a_neg[0]);
  CHECK(a_neg[1] > a_pos[1]);
}
