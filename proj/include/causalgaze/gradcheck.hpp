#pragma once

// Finite-difference verification of the full detector: dloss/dA, dloss/dH,
// dloss/dtheta for every parameter tensor, and the second-order gradient of
// ||S||_F^2 against central differences of the first-order gradient.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "causalgaze/dataio.hpp"
#include "causalgaze/detector.hpp"
#include "causalgaze/engine.hpp"
#include "causalgaze/params.hpp"
#include "causalgaze/rng.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::gradcheck {

struct Options {
  std::size_t trials = 20;
  std::uint64_t seed = 9;
  std::size_t l_min = 2, l_max = 6;
  std::size_t d_min = 3, d_max = 8;
  double eps = 1e-5;
  double first_order_tol = 1e-5;
  double second_order_tol = 1e-4;
  std::size_t coords_per_tensor = 256;  // 0 = every coordinate
  std::size_t max_redraws = 50;
  /// Architecture used for every instance; input_dim is set per instance.
  detector::DetectorConfig model = [] {
    detector::DetectorConfig c;
    c.reg_mode = RegMode::SecondOrder;
    return c;
  }();
};

struct Check {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t coords = 0;
  bool passed() const { return max_rel_error <= tolerance; }
};

struct Report {
  std::vector<Check> checks;
  std::size_t redraws = 0;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed(); });
  }
  double worst(bool second_order) const {
    double w = 0.0;
    for (const auto& c : checks)
      if ((c.name.find("second-order") != std::string::npos) == second_order) w = std::max(w, c.max_rel_error);
    return w;
  }
};

struct Instance {
  dataio::GraphRecord record;
  detector::DetectorParams params;
};

/// Random record (causal softmax attention) and jittered parameters, so that
/// biases, gate scale and shift all sit away from their initial values.
inline Instance draw_instance(const Options& opt, std::uint64_t stream) {
  Rng rng(derive_seed(opt.seed, {hash_string("gradcheck"), stream}));
  std::uniform_int_distribution<std::size_t> len(opt.l_min, opt.l_max);
  std::uniform_int_distribution<std::size_t> dim(opt.d_min, opt.d_max);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Instance inst;
  const std::size_t L = len(rng), d = dim(rng);
  auto& r = inst.record;
  r.sample_id = "gc" + std::to_string(stream);
  r.hidden = Tensor(L, d);
  for (auto& v : r.hidden.data()) v = u(rng);
  r.attention = Tensor(L, L);
  for (std::size_t i = 0; i < L; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) s += (r.attention(i, j) = std::exp(normal(rng)));
    for (std::size_t j = 0; j <= i; ++j) r.attention(i, j) /= s;
  }
  r.label = rng() % 2 == 0 ? dataio::Label::Fact : dataio::Label::Hallucination;

  detector::DetectorConfig cfg = opt.model;
  cfg.input_dim = d;
  cfg.seed = rng();
  inst.params = detector::init_params(cfg);
  inst.params.for_each([&](const std::string& name, Tensor& t, bool) {
    const double amount = name.rfind("gate.", 0) == 0 ? 0.5 : 0.2;
    for (auto& v : t.data()) v += amount * u(rng);
  });
  return inst;
}

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  if (k == 0 || k >= n) return all;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

/// Tensors a check perturbs: A, H, then every trainable parameter in declaration order.
inline std::vector<std::pair<std::string, Tensor*>> slots(Instance& inst) {
  std::vector<std::pair<std::string, Tensor*>> out{{"A", &inst.record.attention}, {"H", &inst.record.hidden}};
  inst.params.for_each([&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) out.emplace_back(name, &t);
  });
  return out;
}

}  // namespace detail

/// Runs every check on `opt.trials` instances. An instance whose finite-difference
/// probes cross a non-differentiable point (relu/clamp/abs kink, max-pool routing)
/// is discarded and redrawn; the count is reported.
inline Report run(const Options& opt, const std::function<void(const std::string&)>& log = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Report report;
  std::uint64_t stream = 0;
  for (std::size_t trial = 0; trial < opt.trials; ++trial) {
    for (std::size_t attempt = 0;; ++attempt, ++stream) {
      if (attempt > opt.max_redraws) throw NumericError("gradcheck: no kink-free instance found");
      Instance inst = draw_instance(opt, stream);
      Rng coord_rng(derive_seed(opt.seed, {hash_string("coords"), stream}));

      detector::ForwardOptions fo;
      fo.mode = detector::Mode::Train;
      fo.differentiable = true;
      auto base = detector::forward_full(inst.record, inst.params, fo);
      engine::Tape& tape = *base.tape;
      const Tensor gate_s = base.sensitivity.value();
      detector::ForwardOptions po;
      po.mode = detector::Mode::Train;
      po.gate_sensitivity = &gate_s;
      std::vector<std::int32_t> base_sig;
      {
        auto plain = detector::forward_full(inst.record, inst.params, po);
        base_sig = plain.tape->kink_signature(plain.loss.id());
      }

      std::vector<engine::Var> wrt{base.attention, base.hidden};
      for (std::size_t i = 0; i < base.params.all.size(); ++i)
        if (base.params.all[i].requires_grad()) wrt.push_back(base.params.all[i]);
      const std::vector<Tensor> grads = tape.backward(base.loss, wrt);
      // d ||S||^2 / d theta through the gradient graph.
      std::vector<engine::Var> theta(wrt.begin() + 2, wrt.end());
      const std::vector<Tensor> reg_grads = tape.backward(base.reg, theta);

      bool kinked = false;
      std::vector<Check> checks;
      const auto all_slots = detail::slots(inst);
      for (std::size_t s = 0; s < all_slots.size() && !kinked; ++s) {
        const auto& [slot_name, slot_tensor] = all_slots[s];
        Tensor& target = *slot_tensor;
        const bool full = s < 2;  // every coordinate of A and H
        const auto coords = detail::pick_coords(target.size(), full ? 0 : opt.coords_per_tensor, coord_rng);

        // Both the loss and ||S||^2 come out of every probe.
        auto eval = [&](double value, std::size_t c) {
          const double saved = target[c];
          target[c] = value;
          auto out = detector::forward_full(inst.record, inst.params, po);
          target[c] = saved;
          if (out.tape->kink_signature(out.loss.id()) != base_sig) kinked = true;
          const double loss = out.loss.value()[0], reg = out.reg.value()[0];
          if (!std::isfinite(loss) || !std::isfinite(reg)) throw NumericError("gradcheck: non-finite probe");
          return std::pair{loss, reg};
        };
        Tensor analytic(target.rows(), target.cols()), fd(target.rows(), target.cols());
        Tensor analytic2 = analytic, fd2 = fd;
        for (std::size_t c : coords) {
          const double x0 = target[c];
          const auto up = eval(x0 + opt.eps, c);
          const auto down = eval(x0 - opt.eps, c);
          fd[c] = (up.first - down.first) / (2.0 * opt.eps);
          fd2[c] = (up.second - down.second) / (2.0 * opt.eps);
          analytic[c] = grads[s][c];
          if (s >= 2) analytic2[c] = reg_grads[s - 2][c];
        }
        const std::string prefix = "trial " + std::to_string(trial) + " ";
        checks.push_back({prefix + "dloss/d" + slot_name, engine::relative_error(analytic, fd), opt.first_order_tol,
                          coords.size()});
        if (s >= 2) {
          checks.push_back({prefix + "second-order d||S||^2/d" + slot_name, engine::relative_error(analytic2, fd2),
                            opt.second_order_tol, coords.size()});
        }
      }
      if (kinked) {
        ++report.redraws;
        if (log) log("trial " + std::to_string(trial) + ": probe crossed a kink, redrawing");
        continue;
      }
      for (auto& c : checks) report.checks.push_back(std::move(c));
      if (log) {
        double w = 0.0;
        for (const auto& c : checks) w = std::max(w, c.max_rel_error);
        log("trial " + std::to_string(trial) + ": L=" + std::to_string(inst.record.length()) +
            " d=" + std::to_string(inst.record.dim()) + " worst rel err " + std::to_string(w));
      }
      ++stream;
      break;
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace causalgaze::gradcheck
