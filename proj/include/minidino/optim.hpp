// Copyright 2025 the minidino authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "minidino/serialize.hpp"
#include "minidino/tensor.hpp"
#include "minidino/vit.hpp"

namespace minidino {

// Constant-rate regime: linear warmup into a flat learning rate and teacher
// temperature, with weight decay and EMA momentum held constant throughout.
struct ScheduleConfig {
  double base_lr = 4e-4;
  int warmup_steps = 1000;
  double weight_decay = 0.04;
  double layerwise_decay = 0.98;
  double ema_momentum = 0.999;
  int total_steps = 10000;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  double student_temp = 0.1;

  void validate() const {
    if (warmup_steps < 0 || warmup_steps > total_steps)
      throw ConfigError("schedule: warmup_steps must be in [0, total_steps]");
    if (ema_momentum <= 0.0 || ema_momentum >= 1.0)
      throw ConfigError("schedule: ema_momentum must be in (0, 1)");
    if (base_lr < 0) throw ConfigError("schedule: base_lr must be >= 0");
  }
};

struct ScheduleValues {
  double lr = 0;
  double teacher_temp = 0;
  double wd = 0;
  double ema_momentum = 0;
};

inline ScheduleValues schedule_at(std::int64_t step,
                                  const ScheduleConfig& cfg) {
  ScheduleValues v;
  const double frac =
      cfg.warmup_steps > 0
          ? std::min(1.0, (double)step / (double)cfg.warmup_steps)
          : 1.0;
  v.lr = cfg.base_lr * frac;
  v.teacher_temp = cfg.teacher_temp_start +
                   (cfg.teacher_temp_end - cfg.teacher_temp_start) * frac;
  v.wd = cfg.weight_decay;
  v.ema_momentum = cfg.ema_momentum;
  return v;
}

// Decoupled-weight-decay Adam. Weight decay applies to rank>=2 tensors only;
// the per-layer learning rate is lr * layerwise_decay^(depth - layer).
template <typename T>
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void attach(const std::vector<ParamRef<T>>& params, int depth) {
    depth_ = depth;
    for (const auto& p : params) {
      Slot s;
      s.name = p.name;
      s.param = p.tensor;
      s.layer = p.layer;
      s.decay = p.tensor->rank() >= 2;
      s.m.assign(p.tensor->numel(), T(0));
      s.v.assign(p.tensor->numel(), T(0));
      slots_.push_back(std::move(s));
    }
  }

  void step(double lr, double wd, double layer_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, (double)t_);
    const double bc2 = 1.0 - std::pow(beta2, (double)t_);
    for (auto& s : slots_) {
      const double lr_l =
          lr * std::pow(layer_decay, (double)(depth_ - std::min(s.layer,
                                                                depth_)));
      const T* g = s.param->grad();
      T* w = s.param->data();
      const std::int64_t n = s.param->numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const double gi = (double)g[i];
        s.m[i] = (T)(beta1 * (double)s.m[i] + (1.0 - beta1) * gi);
        s.v[i] = (T)(beta2 * (double)s.v[i] + (1.0 - beta2) * gi * gi);
        const double mhat = (double)s.m[i] / bc1;
        const double vhat = (double)s.v[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + eps);
        if (s.decay) upd += wd * (double)w[i];
        w[i] = (T)((double)w[i] - lr_l * upd);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param->zero_grad();
  }

  std::int64_t step_count() const { return t_; }

  void save(TensorStore& store, const std::string& prefix) const {
    for (const auto& s : slots_) {
      Tensor<T> m = Tensor<T>::from_vec({(std::int64_t)s.m.size()}, s.m);
      Tensor<T> v = Tensor<T>::from_vec({(std::int64_t)s.v.size()}, s.v);
      if constexpr (std::is_same_v<T, float>) {
        store.put_f32(prefix + "/m/" + s.name, m);
        store.put_f32(prefix + "/v/" + s.name, v);
      } else {
        store.put_f64(prefix + "/m/" + s.name, m);
        store.put_f64(prefix + "/v/" + s.name, v);
      }
    }
    store.put_text(prefix + "/t", std::to_string(t_));
  }

  void load(const TensorStore& store, const std::string& prefix) {
    for (auto& s : slots_) {
      Tensor<T> m = Tensor<T>::from_vec({(std::int64_t)s.m.size()}, s.m);
      Tensor<T> v = Tensor<T>::from_vec({(std::int64_t)s.v.size()}, s.v);
      store.load_into(prefix + "/m/" + s.name, m);
      store.load_into(prefix + "/v/" + s.name, v);
      std::copy(m.data(), m.data() + m.numel(), s.m.begin());
      std::copy(v.data(), v.data() + v.numel(), s.v.begin());
    }
    t_ = std::stoll(store.get_text(prefix + "/t"));
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T>* param;
    int layer;
    bool decay;
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  std::int64_t t_ = 0;
  int depth_ = 0;
};

// theta_T <- m * theta_T + (1 - m) * theta_S over two matching parameter
// trees. Mismatched names or shapes are an error.
template <typename T>
void ema_update(std::vector<ParamRef<T>> teacher,
                std::vector<ParamRef<T>> student, T momentum) {
  if (teacher.size() != student.size())
    throw ShapeError("ema_update: parameter tree size mismatch, " +
                     std::to_string(teacher.size()) + " vs " +
                     std::to_string(student.size()));
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].name != student[i].name ||
        teacher[i].tensor->shape != student[i].tensor->shape)
      throw ShapeError("ema_update: tree mismatch at '" + teacher[i].name +
                       "' vs '" + student[i].name + "'");
    kernels::ema(momentum, teacher[i].tensor->data(),
                 student[i].tensor->data(), teacher[i].tensor->numel());
  }
}

}  // namespace minidino
