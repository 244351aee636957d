#pragma once

#include <occloff/rng.hpp>
#include <occloff/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace occloff {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

enum class Init { kZero, kOne, kXavier, kNormalSmall };

/// Named parameter registry. Initialization is keyed by (seed, name) so the
/// values do not depend on registration order.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  ad::Ptr<T> add(const std::string& name, std::vector<ad::Index> shape, Init init,
                 double fan_in = 0, double fan_out = 0) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    auto t = std::make_shared<ad::Tensor<T>>();
    t->shape = std::move(shape);
    t->val.assign(static_cast<size_t>(ad::numel(t->shape)), T(0));
    t->grad.assign(t->val.size(), T(0));
    t->needs_grad = true;
    Rng rng = Rng::fork(seed_, fnv1a(name));
    switch (init) {
      case Init::kZero:
        break;
      case Init::kOne:
        for (auto& v : t->val) v = T(1);
        break;
      case Init::kXavier: {
        if (fan_in <= 0) fan_in = static_cast<double>(t->shape[0]);
        if (fan_out <= 0) fan_out = static_cast<double>(t->shape.size() > 1 ? t->shape[1] : 1);
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : t->val) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case Init::kNormalSmall:
        for (auto& v : t->val) v = static_cast<T>(rng.normal(0.0, 0.1));
        break;
    }
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(t);
    return t;
  }

  ad::Ptr<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return tensors_[it->second];
  }

  size_t count() const { return tensors_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  const ad::Ptr<T>& tensor(size_t i) const { return tensors_[i]; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& t : tensors_) n += t->size();
    return n;
  }

  void zero_grads() {
    for (auto& t : tensors_) std::fill(t->grad.begin(), t->grad.end(), T(0));
  }

  /// Copy parameter values from another store with identical layout.
  void copy_values_from(const ParamStore<T>& other) {
    if (other.count() != count()) throw std::invalid_argument("ParamStore: layout mismatch");
    for (size_t i = 0; i < tensors_.size(); ++i) {
      if (names_[i] != other.names_[i] || tensors_[i]->shape != other.tensors_[i]->shape)
        throw std::invalid_argument("ParamStore: layout mismatch at " + names_[i]);
      tensors_[i]->val = other.tensors_[i]->val;
    }
  }

  /// Add another store's gradients into this one (fixed order reduction).
  void accumulate_grads_from(const ParamStore<T>& other) {
    for (size_t i = 0; i < tensors_.size(); ++i)
      for (ad::Index e = 0; e < tensors_[i]->size(); ++e)
        tensors_[i]->grad[e] += other.tensors_[i]->grad[e];
  }

 private:
  uint64_t seed_;
  std::vector<std::string> names_;
  std::vector<ad::Ptr<T>> tensors_;
  std::unordered_map<std::string, size_t> index_;
};

/// AdamW: Adam moments plus decoupled weight decay applied directly to the
/// parameter values.
template <typename T>
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(ParamStore<T>& params) {
    m_.clear();
    v_.clear();
    for (size_t i = 0; i < params.count(); ++i) {
      m_.emplace_back(params.tensor(i)->size(), 0.0);
      v_.emplace_back(params.tensor(i)->size(), 0.0);
    }
    step_ = 0;
  }

  void step(ParamStore<T>& params) {
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, step_);
    double bc2 = 1.0 - std::pow(beta2_, step_);
    for (size_t i = 0; i < params.count(); ++i) {
      auto& t = *params.tensor(i);
      for (ad::Index e = 0; e < t.size(); ++e) {
        double g = static_cast<double>(t.grad[e]);
        m_[i][e] = beta1_ * m_[i][e] + (1.0 - beta1_) * g;
        v_[i][e] = beta2_ * v_[i][e] + (1.0 - beta2_) * g * g;
        double mh = m_[i][e] / bc1;
        double vh = v_[i][e] / bc2;
        double x = static_cast<double>(t.val[e]);
        x -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * x);
        t.val[e] = static_cast<T>(x);
      }
    }
    params.zero_grads();
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  std::vector<std::vector<double>>& moment1() { return m_; }
  std::vector<std::vector<double>>& moment2() { return v_; }
  const std::vector<std::vector<double>>& moment1() const { return m_; }
  const std::vector<std::vector<double>>& moment2() const { return v_; }

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace occloff
