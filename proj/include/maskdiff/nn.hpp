#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "maskdiff/autograd.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

// Named trainable array. bind() attaches the parameter to the current step's
// graph; training code binds trainable parameters as leaves and everything
// else as constants.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    ag::Var<T> var;

    void bind(bool trainable) {
        var = trainable ? ag::leaf(value) : ag::constant(value);
    }

    bool has_grad() const { return var && !var->grad.v.empty(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

// Sinusoidal timestep embedding, [1, dim]. dim must be even.
template <typename T>
Tensor<T> sinusoidal_embedding(double t, int dim) {
    Tensor<T> out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[i] = static_cast<T>(std::sin(t * freq));
        out[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

// Fixed 2-D sinusoidal positional encoding, [h*w, channels]. The first half of
// the channels encodes y, the second half x. channels must be divisible by 4.
template <typename T>
Tensor<T> positional_encoding_2d(int channels, int h, int w) {
    if (channels % 4 != 0) throw argument_error("positional_encoding_2d: channels % 4 != 0");
    Tensor<T> out({h * w, channels});
    const int quarter = channels / 4;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int q = y * w + x;
            for (int k = 0; k < quarter; ++k) {
                const double freq =
                    std::exp(-std::log(10000.0) * static_cast<double>(k) / quarter);
                out.at(q, 2 * k) = static_cast<T>(std::sin(y * freq));
                out.at(q, 2 * k + 1) = static_cast<T>(std::cos(y * freq));
                out.at(q, channels / 2 + 2 * k) = static_cast<T>(std::sin(x * freq));
                out.at(q, channels / 2 + 2 * k + 1) = static_cast<T>(std::cos(x * freq));
            }
        }
    }
    return out;
}

// Adam with decoupled weight decay. Decay applies to every optimized
// parameter each step, gradient or not.
template <typename T>
class Adam {
  public:
    Adam(double lr, double beta1, double beta2, double weight_decay, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {}

    void step(const ParamRefs<T>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (Param<T>* p : params) {
            State& st = state_[p];
            if (st.m.v.empty()) {
                st.m = Tensor<T>::zeros(p->value.shape);
                st.v = Tensor<T>::zeros(p->value.shape);
            }
            const bool has_grad = p->has_grad();
            for (long long i = 0; i < p->value.numel(); ++i) {
                const double g = has_grad ? static_cast<double>(p->var->grad[i]) : 0.0;
                double m = beta1_ * static_cast<double>(st.m[i]) + (1.0 - beta1_) * g;
                double v = beta2_ * static_cast<double>(st.v[i]) + (1.0 - beta2_) * g * g;
                st.m[i] = static_cast<T>(m);
                st.v[i] = static_cast<T>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                const double upd = mhat / (std::sqrt(vhat) + eps_);
                const double decay = wd_ * static_cast<double>(p->value[i]);
                p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) -
                                             lr_ * (upd + decay));
            }
        }
    }

    double learning_rate() const { return lr_; }

  private:
    struct State {
        Tensor<T> m, v;
    };
    double lr_, beta1_, beta2_, wd_, eps_;
    long t_ = 0;
    std::unordered_map<Param<T>*, State> state_;
};

// Kaiming-style init helpers used across the model.
template <typename T>
Tensor<T> init_conv_weight(int co, int ci, int kh, int kw, Rng& rng) {
    const double fan_in = static_cast<double>(ci) * kh * kw;
    const T std = static_cast<T>(std::sqrt(2.0 / fan_in));
    return Tensor<T>::randn({co, ci, kh, kw}, rng, std);
}

template <typename T>
Tensor<T> init_linear_weight(int dout, int din, Rng& rng) {
    const T std = static_cast<T>(std::sqrt(1.0 / static_cast<double>(din)));
    return Tensor<T>::randn({dout, din}, rng, std);
}

}  // namespace maskdiff
