// Trainable building blocks shared by the sequence blocks and the decoder:
// linear projections, layer norm with learned affine, and the two-layer FFN.
#pragma once

#include <string>
#include <vector>

#include "qptad/autodiff.hpp"
#include "qptad/rng.hpp"

namespace qptad {

inline Tensor random_normal(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.v) x = rng.normal(0.0, stddev);
    return t;
}

struct LinearLayer {
    Parameter W;  // [in x out]
    Parameter b;  // [out]

    LinearLayer() = default;
    // stddev < 0 selects 1/sqrt(fan_in); stddev == 0 zero-initializes.
    LinearLayer(const std::string& name, int in, int out, Rng& rng, double stddev = -1.0) {
        const double s = stddev < 0.0 ? 1.0 / std::sqrt(static_cast<double>(in)) : stddev;
        W = Parameter(name + ".W", s == 0.0 ? Tensor({in, out}) : random_normal({in, out}, s, rng));
        b = Parameter(name + ".b", Tensor({out}));
    }

    Var operator()(const Var& x) const { return vlinear(x, Var::param(const_cast<Parameter&>(W)), Var::param(const_cast<Parameter&>(b))); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&W);
        out.push_back(&b);
    }
};

struct LayerNormLayer {
    Parameter gain;
    Parameter bias;
    double eps = 1e-5;

    LayerNormLayer() = default;
    LayerNormLayer(const std::string& name, int dim) {
        gain = Parameter(name + ".gain", Tensor({dim}, 1.0));
        bias = Parameter(name + ".bias", Tensor({dim}));
    }

    Var operator()(const Var& x) const {
        return vlayer_norm(x, Var::param(const_cast<Parameter&>(gain)), Var::param(const_cast<Parameter&>(bias)), eps);
    }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&gain);
        out.push_back(&bias);
    }
};

// Two-layer FFN with ReLU: x -> W2 relu(W1 x + b1) + b2.
struct FeedForward {
    LinearLayer fc1, fc2;

    FeedForward() = default;
    FeedForward(const std::string& name, int in, int hidden, int out, Rng& rng, double stddev_out = -1.0)
        : fc1(name + ".fc1", in, hidden, rng), fc2(name + ".fc2", hidden, out, rng, stddev_out) {}

    Var operator()(const Var& x) const { return fc2(vrelu(fc1(x))); }

    void collect(std::vector<Parameter*>& out) {
        fc1.collect(out);
        fc2.collect(out);
    }
};

}  // namespace qptad
