#pragma once

// Feature alignment: generator G (original features -> h), discriminator D
// (p -> (0,1)^p), the classifier head F, and the three losses that tie them
// together. Batches are row-major in the sense of one sample per matrix row.

#include "fafcnn/common.hpp"

#include <nlohmann/json_fwd.hpp>

namespace fafcnn::fam {

enum class Activation { identity, relu, sigmoid };

std::string_view to_string(Activation act);
Activation parse_activation(std::string_view name);

/// Two-layer perceptron: out = act_out(W2 relu(W1 x + b1) + b2).
struct Mlp {
    Matrix w1;  // hidden x in
    Vector b1;
    Matrix w2;  // out x hidden
    Vector b2;
    Activation output = Activation::identity;

    std::size_t input_dim() const { return static_cast<std::size_t>(w1.cols()); }
    std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.rows()); }
    std::size_t output_dim() const { return static_cast<std::size_t>(w2.rows()); }

    /// He-scaled Gaussian weights, zero biases.
    static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Activation output, Rng& rng);
    /// Same shapes, all zeros; used for gradient accumulators.
    Mlp zeros_like() const;
    static std::size_t count(std::size_t in, std::size_t hidden, std::size_t out) {
        return hidden * in + hidden + out * hidden + out;
    }

    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;
};

using GeneratorParams = Mlp;      // phi: d -> H1 -> p, ReLU hidden layer, configurable output
using DiscriminatorParams = Mlp;  // theta: p -> H_D -> p, sigmoid output

struct ClassifierParams {  // psi: p -> 1, sigmoid
    Vector weight;
    Vector bias;  // single entry

    static ClassifierParams zeros(std::size_t p);
    static ClassifierParams init(std::size_t p, Rng& rng);

    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;
};

struct MlpTrace {
    Matrix input;
    Matrix hidden_pre;
    Matrix output_pre;
    Matrix output;
};

Matrix mlp_forward(const Mlp& net, const Matrix& x, MlpTrace* trace = nullptr);

/// Backpropagates `upstream` (dL/d output) through a traced forward pass.
/// Parameter gradients are returned; the input gradient is written when requested.
Mlp mlp_backward(const Mlp& net, const MlpTrace& trace, const Matrix& upstream, Matrix* input_grad = nullptr);

GeneratorParams make_generator(std::size_t d, std::size_t hidden, std::size_t p, Rng& rng,
                               Activation output = Activation::relu);
DiscriminatorParams make_discriminator(std::size_t p, std::size_t hidden, Rng& rng);

Vector generator_forward(const GeneratorParams& phi, ConstVectorRef x);
Vector discriminator_forward(const DiscriminatorParams& theta, ConstVectorRef v);
double classifier_forward(const ClassifierParams& psi, ConstVectorRef v);
Vector classifier_forward(const ClassifierParams& psi, const Matrix& v);

inline constexpr double kProbabilityClamp = 1e-7;

template <class Grad>
struct LossAndGrad {
    double loss = 0.0;
    Grad grad;
};

/// L_D = -sum_i |D(h_i) - D(h_aug_i)|_1, rows paired by index.
double loss_discriminator(const DiscriminatorParams& theta, const Matrix& h, const Matrix& h_aug);
LossAndGrad<DiscriminatorParams> loss_discriminator_grad(const DiscriminatorParams& theta, const Matrix& h,
                                                         const Matrix& h_aug);

/// L_G = sum_i |D(G(x_i)) - 1|_1 with theta held fixed.
double loss_generator(const GeneratorParams& phi, const DiscriminatorParams& theta, const Matrix& x);

/// Mean clamped binary cross-entropy of F(h_i) against y_i.
double loss_aux(const ClassifierParams& psi, const Matrix& h, const Eigen::VectorXi& y);

struct AuxGrad {
    ClassifierParams psi;
    Matrix h;  // dL/dh, one row per sample
};
LossAndGrad<AuxGrad> loss_aux_grad(const ClassifierParams& psi, const Matrix& h, const Eigen::VectorXi& y);

struct GeneratorObjective {
    double total = 0.0;  // L_aux + beta * L_G
    double aux = 0.0;
    double adversarial = 0.0;
    GeneratorParams grad;  // w.r.t. phi only
};

/// L_2 = L_aux(F(G(x))) + beta * L_G, differentiated with respect to phi.
GeneratorObjective generator_objective(const GeneratorParams& phi, const DiscriminatorParams& theta,
                                       const ClassifierParams& psi, const Matrix& x, const Eigen::VectorXi& y,
                                       double beta);

/// Per-sample |D(h_i) - D(h_aug_i)|_1 for collapse monitoring.
Vector discriminator_gaps(const DiscriminatorParams& theta, const Matrix& h, const Matrix& h_aug);

nlohmann::json to_json(const Mlp& net);
Mlp mlp_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ClassifierParams& psi);
ClassifierParams classifier_from_json(const nlohmann::json& j);

}  // namespace fafcnn::fam
