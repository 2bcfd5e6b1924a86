#include "fafcnn/fam.hpp"

#include "fafcnn/params.hpp"

#include <cmath>

namespace fafcnn::fam {
namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        for (Eigen::Index r = 0; r < rows; ++r) {
            m(r, c) = stddev * rng.normal();
        }
    }
    return m;
}

Matrix activate(const Matrix& pre, Activation act) {
    switch (act) {
        case Activation::relu:
            return pre.cwiseMax(0.0);
        case Activation::sigmoid:
            return pre.unaryExpr([](double z) { return sigmoid(z); });
        case Activation::identity:
            break;
    }
    return pre;
}

}  // namespace

std::string_view to_string(Activation act) {
    switch (act) {
        case Activation::relu:
            return "relu";
        case Activation::sigmoid:
            return "sigmoid";
        case Activation::identity:
            break;
    }
    return "identity";
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") {
        return Activation::relu;
    }
    if (name == "sigmoid") {
        return Activation::sigmoid;
    }
    if (name == "identity") {
        return Activation::identity;
    }
    throw DataError("unknown activation '" + std::string(name) + "'");
}

namespace {

Matrix as_row(ConstVectorRef v) { return v.transpose(); }

}  // namespace

Mlp Mlp::init(std::size_t in, std::size_t hidden, std::size_t out, Activation output, Rng& rng) {
    const auto i = static_cast<Eigen::Index>(in);
    const auto h = static_cast<Eigen::Index>(hidden);
    const auto o = static_cast<Eigen::Index>(out);
    Mlp net;
    net.w1 = gaussian(h, i, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(in, 1))), rng);
    net.b1 = Vector::Zero(h);
    net.w2 = gaussian(o, h, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(hidden, 1))), rng);
    net.b2 = Vector::Zero(o);
    net.output = output;
    return net;
}

Mlp Mlp::zeros_like() const {
    return {Matrix::Zero(w1.rows(), w1.cols()), Vector::Zero(b1.size()), Matrix::Zero(w2.rows(), w2.cols()),
            Vector::Zero(b2.size()), output};
}

std::vector<std::span<double>> Mlp::tensors() {
    return {span_of(w1), span_of(b1), span_of(w2), span_of(b2)};
}

std::vector<std::span<const double>> Mlp::tensors() const {
    return {span_of(w1), span_of(b1), span_of(w2), span_of(b2)};
}

ClassifierParams ClassifierParams::zeros(std::size_t p) {
    return {Vector::Zero(static_cast<Eigen::Index>(p)), Vector::Zero(1)};
}

ClassifierParams ClassifierParams::init(std::size_t p, Rng& rng) {
    return {gaussian(static_cast<Eigen::Index>(p), 1, 0.1, rng).col(0), Vector::Zero(1)};
}

std::vector<std::span<double>> ClassifierParams::tensors() { return {span_of(weight), span_of(bias)}; }

std::vector<std::span<const double>> ClassifierParams::tensors() const {
    return {span_of(weight), span_of(bias)};
}

Matrix mlp_forward(const Mlp& net, const Matrix& x, MlpTrace* trace) {
    if (static_cast<std::size_t>(x.cols()) != net.input_dim()) {
        throw std::invalid_argument("mlp_forward: input width mismatch");
    }
    Matrix hidden_pre = (x * net.w1.transpose()).rowwise() + net.b1.transpose();
    Matrix output_pre = (hidden_pre.cwiseMax(0.0) * net.w2.transpose()).rowwise() + net.b2.transpose();
    Matrix output = activate(output_pre, net.output);
    if (trace != nullptr) {
        trace->input = x;
        trace->hidden_pre = std::move(hidden_pre);
        trace->output_pre = std::move(output_pre);
        trace->output = output;
    }
    return output;
}

Mlp mlp_backward(const Mlp& net, const MlpTrace& trace, const Matrix& upstream, Matrix* input_grad) {
    Matrix d_out_pre;
    switch (net.output) {
        case Activation::relu:
            d_out_pre = upstream.cwiseProduct((trace.output_pre.array() > 0.0).cast<double>().matrix());
            break;
        case Activation::sigmoid:
            d_out_pre = upstream.cwiseProduct(
                trace.output.cwiseProduct((1.0 - trace.output.array()).matrix()));
            break;
        case Activation::identity:
            d_out_pre = upstream;
            break;
    }
    Mlp grad = net.zeros_like();
    const Matrix hidden = trace.hidden_pre.cwiseMax(0.0);
    grad.w2 = d_out_pre.transpose() * hidden;
    grad.b2 = d_out_pre.colwise().sum().transpose();
    const Matrix d_hidden =
        (d_out_pre * net.w2).cwiseProduct((trace.hidden_pre.array() > 0.0).cast<double>().matrix());
    grad.w1 = d_hidden.transpose() * trace.input;
    grad.b1 = d_hidden.colwise().sum().transpose();
    if (input_grad != nullptr) {
        *input_grad = d_hidden * net.w1;
    }
    return grad;
}

GeneratorParams make_generator(std::size_t d, std::size_t hidden, std::size_t p, Rng& rng, Activation output) {
    return Mlp::init(d, hidden, p, output, rng);
}

DiscriminatorParams make_discriminator(std::size_t p, std::size_t hidden, Rng& rng) {
    return Mlp::init(p, hidden, p, Activation::sigmoid, rng);
}

Vector generator_forward(const GeneratorParams& phi, ConstVectorRef x) {
    return mlp_forward(phi, as_row(x)).row(0).transpose();
}

Vector discriminator_forward(const DiscriminatorParams& theta, ConstVectorRef v) {
    return mlp_forward(theta, as_row(v)).row(0).transpose();
}

double classifier_forward(const ClassifierParams& psi, ConstVectorRef v) {
    return sigmoid(psi.weight.dot(v) + psi.bias(0));
}

Vector classifier_forward(const ClassifierParams& psi, const Matrix& v) {
    Vector logits = v * psi.weight;
    return logits.unaryExpr([&](double z) { return sigmoid(z + psi.bias(0)); });
}

double loss_discriminator(const DiscriminatorParams& theta, const Matrix& h, const Matrix& h_aug) {
    return -discriminator_gaps(theta, h, h_aug).sum();
}

LossAndGrad<DiscriminatorParams> loss_discriminator_grad(const DiscriminatorParams& theta, const Matrix& h,
                                                         const Matrix& h_aug) {
    if (h.rows() != h_aug.rows()) {
        throw std::invalid_argument("loss_discriminator: h and h_aug must pair row by row");
    }
    MlpTrace trace_h;
    MlpTrace trace_aug;
    const Matrix d_h = mlp_forward(theta, h, &trace_h);
    const Matrix d_aug = mlp_forward(theta, h_aug, &trace_aug);
    const Matrix gap = d_h - d_aug;
    const Matrix sign = gap.unaryExpr([](double v) { return l1_sign(v); });

    LossAndGrad<DiscriminatorParams> out;
    out.loss = -gap.cwiseAbs().sum();
    out.grad = mlp_backward(theta, trace_h, -sign);
    const Mlp other = mlp_backward(theta, trace_aug, sign);
    out.grad.w1 += other.w1;
    out.grad.b1 += other.b1;
    out.grad.w2 += other.w2;
    out.grad.b2 += other.b2;
    return out;
}

double loss_generator(const GeneratorParams& phi, const DiscriminatorParams& theta, const Matrix& x) {
    const Matrix d = mlp_forward(theta, mlp_forward(phi, x));
    return (d.array() - 1.0).abs().sum();
}

double loss_aux(const ClassifierParams& psi, const Matrix& h, const Eigen::VectorXi& y) {
    if (h.rows() != y.size() || h.rows() == 0) {
        throw std::invalid_argument("loss_aux: batch/label size mismatch");
    }
    const Vector prob = classifier_forward(psi, h);
    double total = 0.0;
    for (Eigen::Index i = 0; i < prob.size(); ++i) {
        const double p = std::clamp(prob(i), kProbabilityClamp, 1.0 - kProbabilityClamp);
        total += y(i) == 1 ? std::log(p) : std::log(1.0 - p);
    }
    return -total / static_cast<double>(prob.size());
}

LossAndGrad<AuxGrad> loss_aux_grad(const ClassifierParams& psi, const Matrix& h, const Eigen::VectorXi& y) {
    LossAndGrad<AuxGrad> out;
    out.loss = loss_aux(psi, h, y);
    const Vector prob = classifier_forward(psi, h);
    const auto n = static_cast<double>(h.rows());
    Vector d_logit(prob.size());
    for (Eigen::Index i = 0; i < prob.size(); ++i) {
        const double p = prob(i);
        // Zero slope where the clamp is active, matching the clamped loss exactly.
        const bool inside = p > kProbabilityClamp && p < 1.0 - kProbabilityClamp;
        d_logit(i) = inside ? (p - static_cast<double>(y(i))) / n : 0.0;
    }
    out.grad.psi.weight = h.transpose() * d_logit;
    out.grad.psi.bias = Vector::Constant(1, d_logit.sum());
    out.grad.h = d_logit * psi.weight.transpose();
    return out;
}

GeneratorObjective generator_objective(const GeneratorParams& phi, const DiscriminatorParams& theta,
                                       const ClassifierParams& psi, const Matrix& x, const Eigen::VectorXi& y,
                                       double beta) {
    MlpTrace gen_trace;
    const Matrix h = mlp_forward(phi, x, &gen_trace);
    const auto aux = loss_aux_grad(psi, h, y);

    GeneratorObjective out;
    out.aux = aux.loss;
    Matrix d_h = aux.grad.h;
    if (beta != 0.0) {
        MlpTrace disc_trace;
        const Matrix d = mlp_forward(theta, h, &disc_trace);
        out.adversarial = (d.array() - 1.0).abs().sum();
        const Matrix upstream = (d.array() - 1.0).matrix().unaryExpr([](double v) { return l1_sign(v); });
        Matrix d_h_adv;
        mlp_backward(theta, disc_trace, upstream, &d_h_adv);
        d_h += beta * d_h_adv;
    } else {
        out.adversarial = loss_generator(phi, theta, x);
    }
    out.total = out.aux + beta * out.adversarial;
    out.grad = mlp_backward(phi, gen_trace, d_h);
    return out;
}

Vector discriminator_gaps(const DiscriminatorParams& theta, const Matrix& h, const Matrix& h_aug) {
    if (h.rows() != h_aug.rows()) {
        throw std::invalid_argument("discriminator_gaps: h and h_aug must pair row by row");
    }
    return (mlp_forward(theta, h) - mlp_forward(theta, h_aug)).cwiseAbs().rowwise().sum();
}

nlohmann::json to_json(const Mlp& net) {
    return {{"w1", matrix_to_json(net.w1)},
            {"b1", vector_to_json(net.b1)},
            {"w2", matrix_to_json(net.w2)},
            {"b2", vector_to_json(net.b2)},
            {"output", to_string(net.output)}};
}

Mlp mlp_from_json(const nlohmann::json& j) {
    return {matrix_from_json(j.at("w1")), vector_from_json(j.at("b1")), matrix_from_json(j.at("w2")),
            vector_from_json(j.at("b2")), parse_activation(j.at("output").get<std::string>())};
}

nlohmann::json to_json(const ClassifierParams& psi) {
    return {{"weight", vector_to_json(psi.weight)}, {"bias", vector_to_json(psi.bias)}};
}

ClassifierParams classifier_from_json(const nlohmann::json& j) {
    return {vector_from_json(j.at("weight")), vector_from_json(j.at("bias"))};
}

}  // namespace fafcnn::fam
