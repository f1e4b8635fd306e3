#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/numcore.hpp"
#include "oneactor/rng.hpp"

namespace oneactor {

/// Shape of the projector phi: a stem linear layer, `blocks` residual blocks
/// (linear -> batch norm -> SiLU -> linear, added back), an adaptive instance
/// normalization whose scale and shift are an affine map of the pooled
/// prompt, and one zero-initialized output layer emitting `outputs` offsets
/// of size embed_dim.
struct ProjectorSpec {
    std::size_t feature_dim = 128;
    std::size_t embed_dim = 8;
    std::size_t width = 64;
    std::size_t blocks = 5;
    std::size_t outputs = 1;
    bool batch_norm = true;
    double bn_momentum = 0.1;
    double norm_eps = 1e-5;

    std::size_t input_dim() const { return feature_dim + embed_dim; }
    std::size_t output_dim() const { return outputs * embed_dim; }
    bool operator==(const ProjectorSpec&) const = default;
};

/// Batch statistics during tuning, frozen running statistics at inference.
enum class NormMode { Batch, Running };

struct Projector {
    ProjectorSpec spec;
    ParamSet params;
    /// Running batch-norm statistics, one pair per residual block.
    std::vector<Vector> running_mean;
    std::vector<Vector> running_var;

    // Parameter layout: stem.W, stem.b, then per block W1, b1, gamma, beta,
    // W2, b2, then adain.W, adain.b, out.W, out.b.
    static constexpr std::size_t kPerBlock = 6;
    std::size_t block_base(std::size_t r) const { return 2 + kPerBlock * r; }
    std::size_t adain_base() const { return 2 + kPerBlock * spec.blocks; }
    std::size_t out_base() const { return adain_base() + 2; }
};

inline Projector make_projector(const ProjectorSpec& spec, Rng& rng) {
    if (spec.width == 0 || spec.outputs == 0 || spec.embed_dim == 0 || spec.feature_dim == 0)
        throw std::invalid_argument("projector: dimensions must be positive");
    auto glorot = [&](const std::string& name, std::size_t out, std::size_t in, double gain = 1.0) {
        ParamTensor p{name, {out, in}, std::vector<double>(out * in)};
        const double a = gain * std::sqrt(6.0 / static_cast<double>(in + out));
        for (double& x : p.data) x = a * (2.0 * rng.uniform() - 1.0);
        return p;
    };
    auto filled = [](const std::string& name, std::vector<std::size_t> shape, double v) {
        ParamTensor p{name, std::move(shape), {}};
        p.data.assign(p.numel(), v);
        return p;
    };
    const std::size_t w = spec.width;
    Projector proj{spec, {}, {}, {}};
    proj.params.push_back(glorot("stem.W", w, spec.input_dim()));
    proj.params.push_back(filled("stem.b", {w}, 0.0));
    for (std::size_t r = 0; r < spec.blocks; ++r) {
        const std::string pre = "block" + std::to_string(r) + ".";
        proj.params.push_back(glorot(pre + "W1", w, w));
        proj.params.push_back(filled(pre + "b1", {w}, 0.0));
        proj.params.push_back(filled(pre + "gamma", {w}, 1.0));
        proj.params.push_back(filled(pre + "beta", {w}, 0.0));
        proj.params.push_back(glorot(pre + "W2", w, w, 0.5));
        proj.params.push_back(filled(pre + "b2", {w}, 0.0));
        proj.running_mean.push_back(Vector::Zero(static_cast<Eigen::Index>(w)));
        proj.running_var.push_back(Vector::Ones(static_cast<Eigen::Index>(w)));
    }
    proj.params.push_back(glorot("adain.W", 2 * w, spec.embed_dim, 0.1));
    proj.params.push_back(filled("adain.b", {2 * w}, 0.0));
    proj.params.push_back(filled("out.W", {spec.output_dim(), w}, 0.0));
    proj.params.push_back(filled("out.b", {spec.output_dim()}, 0.0));
    return proj;
}

/// Forward intermediates for backprop.
struct ProjectorTrace {
    Matrix input;
    std::vector<Matrix> x;      // x[r]: residual stream entering block r; x[blocks] leaves the last block
    std::vector<Matrix> u;      // pre-normalization
    std::vector<Matrix> n;      // normalized
    std::vector<Vector> inv_sd; // per-feature 1/sqrt(var + eps) used by the block
    std::vector<Vector> batch_mean;
    std::vector<Vector> batch_var;  // biased
    std::vector<Matrix> q;      // gamma * n + beta
    std::vector<Matrix> a;      // SiLU(q)
    Matrix xhat;                // instance-normalized stream
    Eigen::RowVectorXd inst_inv_sd;
    Matrix scale;               // 1 + g(c)
    Matrix y;                   // AdaIN output
};

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_deriv(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

/// phi(h, c) for a batch: columns of `features` are h, columns of `conds` the
/// pooled prompt embeddings. Output rows hold `outputs` stacked offsets.
inline Matrix projector_forward_batch(const Projector& proj, const Matrix& features, const Matrix& conds, NormMode mode,
                                      ProjectorTrace* trace = nullptr) {
    const auto& sp = proj.spec;
    const auto& P = proj.params;
    if (static_cast<std::size_t>(features.rows()) != sp.feature_dim)
        throw std::invalid_argument("projector: feature vector has wrong dimension");
    if (static_cast<std::size_t>(conds.rows()) != sp.embed_dim || conds.cols() != features.cols())
        throw std::invalid_argument("projector: condition batch has wrong shape");
    const Eigen::Index B = features.cols();
    const auto w = static_cast<Eigen::Index>(sp.width);
    ProjectorTrace local;
    ProjectorTrace& tr = trace ? *trace : local;
    tr = ProjectorTrace{};
    tr.input.resize(static_cast<Eigen::Index>(sp.input_dim()), B);
    tr.input.topRows(features.rows()) = features;
    tr.input.bottomRows(conds.rows()) = conds;

    Matrix x = as_matrix(P[0]) * tr.input;
    x.colwise() += as_vector(P[1]);
    for (std::size_t r = 0; r < sp.blocks; ++r) {
        const std::size_t o = proj.block_base(r);
        tr.x.push_back(x);
        Matrix u = as_matrix(P[o]) * x;
        u.colwise() += as_vector(P[o + 1]);
        Matrix n;
        Vector inv_sd = Vector::Ones(w);
        if (sp.batch_norm) {
            Vector mean, var;
            if (mode == NormMode::Batch) {
                mean = u.rowwise().mean();
                var = (u.colwise() - mean).array().square().rowwise().mean();
            } else {
                mean = proj.running_mean.at(r);
                var = proj.running_var.at(r);
            }
            inv_sd = (var.array() + sp.norm_eps).rsqrt();
            n = (u.colwise() - mean).array().colwise() * inv_sd.array();
            tr.batch_mean.push_back(mean);
            tr.batch_var.push_back(var);
        } else {
            n = u;
        }
        Matrix q = n.array().colwise() * as_vector(P[o + 2]).array();
        q.colwise() += as_vector(P[o + 3]);
        Matrix a = q.unaryExpr([](double v) { return silu(v); });
        Matrix step = as_matrix(P[o + 4]) * a;
        step.colwise() += as_vector(P[o + 5]);
        x += step;
        tr.u.push_back(std::move(u));
        tr.n.push_back(std::move(n));
        tr.inv_sd.push_back(std::move(inv_sd));
        tr.q.push_back(std::move(q));
        tr.a.push_back(std::move(a));
    }
    tr.x.push_back(x);

    // Adaptive instance normalization over the feature axis of each column.
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Matrix centered = x.rowwise() - mu;
    const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    tr.inst_inv_sd = (var.array() + sp.norm_eps).rsqrt();
    tr.xhat = centered.array().rowwise() * tr.inst_inv_sd.array();
    const std::size_t ab = proj.adain_base();
    Matrix style = as_matrix(P[ab]) * conds;
    style.colwise() += as_vector(P[ab + 1]);
    tr.scale = (style.topRows(w).array() + 1.0).matrix();
    tr.y = (tr.scale.array() * tr.xhat.array()).matrix() + style.bottomRows(w);

    Matrix out = as_matrix(P[proj.out_base()]) * tr.y;
    out.colwise() += as_vector(P[proj.out_base() + 1]);
    return out;
}

/// Accumulates parameter gradients of sum(upstream .* output) into grads.
inline void projector_backward_batch(const Projector& proj, const ProjectorTrace& tr, const Matrix& conds,
                                     const Matrix& upstream, NormMode mode, ParamSet& grads) {
    const auto& sp = proj.spec;
    const auto& P = proj.params;
    const auto w = static_cast<Eigen::Index>(sp.width);
    const std::size_t ob = proj.out_base();
    const std::size_t ab = proj.adain_base();

    as_matrix(grads[ob]).noalias() += upstream * tr.y.transpose();
    as_vector(grads[ob + 1]) += upstream.rowwise().sum();
    const Matrix dy = as_matrix(P[ob]).transpose() * upstream;

    Matrix dstyle(2 * w, dy.cols());
    dstyle.topRows(w) = (dy.array() * tr.xhat.array()).matrix();
    dstyle.bottomRows(w) = dy;
    as_matrix(grads[ab]).noalias() += dstyle * conds.transpose();
    as_vector(grads[ab + 1]) += dstyle.rowwise().sum();

    const Matrix dxhat = (dy.array() * tr.scale.array()).matrix();
    const Eigen::RowVectorXd m1 = dxhat.colwise().mean();
    const Eigen::RowVectorXd m2 = (dxhat.array() * tr.xhat.array()).colwise().mean();
    Matrix dx = ((dxhat.rowwise() - m1).array() - tr.xhat.array().rowwise() * m2.array()).rowwise() *
                tr.inst_inv_sd.array();

    for (std::size_t r = sp.blocks; r-- > 0;) {
        const std::size_t o = proj.block_base(r);
        as_matrix(grads[o + 4]).noalias() += dx * tr.a[r].transpose();
        as_vector(grads[o + 5]) += dx.rowwise().sum();
        const Matrix da = as_matrix(P[o + 4]).transpose() * dx;
        const Matrix dq = (da.array() * tr.q[r].unaryExpr([](double v) { return silu_deriv(v); }).array()).matrix();
        as_vector(grads[o + 2]) += (dq.array() * tr.n[r].array()).rowwise().sum().matrix();
        as_vector(grads[o + 3]) += dq.rowwise().sum();
        const Matrix dn = dq.array().colwise() * as_vector(P[o + 2]).array();
        Matrix du;
        if (!sp.batch_norm) {
            du = dn;
        } else if (mode == NormMode::Running) {
            du = dn.array().colwise() * tr.inv_sd[r].array();
        } else {
            const Vector mean_dn = dn.rowwise().mean();
            const Vector mean_dn_n = (dn.array() * tr.n[r].array()).rowwise().mean();
            du = ((dn.colwise() - mean_dn).array() - tr.n[r].array().colwise() * mean_dn_n.array()).colwise() *
                 tr.inv_sd[r].array();
        }
        as_matrix(grads[o]).noalias() += du * tr.x[r].transpose();
        as_vector(grads[o + 1]) += du.rowwise().sum();
        dx += as_matrix(P[o]).transpose() * du;
    }
    as_matrix(grads[0]).noalias() += dx * tr.input.transpose();
    as_vector(grads[1]) += dx.rowwise().sum();
}

/// Folds the batch statistics of a tuning step into the running estimates
/// (exponential moving average, unbiased variance).
inline void update_running_stats(Projector& proj, const ProjectorTrace& tr, Eigen::Index batch) {
    if (!proj.spec.batch_norm) return;
    const double m = proj.spec.bn_momentum;
    const double unbias = batch > 1 ? static_cast<double>(batch) / static_cast<double>(batch - 1) : 1.0;
    for (std::size_t r = 0; r < proj.spec.blocks; ++r) {
        proj.running_mean[r] = (1.0 - m) * proj.running_mean[r] + m * tr.batch_mean[r];
        proj.running_var[r] = (1.0 - m) * proj.running_var[r] + m * unbias * tr.batch_var[r];
    }
}

/// Offsets for one (h, c) pair, split per output slot.
inline std::vector<Vector> projector_forward(const Projector& proj, const Vector& h, const Vector& pooled_c,
                                             NormMode mode = NormMode::Running) {
    const Matrix out = projector_forward_batch(proj, Matrix(h), Matrix(pooled_c), mode);
    std::vector<Vector> deltas;
    const auto m = static_cast<Eigen::Index>(proj.spec.embed_dim);
    for (std::size_t j = 0; j < proj.spec.outputs; ++j) deltas.push_back(out.col(0).segment(static_cast<Eigen::Index>(j) * m, m));
    return deltas;
}

} // namespace oneactor
