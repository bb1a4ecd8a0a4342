#include "trajprune/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "trajprune/errors.hpp"
#include "trajprune/textio.hpp"

namespace trajprune {

using Eigen::MatrixXd;
using Eigen::VectorXd;

HessianAccumulator::HessianAccumulator(int dim) {
    if (dim < 1) throw ParamError("Hessian dimension must be >= 1");
    h_ = MatrixXd::Zero(dim, dim);
}

void HessianAccumulator::add_batch(const Eigen::Ref<const MatrixXd>& rows) {
    if (rows.cols() != h_.rows())
        throw ParamError("activation rows have " + std::to_string(rows.cols()) +
                         " features, accumulator expects " +
                         std::to_string(h_.rows()));
    h_.noalias() += rows.transpose() * rows;
    samples_ += rows.rows();
}

void HessianAccumulator::merge(const HessianAccumulator& other) {
    if (other.dim() != dim())
        throw ParamError("cannot merge accumulators of different dimension");
    h_ += other.h_;
    samples_ += other.samples_;
}

MatrixXd HessianAccumulator::damped(double rel_damping) const {
    if (!(rel_damping >= 0.0)) throw ParamError("damping must be >= 0");
    MatrixXd hd = 0.5 * (h_ + h_.transpose());
    hd.diagonal().array() += rel_damping * hd.diagonal().mean();
    return hd;
}

bool GroupMask::is_pruned(int group) const {
    return std::binary_search(pruned.begin(), pruned.end(), group);
}

namespace {

void check_group_args(const MatrixXd& w, int dim, int group_size) {
    if (group_size < 1) throw ParamError("group_size must be >= 1");
    if (w.cols() != dim)
        throw ParamError("weight has " + std::to_string(w.cols()) +
                         " columns, Hessian has dimension " + std::to_string(dim));
    if (dim % group_size != 0)
        throw ParamError("group_size must divide the layer width");
}

// Cholesky of the group block of the maintained inverse; fails once the
// group has been eliminated (block is zero) or the inverse degenerates.
Eigen::LLT<MatrixXd> group_block_llt(const MatrixXd& h_inv, int group,
                                     int group_size) {
    MatrixXd a = h_inv.block(group * group_size, group * group_size, group_size,
                             group_size);
    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
        throw NumericalError("inverse-Hessian block for group " +
                             std::to_string(group) +
                             " is not positive definite (already eliminated?)");
    return llt;
}

}  // namespace

double group_saliency(const MatrixXd& w, const MatrixXd& h_inv, int group,
                      int group_size) {
    check_group_args(w, static_cast<int>(h_inv.rows()), group_size);
    int n_groups = static_cast<int>(h_inv.rows()) / group_size;
    if (group < 0 || group >= n_groups)
        throw ParamError("group index out of range");
    auto llt = group_block_llt(h_inv, group, group_size);
    MatrixXd wg_t = w.middleCols(group * group_size, group_size).transpose();
    MatrixXd solved = llt.solve(wg_t);  // ((H^-1)_GG)^-1 W_G^T
    return (wg_t.array() * solved.array()).sum();
}

PruneResult prune_layer(const MatrixXd& w, const HessianAccumulator& acc,
                        double sparsity, int group_size, const PruneOptions& opts) {
    check_group_args(w, acc.dim(), group_size);
    if (!(sparsity >= 0.0) || !(sparsity < 1.0))
        throw ParamError("sparsity must lie in [0, 1)");
    if (!w.allFinite()) throw NumericalError("weights are not finite");

    const int n = acc.dim();
    const int n_groups = n / group_size;
    const int n_prune = static_cast<int>(std::floor(sparsity * n_groups));

    PruneResult result;
    result.mask = {n_groups, group_size, {}};
    result.weights = w;
    if (n_prune == 0) return result;
    if (n_prune >= n_groups)
        throw ParamError("sparsity " + format_double(sparsity) +
                         " would remove every group");

    MatrixXd hd = acc.damped(opts.rel_damping);
    Eigen::LLT<MatrixXd> llt(hd);
    if (llt.info() != Eigen::Success)
        throw NumericalError(
            "damped Hessian is not positive definite; capture more calibration "
            "data or raise damping");
    MatrixXd h_inv = llt.solve(MatrixXd::Identity(n, n));

    std::vector<bool> pruned(static_cast<std::size_t>(n_groups), false);
    double cumulative = 0.0;
    for (int step = 1; step <= n_prune; ++step) {
        int best = -1;
        double best_sal = std::numeric_limits<double>::infinity();
        for (int g = 0; g < n_groups; ++g) {
            if (pruned[static_cast<std::size_t>(g)]) continue;
            double sal = group_saliency(result.weights, h_inv, g, group_size);
            if (sal < best_sal) {
                best_sal = sal;
                best = g;
            }
        }
        if (best < 0) throw NumericalError("no prunable group left");

        const int c0 = best * group_size;
        auto block_llt = group_block_llt(h_inv, best, group_size);

        // Compensate survivors: delta = -W_G ((H^-1)_GG)^-1 (H^-1)_{G,:}.
        // W_G must be copied out first: the destination of the update owns
        // the same storage, and noalias forbids that overlap.
        MatrixXd rows_g = h_inv.middleRows(c0, group_size);  // gs x n
        MatrixXd solve_rows = block_llt.solve(rows_g);       // ((H^-1)_GG)^-1 (H^-1)_{G,:}
        MatrixXd w_g = result.weights.middleCols(c0, group_size);
        result.weights.noalias() -= w_g * solve_rows;
        result.weights.middleCols(c0, group_size).setZero();

        // Eliminate the group from the maintained inverse (Schur complement);
        // its rows and columns become exactly zero.
        MatrixXd cols_g = h_inv.middleCols(c0, group_size);  // n x gs
        h_inv.noalias() -= cols_g * solve_rows;
        h_inv.middleRows(c0, group_size).setZero();
        h_inv.middleCols(c0, group_size).setZero();

        pruned[static_cast<std::size_t>(best)] = true;
        cumulative += best_sal;
        result.trace.push_back({step, best, best_sal, cumulative});
    }

    for (int g = 0; g < n_groups; ++g)
        if (pruned[static_cast<std::size_t>(g)]) result.mask.pruned.push_back(g);

    MatrixXd delta = result.weights - w;
    result.recon_error = (delta * hd).cwiseProduct(delta).sum();
    return result;
}

PruneResult prune_attention_block(BlockWeights& block, const DenoiserConfig& cfg,
                                  const HessianAccumulator& acc, double sparsity,
                                  const PruneOptions& opts) {
    cfg.validate();
    if (acc.dim() != cfg.d_model)
        throw ParamError("attention Hessian must have dimension d_model");
    int n_prune = static_cast<int>(std::floor(sparsity * cfg.n_heads));
    if (n_prune >= cfg.n_heads)
        throw ParamError("sparsity " + format_double(sparsity) +
                         " would remove every attention head");

    PruneResult result =
        prune_layer(block.attn.wo, acc, sparsity, cfg.head_dim(), opts);
    block.attn.wo = result.weights;
    for (int head : result.mask.pruned) {
        int r0 = head * cfg.head_dim();
        block.attn.wq.middleRows(r0, cfg.head_dim()).setZero();
        block.attn.wk.middleRows(r0, cfg.head_dim()).setZero();
        block.attn.wv.middleRows(r0, cfg.head_dim()).setZero();
        block.attn.bq.segment(r0, cfg.head_dim()).setZero();
        block.attn.bk.segment(r0, cfg.head_dim()).setZero();
        block.attn.bv.segment(r0, cfg.head_dim()).setZero();
    }
    return result;
}

PruneResult prune_mlp_block(BlockWeights& block, const DenoiserConfig& cfg,
                            const HessianAccumulator& acc, double sparsity,
                            const PruneOptions& opts) {
    cfg.validate();
    if (acc.dim() != cfg.mlp_hidden)
        throw ParamError("MLP Hessian must have dimension mlp_hidden");
    int n_prune = static_cast<int>(std::floor(sparsity * cfg.mlp_hidden));
    if (n_prune >= cfg.mlp_hidden)
        throw ParamError("sparsity " + format_double(sparsity) +
                         " would remove every MLP neuron");

    PruneResult result = prune_layer(block.mlp.down, acc, sparsity, 1, opts);
    block.mlp.down = result.weights;
    for (int neuron : result.mask.pruned) {
        block.mlp.up.row(neuron).setZero();
        block.mlp.up_b(neuron) = 0.0;
    }
    return result;
}

void write_saliency_csv(std::ostream& out, const PruneResult& result) {
    out << "step,group,saliency,cumulative_error\n";
    for (const auto& rec : result.trace)
        out << rec.step << ',' << rec.group << ',' << format_double(rec.saliency)
            << ',' << format_double(rec.cumulative) << '\n';
}

}  // namespace trajprune
