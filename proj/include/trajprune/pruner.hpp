#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <vector>

#include "trajprune/denoiser.hpp"

namespace trajprune {

// Running sum of X^T X over captured activation rows for one layer.
class HessianAccumulator {
  public:
    explicit HessianAccumulator(int dim);

    void add_batch(const Eigen::Ref<const Eigen::MatrixXd>& rows);
    // Partial-sum combine; call in a fixed order for deterministic results.
    void merge(const HessianAccumulator& other);

    const Eigen::MatrixXd& matrix() const { return h_; }
    // Symmetrized H plus rel_damping * mean(diag H) on the diagonal.
    Eigen::MatrixXd damped(double rel_damping) const;
    long samples() const { return samples_; }
    int dim() const { return static_cast<int>(h_.rows()); }

  private:
    Eigen::MatrixXd h_;
    long samples_ = 0;
};

// Which column groups of a weight matrix were removed.
struct GroupMask {
    int n_groups = 0;
    int group_size = 1;
    std::vector<int> pruned;  // sorted group indices

    int columns() const { return n_groups * group_size; }
    bool is_pruned(int group) const;
    int pruned_columns() const { return static_cast<int>(pruned.size()) * group_size; }
};

struct SaliencyRecord {
    int step = 0;   // 1-based removal order
    int group = 0;
    double saliency = 0.0;
    double cumulative = 0.0;  // running sum of saliencies
};

struct PruneResult {
    GroupMask mask;
    Eigen::MatrixXd weights;
    // Exact quadratic-form error of the final weights against the damped
    // Hessian; equals the cumulative saliency sum up to round-off.
    double recon_error = 0.0;
    std::vector<SaliencyRecord> trace;
};

struct PruneOptions {
    // Diagonal damping relative to mean(diag H). Zero keeps H as captured.
    double rel_damping = 1e-2;
};

// Error increase from removing one column group under compensation:
// sum_i W_{i,G} ((H^-1)_{G,G})^-1 W_{i,G}^T. h_inv is the maintained inverse
// with already-eliminated rows and columns zeroed.
double group_saliency(const Eigen::MatrixXd& w, const Eigen::MatrixXd& h_inv,
                      int group, int group_size);

// Greedy one-group-at-a-time removal of floor(sparsity * n_groups) groups,
// lowest saliency first, updating surviving weights after each removal and
// maintaining the survivor-submatrix inverse in closed form. Pruned columns
// of the returned weights are exactly zero.
PruneResult prune_layer(const Eigen::MatrixXd& w, const HessianAccumulator& acc,
                        double sparsity, int group_size,
                        const PruneOptions& opts = {});

// Removes floor(sparsity * n_heads) attention heads from a block: prunes the
// out-projection with head-sized column groups, then zeroes the q/k/v rows
// and biases of each removed head. Refuses a sparsity that removes every head.
PruneResult prune_attention_block(BlockWeights& block, const DenoiserConfig& cfg,
                                  const HessianAccumulator& acc, double sparsity,
                                  const PruneOptions& opts = {});

// Removes floor(sparsity * mlp_hidden) intermediate neurons: prunes the
// down-projection with single-column groups, then zeroes the matching
// up-projection rows and biases.
PruneResult prune_mlp_block(BlockWeights& block, const DenoiserConfig& cfg,
                            const HessianAccumulator& acc, double sparsity,
                            const PruneOptions& opts = {});

// CSV with header step,group,saliency,cumulative_error.
void write_saliency_csv(std::ostream& out, const PruneResult& result);

}  // namespace trajprune
