#pragma once

#include <Eigen/Dense>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

namespace trajprune {

// Patch-token transformer that predicts the noise added to a flattened image.
// Small on purpose: the pruning and scheduling machinery around it is the
// subject under test, the model just has to be trainable and prunable.
struct DenoiserConfig {
    int image_size = 8;
    int channels = 1;
    int patch = 2;
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 4;
    int mlp_hidden = 256;
    int n_classes = 2;

    int tokens_per_side() const { return image_size / patch; }
    int tokens() const { return tokens_per_side() * tokens_per_side(); }
    int patch_dim() const { return patch * patch * channels; }
    int head_dim() const { return d_model / n_heads; }
    int data_dim() const { return image_size * image_size * channels; }
    int null_class() const { return n_classes; }

    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

struct LayerNormWeights {
    Eigen::VectorXd gain;
    Eigen::VectorXd bias;
};

struct AttentionWeights {
    Eigen::MatrixXd wq, wk, wv;  // d_model x d_model
    Eigen::VectorXd bq, bk, bv;
    Eigen::MatrixXd wo;  // d_model x d_model; input columns group by head
    Eigen::VectorXd bo;
};

struct MlpWeights {
    Eigen::MatrixXd up;    // hidden x d_model
    Eigen::VectorXd up_b;  // hidden
    Eigen::MatrixXd down;  // d_model x hidden
    Eigen::VectorXd down_b;
};

struct BlockWeights {
    LayerNormWeights ln1, ln2;
    AttentionWeights attn;
    MlpWeights mlp;
};

// Prunable layers are the two residual-write projections of each block.
enum class LayerKind { attn_out_proj, mlp_down_proj };

struct LayerId {
    int block = 0;
    LayerKind kind = LayerKind::attn_out_proj;
    auto operator<=>(const LayerId&) const = default;
};

std::string layer_name(const LayerId& id);

// Receives the input rows of each prunable layer during a forward pass.
class ActivationCapture {
  public:
    virtual ~ActivationCapture() = default;
    virtual void on_activations(const LayerId& layer, const Eigen::MatrixXd& rows) = 0;
};

struct LayerNormTrace {
    Eigen::MatrixXd xhat;     // normalized activations
    Eigen::VectorXd inv_std;  // per token
};

struct BlockTrace {
    Eigen::MatrixXd h_in;
    LayerNormTrace ln1;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> probs;  // per-head attention weights
    Eigen::MatrixXd attn_concat;         // out-proj input
    Eigen::MatrixXd h_mid;
    LayerNormTrace ln2;
    Eigen::MatrixXd mlp_pre;  // before activation
    Eigen::MatrixXd mlp_act;  // down-proj input
};

// Every intermediate needed to backpropagate one forward pass.
struct ForwardTrace {
    Eigen::MatrixXd patches;
    Eigen::VectorXd t_emb;
    Eigen::VectorXd time_pre;  // first time-MLP layer before activation
    Eigen::VectorXd time_act;
    Eigen::VectorXd cond;
    Eigen::MatrixXd h0;
    std::vector<BlockTrace> blocks;
    Eigen::MatrixXd h_final;
    LayerNormTrace lnf;
};

struct DenoiserModel {
    DenoiserConfig cfg;

    Eigen::MatrixXd patch_embed;  // d_model x patch_dim
    Eigen::VectorXd patch_embed_b;
    Eigen::MatrixXd pos_embed;    // tokens x d_model
    Eigen::MatrixXd class_embed;  // (n_classes + 1) x d_model; last row = null
    Eigen::MatrixXd time_w1, time_w2;  // d_model x d_model
    Eigen::VectorXd time_b1, time_b2;
    std::vector<BlockWeights> blocks;
    LayerNormWeights final_ln;
    Eigen::MatrixXd head;  // patch_dim x d_model, zero at init
    Eigen::VectorXd head_b;

    // Random init for training; zeros for gradient/optimizer state buffers.
    static DenoiserModel init(const DenoiserConfig& cfg, std::uint64_t seed);
    static DenoiserModel zeros(const DenoiserConfig& cfg);

    // Predicted noise for image x at timestep t under class conditioning.
    // label may be cfg.null_class() for the unconditional branch.
    Eigen::VectorXd forward(const Eigen::VectorXd& x, int t, int label,
                            ActivationCapture* capture = nullptr,
                            ForwardTrace* trace = nullptr) const;
};

// Fixed-order traversal of every learnable tensor. fn(name, tensor) where
// tensor is Eigen::MatrixXd& or Eigen::VectorXd& (const-qualified to match m).
template <class Model, class Fn>
void visit_params(Model& m, Fn&& fn) {
    fn("patch_embed.weight", m.patch_embed);
    fn("patch_embed.bias", m.patch_embed_b);
    fn("pos_embed", m.pos_embed);
    fn("class_embed", m.class_embed);
    fn("time_mlp.w1", m.time_w1);
    fn("time_mlp.b1", m.time_b1);
    fn("time_mlp.w2", m.time_w2);
    fn("time_mlp.b2", m.time_b2);
    for (std::size_t b = 0; b < m.blocks.size(); ++b) {
        auto& blk = m.blocks[b];
        std::string p = "block" + std::to_string(b) + ".";
        fn(p + "ln1.gain", blk.ln1.gain);
        fn(p + "ln1.bias", blk.ln1.bias);
        fn(p + "attn.wq", blk.attn.wq);
        fn(p + "attn.bq", blk.attn.bq);
        fn(p + "attn.wk", blk.attn.wk);
        fn(p + "attn.bk", blk.attn.bk);
        fn(p + "attn.wv", blk.attn.wv);
        fn(p + "attn.bv", blk.attn.bv);
        fn(p + "attn.wo", blk.attn.wo);
        fn(p + "attn.bo", blk.attn.bo);
        fn(p + "ln2.gain", blk.ln2.gain);
        fn(p + "ln2.bias", blk.ln2.bias);
        fn(p + "mlp.up", blk.mlp.up);
        fn(p + "mlp.up_b", blk.mlp.up_b);
        fn(p + "mlp.down", blk.mlp.down);
        fn(p + "mlp.down_b", blk.mlp.down_b);
    }
    fn("final_ln.gain", m.final_ln.gain);
    fn("final_ln.bias", m.final_ln.bias);
    fn("head.weight", m.head);
    fn("head.bias", m.head_b);
}

double gelu(double x);
double gelu_grad(double x);

// Text header (architecture + tensor manifest with byte offsets) followed by
// a raw little-endian float32 payload in manifest order, row-major.
void save_checkpoint(const DenoiserModel& model, const std::string& path);
DenoiserModel load_checkpoint(const std::string& path);

// Labeled synthetic images: a class-anchored bright blob plus an opposing
// dip, normalized per image to zero mean and unit variance.
struct ToyImage {
    Eigen::VectorXd pixels;
    int label = 0;
};

std::vector<ToyImage> make_blob_dataset(const DenoiserConfig& cfg, int count,
                                        std::uint64_t seed);

// Mean per-element second moment across a dataset.
double measure_signal_power(const std::vector<ToyImage>& images);

}  // namespace trajprune
