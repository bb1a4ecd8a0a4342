#include "trajprune/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "trajprune/errors.hpp"
#include "trajprune/rng.hpp"
#include "trajprune/sampler.hpp"
#include "trajprune/textio.hpp"

namespace trajprune {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Same pixel-to-token layout as the forward pass.
MatrixXd patchify_grad(const VectorXd& d_out, const DenoiserConfig& cfg) {
    const int s = cfg.image_size, p = cfg.patch, tps = cfg.tokens_per_side();
    MatrixXd out(cfg.tokens(), cfg.patch_dim());
    for (int pr = 0; pr < tps; ++pr)
        for (int pc = 0; pc < tps; ++pc) {
            int tok = pr * tps + pc;
            int idx = 0;
            for (int ch = 0; ch < cfg.channels; ++ch)
                for (int r = 0; r < p; ++r)
                    for (int c = 0; c < p; ++c)
                        out(tok, idx++) =
                            d_out(ch * s * s + (pr * p + r) * s + (pc * p + c));
        }
    return out;
}

MatrixXd ln_output(const LayerNormWeights& w, const LayerNormTrace& tr) {
    MatrixXd out = (tr.xhat.array().rowwise() * w.gain.transpose().array()).matrix();
    out.rowwise() += w.bias.transpose();
    return out;
}

// Backward through y = gain * xhat + bias; accumulates gain/bias gradients
// and returns the gradient with respect to the layer input.
MatrixXd ln_backward(const LayerNormWeights& w, const LayerNormTrace& tr,
                     const MatrixXd& d_out, LayerNormWeights& gw) {
    gw.gain += (d_out.array() * tr.xhat.array()).colwise().sum().transpose().matrix();
    gw.bias += d_out.colwise().sum().transpose();
    MatrixXd dxhat = (d_out.array().rowwise() * w.gain.transpose().array()).matrix();
    MatrixXd din(d_out.rows(), d_out.cols());
    for (Eigen::Index i = 0; i < d_out.rows(); ++i) {
        double m1 = dxhat.row(i).mean();
        double m2 = (dxhat.row(i).array() * tr.xhat.row(i).array()).mean();
        din.row(i) = (tr.inv_std(i) *
                      (dxhat.row(i).array() - m1 - tr.xhat.row(i).array() * m2))
                         .matrix();
    }
    return din;
}

struct AdamState {
    DenoiserModel m, v;
    long step = 0;
};

struct TensorRef {
    double* data;
    std::size_t size;
};

std::vector<TensorRef> flatten(DenoiserModel& model) {
    std::vector<TensorRef> refs;
    visit_params(model, [&](const std::string&, auto& tensor) {
        refs.push_back({tensor.data(), static_cast<std::size_t>(tensor.size())});
    });
    return refs;
}

void adam_update(DenoiserModel& model, DenoiserModel& grads, AdamState& st,
                 const TrainConfig& cfg) {
    st.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    auto p = flatten(model), g = flatten(grads), m = flatten(st.m), v = flatten(st.v);
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = 0; j < p[i].size; ++j) {
            double gj = g[i].data[j];
            m[i].data[j] = cfg.beta1 * m[i].data[j] + (1.0 - cfg.beta1) * gj;
            v[i].data[j] = cfg.beta2 * v[i].data[j] + (1.0 - cfg.beta2) * gj * gj;
            double mhat = m[i].data[j] / bc1;
            double vhat = v[i].data[j] / bc2;
            p[i].data[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

void zero_grads(DenoiserModel& grads) {
    visit_params(grads, [](const std::string&, auto& tensor) { tensor.setZero(); });
}

}  // namespace

void backward(const DenoiserModel& model, const ForwardTrace& trace, int label,
              const VectorXd& d_out, DenoiserModel& grads) {
    const auto& cfg = model.cfg;
    const int heads = cfg.n_heads, dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    MatrixXd d_y = patchify_grad(d_out, cfg);

    // Output head and final norm.
    MatrixXd xf = ln_output(model.final_ln, trace.lnf);
    grads.head.noalias() += d_y.transpose() * xf;
    grads.head_b += d_y.colwise().sum().transpose();
    MatrixXd d_xf = d_y * model.head;
    MatrixXd d_h = ln_backward(model.final_ln, trace.lnf, d_xf, grads.final_ln);

    for (int b = cfg.n_blocks - 1; b >= 0; --b) {
        const auto& blk = model.blocks[static_cast<std::size_t>(b)];
        auto& gblk = grads.blocks[static_cast<std::size_t>(b)];
        const auto& bt = trace.blocks[static_cast<std::size_t>(b)];

        // MLP half: out = h_mid + act * down^T + down_b.
        gblk.mlp.down_b += d_h.colwise().sum().transpose();
        gblk.mlp.down.noalias() += d_h.transpose() * bt.mlp_act;
        MatrixXd d_act = d_h * blk.mlp.down;
        MatrixXd d_pre =
            (d_act.array() *
             bt.mlp_pre.unaryExpr([](double v) { return gelu_grad(v); }).array())
                .matrix();
        MatrixXd x2 = ln_output(blk.ln2, bt.ln2);
        gblk.mlp.up_b += d_pre.colwise().sum().transpose();
        gblk.mlp.up.noalias() += d_pre.transpose() * x2;
        MatrixXd d_x2 = d_pre * blk.mlp.up;
        d_h += ln_backward(blk.ln2, bt.ln2, d_x2, gblk.ln2);

        // Attention half: h_mid = h_in + attn_concat * wo^T + bo.
        gblk.attn.bo += d_h.colwise().sum().transpose();
        gblk.attn.wo.noalias() += d_h.transpose() * bt.attn_concat;
        MatrixXd d_ao = d_h * blk.attn.wo;

        MatrixXd d_q = MatrixXd::Zero(bt.q.rows(), bt.q.cols());
        MatrixXd d_k = MatrixXd::Zero(bt.k.rows(), bt.k.cols());
        MatrixXd d_v = MatrixXd::Zero(bt.v.rows(), bt.v.cols());
        for (int hd = 0; hd < heads; ++hd) {
            const MatrixXd& probs = bt.probs[static_cast<std::size_t>(hd)];
            auto d_ao_h = d_ao.middleCols(hd * dh, dh);
            auto vh = bt.v.middleCols(hd * dh, dh);
            MatrixXd d_probs = d_ao_h * vh.transpose();
            d_v.middleCols(hd * dh, dh).noalias() = probs.transpose() * d_ao_h;
            // Softmax backward, row-wise.
            VectorXd row_dot =
                (d_probs.array() * probs.array()).rowwise().sum().matrix();
            MatrixXd d_logits =
                (probs.array() * (d_probs.array().colwise() - row_dot.array()))
                    .matrix();
            auto qh = bt.q.middleCols(hd * dh, dh);
            auto kh = bt.k.middleCols(hd * dh, dh);
            d_q.middleCols(hd * dh, dh).noalias() = scale * (d_logits * kh);
            d_k.middleCols(hd * dh, dh).noalias() =
                scale * (d_logits.transpose() * qh);
        }

        MatrixXd x1 = ln_output(blk.ln1, bt.ln1);
        gblk.attn.bq += d_q.colwise().sum().transpose();
        gblk.attn.bk += d_k.colwise().sum().transpose();
        gblk.attn.bv += d_v.colwise().sum().transpose();
        gblk.attn.wq.noalias() += d_q.transpose() * x1;
        gblk.attn.wk.noalias() += d_k.transpose() * x1;
        gblk.attn.wv.noalias() += d_v.transpose() * x1;
        MatrixXd d_x1 = d_q * blk.attn.wq + d_k * blk.attn.wk + d_v * blk.attn.wv;
        d_h += ln_backward(blk.ln1, bt.ln1, d_x1, gblk.ln1);
    }

    // Embeddings and conditioning.
    grads.pos_embed += d_h;
    VectorXd d_cond = d_h.colwise().sum().transpose();
    grads.class_embed.row(label) += d_cond.transpose();
    grads.time_b2 += d_cond;
    grads.time_w2.noalias() += d_cond * trace.time_act.transpose();
    VectorXd d_ta = model.time_w2.transpose() * d_cond;
    VectorXd d_tp =
        (d_ta.array() *
         trace.time_pre.unaryExpr([](double v) { return gelu_grad(v); }).array())
            .matrix();
    grads.time_b1 += d_tp;
    grads.time_w1.noalias() += d_tp * trace.t_emb.transpose();

    grads.patch_embed.noalias() += d_h.transpose() * trace.patches;
    grads.patch_embed_b += d_h.colwise().sum().transpose();
}

TrainLog train(DenoiserModel& model, const std::vector<ToyImage>& data,
               const NoiseSchedule& schedule, const TrainConfig& cfg) {
    if (cfg.epochs < 0) throw ParamError("epochs must be >= 0");
    if (cfg.batch_size < 1) throw ParamError("batch_size must be >= 1");
    if (!(cfg.lr > 0.0)) throw ParamError("learning rate must be > 0");
    if (!(cfg.p_uncond >= 0.0) || !(cfg.p_uncond <= 1.0))
        throw ParamError("p_uncond must lie in [0, 1]");
    if (data.empty() && cfg.epochs > 0) throw ParamError("training set is empty");

    TrainLog log;
    if (cfg.epochs == 0) return log;

    const int d = model.cfg.data_dim();
    auto rng = make_rng(derive_seed(cfg.seed, "train"));
    std::uniform_int_distribution<int> t_dist(1, schedule.horizon);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    AdamState adam{DenoiserModel::zeros(model.cfg), DenoiserModel::zeros(model.cfg), 0};
    DenoiserModel grads = DenoiserModel::zeros(model.cfg);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto shuffle_rng =
            make_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double epoch_acc = 0.0;
        long epoch_count = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(),
                                       start + static_cast<std::size_t>(cfg.batch_size));
            const double batch_n = static_cast<double>(end - start);
            zero_grads(grads);
            double batch_loss = 0.0;
            for (std::size_t bi = start; bi < end; ++bi) {
                const ToyImage& im = data[order[bi]];
                int t = t_dist(rng);
                VectorXd eps(d);
                for (int i = 0; i < d; ++i) eps(i) = normal(rng);
                int label =
                    coin(rng) < cfg.p_uncond ? model.cfg.null_class() : im.label;
                VectorXd x_t = forward_noise(im.pixels, t, eps, schedule);
                ForwardTrace trace;
                VectorXd pred = model.forward(x_t, t, label, nullptr, &trace);
                VectorXd resid = pred - eps;
                batch_loss += resid.squaredNorm() / d;
                VectorXd d_out = (2.0 / (d * batch_n)) * resid;
                backward(model, trace, label, d_out, grads);
            }
            batch_loss /= batch_n;
            if (!std::isfinite(batch_loss))
                throw TrainingError("loss became non-finite at epoch " +
                                    std::to_string(epoch + 1));
            adam_update(model, grads, adam, cfg);
            epoch_acc += batch_loss * batch_n;
            epoch_count += static_cast<long>(batch_n);
        }
        log.epoch_loss.push_back(epoch_acc / epoch_count);
    }
    return log;
}

double eval_loss(const DenoiserModel& model, const std::vector<ToyImage>& data,
                 const NoiseSchedule& schedule, StageRange range,
                 int draws_per_image, std::uint64_t seed) {
    if (data.empty()) throw ParamError("evaluation set is empty");
    if (draws_per_image < 1) throw ParamError("draws_per_image must be >= 1");
    if (range.t_lo < 1 || range.t_hi > schedule.horizon || range.t_lo > range.t_hi)
        throw ParamError("evaluation range outside schedule");

    const int d = model.cfg.data_dim();
    auto rng = make_rng(derive_seed(seed, "eval-loss"));
    std::uniform_int_distribution<int> t_dist(range.t_lo, range.t_hi);
    std::normal_distribution<double> normal(0.0, 1.0);

    double acc = 0.0;
    for (const auto& im : data) {
        for (int j = 0; j < draws_per_image; ++j) {
            int t = t_dist(rng);
            VectorXd eps(d);
            for (int i = 0; i < d; ++i) eps(i) = normal(rng);
            VectorXd x_t = forward_noise(im.pixels, t, eps, schedule);
            VectorXd pred = model.forward(x_t, t, im.label);
            acc += (pred - eps).squaredNorm() / d;
        }
    }
    return acc / (static_cast<double>(data.size()) * draws_per_image);
}

void write_loss_csv(std::ostream& out, const TrainLog& log) {
    out << "epoch,mean_loss\n";
    for (std::size_t i = 0; i < log.epoch_loss.size(); ++i)
        out << (i + 1) << ',' << format_double(log.epoch_loss[i]) << '\n';
}

}  // namespace trajprune
