#include "trajprune/denoiser.hpp"

#include <cmath>

#include "trajprune/errors.hpp"
#include "trajprune/rng.hpp"

namespace trajprune {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void DenoiserConfig::validate() const {
    if (image_size < 1 || channels < 1 || patch < 1)
        throw ParamError("image_size, channels and patch must be positive");
    if (image_size % patch != 0)
        throw ParamError("patch must divide image_size");
    if (d_model < 2 || d_model % 2 != 0)
        throw ParamError("d_model must be even and >= 2");
    if (n_heads < 1 || d_model % n_heads != 0)
        throw ParamError("n_heads must divide d_model");
    if (n_blocks < 1) throw ParamError("n_blocks must be >= 1");
    if (mlp_hidden < 1) throw ParamError("mlp_hidden must be >= 1");
    if (n_classes < 1) throw ParamError("n_classes must be >= 1");
}

std::string layer_name(const LayerId& id) {
    return "block" + std::to_string(id.block) +
           (id.kind == LayerKind::attn_out_proj ? ".attn_out_proj" : ".mlp_down_proj");
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}

namespace {

constexpr double kLnEps = 1e-5;

MatrixXd layer_norm(const MatrixXd& x, const LayerNormWeights& w, LayerNormTrace* tr) {
    MatrixXd xhat(x.rows(), x.cols());
    VectorXd inv_std(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double mu = x.row(i).mean();
        double var = (x.row(i).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(i) = ((x.row(i).array() - mu) * is).matrix();
        inv_std(i) = is;
    }
    if (tr) {
        tr->xhat = xhat;
        tr->inv_std = inv_std;
    }
    MatrixXd out = (xhat.array().rowwise() * w.gain.transpose().array()).matrix();
    out.rowwise() += w.bias.transpose();
    return out;
}

MatrixXd patchify(const VectorXd& x, const DenoiserConfig& cfg) {
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
                            x(ch * s * s + (pr * p + r) * s + (pc * p + c));
        }
    return out;
}

VectorXd unpatchify(const MatrixXd& y, const DenoiserConfig& cfg) {
    const int s = cfg.image_size, p = cfg.patch, tps = cfg.tokens_per_side();
    VectorXd out(cfg.data_dim());
    for (int pr = 0; pr < tps; ++pr)
        for (int pc = 0; pc < tps; ++pc) {
            int tok = pr * tps + pc;
            int idx = 0;
            for (int ch = 0; ch < cfg.channels; ++ch)
                for (int r = 0; r < p; ++r)
                    for (int c = 0; c < p; ++c)
                        out(ch * s * s + (pr * p + r) * s + (pc * p + c)) =
                            y(tok, idx++);
        }
    return out;
}

VectorXd time_embedding(int t, int d_model) {
    const int half = d_model / 2;
    VectorXd emb(d_model);
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        emb(i) = std::sin(t * freq);
        emb(half + i) = std::cos(t * freq);
    }
    return emb;
}

}  // namespace

DenoiserModel DenoiserModel::zeros(const DenoiserConfig& cfg) {
    cfg.validate();
    DenoiserModel m;
    m.cfg = cfg;
    const int d = cfg.d_model;
    m.patch_embed = MatrixXd::Zero(d, cfg.patch_dim());
    m.patch_embed_b = VectorXd::Zero(d);
    m.pos_embed = MatrixXd::Zero(cfg.tokens(), d);
    m.class_embed = MatrixXd::Zero(cfg.n_classes + 1, d);
    m.time_w1 = MatrixXd::Zero(d, d);
    m.time_b1 = VectorXd::Zero(d);
    m.time_w2 = MatrixXd::Zero(d, d);
    m.time_b2 = VectorXd::Zero(d);
    m.blocks.resize(static_cast<std::size_t>(cfg.n_blocks));
    for (auto& blk : m.blocks) {
        blk.ln1 = {VectorXd::Zero(d), VectorXd::Zero(d)};
        blk.ln2 = {VectorXd::Zero(d), VectorXd::Zero(d)};
        blk.attn.wq = MatrixXd::Zero(d, d);
        blk.attn.wk = MatrixXd::Zero(d, d);
        blk.attn.wv = MatrixXd::Zero(d, d);
        blk.attn.wo = MatrixXd::Zero(d, d);
        blk.attn.bq = VectorXd::Zero(d);
        blk.attn.bk = VectorXd::Zero(d);
        blk.attn.bv = VectorXd::Zero(d);
        blk.attn.bo = VectorXd::Zero(d);
        blk.mlp.up = MatrixXd::Zero(cfg.mlp_hidden, d);
        blk.mlp.up_b = VectorXd::Zero(cfg.mlp_hidden);
        blk.mlp.down = MatrixXd::Zero(d, cfg.mlp_hidden);
        blk.mlp.down_b = VectorXd::Zero(d);
    }
    m.final_ln = {VectorXd::Zero(d), VectorXd::Zero(d)};
    m.head = MatrixXd::Zero(cfg.patch_dim(), d);
    m.head_b = VectorXd::Zero(cfg.patch_dim());
    return m;
}

DenoiserModel DenoiserModel::init(const DenoiserConfig& cfg, std::uint64_t seed) {
    DenoiserModel m = zeros(cfg);
    auto rng = make_rng(derive_seed(seed, "model-init"));
    std::normal_distribution<double> dist(0.0, 0.02);
    auto fill = [&](MatrixXd& w, double scale) {
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * dist(rng);
    };
    fill(m.patch_embed, 1.0);
    fill(m.pos_embed, 1.0);
    fill(m.class_embed, 1.0);
    fill(m.time_w1, 1.0);
    fill(m.time_w2, 1.0);
    // Residual-write projections start smaller so depth does not blow up the
    // stream variance at init.
    const double res = 1.0 / std::sqrt(2.0 * cfg.n_blocks);
    for (auto& blk : m.blocks) {
        blk.ln1.gain.setOnes();
        blk.ln2.gain.setOnes();
        fill(blk.attn.wq, 1.0);
        fill(blk.attn.wk, 1.0);
        fill(blk.attn.wv, 1.0);
        fill(blk.attn.wo, res);
        fill(blk.mlp.up, 1.0);
        fill(blk.mlp.down, res);
    }
    m.final_ln.gain.setOnes();
    // head stays zero: the untrained model predicts zero noise exactly.
    return m;
}

VectorXd DenoiserModel::forward(const VectorXd& x, int t, int label,
                                ActivationCapture* capture,
                                ForwardTrace* trace) const {
    if (x.size() != cfg.data_dim())
        throw ParamError("input has " + std::to_string(x.size()) +
                         " elements, expected " + std::to_string(cfg.data_dim()));
    if (t < 1) throw ParamError("timestep must be >= 1");
    if (label < 0 || label > cfg.null_class())
        throw ParamError("label " + std::to_string(label) + " outside [0, " +
                         std::to_string(cfg.null_class()) + "]");

    const int n = cfg.tokens(), d = cfg.d_model, heads = cfg.n_heads,
              dh = cfg.head_dim();

    MatrixXd patches = patchify(x, cfg);
    MatrixXd h = patches * patch_embed.transpose();
    h.rowwise() += patch_embed_b.transpose();

    VectorXd t_emb = time_embedding(t, d);
    VectorXd time_pre = time_w1 * t_emb + time_b1;
    VectorXd time_act = time_pre.unaryExpr([](double v) { return gelu(v); });
    VectorXd cond = time_w2 * time_act + time_b2;
    cond += class_embed.row(label).transpose();

    h += pos_embed;
    h.rowwise() += cond.transpose();

    if (trace) {
        trace->patches = patches;
        trace->t_emb = t_emb;
        trace->time_pre = time_pre;
        trace->time_act = time_act;
        trace->cond = cond;
        trace->h0 = h;
        trace->blocks.assign(static_cast<std::size_t>(cfg.n_blocks), {});
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const auto& blk = blocks[static_cast<std::size_t>(b)];
        BlockTrace* bt = trace ? &trace->blocks[static_cast<std::size_t>(b)] : nullptr;
        if (bt) bt->h_in = h;

        MatrixXd xn = layer_norm(h, blk.ln1, bt ? &bt->ln1 : nullptr);
        MatrixXd q = xn * blk.attn.wq.transpose();
        q.rowwise() += blk.attn.bq.transpose();
        MatrixXd k = xn * blk.attn.wk.transpose();
        k.rowwise() += blk.attn.bk.transpose();
        MatrixXd v = xn * blk.attn.wv.transpose();
        v.rowwise() += blk.attn.bv.transpose();

        MatrixXd attn_concat(n, d);
        if (bt) bt->probs.resize(static_cast<std::size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            auto qh = q.middleCols(hd * dh, dh);
            auto kh = k.middleCols(hd * dh, dh);
            auto vh = v.middleCols(hd * dh, dh);
            MatrixXd logits = scale * (qh * kh.transpose());
            MatrixXd probs(n, n);
            for (int i = 0; i < n; ++i) {
                double mx = logits.row(i).maxCoeff();
                probs.row(i) = (logits.row(i).array() - mx).exp().matrix();
                probs.row(i) /= probs.row(i).sum();
            }
            attn_concat.middleCols(hd * dh, dh) = probs * vh;
            if (bt) bt->probs[static_cast<std::size_t>(hd)] = std::move(probs);
        }
        if (capture)
            capture->on_activations({b, LayerKind::attn_out_proj}, attn_concat);

        h += attn_concat * blk.attn.wo.transpose();
        h.rowwise() += blk.attn.bo.transpose();

        if (bt) {
            bt->q = std::move(q);
            bt->k = std::move(k);
            bt->v = std::move(v);
            bt->attn_concat = attn_concat;
            bt->h_mid = h;
        }

        MatrixXd xn2 = layer_norm(h, blk.ln2, bt ? &bt->ln2 : nullptr);
        MatrixXd pre = xn2 * blk.mlp.up.transpose();
        pre.rowwise() += blk.mlp.up_b.transpose();
        MatrixXd act = pre.unaryExpr([](double v) { return gelu(v); });
        if (capture) capture->on_activations({b, LayerKind::mlp_down_proj}, act);

        h += act * blk.mlp.down.transpose();
        h.rowwise() += blk.mlp.down_b.transpose();

        if (bt) {
            bt->mlp_pre = std::move(pre);
            bt->mlp_act = std::move(act);
        }
    }

    if (trace) trace->h_final = h;
    MatrixXd xf = layer_norm(h, final_ln, trace ? &trace->lnf : nullptr);
    MatrixXd y = xf * head.transpose();
    y.rowwise() += head_b.transpose();
    return unpatchify(y, cfg);
}

std::vector<ToyImage> make_blob_dataset(const DenoiserConfig& cfg, int count,
                                        std::uint64_t seed) {
    cfg.validate();
    if (count < 0) throw ParamError("dataset count must be >= 0");
    auto rng = make_rng(derive_seed(seed, "dataset"));
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    std::uniform_real_distribution<double> width(0.8, 1.4);
    std::uniform_real_distribution<double> dip(0.5, 1.0);

    const int s = cfg.image_size;
    const double r = 0.28 * s;
    auto anchor = [&](int label) {
        double th = 2.0 * M_PI * label / cfg.n_classes + M_PI / 4.0;
        return std::pair<double, double>{s / 2.0 + r * std::cos(th),
                                         s / 2.0 + r * std::sin(th)};
    };

    std::vector<ToyImage> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        int label = i % cfg.n_classes;
        auto [ax, ay] = anchor(label);
        auto [ox, oy] = anchor(label + cfg.n_classes / 2);
        double bx = ax + jitter(rng), by = ay + jitter(rng), bs = width(rng);
        double dx = ox + jitter(rng), dy = oy + jitter(rng), ds = width(rng);
        double da = -dip(rng);

        VectorXd px(cfg.data_dim());
        for (int ch = 0; ch < cfg.channels; ++ch)
            for (int row = 0; row < s; ++row)
                for (int col = 0; col < s; ++col) {
                    double g1 = std::exp(-((row - by) * (row - by) +
                                           (col - bx) * (col - bx)) /
                                         (2.0 * bs * bs));
                    double g2 = std::exp(-((row - dy) * (row - dy) +
                                           (col - dx) * (col - dx)) /
                                         (2.0 * ds * ds));
                    px(ch * s * s + row * s + col) = g1 + da * g2;
                }
        double mean = px.mean();
        double sd = std::sqrt((px.array() - mean).square().mean());
        px = ((px.array() - mean) / std::max(sd, 1e-6)).matrix();
        out.push_back({std::move(px), label});
    }
    return out;
}

double measure_signal_power(const std::vector<ToyImage>& images) {
    if (images.empty()) throw ParamError("cannot measure power of empty dataset");
    double acc = 0.0;
    for (const auto& im : images)
        acc += im.pixels.squaredNorm() / static_cast<double>(im.pixels.size());
    return acc / static_cast<double>(images.size());
}

}  // namespace trajprune
