#include "trajprune/calibration.hpp"

#include <ostream>
#include <thread>

#include "trajprune/errors.hpp"
#include "trajprune/rng.hpp"
#include "trajprune/sampler.hpp"

namespace trajprune {

using Eigen::VectorXd;

std::vector<CalibrationItem> build_calibration(const std::vector<ToyImage>& dataset,
                                               StageRange stage,
                                               const NoiseSchedule& schedule,
                                               int n, bool cfg_enabled,
                                               std::uint64_t seed) {
    if (dataset.empty()) throw ParamError("calibration dataset is empty");
    if (n < 1) throw ParamError("calibration size must be >= 1");
    if (stage.t_lo < 1 || stage.t_hi > schedule.horizon || stage.t_lo > stage.t_hi)
        throw ParamError("stage range outside schedule");

    std::vector<CalibrationItem> items;
    items.reserve(static_cast<std::size_t>(n));
    const int d = static_cast<int>(dataset.front().pixels.size());
    for (int i = 0; i < n; ++i) {
        auto rng = make_rng(derive_seed(seed, "calib-item", static_cast<std::uint64_t>(i)));
        std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
        std::uniform_int_distribution<int> t_dist(stage.t_lo, stage.t_hi);
        std::normal_distribution<double> normal(0.0, 1.0);

        const ToyImage& im = dataset[pick(rng)];
        int t = t_dist(rng);
        VectorXd eps(d);
        for (int j = 0; j < d; ++j) eps(j) = normal(rng);
        items.push_back(
            {forward_noise(im.pixels, t, eps, schedule), t, im.label, cfg_enabled});
    }
    return items;
}

namespace {

// Feeds captured rows into per-layer accumulators, checking finiteness.
class HessianSink : public ActivationCapture {
  public:
    explicit HessianSink(LayerHessianSet& set) : set_(set) {}

    void on_activations(const LayerId& layer, const Eigen::MatrixXd& rows) override {
        if (!rows.allFinite())
            throw CaptureError("non-finite activations captured at " +
                               layer_name(layer));
        set_.at(layer).add_batch(rows);
    }

  private:
    LayerHessianSet& set_;
};

LayerHessianSet empty_set(const DenoiserConfig& cfg) {
    LayerHessianSet set;
    for (int b = 0; b < cfg.n_blocks; ++b) {
        set.emplace(LayerId{b, LayerKind::attn_out_proj},
                    HessianAccumulator(cfg.d_model));
        set.emplace(LayerId{b, LayerKind::mlp_down_proj},
                    HessianAccumulator(cfg.mlp_hidden));
    }
    return set;
}

void capture_range(const DenoiserModel& model,
                   const std::vector<CalibrationItem>& items, std::size_t lo,
                   std::size_t hi, LayerHessianSet& set) {
    HessianSink sink(set);
    for (std::size_t i = lo; i < hi; ++i) {
        const auto& item = items[i];
        model.forward(item.x_t, item.t, item.label, &sink);
        if (item.cfg_duplicated)
            model.forward(item.x_t, item.t, model.cfg.null_class(), &sink);
    }
}

}  // namespace

LayerHessianSet capture_hessians(const DenoiserModel& model,
                                 const std::vector<CalibrationItem>& items,
                                 int workers) {
    if (workers < 1) throw ParamError("workers must be >= 1");
    for (const auto& item : items)
        if (item.x_t.size() != model.cfg.data_dim())
            throw ParamError("calibration item shape does not match model input");

    if (workers == 1 || items.size() < 2) {
        LayerHessianSet set = empty_set(model.cfg);
        capture_range(model, items, 0, items.size(), set);
        return set;
    }

    std::vector<LayerHessianSet> partial;
    partial.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) partial.push_back(empty_set(model.cfg));

    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::size_t chunk = (items.size() + workers - 1) / static_cast<std::size_t>(workers);
    for (int w = 0; w < workers; ++w) {
        std::size_t lo = static_cast<std::size_t>(w) * chunk;
        std::size_t hi = std::min(items.size(), lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, w, lo, hi] {
            try {
                capture_range(model, items, lo, hi, partial[static_cast<std::size_t>(w)]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);

    // Merge partial sums in chunk order so the combination is deterministic.
    LayerHessianSet merged = std::move(partial.front());
    for (std::size_t w = 1; w < partial.size(); ++w)
        for (auto& [id, acc] : merged) acc.merge(partial[w].at(id));
    return merged;
}

void write_calibration_manifest(std::ostream& out,
                                const std::vector<CalibrationItem>& items) {
    out << "sample,t,label,cfg_duplicated\n";
    for (std::size_t i = 0; i < items.size(); ++i)
        out << i << ',' << items[i].t << ',' << items[i].label << ','
            << (items[i].cfg_duplicated ? 1 : 0) << '\n';
}

}  // namespace trajprune
