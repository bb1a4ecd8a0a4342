#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "trajprune/denoiser.hpp"
#include "trajprune/schedule.hpp"
#include "trajprune/trajectory.hpp"

namespace trajprune {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double p_uncond = 0.1;  // chance of swapping in the null label per sample
    std::uint64_t seed = 0;
};

struct TrainLog {
    std::vector<double> epoch_loss;  // mean per-element loss per epoch
};

// Noise-prediction training: per sample draw t uniformly, noise the image,
// regress the model output onto the injected noise (per-element MSE), Adam
// updates per minibatch. Fully seeded; throws TrainingError on a non-finite
// loss.
TrainLog train(DenoiserModel& model, const std::vector<ToyImage>& data,
               const NoiseSchedule& schedule, const TrainConfig& cfg);

// Monte-Carlo denoising loss with t restricted to a stage range; labels come
// from the images, no guidance. Deterministic in seed.
double eval_loss(const DenoiserModel& model, const std::vector<ToyImage>& data,
                 const NoiseSchedule& schedule, StageRange range,
                 int draws_per_image, std::uint64_t seed);

// CSV with header epoch,mean_loss (epochs 1-based).
void write_loss_csv(std::ostream& out, const TrainLog& log);

// Parameter gradients for one sample; exposed for finite-difference tests.
// d_out is the loss gradient with respect to the model output. Gradients
// accumulate into grads, which must have the model's shapes.
void backward(const DenoiserModel& model, const ForwardTrace& trace, int label,
              const Eigen::VectorXd& d_out, DenoiserModel& grads);

}  // namespace trajprune
