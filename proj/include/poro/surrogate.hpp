#pragma once

#include "poro/pvae.hpp"

#include <array>
#include <filesystem>

namespace poro::surrogate {

using diff::DTensor;
using diff::Tape;
using diff::Var;
using pvae::ConvMode;
using pvae::PropertyDataset;

struct SurrogateConfig {
    ConvMode mode = ConvMode::two_d;
    int input_size = 32;
    int base_channels = 8;                 // doubles per block: 8, 16, 32, 64
    std::array<int, 4> kernels{3, 3, 5, 7};
    std::uint64_t seed = 0;

    int rank() const { return mode == ConvMode::two_d ? 2 : 3; }
    void validate() const;
};

/// Image-to-property regressor: four conv blocks with max-pool downsampling,
/// dense 64/32 head, two linear outputs (n_F, K11).
class SurrogateModel {
public:
    SurrogateConfig cfg;
    nn::ParamStore params;
    Eigen::Vector2d out_min = Eigen::Vector2d::Zero();
    Eigen::Vector2d out_span = Eigen::Vector2d::Ones();
    bool bounds_set = false;

    static SurrogateModel create(const SurrogateConfig& cfg);

    Var predict_t(Tape& t, Var x) const;  // normalized outputs (N, 2)

    /// De-normalized (n_F, K11) for one image.
    Eigen::Vector2d predict(const Eigen::ArrayXd& image) const;
    Eigen::MatrixXd predict_batch(const std::vector<Eigen::ArrayXd>& images) const;

    void save(const std::filesystem::path& path) const;
    static SurrogateModel load(const std::filesystem::path& path);

private:
    nn::Conv c1_, c2_, c3_, c4_;
    nn::Dense d1_, d2_, d3_;
    void build(Rng& rng);
};

struct SurrogateTrainConfig {
    int batch = 16;
    double lr = 1e-3;
    int epochs = 250;
    int patience_early = 30;
    int patience_lr = 15;
    double lr_factor = 0.5;
    double train_frac = 0.8, val_frac = 0.1;
    std::uint64_t seed = 0;
};

struct SurrogateHistory {
    std::vector<pvae::EpochLog> rows;  // recon/kl unused; prop carries the MSE
    double best_val_mse = 0.0;
    pvae::SplitIndices split;
};

/// Minimizes the summed squared error of the normalized (n_F, K11) targets,
/// with best-checkpoint retention, early stopping and lr-on-plateau.
SurrogateHistory train_surrogate(SurrogateModel& model, const PropertyDataset& data,
                                 const SurrogateTrainConfig& cfg);

}  // namespace poro::surrogate
