#pragma once

#include "poro/diff/adam.hpp"
#include "poro/diff/checkpoint.hpp"
#include "poro/grid.hpp"
#include "poro/nn.hpp"

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace poro::pvae {

using diff::DTensor;
using diff::Tape;
using diff::Var;

enum class ConvMode { two_d, three_d };

/// Encoder output (mu, sigma) plus the sampled code and the noise that
/// produced it, so a draw can be replayed exactly.
struct LatentCode {
    Eigen::VectorXd mu;
    Eigen::VectorXd sigma;
    Eigen::VectorXd z;
    Eigen::VectorXd eps;
};

/// z = mu + sigma .* eps
Eigen::VectorXd reparameterize(const LatentCode& code, const Eigen::VectorXd& eps);

/// Closed-form Gaussian KL against the standard normal prior:
/// -1/2 sum_j (1 + log sigma_j^2 - sigma_j^2 - mu_j^2).
double kl_divergence(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma);

struct LossParts {
    double recon = 0.0, kl = 0.0, prop = 0.0, total = 0.0;
};

/// Composite objective: BCE reconstruction + beta * KL + lambda * ||P - P_hat||^2.
LossParts pvae_loss(const Eigen::ArrayXd& x, const Eigen::ArrayXd& x_hat,
                    const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                    const Eigen::VectorXd& p_true, const Eigen::VectorXd& p_pred,
                    double beta, double lambda);

struct PVAEConfig {
    ConvMode mode = ConvMode::two_d;
    int input_size = 32;
    int latent_dim = 32;
    int property_dim = 2;
    double steepness = 5.0;  // SteepSigmoid k
    double beta = 0.5;
    double lambda = 10.0;
    std::array<int, 4> channels{6, 6, 24, 16};
    std::uint64_t seed = 0;

    int rank() const { return mode == ConvMode::two_d ? 2 : 3; }
    /// Spatial extents after each encoder stage: S, S/2, S/4, S/4-2, S/4-4.
    std::array<int, 5> spatial() const;
    std::int64_t flat_dim() const;
    void validate() const;
};

/// Training samples: flattened images in [0,1] (1 = solid) plus raw property rows.
struct PropertyDataset {
    ConvMode mode = ConvMode::two_d;
    int input_size = 32;
    std::vector<Eigen::ArrayXd> images;
    Eigen::MatrixXd properties;  // n x P
    std::vector<std::string> ids;

    std::int64_t n() const { return static_cast<std::int64_t>(images.size()); }
};

/// 2D mode takes the x = 0 cross-section; 3D mode takes the whole volume.
Eigen::ArrayXd image_from_grid(const VoxelGrid& g, ConvMode mode);

class PVAEModel {
public:
    PVAEConfig cfg;
    nn::ParamStore params;

    Eigen::VectorXd prop_min, prop_span;
    std::vector<std::string> property_names;
    bool bounds_set = false;

    static PVAEModel create(const PVAEConfig& cfg);

    struct EncT {
        Var mu, logvar;
    };
    EncT encode_t(Tape& t, Var x) const;
    Var decode_t(Tape& t, Var z) const;
    Var regress_t(Tape& t, Var latent) const;  // normalized property outputs

    LatentCode encode(const Eigen::ArrayXd& image) const;
    Eigen::MatrixXd encode_mu(const std::vector<Eigen::ArrayXd>& images) const;
    GrayVolume decode(const Eigen::VectorXd& z) const;
    /// De-normalized property prediction from a latent vector (uses mu only
    /// during evaluation; any latent may be probed in inverse design).
    Eigen::VectorXd regress(const Eigen::VectorXd& latent) const;

    Eigen::VectorXd normalize_props(const Eigen::VectorXd& raw) const;
    Eigen::VectorXd denormalize_props(const Eigen::VectorXd& norm) const;
    void set_bounds_from(const Eigen::MatrixXd& raw_props, const std::vector<int>& rows);

    std::vector<DTensor*> encoder_params() const;
    std::vector<DTensor*> decoder_params() const;
    std::vector<DTensor*> regressor_params() const;

    void save(const std::filesystem::path& path) const;
    static PVAEModel load(const std::filesystem::path& path);

private:
    nn::Conv enc1_, enc2_, enc3_, enc4_;
    nn::Dense enc_head_;
    nn::Dense dec_fc_;
    nn::ConvT dec1_, dec2_, dec3_, dec4_, dec5_;
    nn::Dense reg1_, reg2_, reg3_, reg4_;

    void build(Rng& rng);
};

enum class Stage { vae, regressor, joint, all };

struct TrainConfig {
    Stage stage = Stage::all;
    int batch = 16;
    double lr_vae = 1.2e-4;
    double lr_regressor = 1e-3;
    double lr_joint = 5e-4;
    int epochs_vae = 700;
    int epochs_regressor = 300;
    int epochs_joint = 200;
    int patience_early = 120;
    int patience_lr = 60;
    double lr_factor = 0.5;
    double train_frac = 0.8, val_frac = 0.1;
    bool restore_best = true;  // keep the best-validation checkpoint per stage
    /// KL weight ramps linearly from 0 to beta over this many epochs of the
    /// VAE stage, so the latent is in use before the prior term bites.
    /// Selection/logging always use the final beta. 0 disables the ramp.
    int kl_warmup_epochs = 40;
    std::uint64_t seed = 0;
};

struct EpochLog {
    std::string stage;
    int epoch = 0;
    std::string split;
    double recon = 0.0, kl = 0.0, prop = 0.0, total = 0.0, lr = 0.0;
};

struct SplitIndices {
    std::vector<int> train, val, test;
};

/// Deterministic shuffled 80/10/10 split (fractions from the config).
SplitIndices split_dataset(std::int64_t n, double train_frac, double val_frac, std::uint64_t seed);

struct TrainHistory {
    std::vector<EpochLog> rows;
    double best_val_total = 0.0;
    SplitIndices split;
};

/// Staged protocol: (1) VAE-only at a small rate, (2) regressor on frozen mu
/// at a larger rate, (3) joint fine-tune with the decoder frozen. Each stage
/// keeps its best-validation checkpoint and halves the rate on plateau.
TrainHistory train(PVAEModel& model, const PropertyDataset& data, const TrainConfig& cfg);

}  // namespace poro::pvae
