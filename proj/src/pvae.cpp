#include "poro/pvae.hpp"

#include "poro/error.hpp"

#include <algorithm>
#include <cmath>

namespace poro::pvae {

using diff::add;
using diff::add_scalar;
using diff::bce_sum;
using diff::clamp;
using diff::exp_op;
using diff::mul;
using diff::mul_scalar;
using diff::relu;
using diff::reshape;
using diff::Shape;
using diff::slice_cols;
using diff::square;
using diff::steep_sigmoid;
using diff::sub;
using diff::sum;

Eigen::VectorXd reparameterize(const LatentCode& code, const Eigen::VectorXd& eps) {
    if (eps.size() != code.mu.size()) throw ArgumentError("reparameterize: eps length mismatch");
    return code.mu + (code.sigma.array() * eps.array()).matrix();
}

double kl_divergence(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma) {
    if (mu.size() != sigma.size()) throw ArgumentError("kl_divergence: size mismatch");
    if (!(sigma.array() > 0.0).all()) throw ArgumentError("kl_divergence: sigma must be positive");
    const Eigen::ArrayXd s2 = sigma.array().square();
    return -0.5 * (1.0 + s2.log() - s2 - mu.array().square()).sum();
}

LossParts pvae_loss(const Eigen::ArrayXd& x, const Eigen::ArrayXd& x_hat,
                    const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                    const Eigen::VectorXd& p_true, const Eigen::VectorXd& p_pred,
                    double beta, double lambda) {
    if (x.size() != x_hat.size()) throw ShapeError("pvae_loss: x vs x_hat size mismatch");
    if (p_true.size() != p_pred.size()) throw ShapeError("pvae_loss: property size mismatch");
    if (beta < 0.0 || lambda < 0.0) throw ArgumentError("pvae_loss: beta, lambda must be non-negative");
    constexpr double eps = 1e-12;
    const Eigen::ArrayXd pc = x_hat.max(eps).min(1.0 - eps);
    LossParts parts;
    parts.recon = -(x * pc.log() + (1.0 - x) * (1.0 - pc).log()).sum();
    parts.kl = kl_divergence(mu, sigma);
    parts.prop = (p_true - p_pred).squaredNorm();
    parts.total = parts.recon + beta * parts.kl + lambda * parts.prop;
    return parts;
}

std::array<int, 5> PVAEConfig::spatial() const {
    const int s = input_size;
    return {s, s / 2, s / 4, s / 4 - 2, s / 4 - 4};
}

std::int64_t PVAEConfig::flat_dim() const {
    std::int64_t f = channels[3];
    for (int a = 0; a < rank(); ++a) f *= spatial()[4];
    return f;
}

void PVAEConfig::validate() const {
    if (input_size % 4 != 0 || spatial()[4] < 1)
        throw ConfigError("PVAEConfig: input_size must be a multiple of 4 and at least 20");
    if (latent_dim <= 0 || property_dim <= 0) throw ConfigError("PVAEConfig: dims must be positive");
    if (!(steepness > 0.0)) throw ConfigError("PVAEConfig: steepness must be positive");
    if (beta < 0.0 || lambda < 0.0) throw ConfigError("PVAEConfig: beta, lambda must be non-negative");
    for (int c : channels)
        if (c <= 0) throw ConfigError("PVAEConfig: channels must be positive");
}

Eigen::ArrayXd image_from_grid(const VoxelGrid& g, ConvMode mode) {
    if (mode == ConvMode::two_d) {
        const int S = g.dims[1];
        if (g.dims[2] != S) throw ArgumentError("image_from_grid: cross-section must be square");
        Eigen::ArrayXd img(static_cast<std::int64_t>(S) * S);
        for (int z = 0; z < S; ++z)
            for (int y = 0; y < S; ++y) img[static_cast<std::int64_t>(z) * S + y] = g.at(0, y, z);
        return img;
    }
    if (!(g.dims[0] == g.dims[1] && g.dims[1] == g.dims[2]))
        throw ArgumentError("image_from_grid: 3D mode expects a cubic volume");
    Eigen::ArrayXd img(static_cast<std::int64_t>(g.voxels.size()));
    for (std::size_t i = 0; i < g.voxels.size(); ++i) img[static_cast<std::int64_t>(i)] = g.voxels[i];
    return img;
}

void PVAEModel::build(Rng& rng) {
    const int r = cfg.rank();
    const auto& ch = cfg.channels;
    // two overlapping stride-2 stages halve the extent each (k4 s2 p1),
    // then two valid k3 stages: S -> S/2 -> S/4 -> S/4-2 -> S/4-4
    enc1_ = nn::Conv::make(params, "enc1", 1, ch[0], 4, 2, 1, r, rng);
    enc2_ = nn::Conv::make(params, "enc2", ch[0], ch[1], 4, 2, 1, r, rng);
    enc3_ = nn::Conv::make(params, "enc3", ch[1], ch[2], 3, 1, 0, r, rng);
    enc4_ = nn::Conv::make(params, "enc4", ch[2], ch[3], 3, 1, 0, r, rng);
    enc_head_ = nn::Dense::make(params, "enc_head", static_cast<int>(cfg.flat_dim()), 2 * cfg.latent_dim, rng);

    dec_fc_ = nn::Dense::make(params, "dec_fc", cfg.latent_dim, static_cast<int>(cfg.flat_dim()), rng);
    dec1_ = nn::ConvT::make(params, "dec1", ch[3], ch[3], 3, 1, 0, r, rng);
    dec2_ = nn::ConvT::make(params, "dec2", ch[3], ch[2], 3, 1, 0, r, rng);
    dec3_ = nn::ConvT::make(params, "dec3", ch[2], ch[0], 4, 2, 1, r, rng);
    dec4_ = nn::ConvT::make(params, "dec4", ch[0], ch[0], 4, 2, 1, r, rng);
    dec5_ = nn::ConvT::make(params, "dec5", ch[0], 1, 3, 1, 1, r, rng);

    reg1_ = nn::Dense::make(params, "reg1", cfg.latent_dim, 16, rng);
    reg2_ = nn::Dense::make(params, "reg2", 16, 16, rng);
    reg3_ = nn::Dense::make(params, "reg3", 16, 4, rng);
    reg4_ = nn::Dense::make(params, "reg4", 4, cfg.property_dim, rng);
    // keep the narrow ReLU stack alive at init; outputs start mid-range
    reg1_.b->value.setConstant(0.1);
    reg2_.b->value.setConstant(0.1);
    reg3_.b->value.setConstant(0.1);
    reg4_.b->value.setConstant(0.5);
}

PVAEModel PVAEModel::create(const PVAEConfig& cfg) {
    cfg.validate();
    PVAEModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(cfg.seed, "pvae.init"));
    m.build(rng);
    // start with a narrow posterior (sigma ~ 0.14) so early reconstruction
    // gradients are not swamped by sampling noise
    DTensor* head_b = m.params.get("enc_head.b");
    for (int j = 0; j < cfg.latent_dim; ++j) head_b->value[cfg.latent_dim + j] = -4.0;
    return m;
}

PVAEModel::EncT PVAEModel::encode_t(Tape& t, Var x) const {
    Var h = relu(enc1_(t, add_scalar(x, -0.5)));  // zero-centered occupancy
    h = relu(enc2_(t, h));
    h = relu(enc3_(t, h));
    h = relu(enc4_(t, h));
    const int n = x.shape()[0];
    h = reshape(h, {n, static_cast<int>(cfg.flat_dim())});
    Var head = enc_head_(t, h);
    Var mu = slice_cols(head, 0, cfg.latent_dim);
    Var logvar = clamp(slice_cols(head, cfg.latent_dim, cfg.latent_dim), -10.0, 10.0);
    return {mu, logvar};
}

Var PVAEModel::decode_t(Tape& t, Var z) const {
    const int n = z.shape()[0];
    const int s4 = cfg.spatial()[4];
    Var h = relu(dec_fc_(t, z));
    Shape grid_shape = {n, cfg.channels[3]};
    for (int a = 0; a < cfg.rank(); ++a) grid_shape.push_back(s4);
    h = reshape(h, std::move(grid_shape));
    h = relu(dec1_(t, h));
    h = relu(dec2_(t, h));
    h = relu(dec3_(t, h));
    h = relu(dec4_(t, h));
    return steep_sigmoid(dec5_(t, h), cfg.steepness);
}

Var PVAEModel::regress_t(Tape& t, Var latent) const {
    Var h = relu(reg1_(t, latent));
    h = relu(reg2_(t, h));
    h = relu(reg3_(t, h));
    return relu(reg4_(t, h));
}

LatentCode PVAEModel::encode(const Eigen::ArrayXd& image) const {
    Tape t;
    Shape in_shape = {1, 1};
    for (int a = 0; a < cfg.rank(); ++a) in_shape.push_back(cfg.input_size);
    if (diff::shape_size(in_shape) != image.size())
        throw ShapeError("encode: image size " + std::to_string(image.size()) + " does not match " +
                         diff::shape_str(in_shape));
    Var x = t.constant(in_shape, image);
    EncT enc = encode_t(t, x);
    LatentCode code;
    code.mu = Eigen::Map<const Eigen::VectorXd>(enc.mu.value().data(), cfg.latent_dim);
    code.sigma = (0.5 * enc.logvar.value()).exp().matrix();
    return code;
}

Eigen::MatrixXd PVAEModel::encode_mu(const std::vector<Eigen::ArrayXd>& images) const {
    const int n = static_cast<int>(images.size());
    Eigen::MatrixXd mu(n, cfg.latent_dim);
    const int chunk = 64;
    std::int64_t img_size = 1;
    for (int a = 0; a < cfg.rank(); ++a) img_size *= cfg.input_size;
    for (int begin = 0; begin < n; begin += chunk) {
        const int m = std::min(chunk, n - begin);
        Eigen::ArrayXd xb(m * img_size);
        for (int i = 0; i < m; ++i) xb.segment(i * img_size, img_size) = images[static_cast<std::size_t>(begin + i)];
        Tape t;
        Shape in_shape = {m, 1};
        for (int a = 0; a < cfg.rank(); ++a) in_shape.push_back(cfg.input_size);
        EncT enc = encode_t(t, t.constant(std::move(in_shape), std::move(xb)));
        for (int i = 0; i < m; ++i)
            mu.row(begin + i) =
                Eigen::Map<const Eigen::VectorXd>(enc.mu.value().data() + static_cast<std::int64_t>(i) * cfg.latent_dim,
                                                  cfg.latent_dim);
    }
    return mu;
}

GrayVolume PVAEModel::decode(const Eigen::VectorXd& z) const {
    if (z.size() != cfg.latent_dim) throw ShapeError("decode: latent length mismatch");
    Tape t;
    Var zv = t.constant({1, cfg.latent_dim}, z.array());
    Var out = decode_t(t, zv);
    const int S = cfg.input_size;
    GrayVolume v = cfg.mode == ConvMode::two_d ? GrayVolume(1, S, S) : GrayVolume(S, S, S);
    const auto& val = out.value();
    if (cfg.mode == ConvMode::two_d) {
        for (int zc = 0; zc < S; ++zc)
            for (int y = 0; y < S; ++y) v.values[v.index(0, y, zc)] = val[static_cast<std::int64_t>(zc) * S + y];
    } else {
        for (std::int64_t i = 0; i < val.size(); ++i) v.values[static_cast<std::size_t>(i)] = val[i];
    }
    return v;
}

Eigen::VectorXd PVAEModel::regress(const Eigen::VectorXd& latent) const {
    if (latent.size() != cfg.latent_dim) throw ShapeError("regress: latent length mismatch");
    if (!bounds_set) throw ModelStateError("regress: normalization bounds are not set (untrained model)");
    Tape t;
    Var zv = t.constant({1, cfg.latent_dim}, latent.array());
    Var out = regress_t(t, zv);
    return denormalize_props(Eigen::Map<const Eigen::VectorXd>(out.value().data(), cfg.property_dim));
}

Eigen::VectorXd PVAEModel::normalize_props(const Eigen::VectorXd& raw) const {
    if (!bounds_set) throw ModelStateError("normalize_props: bounds not set");
    return ((raw - prop_min).array() / prop_span.array()).matrix();
}

Eigen::VectorXd PVAEModel::denormalize_props(const Eigen::VectorXd& norm) const {
    if (!bounds_set) throw ModelStateError("denormalize_props: bounds not set");
    return (norm.array() * prop_span.array() + prop_min.array()).matrix();
}

void PVAEModel::set_bounds_from(const Eigen::MatrixXd& raw_props, const std::vector<int>& rows) {
    if (rows.empty()) throw ArgumentError("set_bounds_from: empty row set");
    prop_min = raw_props.row(rows[0]);
    Eigen::VectorXd prop_max = raw_props.row(rows[0]);
    for (int r : rows) {
        prop_min = prop_min.cwiseMin(raw_props.row(r).transpose());
        prop_max = prop_max.cwiseMax(raw_props.row(r).transpose());
    }
    prop_span = prop_max - prop_min;
    for (int i = 0; i < prop_span.size(); ++i)
        if (prop_span[i] <= 0.0) prop_span[i] = 1.0;  // constant property column
    bounds_set = true;
}

std::vector<DTensor*> PVAEModel::encoder_params() const {
    return {enc1_.w, enc1_.b, enc2_.w, enc2_.b, enc3_.w, enc3_.b, enc4_.w, enc4_.b, enc_head_.w, enc_head_.b};
}

std::vector<DTensor*> PVAEModel::decoder_params() const {
    return {dec_fc_.w, dec_fc_.b, dec1_.w, dec1_.b, dec2_.w, dec2_.b,
            dec3_.w,  dec3_.b,  dec4_.w, dec4_.b, dec5_.w, dec5_.b};
}

std::vector<DTensor*> PVAEModel::regressor_params() const {
    return {reg1_.w, reg1_.b, reg2_.w, reg2_.b, reg3_.w, reg3_.b, reg4_.w, reg4_.b};
}

void PVAEModel::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json meta;
    meta["type"] = "pvae";
    meta["mode"] = cfg.mode == ConvMode::two_d ? "2d" : "3d";
    meta["input_size"] = cfg.input_size;
    meta["latent_dim"] = cfg.latent_dim;
    meta["property_dim"] = cfg.property_dim;
    meta["steepness"] = cfg.steepness;
    meta["beta"] = cfg.beta;
    meta["lambda"] = cfg.lambda;
    meta["channels"] = cfg.channels;
    meta["seed"] = cfg.seed;
    meta["bounds_set"] = bounds_set;
    meta["property_names"] = property_names;
    if (bounds_set) {
        meta["prop_min"] = std::vector<double>(prop_min.data(), prop_min.data() + prop_min.size());
        meta["prop_span"] = std::vector<double>(prop_span.data(), prop_span.data() + prop_span.size());
    }
    diff::save_checkpoint(path, params.named(), meta);
}

PVAEModel PVAEModel::load(const std::filesystem::path& path) {
    diff::Checkpoint ck = diff::load_checkpoint(path);
    const auto& meta = ck.meta;
    if (!meta.contains("type") || meta["type"] != "pvae")
        throw FormatError("PVAEModel::load: not a pvae checkpoint: " + path.string());
    PVAEConfig cfg;
    cfg.mode = meta["mode"] == "2d" ? ConvMode::two_d : ConvMode::three_d;
    cfg.input_size = meta["input_size"].get<int>();
    cfg.latent_dim = meta["latent_dim"].get<int>();
    cfg.property_dim = meta["property_dim"].get<int>();
    cfg.steepness = meta["steepness"].get<double>();
    cfg.beta = meta["beta"].get<double>();
    cfg.lambda = meta["lambda"].get<double>();
    cfg.channels = meta["channels"].get<std::array<int, 4>>();
    cfg.seed = meta["seed"].get<std::uint64_t>();

    PVAEModel m = create(cfg);
    for (auto& [name, t] : ck.params) {
        DTensor* dst = m.params.get(name);
        if (dst->shape != t.shape)
            throw FormatError("PVAEModel::load: shape mismatch for " + name);
        dst->value = t.value;
    }
    m.property_names = meta.value("property_names", std::vector<std::string>{});
    m.bounds_set = meta.value("bounds_set", false);
    if (m.bounds_set) {
        const auto mn = meta["prop_min"].get<std::vector<double>>();
        const auto sp = meta["prop_span"].get<std::vector<double>>();
        m.prop_min = Eigen::Map<const Eigen::VectorXd>(mn.data(), static_cast<Eigen::Index>(mn.size()));
        m.prop_span = Eigen::Map<const Eigen::VectorXd>(sp.data(), static_cast<Eigen::Index>(sp.size()));
    }
    return m;
}

SplitIndices split_dataset(std::int64_t n, double train_frac, double val_frac, std::uint64_t seed) {
    if (n < 3) throw ConfigError("split_dataset: need at least 3 samples");
    std::vector<int> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);
    Rng rng(derive_seed(seed, "split"));
    for (std::int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    const auto n_train = std::max<std::int64_t>(1, static_cast<std::int64_t>(train_frac * static_cast<double>(n)));
    const auto n_val = std::max<std::int64_t>(1, static_cast<std::int64_t>(val_frac * static_cast<double>(n)));
    if (n_train + n_val >= n) throw ConfigError("split_dataset: empty test split");

    SplitIndices s;
    s.train.assign(order.begin(), order.begin() + n_train);
    s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    s.test.assign(order.begin() + n_train + n_val, order.end());
    return s;
}

namespace {

struct BatchData {
    Eigen::ArrayXd x;       // n * img
    Eigen::ArrayXd p_norm;  // n * P
    int n = 0;
};

BatchData gather_batch(const PropertyDataset& data, const PVAEModel& model, const std::vector<int>& idx,
                       std::size_t begin, std::size_t end) {
    BatchData b;
    b.n = static_cast<int>(end - begin);
    const std::int64_t img = data.images[0].size();
    const int P = model.cfg.property_dim;
    b.x.resize(b.n * img);
    b.p_norm.resize(static_cast<std::int64_t>(b.n) * P);
    for (std::size_t i = begin; i < end; ++i) {
        const int row = idx[i];
        b.x.segment(static_cast<std::int64_t>(i - begin) * img, img) = data.images[static_cast<std::size_t>(row)];
        const Eigen::VectorXd pn = model.normalize_props(data.properties.row(row));
        for (int j = 0; j < P; ++j) b.p_norm[static_cast<std::int64_t>(i - begin) * P + j] = pn[j];
    }
    return b;
}

Var kl_sum_t(Var mu, Var logvar) {
    // -1/2 sum (1 + logvar - exp(logvar) - mu^2)
    Var inner = add_scalar(sub(sub(logvar, exp_op(logvar)), square(mu)), 1.0);
    return mul_scalar(sum(inner), -0.5);
}

struct Snapshot {
    std::vector<Eigen::ArrayXd> values;
};

Snapshot take_snapshot(const std::vector<DTensor*>& params) {
    Snapshot s;
    for (const DTensor* p : params) s.values.push_back(p->value);
    return s;
}

void restore_snapshot(const std::vector<DTensor*>& params, const Snapshot& s) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s.values[i];
}

}  // namespace

TrainHistory train(PVAEModel& model, const PropertyDataset& data, const TrainConfig& cfg) {
    model.cfg.validate();
    if (data.n() < 3) throw ConfigError("train: dataset too small");
    if (data.properties.rows() != data.n() || data.properties.cols() != model.cfg.property_dim)
        throw ConfigError("train: property table does not match dataset");

    TrainHistory hist;
    hist.split = split_dataset(data.n(), cfg.train_frac, cfg.val_frac, cfg.seed);
    if (hist.split.train.empty() || hist.split.val.empty())
        throw ConfigError("train: empty split");

    if (!model.bounds_set) model.set_bounds_from(data.properties, hist.split.train);

    const double beta = model.cfg.beta;
    const double lambda = model.cfg.lambda;
    const std::int64_t img = data.images[0].size();
    const int L = model.cfg.latent_dim;
    const int P = model.cfg.property_dim;

    Shape batch_shape_proto = {0, 1};
    for (int a = 0; a < model.cfg.rank(); ++a) batch_shape_proto.push_back(model.cfg.input_size);

    // forward pass over a split; eps = 0 keeps validation deterministic
    auto evaluate = [&](const std::vector<int>& rows, bool with_recon, bool with_prop) {
        EpochLog log;
        const std::size_t chunk = 32;
        double recon = 0, kl = 0, prop = 0;
        for (std::size_t begin = 0; begin < rows.size(); begin += chunk) {
            const std::size_t end = std::min(begin + chunk, rows.size());
            BatchData b = gather_batch(data, model, rows, begin, end);
            Tape t;
            Shape bs = batch_shape_proto;
            bs[0] = b.n;
            Var x = t.constant(bs, b.x);
            auto enc = model.encode_t(t, x);
            if (with_recon) {
                Var xhat = model.decode_t(t, enc.mu);  // eps = 0 -> z = mu
                recon += bce_sum(xhat, b.x).value()[0];
                kl += kl_sum_t(enc.mu, enc.logvar).value()[0];
            }
            if (with_prop) {
                Var pred = model.regress_t(t, enc.mu);
                prop += (pred.value() - b.p_norm).matrix().squaredNorm();
            }
        }
        const double n = static_cast<double>(rows.size());
        log.recon = recon / n;
        log.kl = kl / n;
        log.prop = prop / n;
        log.total = log.recon + beta * log.kl + lambda * log.prop;
        return log;
    };

    struct StageSpec {
        Stage stage;
        const char* name;
        double lr;
        int epochs;
        bool with_recon, with_prop;
    };
    std::vector<StageSpec> specs;
    if (cfg.stage == Stage::vae || cfg.stage == Stage::all)
        specs.push_back({Stage::vae, "vae", cfg.lr_vae, cfg.epochs_vae, true, false});
    if (cfg.stage == Stage::regressor || cfg.stage == Stage::all)
        specs.push_back({Stage::regressor, "regressor", cfg.lr_regressor, cfg.epochs_regressor, false, true});
    if (cfg.stage == Stage::joint || cfg.stage == Stage::all)
        specs.push_back({Stage::joint, "joint", cfg.lr_joint, cfg.epochs_joint, true, true});

    double best_val_overall = std::numeric_limits<double>::infinity();

    for (const StageSpec& spec : specs) {
        std::vector<DTensor*> trainable;
        if (spec.stage == Stage::vae) {
            trainable = model.encoder_params();
            for (DTensor* p : model.decoder_params()) trainable.push_back(p);
        } else if (spec.stage == Stage::regressor) {
            trainable = model.regressor_params();
        } else {
            trainable = model.encoder_params();  // decoder stays frozen in the joint stage
            for (DTensor* p : model.regressor_params()) trainable.push_back(p);
        }

        // freeze everything outside the trainable group
        std::vector<DTensor*> all = model.params.all();
        std::vector<bool> was_rg;
        for (DTensor* p : all) {
            was_rg.push_back(p->requires_grad);
            p->set_requires_grad(std::find(trainable.begin(), trainable.end(), p) != trainable.end());
        }

        diff::AdamConfig adam_cfg;
        adam_cfg.lr = spec.lr;
        diff::AdamState adam;
        adam.init(trainable);

        // pre-training validation row is the stage's starting "best"
        EpochLog val0 = evaluate(hist.split.val, spec.with_recon, spec.with_prop);
        val0.stage = spec.name;
        val0.epoch = 0;
        val0.split = "val";
        val0.lr = adam_cfg.lr;
        const auto stage_total = [&](const EpochLog& l) {
            double tot = 0.0;
            if (spec.with_recon) tot += l.recon + beta * l.kl;
            if (spec.with_prop) tot += lambda * l.prop;
            return tot;
        };
        hist.rows.push_back(val0);
        double best_val = stage_total(val0);
        Snapshot best = take_snapshot(trainable);
        int wait_early = 0, wait_lr = 0;

        // regressor stage trains on frozen latent means; precompute them once
        Eigen::MatrixXd frozen_mu;
        if (spec.stage == Stage::regressor) frozen_mu = model.encode_mu(data.images);

        std::vector<int> order = hist.split.train;

        for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
            Rng shuffle_rng(derive_seed(cfg.seed, std::string("shuffle.") + spec.name, static_cast<std::uint64_t>(epoch)));
            for (std::size_t i = order.size() - 1; i > 0; --i)
                std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

            Rng eps_rng(derive_seed(cfg.seed, std::string("eps.") + spec.name, static_cast<std::uint64_t>(epoch)));

            // KL ramp applies to the VAE pretraining stage only
            double beta_eff = beta;
            if (spec.stage == Stage::vae && cfg.kl_warmup_epochs > 0 && epoch <= cfg.kl_warmup_epochs)
                beta_eff = beta * static_cast<double>(epoch) / static_cast<double>(cfg.kl_warmup_epochs);

            double recon_acc = 0, kl_acc = 0, prop_acc = 0;
            for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch)) {
                const std::size_t end = std::min(begin + static_cast<std::size_t>(cfg.batch), order.size());
                BatchData b = gather_batch(data, model, order, begin, end);
                const double inv_n = 1.0 / b.n;

                Tape t;
                Var total{};
                if (spec.stage == Stage::regressor) {
                    Eigen::ArrayXd mu_b(static_cast<std::int64_t>(b.n) * L);
                    for (int i = 0; i < b.n; ++i)
                        for (int j = 0; j < L; ++j)
                            mu_b[static_cast<std::int64_t>(i) * L + j] = frozen_mu(order[begin + static_cast<std::size_t>(i)], j);
                    Var mu = t.constant({b.n, L}, std::move(mu_b));
                    Var pred = model.regress_t(t, mu);
                    Var pn = t.constant({b.n, P}, b.p_norm);
                    Var prop = mul_scalar(sum(square(sub(pred, pn))), inv_n);
                    prop_acc += prop.value()[0] * b.n;
                    total = mul_scalar(prop, lambda);
                } else {
                    Shape bs = batch_shape_proto;
                    bs[0] = b.n;
                    Var x = t.constant(bs, b.x);
                    auto enc = model.encode_t(t, x);
                    Eigen::ArrayXd eps_v(static_cast<std::int64_t>(b.n) * L);
                    for (std::int64_t i = 0; i < eps_v.size(); ++i) eps_v[i] = eps_rng.normal();
                    Var eps = t.constant({b.n, L}, std::move(eps_v));
                    Var sigma = exp_op(mul_scalar(enc.logvar, 0.5));
                    Var z = add(enc.mu, mul(sigma, eps));
                    Var xhat = model.decode_t(t, z);
                    Var recon = mul_scalar(bce_sum(xhat, b.x), inv_n);
                    Var kl = mul_scalar(kl_sum_t(enc.mu, enc.logvar), inv_n);
                    recon_acc += recon.value()[0] * b.n;
                    kl_acc += kl.value()[0] * b.n;
                    total = add(recon, mul_scalar(kl, beta_eff));
                    if (spec.with_prop) {
                        Var pred = model.regress_t(t, enc.mu);
                        Var pn = t.constant({b.n, P}, b.p_norm);
                        Var prop = mul_scalar(sum(square(sub(pred, pn))), inv_n);
                        prop_acc += prop.value()[0] * b.n;
                        total = add(total, mul_scalar(prop, lambda));
                    }
                }

                if (!std::isfinite(total.value()[0]))
                    throw DivergenceError("train: non-finite loss in stage " + std::string(spec.name), epoch);

                model.params.zero_grads();
                t.backward(total);
                diff::adam_step(trainable, adam, adam_cfg);
            }

            const double n_train = static_cast<double>(order.size());
            EpochLog tr;
            tr.stage = spec.name;
            tr.epoch = epoch;
            tr.split = "train";
            tr.recon = recon_acc / n_train;
            tr.kl = kl_acc / n_train;
            tr.prop = prop_acc / n_train;
            tr.total = tr.recon + beta * tr.kl + lambda * tr.prop;
            tr.lr = adam_cfg.lr;
            hist.rows.push_back(tr);

            EpochLog vl = evaluate(hist.split.val, spec.with_recon, spec.with_prop);
            vl.stage = spec.name;
            vl.epoch = epoch;
            vl.split = "val";
            vl.lr = adam_cfg.lr;
            hist.rows.push_back(vl);

            const double vt = stage_total(vl);
            const bool warming =
                spec.stage == Stage::vae && cfg.kl_warmup_epochs > 0 && epoch <= cfg.kl_warmup_epochs;
            if (warming || vt < best_val - 1e-12) {
                best_val = vt;
                best = take_snapshot(trainable);
                wait_early = 0;
                wait_lr = 0;
            } else {
                ++wait_early;
                ++wait_lr;
                if (wait_lr >= cfg.patience_lr) {
                    adam_cfg.lr *= cfg.lr_factor;
                    wait_lr = 0;
                }
                if (wait_early >= cfg.patience_early) break;
            }
        }

        if (cfg.restore_best) restore_snapshot(trainable, best);
        best_val_overall = best_val;

        for (std::size_t i = 0; i < all.size(); ++i) all[i]->set_requires_grad(was_rg[i]);
    }

    hist.best_val_total = best_val_overall;
    return hist;
}

}  // namespace poro::pvae
