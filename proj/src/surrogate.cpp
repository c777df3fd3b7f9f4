#include "poro/surrogate.hpp"

#include "poro/error.hpp"

#include <algorithm>
#include <cmath>

namespace poro::surrogate {

using diff::mul_scalar;
using diff::relu;
using diff::reshape;
using diff::Shape;
using diff::square;
using diff::sub;
using diff::sum;

void SurrogateConfig::validate() const {
    if (input_size < 16 || input_size % 16 != 0)
        throw ConfigError("SurrogateConfig: input_size must be a multiple of 16");
    if (base_channels <= 0) throw ConfigError("SurrogateConfig: base_channels must be positive");
    for (int k : kernels)
        if (k < 1 || k % 2 == 0) throw ConfigError("SurrogateConfig: kernels must be odd");
}

void SurrogateModel::build(Rng& rng) {
    const int r = cfg.rank();
    const int b = cfg.base_channels;
    c1_ = nn::Conv::make(params, "conv1", 1, b, cfg.kernels[0], 1, cfg.kernels[0] / 2, r, rng);
    c2_ = nn::Conv::make(params, "conv2", b, 2 * b, cfg.kernels[1], 1, cfg.kernels[1] / 2, r, rng);
    c3_ = nn::Conv::make(params, "conv3", 2 * b, 4 * b, cfg.kernels[2], 1, cfg.kernels[2] / 2, r, rng);
    c4_ = nn::Conv::make(params, "conv4", 4 * b, 8 * b, cfg.kernels[3], 1, cfg.kernels[3] / 2, r, rng);
    std::int64_t flat = 8 * b;
    for (int a = 0; a < r; ++a) flat *= cfg.input_size / 16;
    d1_ = nn::Dense::make(params, "dense1", static_cast<int>(flat), 64, rng);
    d2_ = nn::Dense::make(params, "dense2", 64, 32, rng);
    d3_ = nn::Dense::make(params, "dense3", 32, 2, rng);
}

SurrogateModel SurrogateModel::create(const SurrogateConfig& cfg) {
    cfg.validate();
    SurrogateModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(cfg.seed, "surrogate.init"));
    m.build(rng);
    return m;
}

Var SurrogateModel::predict_t(Tape& t, Var x) const {
    const bool two_d = cfg.rank() == 2;
    auto pool = [&](Var h) { return two_d ? diff::maxpool2d(h, 2, 2) : diff::maxpool3d(h, 2, 2); };
    Var h = pool(relu(c1_(t, diff::add_scalar(x, -0.5))));
    h = pool(relu(c2_(t, h)));
    h = pool(relu(c3_(t, h)));
    h = pool(relu(c4_(t, h)));
    std::int64_t flat = 1;
    for (std::size_t a = 1; a < h.shape().size(); ++a) flat *= h.shape()[a];
    h = reshape(h, {h.shape()[0], static_cast<int>(flat)});
    h = relu(d1_(t, h));
    h = relu(d2_(t, h));
    return d3_(t, h);  // linear output
}

Eigen::Vector2d SurrogateModel::predict(const Eigen::ArrayXd& image) const {
    if (!bounds_set) throw ModelStateError("predict: normalization bounds are not set (untrained model)");
    Tape t;
    Shape in_shape = {1, 1};
    for (int a = 0; a < cfg.rank(); ++a) in_shape.push_back(cfg.input_size);
    if (diff::shape_size(in_shape) != image.size())
        throw ShapeError("predict: image size " + std::to_string(image.size()) + " does not match " +
                         diff::shape_str(in_shape));
    Var out = predict_t(t, t.constant(std::move(in_shape), image));
    Eigen::Vector2d norm(out.value()[0], out.value()[1]);
    return (norm.array() * out_span.array() + out_min.array()).matrix();
}

Eigen::MatrixXd SurrogateModel::predict_batch(const std::vector<Eigen::ArrayXd>& images) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), 2);
    for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = predict(images[i]);
    return out;
}

void SurrogateModel::save(const std::filesystem::path& path) const {
    nlohmann::ordered_json meta;
    meta["type"] = "surrogate";
    meta["mode"] = cfg.mode == ConvMode::two_d ? "2d" : "3d";
    meta["input_size"] = cfg.input_size;
    meta["base_channels"] = cfg.base_channels;
    meta["kernels"] = cfg.kernels;
    meta["seed"] = cfg.seed;
    meta["bounds_set"] = bounds_set;
    meta["out_min"] = std::array<double, 2>{out_min[0], out_min[1]};
    meta["out_span"] = std::array<double, 2>{out_span[0], out_span[1]};
    diff::save_checkpoint(path, params.named(), meta);
}

SurrogateModel SurrogateModel::load(const std::filesystem::path& path) {
    diff::Checkpoint ck = diff::load_checkpoint(path);
    const auto& meta = ck.meta;
    if (!meta.contains("type") || meta["type"] != "surrogate")
        throw FormatError("SurrogateModel::load: not a surrogate checkpoint: " + path.string());
    SurrogateConfig cfg;
    cfg.mode = meta["mode"] == "2d" ? ConvMode::two_d : ConvMode::three_d;
    cfg.input_size = meta["input_size"].get<int>();
    cfg.base_channels = meta["base_channels"].get<int>();
    cfg.kernels = meta["kernels"].get<std::array<int, 4>>();
    cfg.seed = meta["seed"].get<std::uint64_t>();
    SurrogateModel m = create(cfg);
    for (auto& [name, t] : ck.params) {
        DTensor* dst = m.params.get(name);
        if (dst->shape != t.shape) throw FormatError("SurrogateModel::load: shape mismatch for " + name);
        dst->value = t.value;
    }
    m.bounds_set = meta.value("bounds_set", false);
    const auto mn = meta["out_min"].get<std::array<double, 2>>();
    const auto sp = meta["out_span"].get<std::array<double, 2>>();
    m.out_min = Eigen::Vector2d(mn[0], mn[1]);
    m.out_span = Eigen::Vector2d(sp[0], sp[1]);
    return m;
}

SurrogateHistory train_surrogate(SurrogateModel& model, const PropertyDataset& data,
                                 const SurrogateTrainConfig& cfg) {
    model.cfg.validate();
    if (data.n() < 3) throw ConfigError("train_surrogate: dataset too small");
    if (data.properties.cols() != 2)
        throw ConfigError("train_surrogate: expected 2 property columns (n_F, K11)");
    for (Eigen::Index i = 0; i < data.properties.size(); ++i)
        if (!std::isfinite(data.properties.data()[i]))
            throw ConfigError("train_surrogate: non-finite label");

    SurrogateHistory hist;
    hist.split = pvae::split_dataset(data.n(), cfg.train_frac, cfg.val_frac, cfg.seed);

    // min-max bounds over the training split
    Eigen::Vector2d lo = data.properties.row(hist.split.train[0]);
    Eigen::Vector2d hi = lo;
    for (int r : hist.split.train) {
        lo = lo.cwiseMin(data.properties.row(r).transpose());
        hi = hi.cwiseMax(data.properties.row(r).transpose());
    }
    model.out_min = lo;
    model.out_span = hi - lo;
    for (int i = 0; i < 2; ++i)
        if (model.out_span[i] <= 0.0) model.out_span[i] = 1.0;
    model.bounds_set = true;

    const std::int64_t img = data.images[0].size();
    Shape proto = {0, 1};
    for (int a = 0; a < model.cfg.rank(); ++a) proto.push_back(model.cfg.input_size);

    auto normalized_targets = [&](const std::vector<int>& rows, std::size_t begin, std::size_t end) {
        Eigen::ArrayXd t(static_cast<std::int64_t>(end - begin) * 2);
        for (std::size_t i = begin; i < end; ++i) {
            const Eigen::Vector2d raw = data.properties.row(rows[i]);
            const Eigen::Vector2d n = ((raw - model.out_min).array() / model.out_span.array()).matrix();
            t[static_cast<std::int64_t>(i - begin) * 2] = n[0];
            t[static_cast<std::int64_t>(i - begin) * 2 + 1] = n[1];
        }
        return t;
    };

    auto eval_mse = [&](const std::vector<int>& rows) {
        double acc = 0.0;
        const std::size_t chunk = 32;
        for (std::size_t begin = 0; begin < rows.size(); begin += chunk) {
            const std::size_t end = std::min(begin + chunk, rows.size());
            const int n = static_cast<int>(end - begin);
            Eigen::ArrayXd xb(n * img);
            for (std::size_t i = begin; i < end; ++i)
                xb.segment(static_cast<std::int64_t>(i - begin) * img, img) = data.images[static_cast<std::size_t>(rows[i])];
            Tape t;
            Shape bs = proto;
            bs[0] = n;
            Var out = model.predict_t(t, t.constant(bs, std::move(xb)));
            acc += (out.value() - normalized_targets(rows, begin, end)).matrix().squaredNorm();
        }
        return acc / static_cast<double>(rows.size());
    };

    std::vector<DTensor*> trainable = model.params.all();
    diff::AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;
    diff::AdamState adam;
    adam.init(trainable);

    double best_val = eval_mse(hist.split.val);
    {
        pvae::EpochLog l;
        l.stage = "surrogate";
        l.epoch = 0;
        l.split = "val";
        l.prop = best_val;
        l.total = best_val;
        l.lr = adam_cfg.lr;
        hist.rows.push_back(l);
    }
    std::vector<Eigen::ArrayXd> best;
    for (DTensor* p : trainable) best.push_back(p->value);
    int wait_early = 0, wait_lr = 0;

    std::vector<int> order = hist.split.train;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "surrogate.shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

        double train_acc = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(begin + static_cast<std::size_t>(cfg.batch), order.size());
            const int n = static_cast<int>(end - begin);
            Eigen::ArrayXd xb(n * img);
            for (std::size_t i = begin; i < end; ++i)
                xb.segment(static_cast<std::int64_t>(i - begin) * img, img) = data.images[static_cast<std::size_t>(order[i])];
            Tape t;
            Shape bs = proto;
            bs[0] = n;
            Var out = model.predict_t(t, t.constant(bs, std::move(xb)));
            Var targ = t.constant({n, 2}, normalized_targets(order, begin, end));
            Var loss = mul_scalar(sum(square(sub(out, targ))), 1.0 / n);
            if (!std::isfinite(loss.value()[0]))
                throw DivergenceError("train_surrogate: non-finite loss", epoch);
            train_acc += loss.value()[0] * n;

            model.params.zero_grads();
            t.backward(loss);
            diff::adam_step(trainable, adam, adam_cfg);
        }

        pvae::EpochLog tr;
        tr.stage = "surrogate";
        tr.epoch = epoch;
        tr.split = "train";
        tr.prop = train_acc / static_cast<double>(order.size());
        tr.total = tr.prop;
        tr.lr = adam_cfg.lr;
        hist.rows.push_back(tr);

        const double val = eval_mse(hist.split.val);
        pvae::EpochLog vl;
        vl.stage = "surrogate";
        vl.epoch = epoch;
        vl.split = "val";
        vl.prop = val;
        vl.total = val;
        vl.lr = adam_cfg.lr;
        hist.rows.push_back(vl);

        if (val < best_val - 1e-14) {
            best_val = val;
            for (std::size_t i = 0; i < trainable.size(); ++i) best[i] = trainable[i]->value;
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

    for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i]->value = best[i];
    hist.best_val_mse = best_val;
    return hist;
}

}  // namespace poro::surrogate
