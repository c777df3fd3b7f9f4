#include "poro/cli.hpp"

#include "poro/error.hpp"
#include "poro/grid.hpp"
#include "poro/inverse.hpp"
#include "poro/latent.hpp"
#include "poro/manifest.hpp"
#include "poro/parallel.hpp"
#include "poro/perm.hpp"
#include "poro/pvae.hpp"
#include "poro/surrogate.hpp"
#include "poro/text.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>

namespace poro::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
    std::uint64_t seed = 0;
    int jobs = default_jobs();
    std::string out = "out";
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--seed", c.seed, "global random seed");
    sub->add_option("--jobs", c.jobs, "worker pool size")->check(CLI::PositiveNumber);
    sub->add_option("--out", c.out, "output directory");
}

std::string sample_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%05d", i);
    return buf;
}

lbm::FlowConfig flow_from(double nu_l, double delta_rho, double tol, long max_steps) {
    lbm::FlowConfig fc;
    fc.nu_l = nu_l;
    fc.rho_in = 1.0 + delta_rho / 2.0;
    fc.rho_out = 1.0 - delta_rho / 2.0;
    fc.tol = tol;
    fc.max_steps = static_cast<int>(max_steps);
    return fc;
}

struct LabeledData {
    Manifest manifest;
    fs::path dir;
    pvae::PropertyDataset dataset;
    std::vector<int> manifest_rows;
};

LabeledData load_dataset(const std::string& data_dir, pvae::ConvMode mode, bool need_k) {
    LabeledData out;
    out.dir = data_dir;
    if (!Manifest::exists(out.dir)) throw IoError("no manifest.json under " + data_dir);
    out.manifest = Manifest::load(out.dir);
    std::vector<Eigen::ArrayXd> images;
    std::vector<std::array<double, 2>> props;
    int input_size = -1;
    for (std::size_t i = 0; i < out.manifest.samples.size(); ++i) {
        const SampleEntry& s = out.manifest.samples[i];
        if (need_k && !(s.has_k && s.status == "ok")) continue;
        const VoxelGrid g = read_grid(out.dir / s.file);
        if (input_size < 0)
            input_size = g.dims[1];
        else if (g.dims[1] != input_size || g.dims[2] != input_size)
            throw ConfigError("dataset mixes cross-section sizes");
        images.push_back(pvae::image_from_grid(g, mode));
        props.push_back({s.n_F, s.k[0]});
        out.dataset.ids.push_back(s.id);
        out.manifest_rows.push_back(static_cast<int>(i));
    }
    if (images.empty()) throw ConfigError("dataset has no usable samples (run `perm` first?)");
    out.dataset.mode = mode;
    out.dataset.input_size = input_size;
    out.dataset.images = std::move(images);
    out.dataset.properties.resize(static_cast<Eigen::Index>(props.size()), 2);
    for (std::size_t i = 0; i < props.size(); ++i) {
        out.dataset.properties(static_cast<Eigen::Index>(i), 0) = props[i][0];
        out.dataset.properties(static_cast<Eigen::Index>(i), 1) = props[i][1];
    }
    return out;
}

void write_train_log(const fs::path& path, const std::vector<pvae::EpochLog>& rows) {
    std::string csv = "epoch,split,recon,kl,prop,total,lr\n";
    for (const auto& r : rows) {
        csv += std::to_string(r.epoch);
        csv += ",";
        csv += r.split;
        csv += ",";
        csv += fmt_double(r.recon);
        csv += ",";
        csv += fmt_double(r.kl);
        csv += ",";
        csv += fmt_double(r.prop);
        csv += ",";
        csv += fmt_double(r.total);
        csv += ",";
        csv += fmt_double(r.lr);
        csv += "\n";
    }
    write_file_atomic(path, csv);
}

// ---- subcommand bodies ---------------------------------------------------------

void run_gen(const Common& c, const GeneratorConfig& base, double spacing) {
    GeneratorConfig cfg = base;
    cfg.seed = c.seed;
    cfg.validate();
    const fs::path dir = c.out;
    fs::create_directories(dir / "grids");
    Manifest manifest;
    if (Manifest::exists(dir)) manifest = Manifest::load(dir);

    std::vector<int> missing;
    for (int i = 0; i < cfg.count; ++i)
        if (!manifest.find(sample_id(i))) missing.push_back(i);

    std::vector<SampleEntry> fresh(missing.size());
    parallel_for(static_cast<std::int64_t>(missing.size()), c.jobs, [&](std::int64_t j) {
        const int i = missing[static_cast<std::size_t>(j)];
        VoxelGrid g = generate_synthetic_one(cfg, cfg.seed + static_cast<std::uint64_t>(i));
        g.spacing.setConstant(spacing);
        SampleEntry e;
        e.id = sample_id(i);
        e.file = "grids/" + e.id + ".vxg";
        e.seed = cfg.seed + static_cast<std::uint64_t>(i);
        e.provenance = "generated";
        e.n_F = porosity(g);
        write_grid(g, dir / e.file);
        fresh[static_cast<std::size_t>(j)] = std::move(e);
    });
    // keep manifest in id order regardless of completion order
    for (auto& e : fresh) manifest.samples.push_back(std::move(e));
    std::sort(manifest.samples.begin(), manifest.samples.end(),
              [](const SampleEntry& a, const SampleEntry& b) { return a.id < b.id; });
    manifest.save(dir);
    std::printf("gen: %d samples in %s (%zu new)\n", cfg.count, dir.string().c_str(), missing.size());
}

void run_subsample(const Common& c, const std::string& in, std::vector<int> size, std::vector<int> stride) {
    const VoxelGrid g = read_grid(in);
    const std::array<int, 3> sz{size[0], size[1], size[2]};
    const std::array<int, 3> st{stride[0], stride[1], stride[2]};
    auto subs = subsample(g, sz, st);
    const fs::path dir = c.out;
    fs::create_directories(dir / "grids");
    Manifest manifest;
    if (Manifest::exists(dir)) manifest = Manifest::load(dir);
    int added = 0;
    for (std::size_t i = 0; i < subs.size(); ++i) {
        const std::string id = "sub" + std::to_string(i);
        if (manifest.find(id)) continue;
        SampleEntry e;
        e.id = id;
        e.file = "grids/" + id + ".vxg";
        e.provenance = "subsampled";
        e.n_F = porosity(subs[i]);
        write_grid(subs[i], dir / e.file);
        manifest.samples.push_back(std::move(e));
        ++added;
    }
    manifest.save(dir);
    std::printf("subsample: %zu sub-volumes (%d new) in %s\n", subs.size(), added, dir.string().c_str());
}

struct PermOptions {
    std::string axis = "all";
    bool full_tensor = false;
    bool dump_velocity = false;
    double nu_l = 1.0 / 6.0;
    double delta_rho = 1e-3;
    double tol = 1e-6;
    long max_steps = 200000;
};

std::array<bool, 3> axes_from(const std::string& axis) {
    if (axis == "all") return {true, true, true};
    if (axis == "x") return {true, false, false};
    if (axis == "y") return {false, true, false};
    if (axis == "z") return {false, false, true};
    throw ArgumentError("perm: --axis must be one of x|y|z|all");
}

nlohmann::ordered_json run_summary(const char* bc_mode, int axis, const perm::AxisRun& rec,
                                   const PermOptions& opt) {
    nlohmann::ordered_json j;
    j["axis"] = std::string(1, "xyz"[axis]);
    j["bc_mode"] = bc_mode;
    j["nu_l"] = opt.nu_l;
    j["delta_rho"] = opt.delta_rho;
    j["steps"] = rec.steps;
    j["residual"] = rec.residual;
    j["u_avg"] = std::array<double, 3>{rec.u_avg[0], rec.u_avg[1], rec.u_avg[2]};
    return j;
}

void write_properties_csv(const fs::path& path, const Manifest& manifest) {
    std::string csv = "sample_id,n_F,K11_lu,K22_lu,K33_lu,K12_lu,K13_lu,K23_lu,steps_x,steps_y,steps_z,status\n";
    for (const auto& s : manifest.samples) {
        csv += s.id;
        csv += ",";
        csv += fmt_double(s.n_F);
        for (int i = 0; i < 6; ++i) {
            csv += ",";
            csv += fmt_double(s.k[i]);
        }
        for (int a = 0; a < 3; ++a) {
            csv += ",";
            csv += std::to_string(s.steps[a]);
        }
        csv += ",";
        csv += s.status;
        csv += "\n";
    }
    write_file_atomic(path, csv);
}

void run_perm(const Common& c, const std::string& in, const std::string& data, const PermOptions& opt) {
    const std::array<bool, 3> want = axes_from(opt.axis);
    perm::HomogenizeConfig hc;
    hc.flow = flow_from(opt.nu_l, opt.delta_rho, opt.tol, opt.max_steps);
    hc.full_tensor = opt.full_tensor;
    hc.axes = want;

    if (!in.empty()) {
        if (!fs::exists(in)) throw IoError("perm: file not found: " + in);
        const VoxelGrid g = read_grid(in);
        const perm::HomogenizeResult r = perm::homogenize(g, hc);
        std::printf("porosity %s\n", fmt_double(r.porosity).c_str());
        const char* names[6] = {"K11_lu", "K22_lu", "K33_lu", "K12_lu", "K13_lu", "K23_lu"};
        const double vals[6] = {r.tensor.lattice(0, 0), r.tensor.lattice(1, 1), r.tensor.lattice(2, 2),
                                r.tensor.lattice(0, 1), r.tensor.lattice(0, 2), r.tensor.lattice(1, 2)};
        const int shown = opt.full_tensor ? 6 : 3;
        for (int i = 0; i < shown; ++i) std::printf("%s %s\n", names[i], fmt_double(vals[i]).c_str());
        const Eigen::Matrix3d phys = r.tensor.physical(g.spacing);
        std::printf("K11_m2 %s\n", fmt_double(phys(0, 0)).c_str());
        return;
    }

    if (data.empty()) throw ArgumentError("perm: need --in FILE or --data DIR");
    const fs::path dir = data;
    if (!Manifest::exists(dir)) throw IoError("perm: no manifest.json under " + data);
    Manifest manifest = Manifest::load(dir);

    struct Slot {
        bool ran = false;
        SampleEntry entry;
    };
    std::vector<Slot> slots(manifest.samples.size());

    parallel_for(static_cast<std::int64_t>(manifest.samples.size()), c.jobs, [&](std::int64_t i) {
        SampleEntry e = manifest.samples[static_cast<std::size_t>(i)];
        const bool mode_ok = opt.full_tensor ? e.k_mode == "full" : e.k_mode != "none";
        bool axes_ok = true;
        for (int a = 0; a < 3; ++a)
            if (want[a] && !e.axes_done[a]) axes_ok = false;
        if (e.status == "ok" && e.has_k && mode_ok && axes_ok) return;  // resumable skip

        Slot& slot = slots[static_cast<std::size_t>(i)];
        slot.ran = true;
        try {
            const VoxelGrid g = read_grid(dir / e.file);
            const perm::HomogenizeResult r = perm::homogenize(g, hc);
            e.n_F = r.porosity;
            e.has_k = true;
            e.k = {r.tensor.lattice(0, 0), r.tensor.lattice(1, 1), r.tensor.lattice(2, 2),
                   r.tensor.lattice(0, 1), r.tensor.lattice(0, 2), r.tensor.lattice(1, 2)};
            e.k_mode = opt.full_tensor ? "full" : "diag";
            for (int a = 0; a < 3; ++a) {
                if (!want[a]) continue;
                e.axes_done[a] = true;
                e.steps[a] = r.no_slip[a].steps;
                if (r.no_slip[a].status != "skipped")
                    e.lbm_runs.push_back(run_summary("no_slip", a, r.no_slip[a], opt));
                if (opt.full_tensor && r.slip[a].status != "skipped")
                    e.lbm_runs.push_back(run_summary("natural_slip", a, r.slip[a], opt));
            }
            e.status = "ok";
            if (opt.dump_velocity) {
                for (int a = 0; a < 3; ++a) {
                    if (!want[a] || r.no_slip[a].status != "ok") continue;
                    lbm::FlowConfig fc = hc.flow;
                    fc.axis = static_cast<lbm::Axis>(a);
                    const lbm::FlowResult fr = lbm::run_to_steady(g, fc);
                    lbm::write_velocity_field(fr, dir / (e.file + "." + std::string(1, "xyz"[a]) + ".vxf"));
                }
            }
        } catch (const Error& ex) {
            e.status = std::string("error:") + ex.what();
        }
        slot.entry = std::move(e);
    });

    int ran = 0;
    for (std::size_t i = 0; i < slots.size(); ++i)
        if (slots[i].ran) {
            manifest.samples[i] = std::move(slots[i].entry);
            ++ran;
        }
    manifest.save(dir);
    write_properties_csv(dir / "properties.csv", manifest);
    std::printf("perm: %zu samples (%d run, %zu skipped) -> %s\n", slots.size(), ran, slots.size() - static_cast<std::size_t>(ran),
                (dir / "properties.csv").string().c_str());
}

void run_train_surrogate(const Common& c, const std::string& data, const std::string& model_out,
                         surrogate::SurrogateTrainConfig tc, const std::string& mode) {
    const pvae::ConvMode m = mode == "3d" ? pvae::ConvMode::three_d : pvae::ConvMode::two_d;
    LabeledData ld = load_dataset(data, m, true);
    surrogate::SurrogateConfig sc;
    sc.mode = m;
    sc.input_size = ld.dataset.input_size;
    sc.seed = c.seed;
    tc.seed = c.seed;
    surrogate::SurrogateModel model = surrogate::SurrogateModel::create(sc);
    surrogate::SurrogateHistory hist = surrogate::train_surrogate(model, ld.dataset, tc);

    const fs::path out = model_out.empty() ? fs::path(c.out) / "surrogate.pvk" : fs::path(model_out);
    model.save(out);
    write_train_log(out.string() + ".train_log.csv", hist.rows);

    // held-out accuracy (needs at least two test rows)
    const auto& test = hist.split.test;
    if (test.size() < 2) {
        std::printf("train-surrogate: model %s (test split too small for R2)\n", out.string().c_str());
        return;
    }
    Eigen::VectorXd t0(test.size()), p0(test.size()), t1(test.size()), p1(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        const Eigen::Vector2d pred = model.predict(ld.dataset.images[static_cast<std::size_t>(test[i])]);
        t0[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 0);
        t1[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 1);
        p0[static_cast<Eigen::Index>(i)] = pred[0];
        p1[static_cast<Eigen::Index>(i)] = pred[1];
    }
    std::printf("train-surrogate: model %s  test R2 n_F %s  K11 %s\n", out.string().c_str(),
                fmt_double(r_squared(t0, p0)).c_str(), fmt_double(r_squared(t1, p1)).c_str());
}

void run_train_pvae(const Common& c, const std::string& data, const std::string& model_out,
                    const std::string& model_in, pvae::TrainConfig tc, pvae::PVAEConfig pc,
                    const std::string& stage) {
    LabeledData ld = load_dataset(data, pc.mode, true);
    pc.input_size = ld.dataset.input_size;
    pc.seed = c.seed;
    tc.seed = c.seed;

    if (stage == "vae")
        tc.stage = pvae::Stage::vae;
    else if (stage == "regressor")
        tc.stage = pvae::Stage::regressor;
    else if (stage == "joint")
        tc.stage = pvae::Stage::joint;
    else if (stage == "all")
        tc.stage = pvae::Stage::all;
    else
        throw ArgumentError("train-pvae: --stage must be vae|regressor|joint|all");

    pvae::PVAEModel model =
        model_in.empty() ? pvae::PVAEModel::create(pc) : pvae::PVAEModel::load(model_in);
    model.property_names = {"n_F", "K11_lu"};
    pvae::TrainHistory hist = pvae::train(model, ld.dataset, tc);

    const fs::path out = model_out.empty() ? fs::path(c.out) / "pvae.pvk" : fs::path(model_out);
    model.save(out);
    write_train_log(out.string() + ".train_log.csv", hist.rows);

    const auto& test = hist.split.test;
    if (test.size() < 2) {
        std::printf("train-pvae: model %s (test split too small for R2)\n", out.string().c_str());
        return;
    }
    Eigen::VectorXd t0(test.size()), p0(test.size()), t1(test.size()), p1(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        const pvae::LatentCode code = model.encode(ld.dataset.images[static_cast<std::size_t>(test[i])]);
        const Eigen::VectorXd pred = model.regress(code.mu);
        t0[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 0);
        t1[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 1);
        p0[static_cast<Eigen::Index>(i)] = pred[0];
        p1[static_cast<Eigen::Index>(i)] = pred[1];
    }
    std::printf("train-pvae: model %s  test R2 n_F %s  K11 %s\n", out.string().c_str(),
                fmt_double(r_squared(t0, p0)).c_str(), fmt_double(r_squared(t1, p1)).c_str());
}

void run_interp(const Common& c, const std::string& model_path, const std::string& data,
                const std::string& from_id, const std::string& to_id, int steps,
                const std::string& verify, const std::string& surrogate_path, int lbm_depth) {
    if (steps < 2) throw ArgumentError("interp: --steps must be at least 2");
    pvae::PVAEModel model = pvae::PVAEModel::load(model_path);
    LabeledData ld = load_dataset(data, model.cfg.mode, false);

    auto image_of = [&](const std::string& id) {
        for (std::size_t i = 0; i < ld.dataset.ids.size(); ++i)
            if (ld.dataset.ids[i] == id) return ld.dataset.images[i];
        throw ArgumentError("interp: id not in dataset: " + id);
    };
    const Eigen::VectorXd z0 = model.encode(image_of(from_id)).mu;
    const Eigen::VectorXd z1 = model.encode(image_of(to_id)).mu;

    std::optional<surrogate::SurrogateModel> ver;
    if (verify == "surrogate") {
        if (surrogate_path.empty()) throw ArgumentError("interp: --verify surrogate needs --surrogate-model");
        ver = surrogate::SurrogateModel::load(surrogate_path);
    } else if (verify != "regressor" && verify != "lbm") {
        throw ArgumentError("interp: --verify must be regressor|surrogate|lbm");
    }

    const fs::path dir = fs::path(c.out) / "interp";
    fs::create_directories(dir);
    std::string csv = "step,t,pred_nF,pred_K11,ver_nF,ver_K11\n";
    for (int i = 0; i < steps; ++i) {
        const double t = static_cast<double>(i) / (steps - 1);
        const Eigen::VectorXd zt = slerp(z0, z1, t);
        const GrayVolume decoded = model.decode(zt);
        const VoxelGrid grid = binarize(decoded, 0.5);
        char name[32];
        std::snprintf(name, sizeof(name), "step%03d.vxg", i);
        write_grid(grid, dir / name);

        const Eigen::VectorXd pred = model.regress(zt);
        double ver_nf = std::numeric_limits<double>::quiet_NaN();
        double ver_k = std::numeric_limits<double>::quiet_NaN();
        if (ver) {
            const Eigen::Vector2d v = ver->predict(pvae::image_from_grid(grid, model.cfg.mode));
            ver_nf = v[0];
            ver_k = v[1];
        } else if (verify == "lbm") {
            perm::HomogenizeConfig hc;
            hc.flow = flow_from(1.0 / 6.0, 1e-3, 1e-6, 200000);
            hc.axes = {true, false, false};
            const perm::HomogenizeResult h = perm::homogenize(extrude_x(grid, lbm_depth), hc);
            ver_nf = h.porosity;
            ver_k = h.tensor.lattice(0, 0);
        }
        csv += std::to_string(i);
        csv += ",";
        csv += fmt_double(t);
        csv += ",";
        csv += fmt_double(pred[0]);
        csv += ",";
        csv += fmt_double(pred[1]);
        csv += ",";
        csv += fmt_double(ver_nf);
        csv += ",";
        csv += fmt_double(ver_k);
        csv += "\n";
    }
    write_file_atomic(dir / "interp.csv", csv);
    std::printf("interp: %d steps -> %s\n", steps, (dir / "interp.csv").string().c_str());
}

void run_analyze(const Common& c, const std::string& model_path, const std::string& data, int components) {
    pvae::PVAEModel model = pvae::PVAEModel::load(model_path);
    LabeledData ld = load_dataset(data, model.cfg.mode, false);
    const Eigen::MatrixXd mu = model.encode_mu(ld.dataset.images);
    const int k = std::min<int>(components, model.cfg.latent_dim);

    const fs::path dir = fs::path(c.out) / "analysis";
    fs::create_directories(dir);

    {
        std::string csv = "dim,x,density\n";
        for (int d = 0; d < mu.cols(); ++d) {
            const KdeResult kde = kde_density(mu.col(d));
            for (int i = 0; i < kde.x.size(); ++i) {
                csv += std::to_string(d);
                csv += ",";
                csv += fmt_double(kde.x[i]);
                csv += ",";
                csv += fmt_double(kde.density[i]);
                csv += "\n";
            }
        }
        write_file_atomic(dir / "kde_latent.csv", csv);
    }

    const PcaResult pca = pca_project(mu, k);
    {
        std::string csv = "component,variance,ratio\n";
        for (int i = 0; i < k; ++i) {
            csv += std::to_string(i + 1);
            csv += ",";
            csv += fmt_double(pca.explained_variance[i]);
            csv += ",";
            csv += fmt_double(pca.explained_ratio[i]);
            csv += "\n";
        }
        write_file_atomic(dir / "pca_variance.csv", csv);
    }
    {
        std::string csv = "sample_id";
        for (int i = 0; i < k; ++i) csv += ",pc" + std::to_string(i + 1);
        csv += ",n_F,K11_lu\n";
        for (Eigen::Index r = 0; r < pca.projections.rows(); ++r) {
            csv += ld.dataset.ids[static_cast<std::size_t>(r)];
            for (int i = 0; i < k; ++i) {
                csv += ",";
                csv += fmt_double(pca.projections(r, i));
            }
            csv += ",";
            csv += fmt_double(ld.dataset.properties(r, 0));
            csv += ",";
            csv += fmt_double(ld.dataset.properties(r, 1));
            csv += "\n";
        }
        write_file_atomic(dir / "pca_projections.csv", csv);
    }
    {
        const Eigen::MatrixXd corr = component_property_correlations(pca, ld.dataset.properties);
        std::string csv = "component,property,pearson\n";
        const char* props[2] = {"n_F", "K11_lu"};
        for (int i = 0; i < k; ++i)
            for (int p = 0; p < 2; ++p) {
                csv += std::to_string(i + 1);
                csv += ",";
                csv += props[p];
                csv += ",";
                csv += fmt_double(corr(i, p));
                csv += "\n";
            }
        write_file_atomic(dir / "correlations.csv", csv);
    }
    std::printf("analyze: %zu samples, %d components -> %s\n", ld.dataset.ids.size(), k, dir.string().c_str());
}

std::vector<inverse::DesignTarget> read_targets(const fs::path& path, int property_dim) {
    if (!fs::exists(path)) throw IoError("invert: targets file not found: " + path.string());
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line)) throw FormatError("invert: empty targets file");
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "target_id")
        throw FormatError("invert: targets header must start with target_id,n_F,K11");
    std::vector<inverse::DesignTarget> targets;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (static_cast<int>(f.size()) < 1 + property_dim)
            throw FormatError("invert: short row in targets file");
        inverse::DesignTarget t;
        t.properties.resize(property_dim);
        for (int j = 0; j < property_dim; ++j) t.properties[j] = std::stod(f[static_cast<std::size_t>(1 + j)]);
        t.weights = Eigen::VectorXd::Ones(property_dim);
        if (static_cast<int>(f.size()) >= 3 + property_dim) {
            const double w_nf = std::stod(f[static_cast<std::size_t>(1 + property_dim)]);
            const double w_k = std::stod(f[static_cast<std::size_t>(2 + property_dim)]);
            t.weights[0] = w_nf;
            for (int j = 1; j < property_dim; ++j) t.weights[j] = w_k;
        }
        targets.push_back(std::move(t));
    }
    return targets;
}

void run_invert(const Common& c, const std::string& model_path, const std::string& surrogate_path,
                const std::string& data, const std::string& targets_path, inverse::BatchConfig bc,
                const std::string& verify) {
    pvae::PVAEModel model = pvae::PVAEModel::load(model_path);
    surrogate::SurrogateModel ver = surrogate::SurrogateModel::load(surrogate_path);
    if (verify == "lbm")
        bc.verify_with_lbm = true;
    else if (verify != "surrogate")
        throw ArgumentError("invert: --verify must be surrogate|lbm");
    bc.flow = flow_from(1.0 / 6.0, 1e-3, 1e-6, 200000);

    LabeledData ld = load_dataset(data, model.cfg.mode, true);
    const Eigen::MatrixXd latents = model.encode_mu(ld.dataset.images);
    const std::vector<inverse::DesignTarget> targets = read_targets(targets_path, model.cfg.property_dim);

    const std::vector<inverse::DesignResult> results =
        inverse::design_batch(targets, model, ver, ld.dataset.properties, latents, bc);

    const fs::path dir = fs::path(c.out) / "designs";
    fs::create_directories(dir);
    std::string csv = "target_id,status,stop_reason,steps,log_mse,grid_path,verified_nF,verified_K11\n";
    for (const auto& r : results) {
        std::string grid_path;
        if (r.status == "ok") {
            char name[32];
            std::snprintf(name, sizeof(name), "t%04d.vxg", r.target_id);
            grid_path = (dir / name).string();
            write_grid(r.grid, grid_path);
        }
        csv += std::to_string(r.target_id);
        csv += ",";
        csv += r.status;
        csv += ",";
        csv += r.stop_reason;
        csv += ",";
        csv += std::to_string(r.steps);
        csv += ",";
        csv += fmt_double(r.log_mse);
        csv += ",";
        csv += grid_path;
        csv += ",";
        csv += r.verified.size() > 0 ? fmt_double(r.verified[0]) : "";
        csv += ",";
        csv += r.verified.size() > 1 ? fmt_double(r.verified[1]) : "";
        csv += "\n";
    }
    write_file_atomic(fs::path(c.out) / "invert_results.csv", csv);
    std::printf("invert: %zu targets -> %s\n", targets.size(),
                (fs::path(c.out) / "invert_results.csv").string().c_str());
}

void run_eval(const Common& c, const std::string& model_path, const std::string& data) {
    diff::Checkpoint ck = diff::load_checkpoint(model_path);
    const std::string type = ck.meta.value("type", std::string(""));

    std::string csv = "sample_id,true_nF,pred_nF,true_K11,pred_K11\n";
    Eigen::VectorXd t0, p0, t1, p1;

    if (type == "surrogate") {
        surrogate::SurrogateModel model = surrogate::SurrogateModel::load(model_path);
        LabeledData ld = load_dataset(data, model.cfg.mode, true);
        const auto split = pvae::split_dataset(ld.dataset.n(), 0.8, 0.1, c.seed);
        const auto& test = split.test;
        t0.resize(test.size());
        p0.resize(test.size());
        t1.resize(test.size());
        p1.resize(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) {
            const Eigen::Vector2d pred = model.predict(ld.dataset.images[static_cast<std::size_t>(test[i])]);
            t0[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 0);
            t1[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 1);
            p0[static_cast<Eigen::Index>(i)] = pred[0];
            p1[static_cast<Eigen::Index>(i)] = pred[1];
            csv += ld.dataset.ids[static_cast<std::size_t>(test[i])] + "," + fmt_double(t0[static_cast<Eigen::Index>(i)]) + "," +
                   fmt_double(p0[static_cast<Eigen::Index>(i)]) + "," + fmt_double(t1[static_cast<Eigen::Index>(i)]) + "," +
                   fmt_double(p1[static_cast<Eigen::Index>(i)]) + "\n";
        }
    } else if (type == "pvae") {
        pvae::PVAEModel model = pvae::PVAEModel::load(model_path);
        LabeledData ld = load_dataset(data, model.cfg.mode, true);
        const auto split = pvae::split_dataset(ld.dataset.n(), 0.8, 0.1, c.seed);
        const auto& test = split.test;
        t0.resize(test.size());
        p0.resize(test.size());
        t1.resize(test.size());
        p1.resize(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) {
            const Eigen::VectorXd pred = model.regress(model.encode(ld.dataset.images[static_cast<std::size_t>(test[i])]).mu);
            t0[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 0);
            t1[static_cast<Eigen::Index>(i)] = ld.dataset.properties(test[i], 1);
            p0[static_cast<Eigen::Index>(i)] = pred[0];
            p1[static_cast<Eigen::Index>(i)] = pred[1];
            csv += ld.dataset.ids[static_cast<std::size_t>(test[i])] + "," + fmt_double(t0[static_cast<Eigen::Index>(i)]) + "," +
                   fmt_double(p0[static_cast<Eigen::Index>(i)]) + "," + fmt_double(t1[static_cast<Eigen::Index>(i)]) + "," +
                   fmt_double(p1[static_cast<Eigen::Index>(i)]) + "\n";
        }
    } else {
        throw FormatError("eval: unrecognized model type in " + model_path);
    }

    const fs::path out = fs::path(c.out) / "eval_report.csv";
    write_file_atomic(out, csv);
    if (t0.size() >= 2)
        std::printf("eval: R2 n_F %s  K11 %s -> %s\n", fmt_double(r_squared(t0, p0)).c_str(),
                    fmt_double(r_squared(t1, p1)).c_str(), out.string().c_str());
    else
        std::printf("eval: report -> %s (test split too small for R2)\n", out.string().c_str());
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"poro: porous microstructure generation, permeability homogenization and inverse design"};
    app.require_subcommand(1);
    app.set_config("--config", "", "plain-text key=value configuration file");
    app.allow_config_extras(false);

    // gen
    Common gen_c;
    GeneratorConfig gen_cfg;
    double gen_spacing = 1.0e-6;
    auto* gen = app.add_subcommand("gen", "generate synthetic square-pore microstructures");
    add_common(gen, gen_c);
    gen->add_option("--image-size", gen_cfg.image_size, "cross-section side in pixels");
    gen->add_option("--depth", gen_cfg.depth, "extrusion depth in slices");
    gen->add_option("--pore-size", gen_cfg.pore_size, "square pore side in pixels");
    gen->add_option("--pores-min", gen_cfg.n_pores_min, "minimum pores per slice");
    gen->add_option("--pores-max", gen_cfg.n_pores_max, "maximum pores per slice");
    gen->add_option("--count", gen_cfg.count, "number of samples");
    gen->add_option("--spacing", gen_spacing, "voxel spacing in meters");
    gen->callback([&] { run_gen(gen_c, gen_cfg, gen_spacing); });

    // subsample
    Common sub_c;
    std::string sub_in;
    std::vector<int> sub_size, sub_stride;
    auto* sub = app.add_subcommand("subsample", "cut a grid into sub-volumes on a regular stride");
    add_common(sub, sub_c);
    sub->add_option("--in", sub_in, "input VXG1 grid")->required();
    sub->add_option("--size", sub_size, "sub-volume dims sx sy sz")->expected(3)->required();
    sub->add_option("--stride", sub_stride, "origin stride tx ty tz")->expected(3)->required();
    sub->callback([&] { run_subsample(sub_c, sub_in, sub_size, sub_stride); });

    // perm
    Common perm_c;
    std::string perm_in, perm_data;
    PermOptions perm_opt;
    auto* perm_cmd = app.add_subcommand("perm", "LBM homogenization of the permeability tensor");
    add_common(perm_cmd, perm_c);
    perm_cmd->add_option("--in", perm_in, "single VXG1 grid");
    perm_cmd->add_option("--data", perm_data, "dataset directory with manifest.json");
    perm_cmd->add_option("--nu-l", perm_opt.nu_l, "lattice kinematic viscosity");
    perm_cmd->add_option("--delta-rho", perm_opt.delta_rho, "inlet/outlet lattice density difference");
    perm_cmd->add_option("--tol", perm_opt.tol, "steady-state tolerance");
    perm_cmd->add_option("--max-steps", perm_opt.max_steps, "step cap per run");
    perm_cmd->add_option("--axis", perm_opt.axis, "x|y|z|all");
    perm_cmd->add_flag("--full-tensor", perm_opt.full_tensor, "also solve the off-diagonal components");
    perm_cmd->add_flag("--dump-velocity", perm_opt.dump_velocity, "write VXF1 velocity fields");
    perm_cmd->callback([&] { run_perm(perm_c, perm_in, perm_data, perm_opt); });

    // train-surrogate
    Common ts_c;
    std::string ts_data, ts_model, ts_mode = "2d";
    surrogate::SurrogateTrainConfig ts_cfg;
    auto* ts = app.add_subcommand("train-surrogate", "train the CNN property surrogate");
    add_common(ts, ts_c);
    ts->add_option("--data", ts_data, "labeled dataset directory")->required();
    ts->add_option("--model-out", ts_model, "checkpoint path (default <out>/surrogate.pvk)");
    ts->add_option("--mode", ts_mode, "2d|3d");
    ts->add_option("--epochs", ts_cfg.epochs, "max epochs");
    ts->add_option("--lr", ts_cfg.lr, "Adam learning rate");
    ts->add_option("--batch", ts_cfg.batch, "batch size");
    ts->add_option("--patience", ts_cfg.patience_early, "early-stopping patience");
    ts->callback([&] { run_train_surrogate(ts_c, ts_data, ts_model, ts_cfg, ts_mode); });

    // train-pvae
    Common tp_c;
    std::string tp_data, tp_model_out, tp_model_in, tp_stage = "all";
    pvae::TrainConfig tp_cfg;
    pvae::PVAEConfig tp_pc;
    int tp_epochs = 0;
    auto* tp = app.add_subcommand("train-pvae", "staged property-VAE training");
    add_common(tp, tp_c);
    tp->add_option("--data", tp_data, "labeled dataset directory")->required();
    tp->add_option("--model-out", tp_model_out, "checkpoint path (default <out>/pvae.pvk)");
    tp->add_option("--model", tp_model_in, "existing checkpoint to continue from");
    tp->add_option("--latent-dim", tp_pc.latent_dim, "latent dimension");
    tp->add_option("--beta", tp_pc.beta, "KL weight");
    tp->add_option("--lambda", tp_pc.lambda, "property-loss weight");
    tp->add_option("--steepness", tp_pc.steepness, "decoder SteepSigmoid k");
    tp->add_option("--epochs", tp_epochs, "cap every stage at this many epochs");
    tp->add_option("--batch", tp_cfg.batch, "batch size");
    tp->add_option("--stage", tp_stage, "vae|regressor|joint|all");
    tp->callback([&] {
        if (tp_epochs > 0) {
            tp_cfg.epochs_vae = tp_epochs;
            tp_cfg.epochs_regressor = tp_epochs;
            tp_cfg.epochs_joint = tp_epochs;
        }
        run_train_pvae(tp_c, tp_data, tp_model_out, tp_model_in, tp_cfg, tp_pc, tp_stage);
    });

    // interp
    Common in_c;
    std::string in_model, in_data, in_from, in_to, in_verify = "regressor", in_surrogate;
    int in_steps = 100, in_lbm_depth = 8;
    auto* interp = app.add_subcommand("interp", "slerp sweep between two samples");
    add_common(interp, in_c);
    interp->add_option("--model", in_model, "pVAE checkpoint")->required();
    interp->add_option("--data", in_data, "dataset directory")->required();
    interp->add_option("--from", in_from, "start sample id")->required();
    interp->add_option("--to", in_to, "end sample id")->required();
    interp->add_option("--steps", in_steps, "interpolation steps");
    interp->add_option("--verify", in_verify, "regressor|surrogate|lbm");
    interp->add_option("--surrogate-model", in_surrogate, "surrogate checkpoint for --verify surrogate");
    interp->add_option("--lbm-depth", in_lbm_depth, "extrusion depth for --verify lbm");
    interp->callback([&] {
        run_interp(in_c, in_model, in_data, in_from, in_to, in_steps, in_verify, in_surrogate, in_lbm_depth);
    });

    // analyze
    Common an_c;
    std::string an_model, an_data;
    int an_components = 10;
    auto* analyze = app.add_subcommand("analyze", "latent KDE, PCA and property correlations");
    add_common(analyze, an_c);
    analyze->add_option("--model", an_model, "pVAE checkpoint")->required();
    analyze->add_option("--data", an_data, "dataset directory")->required();
    analyze->add_option("--components", an_components, "PCA components");
    analyze->callback([&] { run_analyze(an_c, an_model, an_data, an_components); });

    // invert
    Common iv_c;
    std::string iv_model, iv_surrogate, iv_data, iv_targets, iv_verify = "surrogate";
    inverse::BatchConfig iv_cfg;
    auto* invert = app.add_subcommand("invert", "gradient-based latent inverse design");
    add_common(invert, iv_c);
    invert->add_option("--model", iv_model, "pVAE checkpoint")->required();
    invert->add_option("--surrogate-model", iv_surrogate, "surrogate checkpoint")->required();
    invert->add_option("--data", iv_data, "dataset directory")->required();
    invert->add_option("--targets", iv_targets, "targets CSV")->required();
    invert->add_option("--k-init", iv_cfg.k_init, "nearest initializers per target");
    invert->add_option("--triage-steps", iv_cfg.triage_steps, "short-run steps per initializer");
    invert->add_option("--max-steps", iv_cfg.optimize.max_steps, "full-run step cap");
    invert->add_option("--verify", iv_verify, "surrogate|lbm");
    invert->add_option("--lbm-depth", iv_cfg.lbm_depth, "extrusion depth for --verify lbm");
    invert->add_flag("--optimize-all", iv_cfg.optimize_all, "fully optimize every initializer");
    invert->callback([&] { run_invert(iv_c, iv_model, iv_surrogate, iv_data, iv_targets, iv_cfg, iv_verify); });

    // eval
    Common ev_c;
    std::string ev_model, ev_data;
    auto* eval = app.add_subcommand("eval", "held-out R2 report for a trained model");
    add_common(eval, ev_c);
    eval->add_option("--model", ev_model, "pVAE or surrogate checkpoint")->required();
    eval->add_option("--data", ev_data, "labeled dataset directory")->required();
    eval->callback([&] { run_eval(ev_c, ev_model, ev_data); });

    std::vector<const char*> argv;
    argv.push_back("poro");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "poro: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "poro: %s\n", e.what());
        return 1;
    }
    return 0;
}

}  // namespace poro::cli
