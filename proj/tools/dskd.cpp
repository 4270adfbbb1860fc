// dskd: train / infer / eval / ablate / synth for dual-student
// knowledge-distillation anomaly detection.

#include <CLI11.hpp>

#include <climits>
#include <cstdio>
#include <future>
#include <iostream>

#include "dskd/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonTrainFlags {
    std::string config_file;
    std::string data_root;
    std::string category;
    int size = 0;
    int epochs = INT_MIN;  // sentinels: invalid values must still reach validation
    double lr = -1.0;
    double lambda = -1.0;
    long long seed = -1;
    int batch = INT_MIN;
    std::string variant;
    bool no_dfe = false;
    std::string maps;
    std::string out;
    std::string teacher;
    double sigma = 0.0;

    void add_to(CLI::App* cmd, bool want_out) {
        cmd->add_option("--config", config_file, "flat key=value config file (flags override)");
        cmd->add_option("--data", data_root, "dataset root directory");
        cmd->add_option("--category", category, "dataset category name");
        cmd->add_option("--size", size, "input size (64, 128 or 256)")
            ->check(CLI::IsMember({64, 128, 256}));
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--lr", lr, "learning rate");
        cmd->add_option("--lambda", lambda, "anomaly-map l2 coefficient");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--batch-size", batch, "training batch size");
        cmd->add_option("--variant", variant, "architecture variant: DS, T-E, T-D, E-D");
        cmd->add_flag("--no-dfe", no_dfe, "bypass the deep feature embedding bottleneck");
        cmd->add_option("--maps", maps, "anomaly map selection, e.g. M1,M2,M3 or M2 or M1-3");
        cmd->add_option("--sigma", sigma, "gaussian smoothing sigma");
        cmd->add_option("--teacher", teacher, "teacher weights file (safetensors)");
        auto* o = cmd->add_option("--out", out, "output directory");
        if (want_out) o->required();
    }

    dskd::RunConfig resolve() const {
        dskd::RunConfig cfg;
        if (!config_file.empty()) dskd::apply_kv(cfg, dskd::read_kv_file(config_file));
        if (!data_root.empty()) cfg.data.root = data_root;
        if (!category.empty()) cfg.data.category = category;
        if (size) cfg.data.input_size = size;
        if (epochs != INT_MIN) cfg.train.epochs = epochs;
        if (lr >= 0.0) cfg.train.learning_rate = static_cast<float>(lr);
        if (lambda >= 0.0) cfg.train.lambda_l2 = static_cast<float>(lambda);
        if (seed >= 0) cfg.train.seed = static_cast<uint64_t>(seed);
        if (batch != INT_MIN) cfg.train.batch_size = batch;
        if (!variant.empty()) cfg.variant = dskd::variant_from_string(variant);
        if (no_dfe) cfg.dfe_enabled = false;
        if (!maps.empty()) cfg.map_selection = dskd::parse_map_selection(maps);
        if (sigma > 0.0) cfg.sigma = static_cast<float>(sigma);
        if (!teacher.empty()) cfg.teacher_file = teacher;
        if (!out.empty()) cfg.out_dir = out;
        if (cfg.data.root.empty()) throw dskd::ConfigError("--data is required");
        if (cfg.data.category.empty()) throw dskd::ConfigError("--category is required");
        cfg.validate();
        return cfg;
    }
};

int cmd_train(const CommonTrainFlags& flags, bool quiet) {
    dskd::RunConfig cfg = flags.resolve();
    cfg.data.split = "train";
    auto samples = dskd::load_dataset(cfg.data);
    auto result = dskd::train_run(cfg, samples, quiet);
    std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
    std::printf("final loss_e %.6f  loss_d %.6f  calib.max %.6f\n",
                result.history.back().loss_e, result.history.back().loss_d,
                result.calib.max_score);
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root,
             const std::string& category, int size, const std::string& maps,
             const std::string& out, const std::string& teacher, bool overlay,
             bool no_heatmaps, int pro_thresholds) {
    auto loaded = dskd::load_checkpoint(checkpoint, teacher);
    if (size && size != loaded.meta.input_size)
        throw dskd::ConfigError("size mismatch: checkpoint was trained at " +
                                std::to_string(loaded.meta.input_size) + ", requested " +
                                std::to_string(size));
    dskd::DatasetSpec spec;
    spec.root = data_root;
    spec.category = category;
    spec.split = "test";
    spec.input_size = loaded.meta.input_size;
    auto samples = dskd::load_dataset(spec);

    dskd::InferenceSettings settings;
    settings.lambda = loaded.meta.lambda;
    settings.sigma = loaded.meta.sigma;
    settings.map_selection =
        dskd::parse_map_selection(maps.empty() ? loaded.meta.map_selection : maps);

    dskd::EvalOptions options;
    options.write_heatmaps = !no_heatmaps;
    options.overlay = overlay;
    options.pro_thresholds = pro_thresholds;
    auto report =
        dskd::evaluate_samples(loaded.model, loaded.calib, settings, samples, out, options);
    std::printf("category,image_auroc,pixel_auroc,pro\n%s,%s,%s,%s\n", report.category.c_str(),
                dskd::metric_str(report.image_auroc).c_str(),
                dskd::metric_str(report.pixel_auroc).c_str(),
                dskd::metric_str(report.pro_score).c_str());
    return kExitOk;
}

int cmd_infer(const std::string& checkpoint, const std::vector<std::string>& images,
              const std::string& out, const std::string& teacher, bool overlay) {
    auto loaded = dskd::load_checkpoint(checkpoint, teacher);
    dskd::InferenceSettings settings;
    settings.lambda = loaded.meta.lambda;
    settings.sigma = loaded.meta.sigma;
    settings.map_selection = dskd::parse_map_selection(loaded.meta.map_selection);
    if (!out.empty()) std::filesystem::create_directories(out);

    std::printf("sample_id,raw_score,normalized_score,is_anomalous\n");
    for (const std::string& path : images) {
        dskd::Tensor img =
            dskd::preprocess(dskd::load_image(path), loaded.meta.input_size);
        const std::string id = std::filesystem::path(path).stem().string();
        auto result = dskd::infer(loaded.model, img, loaded.calib, settings, id);
        std::printf("%s,%.6f,%.6f,%d\n", id.c_str(), result.raw_score,
                    result.normalized_score, result.is_anomalous ? 1 : 0);
        if (!out.empty())
            dskd::save_heatmap(result, out + "/" + id + "_amap.png", overlay ? &img : nullptr);
    }
    return kExitOk;
}

struct AblationRow {
    std::string label;
    dskd::EvalReport report;
};

int cmd_ablate(const CommonTrainFlags& flags, const std::string& variants_csv, bool dfe_axis,
               bool maps_axis, bool parallel, bool quiet) {
    dskd::RunConfig base = flags.resolve();
    base.data.split = "train";
    auto train_samples = dskd::load_dataset(base.data);
    dskd::DatasetSpec test_spec = base.data;
    test_spec.split = "test";
    auto test_samples = dskd::load_dataset(test_spec);

    struct Job {
        std::string label;
        dskd::RunConfig cfg;
        std::array<bool, 3> eval_maps;
        bool reuse_ds = false;
    };
    std::vector<Job> jobs;
    {
        std::stringstream ss(variants_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            Job j;
            j.cfg = base;
            j.cfg.variant = dskd::variant_from_string(tok);
            j.cfg.out_dir = base.out_dir + "/variant_" + tok;
            j.label = tok;
            j.eval_maps = base.map_selection;
            jobs.push_back(std::move(j));
        }
    }
    if (dfe_axis) {
        for (bool on : {false, true}) {
            Job j;
            j.cfg = base;
            j.cfg.variant = dskd::Variant::DS;
            j.cfg.dfe_enabled = on;
            j.cfg.out_dir = base.out_dir + (on ? "/dfe_on" : "/dfe_off");
            j.label = on ? "DFE=on" : "DFE=off";
            j.eval_maps = base.map_selection;
            jobs.push_back(std::move(j));
        }
    }
    if (maps_axis) {
        // single DS training, evaluated under each map selection
        for (const std::string sel : {"M3", "M2", "M1", "M1-3"}) {
            Job j;
            j.cfg = base;
            j.cfg.variant = dskd::Variant::DS;
            j.cfg.out_dir = base.out_dir + "/maps_base";
            j.label = sel;
            j.eval_maps = dskd::parse_map_selection(sel);
            j.reuse_ds = true;
            jobs.push_back(std::move(j));
        }
    }
    if (jobs.empty()) throw dskd::ConfigError("ablate: nothing to run");

    // Train each distinct config once.
    std::map<std::string, std::shared_ptr<dskd::TrainRunResult>> trained;
    std::vector<std::pair<std::string, std::future<std::shared_ptr<dskd::TrainRunResult>>>> futs;
    for (const Job& j : jobs) {
        if (trained.count(j.cfg.out_dir)) continue;
        trained[j.cfg.out_dir] = nullptr;
        auto run = [cfg = j.cfg, &train_samples, quiet] {
            return std::make_shared<dskd::TrainRunResult>(
                dskd::train_run(cfg, train_samples, quiet));
        };
        if (parallel)
            futs.emplace_back(j.cfg.out_dir, std::async(std::launch::async, run));
        else
            trained[j.cfg.out_dir] = run();
    }
    for (auto& [key, fut] : futs) trained[key] = fut.get();

    std::vector<AblationRow> rows;
    for (const Job& j : jobs) {
        auto& t = trained.at(j.cfg.out_dir);
        dskd::InferenceSettings settings = dskd::settings_from(j.cfg);
        settings.map_selection = j.eval_maps;
        dskd::EvalOptions options;
        options.write_heatmaps = false;
        rows.push_back({j.label, dskd::evaluate_samples(t->model, t->calib, settings,
                                                        test_samples,
                                                        j.cfg.out_dir + "/eval_" + j.label,
                                                        options)});
    }

    std::filesystem::create_directories(base.out_dir);
    std::ofstream csv(base.out_dir + "/ablation.csv");
    csv << "variant,image_auroc,pixel_auroc,pro\n";
    std::printf("variant,image_auroc,pixel_auroc,pro\n");
    for (const auto& row : rows) {
        const std::string line = row.label + "," + dskd::metric_str(row.report.image_auroc) +
                                 "," + dskd::metric_str(row.report.pixel_auroc) + "," +
                                 dskd::metric_str(row.report.pro_score);
        csv << line << "\n";
        std::printf("%s\n", line.c_str());
    }
    return kExitOk;
}

int cmd_synth(const std::string& out, long long seed, int n_train, int n_test,
              double defect_rate, int size, const std::string& category) {
    auto data = dskd::make_synthetic(static_cast<uint64_t>(seed), n_train, n_test, defect_rate,
                                     size);
    dskd::export_synthetic(data, out, category);
    std::printf("wrote %zu train + %zu test images under %s/%s\n", data.train.size(),
                data.test.size(), out.c_str(), category.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-student knowledge distillation anomaly detection"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("--quiet", quiet, "suppress per-epoch progress output");

    auto* train = app.add_subcommand("train", "train a model on defect-free images");
    CommonTrainFlags train_flags;
    train_flags.add_to(train, /*want_out=*/true);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
    std::string e_checkpoint, e_data, e_category, e_maps, e_out, e_teacher;
    int e_size = 0, e_pro_thresholds = -1;
    bool e_overlay = false, e_no_heatmaps = false;
    eval->add_option("--checkpoint", e_checkpoint, "checkpoint file")->required();
    eval->add_option("--data", e_data, "dataset root")->required();
    eval->add_option("--category", e_category, "dataset category")->required();
    eval->add_option("--size", e_size, "expected input size (must match checkpoint)")
        ->check(CLI::IsMember({64, 128, 256}));
    eval->add_option("--maps", e_maps, "map selection override (e.g. M2)");
    eval->add_option("--out", e_out, "output directory")->required();
    eval->add_option("--teacher", e_teacher, "teacher weights file override");
    eval->add_option("--pro-thresholds", e_pro_thresholds,
                     "PRO sweep thresholds (-1 auto, 0 exact)");
    eval->add_flag("--overlay", e_overlay, "blend heatmaps over inputs");
    eval->add_flag("--no-heatmaps", e_no_heatmaps, "skip heatmap PNGs");

    auto* infer = app.add_subcommand("infer", "score individual images");
    std::string i_checkpoint, i_out, i_teacher;
    std::vector<std::string> i_images;
    bool i_overlay = false;
    infer->add_option("--checkpoint", i_checkpoint, "checkpoint file")->required();
    infer->add_option("images", i_images, "image files")->required();
    infer->add_option("--out", i_out, "heatmap output directory");
    infer->add_option("--teacher", i_teacher, "teacher weights file override");
    infer->add_flag("--overlay", i_overlay, "blend heatmaps over inputs");

    auto* ablate = app.add_subcommand("ablate", "train/evaluate architecture ablations");
    CommonTrainFlags ablate_flags;
    ablate_flags.add_to(ablate, /*want_out=*/true);
    std::string a_variants = "DS,T-E,T-D,E-D";
    bool a_dfe = false, a_maps = false, a_parallel = false;
    ablate->add_option("--variants", a_variants, "comma-separated variants (default all four)");
    ablate->add_flag("--dfe-ablation", a_dfe, "add DFE on/off rows");
    ablate->add_flag("--maps-ablation", a_maps, "add M1/M2/M3/M1-3 rows");
    ablate->add_flag("--parallel", a_parallel, "train ablation variants concurrently");

    auto* synth = app.add_subcommand("synth", "emit a synthetic defect dataset");
    std::string s_out, s_category = "synthetic";
    long long s_seed = 0;
    int s_n_train = 64, s_n_test = 64, s_size = 64;
    double s_rate = 0.5;
    synth->add_option("--out", s_out, "output root directory")->required();
    synth->add_option("--seed", s_seed, "generator seed");
    synth->add_option("--n-train", s_n_train, "number of training images");
    synth->add_option("--n-test", s_n_test, "number of test images");
    synth->add_option("--defect-rate", s_rate, "fraction of test images with defects");
    synth->add_option("--size", s_size, "image size in pixels");
    synth->add_option("--category", s_category, "category directory name");

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train(train_flags, quiet);
        if (eval->parsed())
            return cmd_eval(e_checkpoint, e_data, e_category, e_size, e_maps, e_out, e_teacher,
                            e_overlay, e_no_heatmaps, e_pro_thresholds);
        if (infer->parsed()) return cmd_infer(i_checkpoint, i_images, i_out, i_teacher, i_overlay);
        if (ablate->parsed())
            return cmd_ablate(ablate_flags, a_variants, a_dfe, a_maps, a_parallel, quiet);
        if (synth->parsed())
            return cmd_synth(s_out, s_seed, s_n_train, s_n_test, s_rate, s_size, s_category);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const dskd::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const dskd::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const dskd::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const dskd::IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
