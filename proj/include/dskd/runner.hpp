#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "dskd/checkpoint.hpp"
#include "dskd/data_io.hpp"
#include "dskd/metrics.hpp"

namespace dskd {

// ---------------------------------------------------------------------------
// Run configuration (flat key=value file format, CLI flags override)
// ---------------------------------------------------------------------------

struct RunConfig {
    DatasetSpec data;
    TrainConfig train;
    Variant variant = Variant::DS;
    bool dfe_enabled = true;
    std::array<bool, 3> map_selection = {true, true, true};
    float sigma = 4.0f;
    std::string out_dir = "runs/out";
    std::string teacher_file;  // empty: deterministic seeded teacher
    uint64_t teacher_seed = kDefaultTeacherSeed;
    std::string device = "cpu";
    int checkpoint_every = 50;

    void validate() const {
        train.validate();
        if (data.input_size != 64 && data.input_size != 128 && data.input_size != 256)
            throw ConfigError("input size must be 64, 128 or 256");
        if (!map_selection[0] && !map_selection[1] && !map_selection[2])
            throw ConfigError("map selection must be non-empty");
        if (device != "cpu")
            throw ConfigError("unsupported device '" + device + "': this build is CPU-only");
    }
};

inline std::string format_map_selection(const std::array<bool, 3>& sel) {
    std::string out;
    for (int k = 0; k < 3; ++k) {
        if (!sel[k]) continue;
        if (!out.empty()) out += ",";
        out += "M" + std::to_string(k + 1);
    }
    return out;
}

inline std::array<bool, 3> parse_map_selection(const std::string& s) {
    std::array<bool, 3> sel = {false, false, false};
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "M1-3" || tok == "M1-M3") {
            sel = {true, true, true};
        } else if (tok.size() == 2 && tok[0] == 'M' && tok[1] >= '1' && tok[1] <= '3') {
            sel[tok[1] - '1'] = true;
        } else if (!tok.empty()) {
            throw ConfigError("bad map selection token '" + tok + "' (expected M1, M2, M3 or M1-3)");
        }
    }
    if (!sel[0] && !sel[1] && !sel[2]) throw ConfigError("map selection must be non-empty");
    return sel;
}

inline std::map<std::string, std::string> config_to_kv(const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["data.root"] = cfg.data.root;
    kv["data.category"] = cfg.data.category;
    kv["data.split"] = cfg.data.split;
    kv["data.input_size"] = std::to_string(cfg.data.input_size);
    std::ostringstream lr, lam, sig;
    lr << cfg.train.learning_rate;
    lam << cfg.train.lambda_l2;
    sig << cfg.sigma;
    kv["train.learning_rate"] = lr.str();
    kv["train.adam_beta1"] = std::to_string(cfg.train.adam_beta1);
    kv["train.adam_beta2"] = std::to_string(cfg.train.adam_beta2);
    kv["train.epochs"] = std::to_string(cfg.train.epochs);
    kv["train.lambda"] = lam.str();
    kv["train.batch_size"] = std::to_string(cfg.train.batch_size);
    kv["train.seed"] = std::to_string(cfg.train.seed);
    kv["variant"] = to_string(cfg.variant);
    kv["dfe_enabled"] = cfg.dfe_enabled ? "1" : "0";
    kv["map_selection"] = format_map_selection(cfg.map_selection);
    kv["sigma"] = sig.str();
    kv["out_dir"] = cfg.out_dir;
    kv["teacher_file"] = cfg.teacher_file;
    kv["teacher_seed"] = std::to_string(cfg.teacher_seed);
    kv["device"] = cfg.device;
    kv["checkpoint_every"] = std::to_string(cfg.checkpoint_every);
    return kv;
}

inline void apply_kv(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, value] : kv) {
        if (key == "data.root") cfg.data.root = value;
        else if (key == "data.category") cfg.data.category = value;
        else if (key == "data.split") cfg.data.split = value;
        else if (key == "data.input_size") cfg.data.input_size = std::stoi(value);
        else if (key == "train.learning_rate") cfg.train.learning_rate = std::stof(value);
        else if (key == "train.adam_beta1") cfg.train.adam_beta1 = std::stof(value);
        else if (key == "train.adam_beta2") cfg.train.adam_beta2 = std::stof(value);
        else if (key == "train.epochs") cfg.train.epochs = std::stoi(value);
        else if (key == "train.lambda") cfg.train.lambda_l2 = std::stof(value);
        else if (key == "train.batch_size") cfg.train.batch_size = std::stoi(value);
        else if (key == "train.seed") cfg.train.seed = std::stoull(value);
        else if (key == "variant") cfg.variant = variant_from_string(value);
        else if (key == "dfe_enabled") cfg.dfe_enabled = (value == "1" || value == "true");
        else if (key == "map_selection") cfg.map_selection = parse_map_selection(value);
        else if (key == "sigma") cfg.sigma = std::stof(value);
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "teacher_file") cfg.teacher_file = value;
        else if (key == "teacher_seed") cfg.teacher_seed = std::stoull(value);
        else if (key == "device") cfg.device = value;
        else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoi(value);
        else throw ConfigError("unknown config key '" + key + "'");
    }
}

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        if (!key.empty()) kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

// Snapshot with every default materialized; re-running from it reproduces the run.
inline void write_resolved_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write config snapshot " + path);
    for (const auto& [k, v] : config_to_kv(cfg)) f << k << " = " << v << "\n";
}

// ---------------------------------------------------------------------------
// Training run
// ---------------------------------------------------------------------------

struct TrainRunResult {
    DskdModel model;
    ScoreCalibration calib;
    RunMeta meta;
    std::vector<EpochStats> history;
    std::string checkpoint_path;
};

inline InferenceSettings settings_from(const RunConfig& cfg) {
    InferenceSettings s;
    s.lambda = cfg.train.lambda_l2;
    s.sigma = cfg.sigma;
    s.map_selection = cfg.map_selection;
    return s;
}

inline RunMeta meta_from(const RunConfig& cfg, DskdModel& model) {
    RunMeta meta;
    meta.variant = cfg.variant;
    meta.dfe_enabled = cfg.dfe_enabled;
    meta.input_size = cfg.data.input_size;
    meta.lambda = cfg.train.lambda_l2;
    meta.sigma = cfg.sigma;
    meta.seed = cfg.train.seed;
    meta.teacher_source =
        cfg.teacher_file.empty() ? "seeded:" + std::to_string(cfg.teacher_seed) : cfg.teacher_file;
    meta.teacher_hash = model.uses_teacher() ? model.teacher.weight_hash : 0;
    meta.encoder_seed = model.encoder_seed;
    meta.map_selection = format_map_selection(cfg.map_selection);
    return meta;
}

// Trains per the run config, calibrates scores on the training set, and
// writes checkpoint + loss telemetry + resolved-config snapshot to out_dir.
inline TrainRunResult train_run(const RunConfig& cfg, const std::vector<Sample>& train_samples,
                                bool quiet = false) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    TrainRunResult result;
    DskdModel& model = result.model;
    model.variant = cfg.variant;
    model.dfe_enabled = cfg.dfe_enabled;
    model.init(cfg.train.seed, cfg.teacher_seed);
    if (model.uses_teacher() && !cfg.teacher_file.empty())
        load_teacher(model.teacher, cfg.teacher_file);

    write_resolved_config(cfg, cfg.out_dir + "/config_resolved.txt");
    const std::vector<Tensor> images = training_tensors(train_samples);
    const InferenceSettings settings = settings_from(cfg);

    std::ofstream loss_csv(cfg.out_dir + "/loss.csv");
    loss_csv << "epoch,loss_e,loss_d,wall_seconds\n";

    result.history = train_model(model, images, cfg.train, [&](const EpochStats& s) {
        loss_csv << s.epoch << "," << s.loss_e << "," << s.loss_d << "," << std::fixed
                 << std::setprecision(3) << s.wall_seconds << "\n"
                 << std::defaultfloat;
        loss_csv.flush();
        if (!quiet)
            std::fprintf(stderr, "epoch %d/%d  loss_e %.5f  loss_d %.5f  (%.1fs)\n", s.epoch,
                         cfg.train.epochs, s.loss_e, s.loss_d, s.wall_seconds);
        if (cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0 &&
            s.epoch != cfg.train.epochs) {
            ScoreCalibration calib = calibrate(model, images, settings);
            char name[64];
            std::snprintf(name, sizeof(name), "/checkpoint_epoch%04d.safetensors", s.epoch);
            save_checkpoint(cfg.out_dir + name, model, calib, meta_from(cfg, model));
        }
    });

    result.calib = calibrate(model, images, settings);
    result.meta = meta_from(cfg, model);
    result.checkpoint_path = cfg.out_dir + "/checkpoint.safetensors";
    save_checkpoint(result.checkpoint_path, model, result.calib, result.meta);
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation run
// ---------------------------------------------------------------------------

struct EvalOptions {
    bool write_heatmaps = true;
    bool overlay = false;
    int pro_thresholds = -1;  // -1: exact sweep up to 2^20 pooled pixels, else 200
};

struct ScoreRow {
    std::string sample_id;
    float raw_score = 0.0f;
    float normalized_score = 0.0f;
    bool is_anomalous = false;
    int label = 0;
};

struct EvalReport {
    std::string category;
    std::optional<double> image_auroc;
    std::optional<double> pixel_auroc;
    std::optional<double> pro_score;
    std::vector<ScoreRow> rows;
};

inline std::string metric_str(const std::optional<double>& v) {
    if (!v) return "nan";
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed << *v;
    return os.str();
}

inline EvalReport evaluate_samples(DskdModel& model, const ScoreCalibration& calib,
                                   const InferenceSettings& settings,
                                   const std::vector<Sample>& test_samples,
                                   const std::string& out_dir = {},
                                   const EvalOptions& options = {}) {
    if (test_samples.empty()) throw DataError("evaluation set is empty");
    namespace fs = std::filesystem;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        if (options.write_heatmaps) fs::create_directories(out_dir + "/heatmaps");
    }

    EvalReport report;
    report.category = test_samples.front().category;
    LabeledScores image_scores;
    std::vector<SegmentationPair> pairs;
    size_t pooled_pixels = 0;

    for (const Sample& s : test_samples) {
        AnomalyResult r = infer(model, s.image, calib, settings, s.sample_id);
        report.rows.push_back({s.sample_id, r.raw_score, r.normalized_score, r.is_anomalous,
                               s.label});
        image_scores.scores.push_back(r.raw_score);
        image_scores.labels.push_back(s.label);
        if (!out_dir.empty() && options.write_heatmaps)
            save_heatmap(r, out_dir + "/heatmaps/" + s.sample_id + "_amap.png",
                         options.overlay ? &s.image : nullptr);
        SegmentationPair pair;
        pair.map = std::move(r.map);
        pair.mask = s.mask ? *s.mask : Tensor(1, 1, s.image.h, s.image.w);
        pooled_pixels += pair.map.size();
        pairs.push_back(std::move(pair));
    }

    try {
        report.image_auroc = auroc(image_scores);
    } catch (const MetricError&) {
        report.image_auroc = std::nullopt;
    }
    try {
        report.pixel_auroc = pixel_auroc(pairs);
    } catch (const MetricError&) {
        report.pixel_auroc = std::nullopt;
    }
    try {
        int thresholds = options.pro_thresholds;
        if (thresholds < 0) thresholds = pooled_pixels <= (1u << 20) ? 0 : 200;
        report.pro_score = pro(pairs, 0.3, thresholds);
    } catch (const MetricError&) {
        report.pro_score = std::nullopt;
    }

    if (!out_dir.empty()) {
        std::ofstream scores_csv(out_dir + "/scores.csv");
        scores_csv << "sample_id,raw_score,normalized_score,is_anomalous,label\n";
        for (const auto& row : report.rows)
            scores_csv << row.sample_id << "," << row.raw_score << "," << row.normalized_score
                       << "," << (row.is_anomalous ? 1 : 0) << "," << row.label << "\n";
        std::ofstream metrics_csv(out_dir + "/metrics.csv");
        metrics_csv << "category,image_auroc,pixel_auroc,pro\n";
        metrics_csv << report.category << "," << metric_str(report.image_auroc) << ","
                    << metric_str(report.pixel_auroc) << "," << metric_str(report.pro_score)
                    << "\n";
    }
    return report;
}

}  // namespace dskd
