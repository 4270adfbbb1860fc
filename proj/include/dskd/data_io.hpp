#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dskd/image.hpp"
#include "dskd/ops.hpp"

namespace dskd {

namespace fs = std::filesystem;

struct Sample {
    Tensor image;                // preprocessed [1,3,s,s]
    int label = 0;               // 0 normal, 1 anomalous
    std::optional<Tensor> mask;  // binary [1,1,s,s], present for labeled anomalies
    std::string category;
    std::string sample_id;
};

struct DatasetSpec {
    std::string root;
    std::string category;
    std::string split = "train";  // "train" or "test"
    int input_size = 256;

    void validate() const {
        if (split != "train" && split != "test")
            throw ConfigError("DatasetSpec: split must be 'train' or 'test', got '" + split +
                              "'");
        if (input_size != 64 && input_size != 128 && input_size != 256)
            throw ConfigError("DatasetSpec: input_size must be 64, 128 or 256, got " +
                              std::to_string(input_size));
    }
};

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

// Resize to input_size^2, scale to [0,1], standardize per channel.
inline Tensor preprocess(const Image& raw, int input_size) {
    if (raw.width <= 0 || raw.height <= 0 || raw.rgb.empty())
        throw DataError("preprocess: empty image");
    Tensor t = detail::bilinear_resize(image_to_tensor(raw), input_size, input_size);
    const size_t plane = static_cast<size_t>(input_size) * input_size;
    for (int c = 0; c < 3; ++c) {
        float* p = t.ptr() + c * plane;
        const float mean = kImagenetMean[c], inv_std = 1.0f / kImagenetStd[c];
        for (size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean) * inv_std;
    }
    return t;
}

// Nearest resize then binarize at 0.5.
inline Tensor preprocess_mask(const Image& raw, int input_size) {
    Tensor rgb = image_to_tensor(raw);
    Tensor gray(1, 1, rgb.h, rgb.w);
    const size_t plane = static_cast<size_t>(rgb.h) * rgb.w;
    for (size_t i = 0; i < plane; ++i) gray.data[i] = rgb.data[i];
    Tensor resized = nearest_resize(gray, input_size, input_size);
    for (float& v : resized.data) v = v >= 0.5f ? 1.0f : 0.0f;
    return resized;
}

// ---------------------------------------------------------------------------
// MVTec-style directory layout
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("missing dataset directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
    std::sort(out.begin(), out.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return out;
}

inline std::vector<std::string> sorted_subdirs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("missing dataset directory: " + dir.string());
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

inline fs::path find_mask(const fs::path& gt_dir, const std::string& stem) {
    if (!fs::is_directory(gt_dir))
        throw DataError("missing ground-truth directory: " + gt_dir.string());
    std::vector<fs::path> candidates;
    for (const auto& e : fs::directory_iterator(gt_dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name.rfind(stem + "_mask", 0) == 0 && is_image_file(e.path()))
            candidates.push_back(e.path());
    }
    if (candidates.empty())
        throw DataError("anomalous test image '" + stem + "' has no mask under " +
                        gt_dir.string());
    std::sort(candidates.begin(), candidates.end());
    return candidates.front();
}

}  // namespace detail

// Loads `<root>/<category>/train/good/*` or `<root>/<category>/test/<type>/*`
// (with masks from `ground_truth/<type>/`) in deterministic lexicographic
// order.
inline std::vector<Sample> load_dataset(const DatasetSpec& spec) {
    spec.validate();
    const fs::path cat_dir = fs::path(spec.root) / spec.category;
    if (!fs::is_directory(cat_dir))
        throw DataError("missing dataset directory: " + cat_dir.string());

    std::vector<Sample> samples;
    if (spec.split == "train") {
        const fs::path dir = cat_dir / "train" / "good";
        for (const auto& p : detail::sorted_images(dir)) {
            Sample s;
            s.image = preprocess(load_image(p.string()), spec.input_size);
            s.label = 0;
            s.category = spec.category;
            s.sample_id = "good_" + p.stem().string();
            samples.push_back(std::move(s));
        }
        return samples;
    }

    const fs::path test_dir = cat_dir / "test";
    for (const std::string& type : detail::sorted_subdirs(test_dir)) {
        const bool anomalous = type != "good";
        for (const auto& p : detail::sorted_images(test_dir / type)) {
            Sample s;
            s.image = preprocess(load_image(p.string()), spec.input_size);
            s.label = anomalous ? 1 : 0;
            s.category = spec.category;
            s.sample_id = type + "_" + p.stem().string();
            if (anomalous) {
                const fs::path mask_path =
                    detail::find_mask(cat_dir / "ground_truth" / type, p.stem().string());
                s.mask = preprocess_mask(load_image(mask_path.string()), spec.input_size);
            }
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

// Training tensors with the anomaly-free precondition enforced.
inline std::vector<Tensor> training_tensors(const std::vector<Sample>& samples) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) {
        if (s.label != 0)
            throw DataError("training split contains an anomalous sample: " + s.sample_id);
        out.push_back(s.image);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic texture dataset with injected defects
// ---------------------------------------------------------------------------

struct SyntheticSample {
    Image image;  // 8-bit, size x size
    Tensor mask;  // [1,1,size,size] in {0,1}; all-zero when label == 0
    int label = 0;
    std::string id;
};

struct SyntheticData {
    std::vector<SyntheticSample> train;
    std::vector<SyntheticSample> test;
    int size = 64;
};

namespace detail {

inline float bilerp_grid(const std::vector<float>& g, int gn, float x, float y) {
    const int x0 = std::min(static_cast<int>(x), gn - 2);
    const int y0 = std::min(static_cast<int>(y), gn - 2);
    const float fx = x - x0, fy = y - y0;
    const float v00 = g[y0 * gn + x0], v01 = g[y0 * gn + x0 + 1];
    const float v10 = g[(y0 + 1) * gn + x0], v11 = g[(y0 + 1) * gn + x0 + 1];
    return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

inline Image synth_texture(Rng& rng, int size) {
    // Two octaves of value noise mapped through a fixed warm-gray palette.
    constexpr int g1n = 7, g2n = 13;
    std::vector<float> g1(g1n * g1n), g2(g2n * g2n);
    for (float& v : g1) v = rng.uniform();
    for (float& v : g2) v = rng.uniform();
    // The palette sits below the ImageNet channel means on purpose: no pixel
    // standardizes to a near-zero network input, whose feature directions
    // would be noise after unit normalization.
    const float c0[3] = {0.22f, 0.20f, 0.19f};
    const float c1[3] = {0.45f, 0.42f, 0.38f};
    // Every sample shares a fixed dark frame, like industrial fixtures
    // framing the part; the network's border statistics then match between
    // training and test images. Wide enough that the deepest feature cells at
    // the border see mostly frame.
    const int frame = std::max(2, size / 8);
    Image img;
    img.width = img.height = size;
    img.rgb.resize(static_cast<size_t>(size) * size * 3);
    for (int y = 0; y < size; ++y) {
        unsigned char* row = img.row(y);
        for (int x = 0; x < size; ++x) {
            const float u1 = bilerp_grid(g1, g1n, x * (g1n - 1.0f) / size, y * (g1n - 1.0f) / size);
            const float u2 = bilerp_grid(g2, g2n, x * (g2n - 1.0f) / size, y * (g2n - 1.0f) / size);
            float v = 0.85f * u1 + 0.15f * u2;
            float amp = 1.0f;  // the frame is exactly constant across samples
            const int edge = std::min(std::min(x, size - 1 - x), std::min(y, size - 1 - y));
            if (edge < 2 * frame) {
                const float t = std::min(1.0f, static_cast<float>(edge - frame) / frame);
                amp = edge < frame ? 0.0f : t;
                v = amp * v;
            }
            const float jitter = amp * rng.uniform(-0.008f, 0.008f);
            for (int ch = 0; ch < 3; ++ch)
                row[3 * x + ch] = to_byte(c0[ch] + v * (c1[ch] - c0[ch]) + jitter);
        }
    }
    return img;
}

inline void paint_defect_pixel(Image& img, Tensor& mask, int x, int y, const float color[3]) {
    if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
    unsigned char* row = img.row(y);
    for (int ch = 0; ch < 3; ++ch) row[3 * x + ch] = to_byte(color[ch]);
    mask.data[static_cast<size_t>(y) * img.width + x] = 1.0f;
}

// Out-of-palette intensity per painted pixel (randomly very dark or very
// bright): defect interiors stay anomalous at every scale instead of looking
// like a new flat texture.
inline void defect_color(Rng& rng, float color[3]) {
    const float base =
        rng.uniform() < 0.5f ? rng.uniform(0.02f, 0.12f) : rng.uniform(0.88f, 0.98f);
    for (int c = 0; c < 3; ++c) color[c] = base + rng.uniform(-0.02f, 0.02f);
}

inline void inject_defects(Rng& rng, Image& img, Tensor& mask) {
    const int size = img.width;
    const int margin = 2 * std::max(2, size / 16) + 1;  // keep defects on the texture
    const int count = 1 + static_cast<int>(rng.uniform_int(2));
    for (int d = 0; d < count; ++d) {
        float color[3];
        if (rng.uniform() < 0.6f) {
            // rectangle
            const int bw = size / 8 + static_cast<int>(rng.uniform_int(size / 8));
            const int bh = size / 8 + static_cast<int>(rng.uniform_int(size / 8));
            const int x0 =
                margin + static_cast<int>(rng.uniform_int(std::max(1, size - bw - 2 * margin)));
            const int y0 =
                margin + static_cast<int>(rng.uniform_int(std::max(1, size - bh - 2 * margin)));
            for (int y = y0; y < y0 + bh; ++y)
                for (int x = x0; x < x0 + bw; ++x) {
                    defect_color(rng, color);
                    paint_defect_pixel(img, mask, x, y, color);
                }
        } else {
            // scratch
            const float len = rng.uniform(size / 2.0f, size * 0.9f);
            const float ang = rng.uniform(0.0f, 6.2831853f);
            const int thick = 2 + static_cast<int>(rng.uniform_int(2));
            float x = rng.uniform(static_cast<float>(margin), static_cast<float>(size - margin));
            float y = rng.uniform(static_cast<float>(margin), static_cast<float>(size - margin));
            const float dx = std::cos(ang), dy = std::sin(ang);
            const int steps = static_cast<int>(len);
            for (int s = 0; s < steps; ++s) {
                for (int ty = 0; ty <= thick; ++ty)
                    for (int tx = 0; tx <= thick; ++tx) {
                        defect_color(rng, color);
                        paint_defect_pixel(img, mask, static_cast<int>(x) + tx,
                                           static_cast<int>(y) + ty, color);
                    }
                x += dx;
                y += dy;
            }
        }
    }
}

}  // namespace detail

// Deterministic procedural dataset: normal samples are smoothed palette
// textures; exactly round(defect_rate * n_test) test samples carry composited
// rectangle/scratch defects with exact masks.
inline SyntheticData make_synthetic(uint64_t seed, int n_train, int n_test, double defect_rate,
                                    int size = 64) {
    if (n_train < 1 || n_test < 1)
        throw ConfigError("make_synthetic: n_train and n_test must be >= 1");
    if (defect_rate < 0.0 || defect_rate > 1.0)
        throw ConfigError("make_synthetic: defect_rate must be in [0,1]");
    SyntheticData data;
    data.size = size;
    Rng root(seed);

    char buf[32];
    for (int i = 0; i < n_train; ++i) {
        Rng rng = root.fork(1000 + i);
        SyntheticSample s;
        s.image = detail::synth_texture(rng, size);
        s.mask = Tensor(1, 1, size, size);
        s.label = 0;
        std::snprintf(buf, sizeof(buf), "good_%03d", i);
        s.id = buf;
        data.train.push_back(std::move(s));
    }
    const int n_anom = static_cast<int>(std::llround(defect_rate * n_test));
    for (int i = 0; i < n_test; ++i) {
        Rng rng = root.fork(2000 + i);
        SyntheticSample s;
        s.image = detail::synth_texture(rng, size);
        s.mask = Tensor(1, 1, size, size);
        if (i < n_anom) {
            detail::inject_defects(rng, s.image, s.mask);
            s.label = 1;
            std::snprintf(buf, sizeof(buf), "defect_%03d", i);
        } else {
            std::snprintf(buf, sizeof(buf), "good_%03d", i);
        }
        s.id = buf;
        data.test.push_back(std::move(s));
    }
    return data;
}

inline std::vector<Sample> to_samples(const std::vector<SyntheticSample>& raw, int input_size,
                                      const std::string& category = "synthetic") {
    std::vector<Sample> out;
    out.reserve(raw.size());
    for (const SyntheticSample& r : raw) {
        Sample s;
        s.image = preprocess(r.image, input_size);
        s.label = r.label;
        if (r.label == 1) {
            Tensor m = nearest_resize(r.mask, input_size, input_size);
            for (float& v : m.data) v = v >= 0.5f ? 1.0f : 0.0f;
            s.mask = std::move(m);
        }
        s.category = category;
        s.sample_id = r.id;
        out.push_back(std::move(s));
    }
    return out;
}

// Writes the standard directory layout so synthetic data round-trips through
// load_dataset.
inline void export_synthetic(const SyntheticData& data, const std::string& root,
                             const std::string& category = "synthetic") {
    const fs::path base = fs::path(root) / category;
    fs::create_directories(base / "train" / "good");
    fs::create_directories(base / "test" / "good");
    fs::create_directories(base / "test" / "defect");
    fs::create_directories(base / "ground_truth" / "defect");

    for (const auto& s : data.train)
        save_png((base / "train" / "good" / (s.id.substr(5) + ".png")).string(), s.image);
    for (const auto& s : data.test) {
        const std::string num = s.id.substr(s.id.find('_') + 1);
        if (s.label == 0) {
            save_png((base / "test" / "good" / (num + ".png")).string(), s.image);
        } else {
            save_png((base / "test" / "defect" / (num + ".png")).string(), s.image);
            save_png((base / "ground_truth" / "defect" / (num + "_mask.png")).string(),
                     tensor_to_image(s.mask));
        }
    }
}

}  // namespace dskd
