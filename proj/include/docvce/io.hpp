#pragma once

// On-disk formats: 8-bit binary PGM images, flat key=value text files,
// per-sample record directories and dataset bundles.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "docvce/dataset.hpp"
#include "docvce/pipeline.hpp"
#include "docvce/serialize.hpp"
#include "docvce/tensor.hpp"

namespace docvce {

namespace fs = std::filesystem;

// --- PGM --------------------------------------------------------------------

/// Writes a [1,H,W] or [H,W] image with values in [0,1] as P5, 0..255.
inline void write_pgm(const fs::path& path, const Tensor& image) {
    if (image.rank() < 2) throw std::invalid_argument("write_pgm: need a 2-D or [1,H,W] image");
    const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
    if (h * w != image.size()) throw std::invalid_argument("write_pgm: only single-channel images are supported");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_pgm: cannot open " + path.string());
    os << "P5\n" << w << ' ' << h << "\n255\n";
    for (double v : image.values()) {
        const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        os.put(static_cast<char>(byte));
    }
    if (!os) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

/// Reads a P5 image into [1,H,W] with values mapped to [0,1].
inline Tensor read_pgm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_pgm: cannot open " + path.string());
    auto next_token = [&is]() {
        std::string tok;
        char c;
        while (is.get(c)) {
            if (c == '#') {
                std::string skip;
                std::getline(is, skip);
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                if (!tok.empty()) break;
            } else {
                tok.push_back(c);
            }
        }
        return tok;
    };
    if (next_token() != "P5") throw std::runtime_error("read_pgm: " + path.string() + " is not a binary PGM");
    const std::size_t w = std::stoul(next_token());
    const std::size_t h = std::stoul(next_token());
    const unsigned long maxval = std::stoul(next_token());
    if (maxval == 0 || maxval > 255) throw std::runtime_error("read_pgm: only 8-bit PGM is supported");
    Tensor image(Shape{1, h, w});
    for (double& v : image.values()) {
        char c;
        if (!is.get(c)) throw std::runtime_error("read_pgm: truncated pixel data in " + path.string());
        v = static_cast<double>(static_cast<unsigned char>(c)) / static_cast<double>(maxval);
    }
    return image;
}

// --- key=value ----------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_key_values(const fs::path& path, const KeyValues& kv) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

/// Blank lines and lines starting with '#' or ';' are ignored; whitespace around keys and values is trimmed.
inline KeyValues read_key_values(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    KeyValues kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline const std::string& require_key(const KeyValues& kv, const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("missing key '" + key + "'");
    return it->second;
}

/// FNV-1a over a file's bytes; identifies weight files in run manifests.
inline std::uint64_t file_hash(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot hash " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char c;
    while (is.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

// --- datasets -----------------------------------------------------------------

inline constexpr const char* kDatasetFile = "dataset.dvce";

inline void save_dataset(const fs::path& dir, const LabeledImages& data, bool write_images = true) {
    if (data.images.empty()) throw std::invalid_argument("save_dataset: empty dataset");
    fs::create_directories(dir);
    Shape stacked{data.images.size()};
    for (std::size_t d : data.images.front().shape()) stacked.push_back(d);
    std::vector<double> pixels, labels;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        pixels.insert(pixels.end(), data.images[i].values().begin(), data.images[i].values().end());
        labels.push_back(static_cast<double>(data.labels[i]));
    }
    const Shape label_shape{labels.size()};
    save_container(dir / kDatasetFile,
                   {{"images", Tensor(stacked, std::move(pixels))},
                    {"labels", Tensor(label_shape, std::move(labels))},
                    {"n_classes", Tensor::scalar(static_cast<double>(data.n_classes))}});
    if (write_images) {
        fs::create_directories(dir / "images");
        for (std::size_t i = 0; i < data.images.size(); ++i) {
            char name[48];
            std::snprintf(name, sizeof name, "%05zu_class%zu.pgm", i, data.labels[i]);
            write_pgm(dir / "images" / name, data.images[i]);
        }
    }
}

inline LabeledImages load_dataset(const fs::path& dir) {
    const ArrayBundle bundle = load_container(dir / kDatasetFile);
    const Tensor& images = find_array(bundle, "images");
    const Tensor& labels = find_array(bundle, "labels");
    if (images.rank() < 2 || images.dim(0) != labels.size()) throw ModelFileError("dataset: inconsistent arrays");
    LabeledImages data;
    data.n_classes = static_cast<std::size_t>(find_array(bundle, "n_classes").item());
    const Shape one(images.shape().begin() + 1, images.shape().end());
    const std::size_t stride = shape_size(one);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::vector<double> px(images.data() + i * stride, images.data() + (i + 1) * stride);
        data.images.emplace_back(one, std::move(px));
        data.labels.push_back(static_cast<std::size_t>(labels[i]));
    }
    return data;
}

// --- diffusion side data -------------------------------------------------------
// The denoiser file also carries the codec geometry, eta and the training schedule.

inline void append_codec_arrays(ArrayBundle& bundle, const Codec& codec) {
    const CodecConfig& c = codec.config();
    bundle.push_back({"codec.config", Tensor::vector({static_cast<double>(c.factor), static_cast<double>(c.channels),
                                                      static_cast<double>(c.height), static_cast<double>(c.width)})});
    bundle.push_back({"codec.eta", Tensor::scalar(c.eta)});
}

inline Codec codec_from_arrays(const ArrayBundle& bundle) {
    const Tensor& c = find_array(bundle, "codec.config");
    if (c.size() != 4) throw ModelFileError("codec.config: expected 4 entries");
    auto entry = [&c](std::size_t i) { return static_cast<std::size_t>(c[i]); };
    try {
        return Codec(CodecConfig{entry(0), entry(1), entry(2), entry(3), find_array(bundle, "codec.eta").item()});
    } catch (const std::invalid_argument& e) {
        throw ModelFileError(std::string("codec: ") + e.what());
    }
}

inline void append_schedule_arrays(ArrayBundle& bundle, std::size_t total_steps, double beta_start, double beta_end) {
    bundle.push_back({"schedule.config", Tensor::vector({static_cast<double>(total_steps), beta_start, beta_end})});
}

inline NoiseSchedule schedule_from_arrays(const ArrayBundle& bundle) {
    const Tensor& s = find_array(bundle, "schedule.config");
    if (s.size() != 3) throw ModelFileError("schedule.config: expected 3 entries");
    try {
        return build_linear_schedule(static_cast<std::size_t>(s[0]), s[1], s[2]);
    } catch (const std::invalid_argument& e) {
        throw ModelFileError(std::string("schedule: ") + e.what());
    }
}

// --- records ------------------------------------------------------------------

inline KeyValues guidance_to_keys(const GuidanceConfig& g, const HPRConfig& h) {
    return {
        {"guidance.scale", format_double(g.scale)},
        {"guidance.lambda_c", format_double(g.lambda_c)},
        {"guidance.lambda_d", format_double(g.lambda_d)},
        {"guidance.gamma_deg", format_double(g.gamma_deg)},
        {"guidance.consensus", g.consensus ? "1" : "0"},
        {"guidance.t_start", std::to_string(g.t_start)},
        {"guidance.n_inference_steps", std::to_string(g.n_inference_steps)},
        {"hpr.delta", format_double(h.delta)},
        {"hpr.min_patch", std::to_string(h.min_patch)},
    };
}

inline void save_record(const fs::path& dir, const CFRecord& r) {
    fs::create_directories(dir);
    write_pgm(dir / "factual.pgm", r.factual);
    write_pgm(dir / "base.pgm", r.base_cf);
    write_pgm(dir / "refined.pgm", r.refined_cf);
    write_pgm(dir / "diff.pgm", r.difference);
    save_container(dir / "images.dvce", {{"factual", r.factual},
                                         {"base", r.base_cf},
                                         {"refined", r.refined_cf},
                                         {"difference", r.difference}});
    KeyValues kv = guidance_to_keys(r.guidance, r.hpr);
    kv["sample_index"] = std::to_string(r.sample_index);
    kv["factual_class"] = std::to_string(r.factual_class);
    kv["target_class"] = std::to_string(r.target_class);
    kv["flipped"] = r.flipped ? "1" : "0";
    kv["confidence"] = format_double(r.confidence);
    kv["base_confidence"] = format_double(r.base_confidence);
    kv["l1"] = format_double(r.l1);
    kv["l2"] = format_double(r.l2);
    kv["base_l1"] = format_double(r.base_l1);
    kv["base_l2"] = format_double(r.base_l2);
    kv["hpr_evaluations"] = std::to_string(r.hpr_evaluations);
    kv["seed"] = std::to_string(r.seed);
    kv["top_k"] = std::to_string(r.top_k);
    write_key_values(dir / "meta.txt", kv);
}

inline CFRecord load_record(const fs::path& dir) {
    const KeyValues kv = read_key_values(dir / "meta.txt");
    const ArrayBundle images = load_container(dir / "images.dvce");
    auto num = [&kv](const std::string& k) { return std::stod(require_key(kv, k)); };
    auto count = [&kv](const std::string& k) { return static_cast<std::size_t>(std::stoull(require_key(kv, k))); };
    CFRecord r;
    r.factual = find_array(images, "factual");
    r.base_cf = find_array(images, "base");
    r.refined_cf = find_array(images, "refined");
    r.difference = find_array(images, "difference");
    r.sample_index = count("sample_index");
    r.factual_class = count("factual_class");
    r.target_class = count("target_class");
    r.flipped = require_key(kv, "flipped") == "1";
    r.confidence = num("confidence");
    r.base_confidence = num("base_confidence");
    r.l1 = num("l1");
    r.l2 = num("l2");
    r.base_l1 = num("base_l1");
    r.base_l2 = num("base_l2");
    r.hpr_evaluations = count("hpr_evaluations");
    r.seed = std::stoull(require_key(kv, "seed"));
    r.top_k = count("top_k");
    r.guidance.scale = num("guidance.scale");
    r.guidance.lambda_c = num("guidance.lambda_c");
    r.guidance.lambda_d = num("guidance.lambda_d");
    r.guidance.gamma_deg = num("guidance.gamma_deg");
    r.guidance.consensus = require_key(kv, "guidance.consensus") == "1";
    r.guidance.t_start = count("guidance.t_start");
    r.guidance.n_inference_steps = count("guidance.n_inference_steps");
    r.guidance.rng_seed = r.seed;
    r.hpr.delta = num("hpr.delta");
    r.hpr.min_patch = count("hpr.min_patch");
    return r;
}

/// Every subdirectory of `dir` holding a meta.txt, in name order.
inline std::vector<CFRecord> load_records(const fs::path& dir) {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "meta.txt")) dirs.push_back(entry.path());
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<CFRecord> records;
    for (const auto& d : dirs) records.push_back(load_record(d));
    return records;
}

inline KeyValues report_to_keys(const MetricsReport& m) {
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("nan"); };
    return {
        {"n_samples", std::to_string(m.n_samples)},
        {"n_flipped", std::to_string(m.n_flipped)},
        {"flip_ratio", format_double(m.flip_ratio)},
        {"mean_confidence", opt(m.mean_confidence)},
        {"mean_l1", opt(m.mean_l1)},
        {"mean_l2", opt(m.mean_l2)},
        {"mean_base_l1", opt(m.mean_base_l1)},
        {"mean_base_l2", opt(m.mean_base_l2)},
        {"feature_frechet", opt(m.feature_frechet)},
    };
}

}  // namespace docvce
