// docvce command line: data generation, training, counterfactual generation and evaluation.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "docvce/docvce.hpp"

using namespace docvce;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitModelFile = 3;
constexpr int kExitNumerical = 4;

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Fills options not given on the command line from a flat key=value file; keys are long flag names.
void apply_config_file(CLI::App& cmd, const std::string& path) {
    if (path.empty()) return;
    KeyValues kv;
    try {
        kv = read_key_values(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    for (const auto& [key, value] : kv) {
        CLI::Option* opt = cmd.get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config") throw ConfigError("config file " + path + ": unknown key '" + key + "'");
        if (opt->count() > 0) continue;
        try {
            opt->add_result(value);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw ConfigError("config file " + path + ": key '" + key + "': " + e.what());
        }
    }
}

// Every option's effective value.
KeyValues option_values(const CLI::App& cmd) {
    KeyValues kv;
    for (const CLI::Option* opt : cmd.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help" || name == "config") continue;
        kv[name] = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    }
    return kv;
}

void write_manifest(const fs::path& path, const CLI::App& cmd, KeyValues extra) {
    KeyValues kv = option_values(cmd);
    kv["command"] = cmd.get_name();
    for (auto& [k, v] : extra) kv[k] = std::move(v);
    write_key_values(path, kv);
}

std::string hash_of(const fs::path& p) { return hex64(file_hash(p)); }

fs::path sibling_manifest(const fs::path& out) { return fs::path(out.string() + ".manifest.txt"); }

// --- gen-data -------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    SyntheticSpec spec;
    bool images = true;
};

void add_gen_data(CLI::App& app, GenDataArgs& a) {
    CLI::App* cmd = app.add_subcommand("gen-data", "generate a synthetic labeled image set");
    cmd->add_option("--out", a.out, "output directory");
    cmd->add_option("--n-classes", a.spec.n_classes);
    cmd->add_option("--image-side", a.spec.image_side);
    cmd->add_option("--samples-per-class", a.spec.samples_per_class);
    cmd->add_option("--noise-level", a.spec.noise_level);
    cmd->add_option("--seed", a.spec.seed);
    cmd->add_option("--write-images", a.images, "also write one PGM per image");
}

int run_gen_data(const CLI::App& cmd, GenDataArgs& a) {
    if (a.out.empty()) throw ConfigError("gen-data: --out is required");
    const LabeledImages data = generate_dataset(a.spec);
    save_dataset(a.out, data, a.images);
    write_manifest(fs::path(a.out) / "manifest.txt", cmd, {{"dataset_hash", hash_of(fs::path(a.out) / kDatasetFile)}});
    std::printf("wrote %zu images to %s\n", data.size(), a.out.c_str());
    return 0;
}

// --- train-classifier -----------------------------------------------------------

struct TrainClassifierArgs {
    std::string data, out;
    std::size_t hidden = 32;
    std::uint64_t init_seed = 7;
    TrainConfig train{30, 32, 0.05, 0.0, 3};
    std::string test_data;
};

void add_train_classifier(CLI::App& app, TrainClassifierArgs& a) {
    CLI::App* cmd = app.add_subcommand("train-classifier", "train the target classifier");
    cmd->add_option("--data", a.data, "dataset directory");
    cmd->add_option("--out", a.out, "weight file");
    cmd->add_option("--hidden", a.hidden);
    cmd->add_option("--init-seed", a.init_seed);
    cmd->add_option("--epochs", a.train.epochs);
    cmd->add_option("--batch-size", a.train.batch_size);
    cmd->add_option("--lr", a.train.learning_rate);
    cmd->add_option("--seed", a.train.rng_seed);
    cmd->add_option("--test-data", a.test_data, "held-out dataset directory for an accuracy report");
}

int run_train_classifier(const CLI::App& cmd, TrainClassifierArgs& a) {
    if (a.data.empty() || a.out.empty()) throw ConfigError("train-classifier: --data and --out are required");
    const LabeledImages data = load_dataset(a.data);
    ClassifierConfig cc{data.images.front().size(), a.hidden, data.n_classes};
    Classifier clf(cc, a.init_seed);
    const auto history = train_classifier(clf, data.images, data.labels, a.train);
    clf.save(a.out);
    KeyValues extra{{"dataset_hash", hash_of(fs::path(a.data) / kDatasetFile)},
                    {"weights_hash", hash_of(a.out)},
                    {"final_loss", format_double(history.epoch_losses.back())}};
    std::printf("final loss %.6g\n", history.epoch_losses.back());
    if (!a.test_data.empty()) {
        const LabeledImages test = load_dataset(a.test_data);
        const double acc = accuracy(clf, test.images, test.labels);
        extra["test_accuracy"] = format_double(acc);
        std::printf("held-out accuracy %.4f\n", acc);
    }
    write_manifest(sibling_manifest(a.out), cmd, extra);
    return 0;
}

// --- train-denoiser -------------------------------------------------------------

struct TrainDenoiserArgs {
    std::string data, out;
    DenoiserConfig model;
    std::uint64_t init_seed = 11;
    std::size_t codec_factor = 2;
    double beta_start = 1e-4, beta_end = 0.02;
    TrainConfig train{60, 32, 3e-5, 0.1, 5};
};

void add_train_denoiser(CLI::App& app, TrainDenoiserArgs& a) {
    CLI::App* cmd = app.add_subcommand("train-denoiser", "train the class-conditional noise predictor");
    cmd->add_option("--data", a.data, "dataset directory");
    cmd->add_option("--out", a.out, "weight file");
    cmd->add_option("--hidden", a.model.hidden);
    cmd->add_option("--time-dim", a.model.time_dim);
    cmd->add_option("--blocks", a.model.blocks);
    cmd->add_option("--timesteps", a.model.total_timesteps);
    cmd->add_option("--beta-start", a.beta_start);
    cmd->add_option("--beta-end", a.beta_end);
    cmd->add_option("--codec-factor", a.codec_factor);
    cmd->add_option("--init-seed", a.init_seed);
    cmd->add_option("--epochs", a.train.epochs);
    cmd->add_option("--batch-size", a.train.batch_size);
    cmd->add_option("--lr", a.train.learning_rate);
    cmd->add_option("--null-prob", a.train.null_label_prob);
    cmd->add_option("--seed", a.train.rng_seed);
}

int run_train_denoiser(const CLI::App& cmd, TrainDenoiserArgs& a) {
    if (a.data.empty() || a.out.empty()) throw ConfigError("train-denoiser: --data and --out are required");
    const LabeledImages data = load_dataset(a.data);
    const Shape& s = data.images.front().shape();
    if (s.size() != 3) throw ConfigError("train-denoiser: images must be [C,H,W]");
    Codec codec(CodecConfig{a.codec_factor, s[0], s[1], s[2], 1.0});
    codec.set_eta(fit_latent_scale(codec, data.images));
    const NoiseSchedule schedule = build_linear_schedule(a.model.total_timesteps, a.beta_start, a.beta_end);
    std::vector<Tensor> latents;
    for (const Tensor& x : data.images) latents.push_back(codec.to_diffusion_latent(x));

    DenoiserConfig dc = a.model;
    dc.latent_dim = latents.front().size();
    dc.n_classes = data.n_classes;
    Denoiser denoiser(dc, a.init_seed);
    const auto start = std::chrono::steady_clock::now();
    const auto history = train_denoiser(denoiser, latents, data.labels, a.train, schedule);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    ArrayBundle bundle = denoiser.to_arrays();
    append_codec_arrays(bundle, codec);
    append_schedule_arrays(bundle, a.model.total_timesteps, a.beta_start, a.beta_end);
    save_container(a.out, bundle);
    write_manifest(sibling_manifest(a.out), cmd,
                   {{"dataset_hash", hash_of(fs::path(a.data) / kDatasetFile)},
                    {"weights_hash", hash_of(a.out)},
                    {"eta", format_double(codec.eta())},
                    {"final_loss", format_double(history.epoch_losses.back())},
                    {"train_seconds", format_double(secs)}});
    std::printf("eta %.6g, final loss %.6g, %.1f s\n", codec.eta(), history.epoch_losses.back(), secs);
    return 0;
}

// --- generate-cf / replay -------------------------------------------------------

struct LoadedModels {
    Classifier classifier;
    Denoiser denoiser;
    Codec codec;
    NoiseSchedule schedule;

    GuidanceModels models() const { return {denoiser, classifier}; }
};

LoadedModels load_models(const std::string& classifier_path, const std::string& denoiser_path) {
    if (classifier_path.empty() || denoiser_path.empty()) {
        throw ConfigError("--classifier and --denoiser weight files are required");
    }
    LoadedModels m;
    m.classifier = Classifier::load(classifier_path);
    const ArrayBundle bundle = load_container(denoiser_path);
    m.denoiser = Denoiser::from_arrays(bundle);
    m.codec = codec_from_arrays(bundle);
    m.schedule = schedule_from_arrays(bundle);
    if (m.denoiser.config().latent_dim != shape_size(m.codec.config().latent_shape())) {
        throw ModelFileError("denoiser latent size does not match its codec");
    }
    if (m.classifier.config().input_dim != shape_size(m.codec.config().image_shape())) {
        throw ModelFileError("classifier input size does not match the codec image shape");
    }
    return m;
}

struct GenerateArgs {
    std::string data, classifier, denoiser, out;
    std::uint64_t seed = 0;
    std::size_t n_samples = 10;
    std::size_t first = 0;
    std::size_t top_k = 3;
    GuidanceConfig guidance;
    HPRConfig hpr;
};

void add_generate(CLI::App& app, GenerateArgs& a) {
    CLI::App* cmd = app.add_subcommand("generate-cf", "generate and refine counterfactuals");
    cmd->add_option("--data", a.data, "dataset directory with factual images");
    cmd->add_option("--classifier", a.classifier, "classifier weight file");
    cmd->add_option("--denoiser", a.denoiser, "denoiser weight file");
    cmd->add_option("--out", a.out, "records directory");
    cmd->add_option("--seed", a.seed, "base seed; sample i uses a seed derived from (seed, i)");
    cmd->add_option("--n-samples", a.n_samples);
    cmd->add_option("--first", a.first, "index of the first factual image");
    cmd->add_option("--top-k", a.top_k);
    cmd->add_option("--scale", a.guidance.scale);
    cmd->add_option("--lambda-c", a.guidance.lambda_c);
    cmd->add_option("--lambda-d", a.guidance.lambda_d);
    cmd->add_option("--gamma", a.guidance.gamma_deg, "consensus angle threshold in degrees");
    cmd->add_option("--consensus", a.guidance.consensus, "false disables the consensus filter");
    cmd->add_option("--t-start", a.guidance.t_start, "start index on the respaced ladder");
    cmd->add_option("--steps", a.guidance.n_inference_steps, "respaced inference steps");
    cmd->add_option("--delta", a.hpr.delta, "refinement confidence tolerance");
    cmd->add_option("--min-patch", a.hpr.min_patch);
}

int run_generate(const CLI::App& cmd, GenerateArgs& a) {
    if (a.data.empty() || a.out.empty()) throw ConfigError("generate-cf: --data and --out are required");
    a.guidance.validate();
    const LoadedModels m = load_models(a.classifier, a.denoiser);
    a.hpr.validate(m.codec.config().height, m.codec.config().width);
    const LabeledImages data = load_dataset(a.data);
    if (a.first + a.n_samples > data.size()) {
        throw ConfigError("generate-cf: requested samples exceed the dataset size " + std::to_string(data.size()));
    }
    fs::create_directories(a.out);
    KeyValues extra{{"classifier_hash", hash_of(a.classifier)},
                    {"denoiser_hash", hash_of(a.denoiser)},
                    {"dataset_hash", hash_of(fs::path(a.data) / kDatasetFile)}};
    std::vector<CFRecord> records;
    for (std::size_t k = 0; k < a.n_samples; ++k) {
        const std::size_t i = a.first + k;
        GuidanceConfig g = a.guidance;
        g.rng_seed = derive_seed(a.seed, i);
        RunOptions opts;
        opts.top_k = a.top_k;
        opts.sample_index = i;
        CFRecord r = run_docvce(data.images[i], m.models(), m.codec, m.schedule, g, a.hpr, opts);
        char name[32];
        std::snprintf(name, sizeof name, "%05zu", i);
        save_record(fs::path(a.out) / name, r);
        extra["seed." + std::string(name)] = std::to_string(g.rng_seed);
        std::printf("sample %zu: class %zu -> %zu, flipped %d, confidence %.3f, L1 %.2f (base %.2f)\n", i,
                    r.factual_class, r.target_class, r.flipped ? 1 : 0, r.confidence, r.l1, r.base_l1);
        records.push_back(std::move(r));
    }
    const MetricsReport report = evaluate(records, &m.classifier);
    std::printf("flip ratio %.3f\n", report.flip_ratio);
    write_manifest(fs::path(a.out) / "manifest.txt", cmd, extra);
    return 0;
}

struct ReplayArgs {
    std::string record, classifier, denoiser;
};

void add_replay(CLI::App& app, ReplayArgs& a) {
    CLI::App* cmd = app.add_subcommand("replay", "re-run one record from its stored seed and configuration");
    cmd->add_option("--record", a.record, "record directory");
    cmd->add_option("--classifier", a.classifier, "classifier weight file");
    cmd->add_option("--denoiser", a.denoiser, "denoiser weight file");
}

int run_replay(ReplayArgs& a) {
    if (a.record.empty()) throw ConfigError("replay: --record is required");
    const LoadedModels m = load_models(a.classifier, a.denoiser);
    const CFRecord stored = load_record(a.record);
    const CFRecord again = replay(stored, m.models(), m.codec, m.schedule);
    const bool same = again.base_cf == stored.base_cf && again.refined_cf == stored.refined_cf &&
                      again.difference == stored.difference && again.target_class == stored.target_class;
    std::printf("%s\n", same ? "identical" : "MISMATCH");
    return same ? 0 : 1;
}

// --- evaluate / diff-map --------------------------------------------------------

struct EvaluateArgs {
    std::string records, classifier, out;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a) {
    CLI::App* cmd = app.add_subcommand("evaluate", "aggregate metrics over a records directory");
    cmd->add_option("--records", a.records, "records directory");
    cmd->add_option("--classifier", a.classifier, "classifier weight file; enables the feature Frechet distance");
    cmd->add_option("--out", a.out, "report file (default: <records>/report.txt)");
}

int run_evaluate(const CLI::App& cmd, EvaluateArgs& a) {
    if (a.records.empty()) throw ConfigError("evaluate: --records is required");
    const std::vector<CFRecord> records = load_records(a.records);
    if (records.empty()) throw ConfigError("evaluate: no records under " + a.records);
    std::optional<Classifier> clf;
    if (!a.classifier.empty()) clf = Classifier::load(a.classifier);
    const MetricsReport report = evaluate(records, clf ? &*clf : nullptr);
    const fs::path out = a.out.empty() ? fs::path(a.records) / "report.txt" : fs::path(a.out);
    const KeyValues kv = report_to_keys(report);
    write_key_values(out, kv);
    for (const auto& [k, v] : kv) std::printf("%s = %s\n", k.c_str(), v.c_str());
    KeyValues extra;
    if (clf) extra["classifier_hash"] = hash_of(a.classifier);
    write_manifest(sibling_manifest(out), cmd, extra);
    return 0;
}

struct DiffMapArgs {
    std::string factual, counterfactual, out;
};

void add_diff_map(CLI::App& app, DiffMapArgs& a) {
    CLI::App* cmd = app.add_subcommand("diff-map", "normalized absolute difference of two images");
    cmd->add_option("--factual", a.factual, "PGM image");
    cmd->add_option("--counterfactual", a.counterfactual, "PGM image");
    cmd->add_option("--out", a.out, "output PGM");
}

int run_diff_map(const CLI::App& cmd, DiffMapArgs& a) {
    if (a.factual.empty() || a.counterfactual.empty() || a.out.empty()) {
        throw ConfigError("diff-map: --factual, --counterfactual and --out are required");
    }
    write_pgm(a.out, difference_map(read_pgm(a.factual), read_pgm(a.counterfactual)));
    write_manifest(sibling_manifest(a.out), cmd,
                   {{"factual_hash", hash_of(a.factual)}, {"counterfactual_hash", hash_of(a.counterfactual)}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual explanations via guided latent diffusion and patch-wise refinement"};
    app.require_subcommand(1);

    GenDataArgs gen;
    TrainClassifierArgs tc;
    TrainDenoiserArgs td;
    GenerateArgs ga;
    ReplayArgs ra;
    EvaluateArgs ea;
    DiffMapArgs da;
    add_gen_data(app, gen);
    add_train_classifier(app, tc);
    add_train_denoiser(app, td);
    add_generate(app, ga);
    add_replay(app, ra);
    add_evaluate(app, ea);
    add_diff_map(app, da);

    std::vector<std::string> config_paths(app.get_subcommands({}).size());
    std::size_t k = 0;
    for (CLI::App* cmd : app.get_subcommands({})) {
        cmd->option_defaults()->always_capture_default();
        cmd->add_option("--config", config_paths[k++], "key=value file; keys are long flag names, flags win");
    }
    // options are registered before defaults are captured
    for (CLI::App* cmd : app.get_subcommands({}))
        for (CLI::Option* opt : cmd->get_options()) opt->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        k = 0;
        for (CLI::App* cmd : app.get_subcommands({})) {
            const std::string& config = config_paths[k++];
            if (!cmd->parsed()) continue;
            apply_config_file(*cmd, config);
            const std::string name = cmd->get_name();
            if (name == "gen-data") return run_gen_data(*cmd, gen);
            if (name == "train-classifier") return run_train_classifier(*cmd, tc);
            if (name == "train-denoiser") return run_train_denoiser(*cmd, td);
            if (name == "generate-cf") return run_generate(*cmd, ga);
            if (name == "replay") return run_replay(ra);
            if (name == "evaluate") return run_evaluate(*cmd, ea);
            if (name == "diff-map") return run_diff_map(*cmd, da);
        }
    } catch (const ModelFileError& e) {
        std::cerr << "model file error: " << e.what() << '\n';
        return kExitModelFile;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::out_of_range& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
