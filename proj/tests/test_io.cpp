#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "docvce/docvce.hpp"

using namespace docvce;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Container, RoundTrip) {
    Rng rng(1);
    const ArrayBundle bundle{{"a", rng.normal({2, 3})}, {"scalar", Tensor::scalar(-0.0)}, {"empty", Tensor(Shape{0})}};
    std::stringstream ss;
    write_container(ss, bundle);
    const ArrayBundle back = read_container(ss);
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back[i].name, bundle[i].name);
        EXPECT_EQ(back[i].tensor, bundle[i].tensor);
    }
    EXPECT_TRUE(std::signbit(back[1].tensor[0]));
}

TEST(Container, RejectsCorruptInput) {
    std::stringstream bad_magic("XXXX");
    EXPECT_THROW(read_container(bad_magic), ModelFileError);
    std::stringstream ss;
    write_container(ss, {{"w", Tensor::vector({1.0, 2.0, 3.0})}});
    const std::string full = ss.str();
    std::stringstream truncated(full.substr(0, full.size() - 5));
    EXPECT_THROW(read_container(truncated), ModelFileError);
    EXPECT_THROW(load_container("/nonexistent/weights.dvce"), ModelFileError);
    EXPECT_THROW(find_array(ArrayBundle{}, "missing"), ModelFileError);
}

TEST(Pgm, RoundTripIsQuantized) {
    TempDir dir("docvce_test_pgm");
    Rng rng(2);
    Tensor img(Shape{1, 5, 7});
    for (double& v : img.values()) v = rng.uniform();
    img[0] = -0.5;  // clamped
    img[1] = 1.5;
    write_pgm(dir.path / "a.pgm", img);
    const Tensor back = read_pgm(dir.path / "a.pgm");
    ASSERT_EQ(back.shape(), img.shape());
    EXPECT_EQ(back[0], 0.0);
    EXPECT_EQ(back[1], 1.0);
    for (std::size_t i = 2; i < img.size(); ++i) EXPECT_LE(std::abs(back[i] - img[i]), 0.5 / 255.0 + 1e-12);
}

TEST(Pgm, AcceptsCommentsAndRejectsOtherFormats) {
    TempDir dir("docvce_test_pgm2");
    {
        std::ofstream os(dir.path / "c.pgm", std::ios::binary);
        os << "P5\n# made by hand\n2 1\n255\n" << static_cast<char>(0) << static_cast<char>(255);
    }
    const Tensor t = read_pgm(dir.path / "c.pgm");
    EXPECT_EQ(t.shape(), (Shape{1, 1, 2}));
    EXPECT_EQ(t[1], 1.0);
    {
        std::ofstream os(dir.path / "p2.pgm");
        os << "P2\n1 1\n255\n7\n";
    }
    EXPECT_THROW(read_pgm(dir.path / "p2.pgm"), std::runtime_error);
}

TEST(KeyValues, ParsesCommentsAndWhitespace) {
    TempDir dir("docvce_test_kv");
    {
        std::ofstream os(dir.path / "cfg.txt");
        os << "# comment\n\n  scale = 2.5 \n; other comment\nname=abc\n";
    }
    const auto kv = read_key_values(dir.path / "cfg.txt");
    EXPECT_EQ(kv.size(), 2u);
    EXPECT_EQ(kv.at("scale"), "2.5");
    EXPECT_EQ(require_key(kv, "name"), "abc");
    EXPECT_THROW(require_key(kv, "nope"), std::invalid_argument);
    {
        std::ofstream os(dir.path / "bad.txt");
        os << "novalue\n";
    }
    EXPECT_THROW(read_key_values(dir.path / "bad.txt"), std::invalid_argument);
}

TEST(KeyValues, DoublesRoundTripExactly) {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const double v = rng.normal() * std::pow(10.0, rng.index(20) - 10.0);
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
}

TEST(DatasetFiles, RoundTrip) {
    TempDir dir("docvce_test_dataset");
    SyntheticSpec spec;
    spec.samples_per_class = 3;
    const auto data = generate_dataset(spec);
    save_dataset(dir.path, data);
    const auto back = load_dataset(dir.path);
    EXPECT_EQ(back.images, data.images);
    EXPECT_EQ(back.labels, data.labels);
    EXPECT_EQ(back.n_classes, 4u);
    EXPECT_TRUE(fs::exists(dir.path / "images" / "00005_class1.pgm"));
}

TEST(RecordFiles, RoundTripBitwise) {
    TempDir dir("docvce_test_record");
    Rng rng(4);
    CFRecord r;
    r.sample_index = 17;
    r.factual = rng.normal({1, 4, 4});
    r.base_cf = rng.normal({1, 4, 4});
    r.refined_cf = rng.normal({1, 4, 4});
    r.difference = difference_map(r.factual, r.refined_cf);
    r.factual_class = 1;
    r.target_class = 3;
    r.flipped = true;
    r.confidence = 0.1 + 0.2;
    r.base_confidence = std::nextafter(0.9, 1.0);
    r.l1 = 1.0 / 3.0;
    r.l2 = 2.0 / 7.0;
    r.base_l1 = 5.5;
    r.base_l2 = 1e-300;
    r.hpr_evaluations = 61;
    r.seed = 18446744073709551557ULL;
    r.top_k = 2;
    r.guidance.scale = 1.5;
    r.guidance.lambda_c = 0.8;
    r.guidance.lambda_d = 0.2;
    r.guidance.gamma_deg = 30.0;
    r.guidance.consensus = false;
    r.guidance.t_start = 60;
    r.guidance.n_inference_steps = 150;
    r.guidance.rng_seed = r.seed;
    r.hpr.delta = 0.05;
    r.hpr.min_patch = 4;
    save_record(dir.path / "r0", r);
    for (const char* f : {"factual.pgm", "base.pgm", "refined.pgm", "diff.pgm", "meta.txt"})
        EXPECT_TRUE(fs::exists(dir.path / "r0" / f));
    const CFRecord b = load_record(dir.path / "r0");
    EXPECT_EQ(b.factual, r.factual);
    EXPECT_EQ(b.base_cf, r.base_cf);
    EXPECT_EQ(b.refined_cf, r.refined_cf);
    EXPECT_EQ(b.difference, r.difference);
    EXPECT_EQ(b.sample_index, r.sample_index);
    EXPECT_EQ(b.factual_class, r.factual_class);
    EXPECT_EQ(b.target_class, r.target_class);
    EXPECT_EQ(b.flipped, r.flipped);
    EXPECT_EQ(b.confidence, r.confidence);
    EXPECT_EQ(b.base_confidence, r.base_confidence);
    EXPECT_EQ(b.l1, r.l1);
    EXPECT_EQ(b.l2, r.l2);
    EXPECT_EQ(b.base_l1, r.base_l1);
    EXPECT_EQ(b.base_l2, r.base_l2);
    EXPECT_EQ(b.hpr_evaluations, r.hpr_evaluations);
    EXPECT_EQ(b.seed, r.seed);
    EXPECT_EQ(b.top_k, r.top_k);
    EXPECT_EQ(b.guidance.scale, r.guidance.scale);
    EXPECT_EQ(b.guidance.lambda_c, r.guidance.lambda_c);
    EXPECT_EQ(b.guidance.lambda_d, r.guidance.lambda_d);
    EXPECT_EQ(b.guidance.gamma_deg, r.guidance.gamma_deg);
    EXPECT_EQ(b.guidance.consensus, r.guidance.consensus);
    EXPECT_EQ(b.guidance.t_start, r.guidance.t_start);
    EXPECT_EQ(b.guidance.n_inference_steps, r.guidance.n_inference_steps);
    EXPECT_EQ(b.guidance.rng_seed, r.seed);
    EXPECT_EQ(b.hpr.delta, r.hpr.delta);
    EXPECT_EQ(b.hpr.min_patch, r.hpr.min_patch);

    save_record(dir.path / "r1", r);
    EXPECT_EQ(load_records(dir.path).size(), 2u);
}

TEST(Hash, StableAndSensitive) {
    TempDir dir("docvce_test_hash");
    {
        std::ofstream(dir.path / "a") << "abc";
        std::ofstream(dir.path / "b") << "abd";
    }
    EXPECT_EQ(file_hash(dir.path / "a"), file_hash(dir.path / "a"));
    EXPECT_NE(file_hash(dir.path / "a"), file_hash(dir.path / "b"));
    EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}
