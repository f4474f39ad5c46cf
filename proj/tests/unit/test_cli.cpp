#include <doctest.h>

#include "fashionrag/cli.hpp"
#include "fashionrag/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace fashionrag;
namespace fs = std::filesystem;

namespace {

struct CaptureStdout {
    std::ostringstream ss;
    std::streambuf* old;
    CaptureStdout() : old(std::cout.rdbuf(ss.rdbuf())) {}
    ~CaptureStdout() { std::cout.rdbuf(old); }
    std::string str() const { return ss.str(); }
};

struct CaptureStderr {
    std::ostringstream ss;
    std::streambuf* old;
    CaptureStderr() : old(std::cerr.rdbuf(ss.rdbuf())) {}
    ~CaptureStderr() { std::cerr.rdbuf(old); }
    std::string str() const { return ss.str(); }
};

int run_quiet(const std::vector<std::string>& args, std::string* out = nullptr,
              std::string* err = nullptr) {
    CaptureStdout cout_cap;
    CaptureStderr cerr_cap;
    const int rc = run_command(args);
    if (out) *out = cout_cap.str();
    if (err) *err = cerr_cap.str();
    return rc;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

size_t count_lines(const std::string& text) {
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("usage problems exit 2, validation problems exit 1, help exits 0") {
    std::string out, err;
    CHECK(run_quiet({"--bogus-flag"}, &out, &err) == 2);
    CHECK(err.find("error:") != std::string::npos);
    CHECK(run_quiet({"toydata", "--bogus-flag", "--out", "/tmp/x"}, &out, &err) == 2);
    CHECK(err.find("--bogus-flag") != std::string::npos);
    CHECK(run_quiet({}, &out, &err) == 2);
    CHECK(run_quiet({"no-such-command"}, &out, &err) == 2);
    CHECK(run_quiet({"--help"}, &out, &err) == 0);
    CHECK(out.find("toydata") != std::string::npos);

    // Validation failures name the failing key or flag.
    CHECK(run_quiet({"toydata", "--out", "/tmp/x", "--n", "0"}, &out, &err) == 1);
    CHECK(err.find("--n") != std::string::npos);
    CHECK(run_quiet({"index", "query", "--index", "/nonexistent.frix", "--text", "x"}, &out,
                    &err) == 1);
    CHECK(err.find("/nonexistent.frix") != std::string::npos);
}

TEST_CASE("cli pipeline: toydata, index, train, generate, evaluate, ablate") {
    const fs::path dir = fs::temp_directory_path() / "fashionrag_cli_e2e";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string data = (dir / "data").string();
    const std::string index = (dir / "garments.frix").string();
    std::string out, err;

    // toydata
    REQUIRE(run_quiet({"toydata", "--out", data, "--n", "8", "--n-test", "4", "--seed", "1"},
                      &out, &err) == 0);
    CHECK(fs::exists(fs::path(data) / "catalog.tsv"));
    CHECK(fs::exists(fs::path(data) / "manifest.json"));

    // index build stores dataset-relative refs
    REQUIRE(run_quiet({"index", "build", "--data", data, "--out", index}, &out, &err) == 0);
    CHECK(out.find("indexed 12 garments") != std::string::npos);
    CHECK(fs::exists(index));
    CHECK(fs::exists(index + ".manifest.json"));
    const EmbeddingIndex idx = load_index(index);
    REQUIRE(!idx.records.empty());
    for (const auto& rec : idx.records) {
        CHECK_FALSE(fs::path(rec.image_ref).is_absolute());
        CHECK(fs::exists(fs::path(data) / rec.image_ref));
    }

    // index query prints rank, id, score, ref
    REQUIRE(run_quiet({"index", "query", "--index", index, "--text", "red shirt", "--k", "2"},
                      &out, &err) == 0);
    CHECK(count_lines(out) == 2);
    std::istringstream row(out);
    int rank;
    std::string id;
    double score;
    std::string ref;
    REQUIRE((row >> rank >> id >> score >> ref));
    CHECK(rank == 1);
    CHECK(score <= 1.0 + 1e-12);

    // train stage 1 then stage 2 (tiny budgets, config via --set)
    const std::string run1 = (dir / "run1").string();
    const std::vector<std::string> overrides = {
        "--set", "train.batch_size=2",  "--set", "train.log_every=2",
        "--set", "train.checkpoint_every=0", "--set", "retrieval.category_filter=false"};
    std::vector<std::string> t1 = {"train", "stage1", "--data", data, "--index", index,
                                   "--out", run1, "--steps", "4"};
    t1.insert(t1.end(), overrides.begin(), overrides.end());
    REQUIRE(run_quiet(t1, &out, &err) == 0);
    const std::string ckpt1 = run1 + "/checkpoints/stage1_final.frck";
    CHECK(fs::exists(ckpt1));
    CHECK(fs::exists(run1 + "/checkpoints/loss_stage1.log"));
    CHECK(out.find("stage 1 done") != std::string::npos);
    const std::string man1 = slurp(run1 + "/manifest.json");
    CHECK(man1.find("stage1_final.frck") != std::string::npos);
    CHECK(man1.find("catalog.tsv") != std::string::npos);

    // stage 2 without --resume is a validation failure
    std::vector<std::string> t2bad = {"train", "stage2", "--data", data, "--index", index,
                                      "--out", (dir / "runbad").string(), "--steps", "2"};
    CHECK(run_quiet(t2bad, &out, &err) == 1);
    CHECK(err.find("--resume") != std::string::npos);

    const std::string run2 = (dir / "run2").string();
    std::vector<std::string> t2 = {"train", "stage2", "--data", data,  "--index", index,
                                   "--out", run2,     "--steps", "4",  "--resume", ckpt1};
    t2.insert(t2.end(), overrides.begin(), overrides.end());
    REQUIRE(run_quiet(t2, &out, &err) == 0);
    const std::string ckpt2 = run2 + "/checkpoints/stage2_final.frck";
    CHECK(fs::exists(ckpt2));

    // generate: output png preserves unmasked pixels of the input exactly
    const std::string gen_dir = (dir / "gen").string();
    REQUIRE(run_quiet({"generate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                       "--out", gen_dir, "--n-r", "2", "--set", "diffusion.t_infer=4"},
                      &out, &err) == 0);
    CHECK(out.find("caption") != std::string::npos);
    const size_t pos = out.find("image: ");
    REQUIRE(pos != std::string::npos);
    std::string image_path = out.substr(pos + 7);
    image_path.erase(image_path.find_last_not_of('\n') + 1);
    REQUIRE(fs::exists(image_path));

    const LoadReport test_split = load_dataset(data, "test");
    const SampleAnnotation& first = test_split.samples.front();
    const Image generated = read_png(image_path);
    const Image person = read_png(first.image_path);
    const Image mask = read_png(first.mask_path);
    REQUIRE(generated.width == person.width);
    REQUIRE(generated.height == person.height);
    bool outside_ok = true;
    for (int y = 0; y < person.height && outside_ok; ++y)
        for (int x = 0; x < person.width && outside_ok; ++x)
            if (mask.at(0, y, x) == 0.0)
                for (int c = 0; c < 3; ++c)
                    if (generated.at(c, y, x) != person.at(c, y, x)) outside_ok = false;
    CHECK(outside_ok);

    // unknown sample id is a validation failure naming the id
    CHECK(run_quiet({"generate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                     "--out", gen_dir, "--sample", "zzz"},
                    &out, &err) == 1);
    CHECK(err.find("zzz") != std::string::npos);

    // evaluate with retrieval: every report artifact lands under reports/
    const std::string ev3 = (dir / "ev3").string();
    REQUIRE(run_quiet({"evaluate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                       "--out", ev3, "--n-r", "3", "--n-c", "3", "--limit", "2", "--set",
                       "diffusion.t_infer=3", "--set", "retrieval.category_filter=false"},
                      &out, &err) == 0);
    const std::string kv3 = slurp(ev3 + "/reports/metrics_paired_nr3_nc3.txt");
    CHECK(kv3.find("setting=paired") != std::string::npos);
    CHECK(kv3.find("clip_i=") != std::string::npos);
    CHECK(kv3.find("lpips=") != std::string::npos);
    CHECK(kv3.find("config.adapter.n_v=4") != std::string::npos);
    const std::string samples3 = slurp(ev3 + "/reports/metrics_paired_nr3_nc3_samples.tsv");
    CHECK(count_lines(samples3) == 2);
    CHECK(out.find("paired\t2\t") != std::string::npos);
    const std::string ev3_stdout = out;

    // n-r 0: clip_i is absent from the report
    const std::string ev0 = (dir / "ev0").string();
    REQUIRE(run_quiet({"evaluate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                       "--out", ev0, "--n-r", "0", "--limit", "2", "--set",
                       "diffusion.t_infer=3"},
                      &out, &err) == 0);
    const std::string kv0 = slurp(ev0 + "/reports/metrics_paired_nr0_nc3.txt");
    CHECK(kv0.find("clip_i=") == std::string::npos);
    CHECK(kv0.find("clip_t=") != std::string::npos);

    // conditioning counts out of range fail by config key
    CHECK(run_quiet({"evaluate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                     "--out", ev0, "--n-r", "9"},
                    &out, &err) == 1);
    CHECK(err.find("eval.n_r must be in [0..3], got 9") != std::string::npos);

    // identical seeds reproduce the report row exactly
    std::string out_again;
    const std::string ev3b = (dir / "ev3b").string();
    REQUIRE(run_quiet({"evaluate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                       "--out", ev3b, "--n-r", "3", "--n-c", "3", "--limit", "2", "--set",
                       "diffusion.t_infer=3", "--set", "retrieval.category_filter=false"},
                      &out_again, &err) == 0);
    CHECK(ev3_stdout == out_again);
    CHECK(slurp(ev3b + "/reports/metrics_paired_nr3_nc3.tsv") ==
          slurp(ev3 + "/reports/metrics_paired_nr3_nc3.tsv"));

    // ablate: one row per grid cell from a single checkpoint
    const std::string abl = (dir / "abl").string();
    REQUIRE(run_quiet({"ablate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                       "--out", abl, "--grid", "nc=1,3", "nr=0,3", "--limit", "2", "--set",
                       "diffusion.t_infer=3", "--set", "retrieval.category_filter=false"},
                      &out, &err) == 0);
    const std::string table = slurp(abl + "/reports/ablation_paired.tsv");
    CHECK(count_lines(table) == 5);  // header + 4 cells
    CHECK(table.find("nc\tnr\tsetting") == 0);
    CHECK(table.find("\n1\t0\t") != std::string::npos);
    CHECK(table.find("\n3\t3\t") != std::string::npos);

    // bad grid axis is a validation failure
    CHECK(run_quiet({"ablate", "--checkpoint", ckpt2, "--data", data, "--index", index,
                     "--out", abl, "--grid", "kq=1"},
                    &out, &err) == 1);
    CHECK(err.find("kq") != std::string::npos);

    fs::remove_all(dir);
}

TEST_CASE("evaluate rejects out-of-range conditioning settings by key") {
    std::string out, err;
    CHECK(run_quiet({"evaluate", "--checkpoint", "/missing.frck", "--data", "/missing",
                     "--index", "/missing.frix", "--n-r", "9"},
                    &out, &err) == 1);
    CHECK(err.find("dataset root not found: /missing") != std::string::npos);

    CHECK(run_quiet({"evaluate", "--checkpoint", "/missing.frck", "--data", "/tmp",
                     "--index", "/missing.frix", "--setting", "weird"},
                    &out, &err) == 1);
    CHECK(err.find("/missing.frix") != std::string::npos);
}
