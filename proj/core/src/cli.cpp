#include "fashionrag/cli.hpp"

#include "fashionrag/manifest.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace fashionrag {

namespace fs = std::filesystem;

namespace {

void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require_range(int64_t v, int64_t lo, int64_t hi, const std::string& key) {
    if (v < lo || v > hi) {
        std::ostringstream os;
        os << key << " must be in [" << lo << ".." << hi << "], got " << v;
        fail(os.str());
    }
}

void require_exists(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) fail(what + " not found: " + path);
}

void apply_sets(Config& cfg, const std::vector<std::string>& sets) {
    for (const auto& kv : sets) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            fail("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
}

// profile defaults < config file < --set overrides.
Config fresh_config(const std::string& profile, const std::string& config_file,
                    const std::vector<std::string>& sets) {
    Config cfg = Config::profile_defaults(resolve_profile(profile));
    if (!config_file.empty()) cfg.merge_from(Config::load_file(config_file));
    apply_sets(cfg, sets);
    return cfg;
}

// Checkpoint-backed commands keep the stored model config and only layer
// run-time overrides on top; structural keys must stay untouched.
void overlay_config(Config& cfg, const std::string& config_file,
                    const std::vector<std::string>& sets) {
    if (!config_file.empty()) cfg.merge_from(Config::load_file(config_file));
    apply_sets(cfg, sets);
}

std::string ensure_run_dir(const std::string& out) {
    if (out.empty()) return make_run_dir("runs");
    for (const char* sub : {"checkpoints", "images", "reports"})
        fs::create_directories(fs::path(out) / sub);
    return out;
}

std::string join_args(const std::vector<std::string>& args) {
    std::ostringstream os;
    os << "fashionrag";
    for (const auto& a : args) os << ' ' << a;
    return os.str();
}

Image load_garment(const std::string& ref, const std::string& root) {
    const fs::path p = fs::path(ref).is_absolute() ? fs::path(ref) : fs::path(root) / ref;
    return read_png(p.string());
}

// ---- subcommand bodies ----------------------------------------------------

struct ToydataOpts {
    std::string out;
    int n = 64;
    int n_test = 16;
    uint64_t seed = 0;
};

void cmd_toydata(const ToydataOpts& o, const std::string& cmdline) {
    if (o.n < 1) fail("--n must be at least 1, got " + std::to_string(o.n));
    if (o.n_test < 1) fail("--n-test must be at least 1, got " + std::to_string(o.n_test));
    ToyDatasetSpec spec;
    spec.n_train = o.n;
    spec.n_test = o.n_test;
    spec.seed = o.seed;
    generate_toy_dataset(o.out, spec);

    RunManifest man;
    man.command = cmdline;
    man.seed = o.seed;
    man.outputs["root"] = o.out;
    man.outputs["catalog"] = (fs::path(o.out) / "catalog.tsv").string();
    man.write((fs::path(o.out) / "manifest.json").string());
    std::cout << "toy dataset: " << o.n << " train / " << o.n_test << " test samples under "
              << o.out << "\n";
}

struct IndexBuildOpts {
    std::string data, out, tag;
    std::string profile, config_file;
    std::vector<std::string> sets;
};

void cmd_index_build(const IndexBuildOpts& o, const std::string& cmdline) {
    require_exists(o.data, "dataset root");
    const std::string catalog = (fs::path(o.data) / "catalog.tsv").string();
    require_exists(catalog, "catalog manifest");
    const Config cfg = fresh_config(o.profile, o.config_file, o.sets);
    const std::string tag = o.tag.empty() ? cfg.str("retrieval.encoder_tag") : o.tag;

    // Encode through root-resolved paths but store refs relative to the
    // dataset root, so the index stays valid wherever the tree moves.
    std::vector<CatalogItem> items = load_catalog_manifest(catalog);
    std::map<std::string, std::string> original_ref;
    for (auto& item : items) {
        original_ref[item.id] = item.image_path;
        if (!fs::path(item.image_path).is_absolute())
            item.image_path = (fs::path(o.data) / item.image_path).string();
    }
    EncodeReport report;
    EmbeddingIndex index = encode_garment_catalog(items, image_encoder_for_tag(tag), tag, &report);
    for (auto& rec : index.records) rec.image_ref = original_ref.at(rec.id);
    for (const auto& [id, reason] : report.failures)
        std::cerr << "skipped " << id << ": " << reason << "\n";
    if (index.records.empty()) fail("no catalog item could be encoded");

    fs::create_directories(fs::path(o.out).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(o.out).parent_path());
    persist_index(index, o.out);

    RunManifest man;
    man.command = cmdline;
    man.config_echo = cfg.entries();
    man.add_input(catalog);
    man.outputs["index"] = o.out;
    man.write(o.out + ".manifest.json");
    std::cout << "indexed " << report.encoded << " garments (" << report.failures.size()
              << " skipped) -> " << o.out << "\n";
}

struct IndexQueryOpts {
    std::string index, text, category;
    int k = 3;
};

void cmd_index_query(const IndexQueryOpts& o) {
    if (o.k < 1) fail("--k must be at least 1, got " + std::to_string(o.k));
    require_exists(o.index, "index file");
    const EmbeddingIndex index = load_index(o.index);
    std::optional<GarmentCategory> cat;
    if (!o.category.empty()) cat = category_from_string(o.category);
    const std::vector<double> q =
        encode_text_query(o.text, text_encoder_for_tag(index.encoder_tag));
    const RetrievalResult res = retrieve_top_k(index, q, static_cast<size_t>(o.k), {}, cat);
    for (size_t i = 0; i < res.entries.size(); ++i)
        std::cout << i + 1 << '\t' << res.entries[i].id << '\t' << res.entries[i].score << '\t'
                  << index.find(res.entries[i].id)->image_ref << "\n";
}

struct TrainOpts {
    int stage = 1;
    std::string data, index, out;
    std::string resume;
    int steps = 0;
    std::optional<uint64_t> seed;
    std::string profile, config_file;
    std::vector<std::string> sets;
};

void cmd_train(const TrainOpts& o, const std::string& cmdline) {
    require_exists(o.data, "dataset root");
    require_exists(o.index, "index file");
    if (o.steps < 0) fail("--steps must be nonnegative, got " + std::to_string(o.steps));
    if (o.stage == 2 && o.resume.empty())
        fail("stage 2 needs --resume with a stage-1 checkpoint");
    if (!o.resume.empty()) require_exists(o.resume, "checkpoint");

    Config cfg = fresh_config(o.profile, o.config_file, o.sets);
    if (o.seed) cfg.set("seed", std::to_string(*o.seed));

    const std::string run_dir = ensure_run_dir(o.out);
    TrainOptions topt;
    topt.dataset_root = o.data;
    topt.index_path = o.index;
    topt.out_dir = (fs::path(run_dir) / "checkpoints").string();
    topt.steps = o.steps;
    if (!o.resume.empty()) topt.resume_from = o.resume;
    const int64_t log_every = std::max<int64_t>(1, cfg.integer("train.log_every"));
    topt.progress = [log_every](int64_t step, double smoothed) {
        if (step % log_every == 0)
            std::cerr << "step " << step << "  loss " << smoothed << "\n";
    };

    const TrainReport rep = o.stage == 1 ? train_stage1(cfg, topt) : train_stage2(cfg, topt);

    RunManifest man;
    man.command = cmdline;
    man.config_echo = cfg.entries();
    man.seed = static_cast<uint64_t>(cfg.integer("seed"));
    man.add_input(o.index);
    man.add_input((fs::path(o.data) / "catalog.tsv").string());
    if (!o.resume.empty()) man.add_input(o.resume);
    man.outputs["checkpoint"] = rep.checkpoint_path;
    man.outputs["loss_log"] = rep.loss_log_path;
    man.write((fs::path(run_dir) / "manifest.json").string());

    std::cout << "stage " << o.stage << " done: steps=" << rep.steps
              << " initial_loss=" << rep.initial_loss << " final_loss=" << rep.final_loss
              << "\ncheckpoint: " << rep.checkpoint_path << "\n";
}

struct GenerateOpts {
    std::string checkpoint, data, index, out;
    std::string sample_id;
    std::string split = "test";
    int n_r = -1;  // -1 takes the config default
    int n_c = -1;
    std::optional<uint64_t> seed;
    std::string config_file;
    std::vector<std::string> sets;
};

struct EvaluateOpts {
    std::string checkpoint, data, index, out;
    std::string setting = "paired";
    std::string split = "test";
    int n_r = -1;
    int n_c = -1;
    int limit = 0;
    std::optional<uint64_t> seed;
    std::string config_file;
    std::vector<std::string> sets;
};

struct AblateOpts {
    std::string checkpoint, data, index, out;
    std::string setting = "paired";
    std::string split = "test";
    std::vector<std::string> grid;
    int limit = 0;
    std::optional<uint64_t> seed;
    std::string config_file;
    std::vector<std::string> sets;
};

PipelineModel load_model(const std::string& checkpoint, const std::string& config_file,
                         const std::vector<std::string>& sets) {
    require_exists(checkpoint, "checkpoint");
    PipelineModel model = load_pipeline(checkpoint);
    overlay_config(model.cfg, config_file, sets);
    return model;
}

void cmd_generate(const GenerateOpts& o, const std::string& cmdline) {
    require_exists(o.data, "dataset root");
    require_exists(o.index, "index file");
    PipelineModel model = load_model(o.checkpoint, o.config_file, o.sets);
    const int n_r = o.n_r < 0 ? static_cast<int>(model.cfg.integer("eval.n_r")) : o.n_r;
    const int n_c = o.n_c < 0 ? static_cast<int>(model.cfg.integer("eval.n_c")) : o.n_c;
    require_range(n_r, 0, 3, "eval.n_r");
    require_range(n_c, 1, 3, "eval.n_c");
    const uint64_t seed =
        o.seed ? *o.seed : static_cast<uint64_t>(model.cfg.integer("seed"));

    const LoadReport data = load_dataset(o.data, o.split);
    const SampleAnnotation* sample = nullptr;
    if (o.sample_id.empty()) {
        sample = &data.samples.front();
    } else {
        for (const auto& s : data.samples)
            if (s.sample_id == o.sample_id) { sample = &s; break; }
        if (!sample) fail("sample not found in split '" + o.split + "': " + o.sample_id);
    }

    const EmbeddingIndex index = load_index(o.index);
    const std::string caption =
        build_caption(sample->noun_phrases, n_c,
                      caption_offset(sample->sample_id, sample->noun_phrases.size()));
    GenerateRequest req;
    req.person = read_png(sample->image_path);
    req.mask = read_png(sample->mask_path);
    req.keypoints = sample->keypoints;
    req.has_pose = true;
    req.caption = caption;
    req.seed = seed;
    std::vector<std::string> retrieved_ids;
    if (n_r > 0) {
        std::set<std::string> exclude;
        if (model.cfg.boolean("retrieval.exclude_ground_truth")) exclude.insert(sample->garment_id);
        std::optional<GarmentCategory> cat;
        if (model.cfg.boolean("retrieval.category_filter")) cat = sample->category;
        // Retrieval sees the full phrase list; n_c truncates only the
        // conditioning caption.
        const std::string query = build_caption(
            sample->noun_phrases, static_cast<int>(sample->noun_phrases.size()));
        const std::vector<double> q =
            encode_text_query(query, text_encoder_for_tag(index.encoder_tag));
        const RetrievalResult res =
            retrieve_top_k(index, q, static_cast<size_t>(n_r), exclude, cat);
        for (const auto& e : res.entries) {
            req.garments.push_back(load_garment(index.find(e.id)->image_ref, o.data));
            retrieved_ids.push_back(e.id);
        }
    }

    const GenerateResult out = generate(model, req);
    const std::string run_dir = ensure_run_dir(o.out);
    const std::string image_path =
        (fs::path(run_dir) / "images" / (sample->sample_id + ".png")).string();
    write_png(image_path, out.image);

    RunManifest man;
    man.command = cmdline;
    man.config_echo = model.cfg.entries();
    man.seed = seed;
    man.add_input(o.checkpoint);
    man.add_input(o.index);
    man.outputs["image"] = image_path;
    man.write((fs::path(run_dir) / "manifest.json").string());

    std::cout << "sample " << sample->sample_id << " caption \"" << caption << "\" retrieved [";
    for (size_t i = 0; i < retrieved_ids.size(); ++i)
        std::cout << (i ? ", " : "") << retrieved_ids[i];
    std::cout << "]\nimage: " << image_path << "\n";
}

std::string report_basename(const EvaluationSpec& spec) {
    std::ostringstream os;
    os << "metrics_" << spec.setting << "_nr" << spec.n_r << "_nc" << spec.n_c;
    return os.str();
}

void cmd_evaluate(const EvaluateOpts& o, const std::string& cmdline) {
    require_exists(o.data, "dataset root");
    require_exists(o.index, "index file");
    if (o.setting != "paired" && o.setting != "unpaired")
        fail("--setting must be paired or unpaired, got '" + o.setting + "'");
    if (o.limit < 0) fail("--limit must be nonnegative, got " + std::to_string(o.limit));
    PipelineModel model = load_model(o.checkpoint, o.config_file, o.sets);

    EvaluationSpec spec;
    spec.setting = o.setting;
    spec.split = o.split;
    spec.n_r = o.n_r < 0 ? static_cast<int>(model.cfg.integer("eval.n_r")) : o.n_r;
    spec.n_c = o.n_c < 0 ? static_cast<int>(model.cfg.integer("eval.n_c")) : o.n_c;
    require_range(spec.n_r, 0, 3, "eval.n_r");
    require_range(spec.n_c, 1, 3, "eval.n_c");
    spec.limit = o.limit;
    spec.seed = o.seed ? *o.seed : static_cast<uint64_t>(model.cfg.integer("seed"));

    const std::string run_dir = ensure_run_dir(o.out);
    spec.images_dir = (fs::path(run_dir) / "images").string();
    const EmbeddingIndex index = load_index(o.index);
    const EvaluationOutput out = run_evaluation(model, index, o.data, spec);

    const fs::path reports = fs::path(run_dir) / "reports";
    const std::string base = report_basename(spec);
    write_metric_report_kv((reports / (base + ".txt")).string(), out.report);
    {
        std::ofstream row((reports / (base + ".tsv")).string());
        row << metric_report_header() << '\n' << metric_report_row(out.report) << '\n';
    }
    write_eval_manifest((reports / (base + "_samples.tsv")).string(), out.records);

    RunManifest man;
    man.command = cmdline;
    man.config_echo = model.cfg.entries();
    man.seed = spec.seed;
    man.add_input(o.checkpoint);
    man.add_input(o.index);
    man.outputs["report"] = (reports / (base + ".txt")).string();
    man.outputs["report_row"] = (reports / (base + ".tsv")).string();
    man.outputs["samples"] = (reports / (base + "_samples.tsv")).string();
    man.write((fs::path(run_dir) / "manifest.json").string());

    std::cout << metric_report_header() << '\n' << metric_report_row(out.report) << "\n";
}

void parse_grid(const std::vector<std::string>& tokens, std::vector<int>& ncs,
                std::vector<int>& nrs) {
    for (const auto& tok : tokens) {
        const size_t eq = tok.find('=');
        if (eq == std::string::npos)
            fail("--grid expects nc=... or nr=... tokens, got '" + tok + "'");
        const std::string key = tok.substr(0, eq);
        std::vector<int>* dst = nullptr;
        if (key == "nc") dst = &ncs;
        else if (key == "nr") dst = &nrs;
        else fail("--grid axis must be nc or nr, got '" + key + "'");
        dst->clear();
        std::istringstream vals(tok.substr(eq + 1));
        std::string v;
        while (std::getline(vals, v, ',')) {
            if (v.empty()) continue;
            try {
                dst->push_back(std::stoi(v));
            } catch (const std::exception&) {
                fail("--grid value is not a number: '" + v + "'");
            }
        }
        if (dst->empty()) fail("--grid axis '" + key + "' lists no values");
    }
    for (int nc : ncs) require_range(nc, 1, 3, "eval.n_c");
    for (int nr : nrs) require_range(nr, 0, 3, "eval.n_r");
}

void cmd_ablate(const AblateOpts& o, const std::string& cmdline) {
    require_exists(o.data, "dataset root");
    require_exists(o.index, "index file");
    if (o.setting != "paired" && o.setting != "unpaired")
        fail("--setting must be paired or unpaired, got '" + o.setting + "'");
    std::vector<int> ncs = {1, 2, 3};
    std::vector<int> nrs = {0, 1, 2, 3};
    parse_grid(o.grid, ncs, nrs);

    PipelineModel model = load_model(o.checkpoint, o.config_file, o.sets);
    const EmbeddingIndex index = load_index(o.index);
    const std::string run_dir = ensure_run_dir(o.out);
    const uint64_t seed =
        o.seed ? *o.seed : static_cast<uint64_t>(model.cfg.integer("seed"));

    std::ostringstream table;
    table << "nc\tnr\t" << metric_report_header() << '\n';
    // One checkpoint serves every cell; only the conditioning inputs vary.
    for (int nc : ncs) {
        for (int nr : nrs) {
            EvaluationSpec spec;
            spec.setting = o.setting;
            spec.split = o.split;
            spec.n_r = nr;
            spec.n_c = nc;
            spec.limit = o.limit;
            spec.seed = seed;
            std::ostringstream sub;
            sub << "nc" << nc << "_nr" << nr;
            spec.images_dir = (fs::path(run_dir) / "images" / sub.str()).string();
            fs::create_directories(spec.images_dir);
            const EvaluationOutput out = run_evaluation(model, index, o.data, spec);
            table << nc << '\t' << nr << '\t' << metric_report_row(out.report) << '\n';
            std::cerr << "ablate cell nc=" << nc << " nr=" << nr << " done\n";
        }
    }

    const std::string table_path =
        (fs::path(run_dir) / "reports" / ("ablation_" + o.setting + ".tsv")).string();
    std::ofstream(table_path) << table.str();

    RunManifest man;
    man.command = cmdline;
    man.config_echo = model.cfg.entries();
    man.seed = seed;
    man.add_input(o.checkpoint);
    man.add_input(o.index);
    man.outputs["table"] = table_path;
    man.write((fs::path(run_dir) / "manifest.json").string());

    std::cout << table.str();
}

}  // namespace

EvaluationOutput run_evaluation(PipelineModel& model, const EmbeddingIndex& index,
                                const std::string& data_root, const EvaluationSpec& spec) {
    if (spec.setting != "paired" && spec.setting != "unpaired")
        fail("setting must be paired or unpaired, got '" + spec.setting + "'");
    require_range(spec.n_r, 0, 3, "eval.n_r");
    require_range(spec.n_c, 1, 3, "eval.n_c");

    LoadReport data = load_dataset(data_root, spec.split);
    for (const auto& [id, reason] : data.errors)
        std::cerr << "skipped " << id << ": " << reason << "\n";
    std::vector<SampleAnnotation> samples = std::move(data.samples);
    if (spec.limit > 0 && static_cast<size_t>(spec.limit) < samples.size())
        samples.resize(static_cast<size_t>(spec.limit));

    // Unpaired setting: every sample borrows caption and garment identity
    // from a different sample of the same category.
    std::map<std::string, const SampleAnnotation*> by_id;
    for (const auto& s : samples) by_id[s.sample_id] = &s;
    std::map<std::string, std::string> partner;
    if (spec.setting == "unpaired") partner = make_unpaired_assignment(samples, spec.seed);

    const TextEncoder text_enc = text_encoder_for_tag(index.encoder_tag);
    const bool exclude_gt = model.cfg.boolean("retrieval.exclude_ground_truth");
    const bool filter_cat = model.cfg.boolean("retrieval.category_filter");

    EvalInputs in;
    in.paired = spec.setting == "paired";
    EvaluationOutput out;
    for (size_t i = 0; i < samples.size(); ++i) {
        const SampleAnnotation& s = samples[i];
        const SampleAnnotation& anno =
            spec.setting == "unpaired" ? *by_id.at(partner.at(s.sample_id)) : s;
        const std::string caption =
            build_caption(anno.noun_phrases, spec.n_c,
                          caption_offset(anno.sample_id, anno.noun_phrases.size()));

        GenerateRequest req;
        req.person = read_png(s.image_path);
        req.mask = read_png(s.mask_path);
        req.keypoints = s.keypoints;
        req.has_pose = true;
        req.caption = caption;
        // Same sample, same base noise, regardless of n_r / n_c: cells of an
        // ablation grid differ only in conditioning.
        req.seed = spec.seed + 0x9e3779b97f4a7c15ULL * (i + 1);

        EvalRecord rec;
        rec.sample_id = s.sample_id;
        rec.reference_path = s.image_path;
        rec.caption = caption;
        std::vector<Image> retrieved;
        if (spec.n_r > 0) {
            std::set<std::string> exclude;
            if (exclude_gt) exclude.insert(anno.garment_id);
            std::optional<GarmentCategory> cat;
            if (filter_cat) cat = s.category;
            // The query keeps every phrase: retrieval sees the full garment
            // description even when the conditioning caption is truncated.
            const std::string query = build_caption(
                anno.noun_phrases, static_cast<int>(anno.noun_phrases.size()));
            const RetrievalResult res = retrieve_top_k(
                index, encode_text_query(query, text_enc), static_cast<size_t>(spec.n_r),
                exclude, cat);
            for (const auto& e : res.entries) {
                retrieved.push_back(load_garment(index.find(e.id)->image_ref, data_root));
                rec.retrieved_ids.push_back(e.id);
            }
        }
        req.garments = retrieved;

        const GenerateResult gen = generate(model, req);
        if (!spec.images_dir.empty()) {
            fs::create_directories(spec.images_dir);
            rec.generated_path = (fs::path(spec.images_dir) / (s.sample_id + ".png")).string();
            write_png(rec.generated_path, gen.image);
        }

        in.generated.push_back(gen.image);
        in.reference.push_back(req.person);
        in.captions.push_back(caption);
        in.retrieved.push_back(std::move(retrieved));
        out.records.push_back(std::move(rec));
    }

    out.report = compute_metrics(in, model.cfg);
    return out;
}

int run_command(const std::vector<std::string>& args) {
    CLI::App app{"retrieval-augmented fashion image editing"};
    app.require_subcommand(1);
    const std::string cmdline = join_args(args);

    auto add_common = [](CLI::App* sub, std::string* config_file,
                         std::vector<std::string>* sets, std::string* profile = nullptr) {
        sub->add_option("--config", *config_file, "config file with key=value lines");
        sub->add_option("--set", *sets, "config override key=value (repeatable)");
        if (profile)
            sub->add_option("--profile", *profile,
                            "config profile (desk|full); FASHIONRAG_PROFILE is the fallback");
    };

    // toydata
    ToydataOpts toy;
    CLI::App* toydata = app.add_subcommand("toydata", "write a deterministic toy dataset");
    toydata->add_option("--out", toy.out, "output root")->required();
    toydata->add_option("--n", toy.n, "train samples");
    toydata->add_option("--n-test", toy.n_test, "test samples");
    toydata->add_option("--seed", toy.seed, "dataset seed");
    toydata->callback([&] { cmd_toydata(toy, cmdline); });

    // index build | query
    CLI::App* idx = app.add_subcommand("index", "garment retrieval index");
    idx->require_subcommand(1);
    IndexBuildOpts ib;
    CLI::App* build = idx->add_subcommand("build", "encode a catalog into an index file");
    build->add_option("--data", ib.data, "dataset root with catalog.tsv")->required();
    build->add_option("--out", ib.out, "index file to write")->required();
    build->add_option("--tag", ib.tag, "encoder tag (default from config)");
    add_common(build, &ib.config_file, &ib.sets, &ib.profile);
    build->callback([&] { cmd_index_build(ib, cmdline); });

    IndexQueryOpts iq;
    CLI::App* query = idx->add_subcommand("query", "rank garments for a caption");
    query->add_option("--index", iq.index, "index file")->required();
    query->add_option("--text", iq.text, "query caption")->required();
    query->add_option("--k", iq.k, "results to return");
    query->add_option("--category", iq.category, "restrict to upper|lower|full");
    query->callback([&] { cmd_index_query(iq); });

    // train stage1 | stage2
    CLI::App* train = app.add_subcommand("train", "train the editing model");
    train->require_subcommand(1);
    TrainOpts t1, t2;
    t1.stage = 1;
    t2.stage = 2;
    for (auto [sub_name, opts] : {std::pair{"stage1", &t1}, std::pair{"stage2", &t2}}) {
        CLI::App* sub = train->add_subcommand(
            sub_name, opts->stage == 1 ? "train the inversion adapter" : "train adapter plus unet");
        sub->add_option("--data", opts->data, "dataset root")->required();
        sub->add_option("--index", opts->index, "garment index file")->required();
        sub->add_option("--out", opts->out, "run directory (default runs/<stamp>)");
        sub->add_option("--steps", opts->steps, "step budget (default from config)");
        sub->add_option("--resume", opts->resume, "checkpoint to start from");
        sub->add_option("--seed", opts->seed, "training seed override");
        add_common(sub, &opts->config_file, &opts->sets, &opts->profile);
        TrainOpts* captured = opts;
        sub->callback([&, captured] { cmd_train(*captured, cmdline); });
    }

    // generate
    GenerateOpts g;
    CLI::App* gen = app.add_subcommand("generate", "edit one sample with a trained model");
    gen->add_option("--checkpoint", g.checkpoint, "model checkpoint")->required();
    gen->add_option("--data", g.data, "dataset root")->required();
    gen->add_option("--index", g.index, "garment index file")->required();
    gen->add_option("--out", g.out, "run directory (default runs/<stamp>)");
    gen->add_option("--sample", g.sample_id, "sample id (default: first in split)");
    gen->add_option("--split", g.split, "dataset split");
    gen->add_option("--n-r", g.n_r, "retrieved garments, 0..3");
    gen->add_option("--n-c", g.n_c, "caption noun phrases, 1..3");
    gen->add_option("--seed", g.seed, "generation seed");
    add_common(gen, &g.config_file, &g.sets);
    gen->callback([&] { cmd_generate(g, cmdline); });

    // evaluate
    EvaluateOpts e;
    CLI::App* ev = app.add_subcommand("evaluate", "generate a split and score it");
    ev->add_option("--checkpoint", e.checkpoint, "model checkpoint")->required();
    ev->add_option("--data", e.data, "dataset root")->required();
    ev->add_option("--index", e.index, "garment index file")->required();
    ev->add_option("--out", e.out, "run directory (default runs/<stamp>)");
    ev->add_option("--setting", e.setting, "paired|unpaired");
    ev->add_option("--split", e.split, "dataset split");
    ev->add_option("--n-r", e.n_r, "retrieved garments, 0..3");
    ev->add_option("--n-c", e.n_c, "caption noun phrases, 1..3");
    ev->add_option("--limit", e.limit, "cap on samples (0 = all)");
    ev->add_option("--seed", e.seed, "evaluation seed");
    add_common(ev, &e.config_file, &e.sets);
    ev->callback([&] { cmd_evaluate(e, cmdline); });

    // ablate
    AblateOpts a;
    CLI::App* ab = app.add_subcommand("ablate", "metric grid over n_c and n_r");
    ab->add_option("--checkpoint", a.checkpoint, "model checkpoint")->required();
    ab->add_option("--data", a.data, "dataset root")->required();
    ab->add_option("--index", a.index, "garment index file")->required();
    ab->add_option("--out", a.out, "run directory (default runs/<stamp>)");
    ab->add_option("--setting", a.setting, "paired|unpaired");
    ab->add_option("--split", a.split, "dataset split");
    ab->add_option("--grid", a.grid, "axes like nc=1,2,3 nr=0,1,2,3")->expected(0, 2);
    ab->add_option("--limit", a.limit, "cap on samples per cell (0 = all)");
    ab->add_option("--seed", a.seed, "evaluation seed");
    add_common(ab, &a.config_file, &a.sets);
    ab->callback([&] { cmd_ablate(a, cmdline); });

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
        return 0;
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& err) {
        std::cerr << "error: " << err.what() << "\n\n" << app.help();
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
}

}  // namespace fashionrag
