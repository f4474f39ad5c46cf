#pragma once

#include "fashionrag/diffusion.hpp"
#include "fashionrag/metrics.hpp"

#include <string>
#include <vector>

namespace fashionrag {

// Full command-line entry point, callable in-process. args excludes the
// program name. Exit codes: 0 success, 1 validation or runtime failure
// (message names the failing key or path), 2 usage errors (unknown flag or
// subcommand, help text printed).
int run_command(const std::vector<std::string>& args);

// One evaluation pass over a dataset split with a loaded model: generate
// every sample under (setting, n_r, n_c), then score the set. Shared by the
// evaluate and ablate commands.
struct EvaluationSpec {
    std::string setting = "paired";  // "paired" or "unpaired"
    std::string split = "test";
    int n_r = 3;
    int n_c = 3;
    int limit = 0;          // cap on samples; 0 takes the whole split
    uint64_t seed = 0;      // per-sample generation seeds derive from this
    std::string images_dir;  // when set, generated images land here as <id>.png
};

struct EvaluationOutput {
    MetricReport report;
    std::vector<EvalRecord> records;  // one per generated sample
};

EvaluationOutput run_evaluation(PipelineModel& model, const EmbeddingIndex& index,
                                const std::string& data_root, const EvaluationSpec& spec);

}  // namespace fashionrag
