// End-to-end orchestration: dataset directories, two-stage training,
// gated inference, ablations, K sweeps, and latency benchmarking.
#pragma once

#include "refold/eval.hpp"
#include "refold/fusion.hpp"
#include "refold/gate.hpp"
#include "refold/matcher.hpp"
#include "refold/stacker.hpp"
#include "refold/toybase.hpp"

namespace refold {

void save_dataset(const SynthDataset& ds, const std::string& dir);
SynthDataset load_dataset(const std::string& dir);

struct Split {
    std::vector<int> train, val, test;
};
// Contiguous 60/20/20 split; members are family-interleaved so each part
// stays family-balanced.
Split split_dataset(int n);

struct PipelineConfig {
    int k = 10;
    unsigned seed = 7;
    int base_epochs = 60;
    int fusion_epochs = 40;
    TrainMode mode = TrainMode::Frozen;
    FusionConfig fusion;
    // Optimizer for both training stages; desk-scale datasets see only a few
    // hundred steps, so the ramp is short and the rate high.
    ad::AdamConfig adam = {.lr = 1e-2, .warmup_steps = 50};
    bool use_gate = true;
    int threads = 1;
};

struct TrainedPipeline {
    ToyBaseModel base;
    FusionModel fusion;
    GateModel gate;
    std::vector<Backbone> db;
    std::map<std::string, Sequence> db_seqs;
    int k = 10;
    bool use_gate = true;
    int threads = 1;
};

struct Inference {
    LogitMatrix z_base;
    ProbMatrix p_base;
    StackedAlignment stack;
    FusionOutput fused;
    GateFeatures features;
    double gate_score = 1.0;
    ProbMatrix p_out;
    // Phase wall-clock (seconds).
    double t_match = 0.0, t_stack = 0.0, t_fuse = 0.0, t_gate = 0.0;
};

Inference infer_one(const TrainedPipeline& p, const Backbone& query, int k_override = -1);

TrainedPipeline train_pipeline(const SynthDataset& ds, const Split& split,
                               const PipelineConfig& cfg);

// Stage two alone, against an already-trained base + fusion.
GateModel train_pipeline_gate(const TrainedPipeline& p, const SynthDataset& ds,
                              const std::vector<int>& val_idx, unsigned seed);

void save_pipeline(const TrainedPipeline& p, const std::string& path);
// Loads model weights; db/db_seqs must be re-attached by the caller.
void load_pipeline(TrainedPipeline& p, const std::string& path);

struct EvalSummary {
    double base_recovery = 0.0, refold_recovery = 0.0;
    double base_perplexity = 0.0, refold_perplexity = 0.0;
    StratifiedReport stratified;
    TransitionMap transitions;  // aggregated counts; grid from first protein
    std::string first_grid;
    int proteins = 0;
};

// Evaluates base vs. gated output over the given indices of ds.
EvalSummary evaluate_pipeline(const TrainedPipeline& p, const SynthDataset& ds,
                              const std::vector<int>& idx);

// Replaces every db sequence by uniform random tokens (structure kept).
std::map<std::string, Sequence> randomize_sequences(const std::map<std::string, Sequence>& seqs,
                                                    unsigned seed);

struct SweepPoint {
    int k;
    double recovery;
    double perplexity;
};
std::vector<SweepPoint> sweep_k(const TrainedPipeline& p, const SynthDataset& ds,
                                const std::vector<int>& idx, const std::vector<int>& k_values);

struct BenchPhase {
    double mean = 0.0, median = 0.0, p95 = 0.0;  // seconds per protein
};
struct BenchReport {
    BenchPhase total, match, stack, fuse, gate;
    int proteins = 0;
    int batch = 16;
    int threads = 1;
};
BenchReport bench(const TrainedPipeline& p, const SynthDataset& ds, const std::vector<int>& idx,
                  int batch = 16, int repeats = 8);

struct AblationRow {
    std::string name;
    double recovery = 0.0;
    double perplexity = 0.0;
};
// Configurations: full, no-gate, no-tm-bias, row-only, priors-only, base-only.
std::vector<AblationRow> run_ablations(const SynthDataset& ds, const PipelineConfig& cfg);

}  // namespace refold
