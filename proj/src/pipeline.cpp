#include "refold/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>

namespace refold {

namespace fs = std::filesystem;

void save_dataset(const SynthDataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "backbones");
    std::string manifest = "# id\tfamily\tbackbone\n";
    for (size_t i = 0; i < ds.backbones.size(); ++i) {
        const std::string rel = "backbones/" + ds.backbones[i].id + ".bb";
        write_file((fs::path(dir) / rel).string(), format_backbone(ds.backbones[i]));
        manifest += ds.backbones[i].id + "\t" + std::to_string(ds.family[i]) + "\t" + rel + "\n";
    }
    write_file((fs::path(dir) / "sequences.fasta").string(), format_fasta(ds.sequences));
    write_file((fs::path(dir) / "manifest.tsv").string(), manifest);
}

SynthDataset load_dataset(const std::string& dir) {
    SynthDataset ds;
    std::map<std::string, Sequence> seqs;
    for (auto& s : parse_fasta(read_file((fs::path(dir) / "sequences.fasta").string())))
        seqs[s.id] = s;
    std::istringstream manifest(read_file((fs::path(dir) / "manifest.tsv").string()));
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        std::string id, family, rel;
        if (!std::getline(row, id, '\t') || !std::getline(row, family, '\t') ||
            !std::getline(row, rel, '\t'))
            throw ParseError("manifest: bad row '" + line + "'");
        ds.backbones.push_back(parse_backbone(read_file((fs::path(dir) / rel).string())));
        auto it = seqs.find(id);
        if (it == seqs.end()) throw ParseError("manifest: no sequence for '" + id + "'");
        ds.sequences.push_back(it->second);
        ds.family.push_back(std::stoi(family));
    }
    if (ds.backbones.empty()) throw ParseError("manifest: empty dataset");
    return ds;
}

Split split_dataset(int n) {
    Split s;
    const int n_train = std::max(1, static_cast<int>(n * 0.6));
    const int n_val = std::max(1, static_cast<int>(n * 0.2));
    for (int i = 0; i < n; ++i) {
        if (i < n_train)
            s.train.push_back(i);
        else if (i < n_train + n_val)
            s.val.push_back(i);
        else
            s.test.push_back(i);
    }
    if (s.test.empty()) s.test = s.val;
    return s;
}

Inference infer_one(const TrainedPipeline& p, const Backbone& query, int k_override) {
    using clock = std::chrono::steady_clock;
    const int k = k_override >= 0 ? k_override : p.k;
    Inference out;

    auto t0 = clock::now();
    std::vector<NeighborHit> hits = search(query, p.db, k, {}, p.threads);
    auto t1 = clock::now();
    out.z_base = p.base.base_forward(query);
    out.p_base = softmax_rows(out.z_base);
    out.stack = build_stack(out.z_base, hits, p.db_seqs, k, p.fusion.beta0());
    auto t2 = clock::now();
    out.fused = fusion_forward(p.fusion, out.stack, out.z_base);
    auto t3 = clock::now();
    out.features = extract_features(out.p_base, out.fused.p_fused, out.stack);
    if (p.use_gate) {
        out.gate_score = p.gate.score(out.features);
        out.p_out = gated_infer(out.p_base, out.fused.p_fused, out.fused.z_ref, p.gate, out.features);
    } else {
        out.gate_score = 1.0;
        out.p_out = out.fused.p_fused;
    }
    auto t4 = clock::now();

    auto secs = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };
    out.t_match = secs(t0, t1);
    out.t_stack = secs(t1, t2);
    out.t_fuse = secs(t2, t3);
    out.t_gate = secs(t3, t4);
    return out;
}

namespace {

// Replaces every aligned neighbor token with a random residue; used to
// synthesize unreliable-prior examples for gate training.
StackedAlignment corrupt_stack(const StackedAlignment& a, std::mt19937_64& rng) {
    StackedAlignment out = a;
    std::uniform_int_distribution<int> pick(0, kNumResidues - 1);
    for (int r = 1; r < out.rows(); ++r)
        for (int j = 0; j < out.cols(); ++j)
            if (out.valid[static_cast<size_t>(r)][static_cast<size_t>(j)])
                out.tokens[static_cast<size_t>(r)][static_cast<size_t>(j)] = pick(rng);
    return out;
}

}  // namespace

TrainedPipeline train_pipeline(const SynthDataset& ds, const Split& split,
                               const PipelineConfig& cfg) {
    TrainedPipeline p{ToyBaseModel(64, cfg.seed), FusionModel(cfg.fusion, cfg.seed + 1),
                      GateModel{}, {}, {}, cfg.k, cfg.use_gate, cfg.threads};

    std::vector<Backbone> train_bb;
    std::vector<Sequence> train_seq;
    for (int i : split.train) {
        train_bb.push_back(ds.backbones[static_cast<size_t>(i)]);
        train_seq.push_back(ds.sequences[static_cast<size_t>(i)]);
    }
    // The retrieval database is the training split only.
    p.db = train_bb;
    for (const auto& s : train_seq) p.db_seqs[s.id] = s;

    p.base.train(train_bb, train_seq, cfg.base_epochs, cfg.seed + 2, cfg.adam);

    const bool priors_only = cfg.fusion.priors_only;
    std::vector<FusionTrainSample> samples;
    for (size_t i = 0; i < train_bb.size(); ++i) {
        FusionTrainSample s;
        s.z_base = priors_only ? LogitMatrix::Zero(train_bb[i].length(), kNumResidues)
                               : p.base.base_forward(train_bb[i]);
        std::vector<NeighborHit> hits = search(train_bb[i], p.db, cfg.k, {}, cfg.threads);
        s.stack = build_stack(s.z_base, hits, p.db_seqs, cfg.k, p.fusion.beta0());
        s.base_features = p.base.standardized_features(train_bb[i]);
        s.targets = train_seq[i].tokens;
        samples.push_back(std::move(s));
    }
    StageOneConfig s1;
    s1.mode = priors_only ? TrainMode::Frozen : cfg.mode;
    s1.epochs = cfg.fusion_epochs;
    s1.seed = cfg.seed + 3;
    s1.adam = cfg.adam;
    train_stage1(samples, p.fusion, cfg.mode == TrainMode::Joint ? &p.base : nullptr, s1);

    if (cfg.use_gate) p.gate = train_pipeline_gate(p, ds, split.val, cfg.seed + 4);
    return p;
}

GateModel train_pipeline_gate(const TrainedPipeline& p, const SynthDataset& ds,
                              const std::vector<int>& val_idx, unsigned seed) {
    // Stage two on the held-out split. Clean items are paired with
    // corrupted-neighbor copies so both label classes are present.
    const bool priors_only = p.fusion.config().priors_only;
    std::vector<GateFeatures> feats;
    std::vector<int> labels;
    std::vector<GateValidationItem> val_items;
    std::mt19937_64 rng(seed);
    for (int i : val_idx) {
        const Backbone& q = ds.backbones[static_cast<size_t>(i)];
        const Sequence& y = ds.sequences[static_cast<size_t>(i)];
        LogitMatrix z_base = priors_only ? LogitMatrix::Zero(q.length(), kNumResidues)
                                         : p.base.base_forward(q);
        ProbMatrix p_base = softmax_rows(z_base);
        std::vector<NeighborHit> hits = search(q, p.db, p.k, {}, p.threads);
        StackedAlignment stack = build_stack(z_base, hits, p.db_seqs, p.k, p.fusion.beta0());
        for (int variant = 0; variant < 2; ++variant) {
            StackedAlignment st = variant == 0 ? stack : corrupt_stack(stack, rng);
            FusionOutput fo = fusion_forward(p.fusion, st, z_base);
            GateFeatures f = extract_features(p_base, fo.p_fused, st);
            feats.push_back(f);
            labels.push_back(gate_label(p_base, fo.p_fused, y));
            val_items.push_back({f, p_base, fo.p_fused, fo.z_ref, y});
        }
    }
    GateModel gate = train_stage2(feats, labels, seed + 1);
    gate.tau = tune_tau(gate, val_items);
    return gate;
}

void save_pipeline(const TrainedPipeline& p, const std::string& path) {
    Checkpoint ckpt;
    p.base.save(ckpt, "base.");
    p.fusion.save(ckpt, "fusion.");
    p.gate.save(ckpt, "gate.");
    ckpt.add("pipeline.k", {1}, {static_cast<double>(p.k)});
    ckpt.add("pipeline.use_gate", {1}, {p.use_gate ? 1.0 : 0.0});
    write_file(path, format_checkpoint(ckpt));
}

void load_pipeline(TrainedPipeline& p, const std::string& path) {
    Checkpoint ckpt = parse_checkpoint(read_file(path));
    p.base.load(ckpt, "base.");
    p.fusion.load(ckpt, "fusion.");
    p.gate.load(ckpt, "gate.");
    p.k = static_cast<int>(ckpt.get("pipeline.k").data[0]);
    p.use_gate = ckpt.get("pipeline.use_gate").data[0] != 0.0;
}

EvalSummary evaluate_pipeline(const TrainedPipeline& p, const SynthDataset& ds,
                              const std::vector<int>& idx) {
    EvalSummary s;
    double ppl_base = 0.0, ppl_refold = 0.0;
    bool first = true;
    for (int i : idx) {
        const Backbone& q = ds.backbones[static_cast<size_t>(i)];
        const Sequence& y = ds.sequences[static_cast<size_t>(i)];
        Inference inf = infer_one(p, q);
        s.base_recovery += recovery(inf.p_base, y);
        s.refold_recovery += recovery(inf.p_out, y);
        ppl_base += std::log(perplexity(inf.p_base, y));
        ppl_refold += std::log(perplexity(inf.p_out, y));
        s.stratified.accumulate(inf.p_base, inf.p_out, y);
        std::vector<int> bp, rp;
        for (int j = 0; j < y.length(); ++j) {
            bp.push_back(argmax_row(inf.p_base, j));
            rp.push_back(argmax_row(inf.p_out, j));
        }
        TransitionMap tm = transition_map(bp, rp, y);
        s.transitions.neg += tm.neg;
        s.transitions.pos += tm.pos;
        s.transitions.neg_to_pos += tm.neg_to_pos;
        s.transitions.pos_to_neg += tm.pos_to_neg;
        if (first) {
            s.first_grid = tm.grid();
            first = false;
        }
        ++s.proteins;
    }
    if (s.proteins > 0) {
        s.base_recovery /= s.proteins;
        s.refold_recovery /= s.proteins;
        s.base_perplexity = std::exp(ppl_base / s.proteins);
        s.refold_perplexity = std::exp(ppl_refold / s.proteins);
    }
    return s;
}

std::map<std::string, Sequence> randomize_sequences(const std::map<std::string, Sequence>& seqs,
                                                    unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, kNumResidues - 1);
    std::map<std::string, Sequence> out;
    for (const auto& [id, seq] : seqs) {
        Sequence s;
        s.id = id;
        for (int j = 0; j < seq.length(); ++j) s.tokens.push_back(pick(rng));
        out[id] = std::move(s);
    }
    return out;
}

std::vector<SweepPoint> sweep_k(const TrainedPipeline& p, const SynthDataset& ds,
                                const std::vector<int>& idx, const std::vector<int>& k_values) {
    if (k_values.empty()) throw std::invalid_argument("sweep_k: no K values");
    std::vector<SweepPoint> out;
    for (int k : k_values) {
        double rec = 0.0, lppl = 0.0;
        for (int i : idx) {
            Inference inf = infer_one(p, ds.backbones[static_cast<size_t>(i)], k);
            rec += recovery(inf.p_out, ds.sequences[static_cast<size_t>(i)]);
            lppl += std::log(perplexity(inf.p_out, ds.sequences[static_cast<size_t>(i)]));
        }
        out.push_back({k, rec / static_cast<double>(idx.size()),
                       std::exp(lppl / static_cast<double>(idx.size()))});
    }
    return out;
}

namespace {

BenchPhase phase_stats(std::vector<double> xs) {
    BenchPhase p;
    if (xs.empty()) return p;
    std::sort(xs.begin(), xs.end());
    double sum = 0.0;
    for (double x : xs) sum += x;
    p.mean = sum / static_cast<double>(xs.size());
    p.median = xs[xs.size() / 2];
    p.p95 = xs[std::min(xs.size() - 1, static_cast<size_t>(0.95 * static_cast<double>(xs.size())))];
    return p;
}

}  // namespace

BenchReport bench(const TrainedPipeline& p, const SynthDataset& ds, const std::vector<int>& idx,
                  int batch, int repeats) {
    if (idx.empty()) throw std::invalid_argument("bench: empty dataset");
    BenchReport rep;
    rep.batch = batch;
    rep.threads = p.threads;
    std::vector<double> total, match, stack, fuse, gate;
    int batch_no = 0;
    int in_batch = 0;
    for (int rep_i = 0; rep_i < repeats; ++rep_i) {
        for (int i : idx) {
            Inference inf = infer_one(p, ds.backbones[static_cast<size_t>(i)]);
            if (batch_no >= 3) {  // warmup batches excluded
                match.push_back(inf.t_match);
                stack.push_back(inf.t_stack);
                fuse.push_back(inf.t_fuse);
                gate.push_back(inf.t_gate);
                total.push_back(inf.t_match + inf.t_stack + inf.t_fuse + inf.t_gate);
            }
            if (++in_batch == batch) {
                in_batch = 0;
                ++batch_no;
            }
        }
    }
    rep.proteins = static_cast<int>(total.size());
    rep.total = phase_stats(total);
    rep.match = phase_stats(match);
    rep.stack = phase_stats(stack);
    rep.fuse = phase_stats(fuse);
    rep.gate = phase_stats(gate);
    return rep;
}

std::vector<AblationRow> run_ablations(const SynthDataset& ds, const PipelineConfig& cfg) {
    const Split split = split_dataset(static_cast<int>(ds.backbones.size()));
    std::vector<AblationRow> rows;

    auto run = [&](const std::string& name, PipelineConfig c) {
        TrainedPipeline p = train_pipeline(ds, split, c);
        EvalSummary s = evaluate_pipeline(p, ds, split.test);
        rows.push_back({name, s.refold_recovery, s.refold_perplexity});
        return s;
    };

    EvalSummary full = [&]() {
        TrainedPipeline p = train_pipeline(ds, split, cfg);
        EvalSummary s = evaluate_pipeline(p, ds, split.test);
        rows.push_back({"full", s.refold_recovery, s.refold_perplexity});
        return s;
    }();
    rows.push_back({"base-only", full.base_recovery, full.base_perplexity});

    PipelineConfig c = cfg;
    c.use_gate = false;
    run("no-gate", c);

    c = cfg;
    c.fusion.no_tm_bias = true;
    run("no-tm-bias", c);

    c = cfg;
    c.fusion.row_only = true;
    run("row-only", c);

    c = cfg;
    c.fusion.priors_only = true;
    c.mode = TrainMode::Frozen;
    run("priors-only", c);

    return rows;
}

}  // namespace refold
