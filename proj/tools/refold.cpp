#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "refold/pipeline.hpp"

namespace fs = std::filesystem;
using namespace refold;

namespace {

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::map<std::string, std::string> kv;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("config: expected key=value, got '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

void apply_config(PipelineConfig& cfg, const std::map<std::string, std::string>& kv) {
    auto geti = [&](const char* key, int& dst) {
        if (auto it = kv.find(key); it != kv.end()) dst = std::stoi(it->second);
    };
    auto getd = [&](const char* key, double& dst) {
        if (auto it = kv.find(key); it != kv.end()) dst = std::stod(it->second);
    };
    geti("k", cfg.k);
    geti("base_epochs", cfg.base_epochs);
    geti("fusion_epochs", cfg.fusion_epochs);
    geti("d", cfg.fusion.d);
    geti("heads", cfg.fusion.heads);
    geti("d_ff", cfg.fusion.d_ff);
    getd("lr", cfg.adam.lr);
    geti("warmup", cfg.adam.warmup_steps);
    if (auto it = kv.find("mode"); it != kv.end())
        cfg.mode = it->second == "joint" ? TrainMode::Joint : TrainMode::Frozen;
    if (auto it = kv.find("use_gate"); it != kv.end()) cfg.use_gate = it->second != "0";
}

std::vector<Backbone> load_db_dir(const std::string& dir) {
    if (fs::exists(fs::path(dir) / "manifest.tsv")) {
        SynthDataset ds = load_dataset(dir);
        return ds.backbones;
    }
    std::vector<Backbone> db;
    std::vector<fs::path> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".bb") paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) db.push_back(parse_backbone(read_file(p.string())));
    if (db.empty()) throw ParseError("no .bb files under '" + dir + "'");
    return db;
}

TrainedPipeline load_trained(const std::string& ckpt_path, const std::string& gate_path,
                             const std::string& data_dir, unsigned seed, int threads,
                             const SynthDataset& ds, const Split& split) {
    TrainedPipeline p{ToyBaseModel(64, seed), FusionModel({}, seed), GateModel{}, {}, {},
                      10, false, threads};
    load_pipeline(p, ckpt_path);
    if (!gate_path.empty()) {
        p.gate.load(parse_checkpoint(read_file(gate_path)), "gate.");
        p.use_gate = true;
    }
    (void)data_dir;
    for (int i : split.train) {
        p.db.push_back(ds.backbones[static_cast<size_t>(i)]);
        p.db_seqs[ds.sequences[static_cast<size_t>(i)].id] = ds.sequences[static_cast<size_t>(i)];
    }
    p.threads = threads;
    return p;
}

std::vector<int> pick_split(const Split& s, const std::string& name, int n) {
    if (name == "train") return s.train;
    if (name == "val") return s.val;
    if (name == "test") return s.test;
    std::vector<int> all(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
    return all;
}

void print_summary(const EvalSummary& s) {
    std::cout << "proteins " << s.proteins << "\n";
    std::cout << "recovery base " << s.base_recovery << " refold " << s.refold_recovery << "\n";
    std::cout << "perplexity base " << s.base_perplexity << " refold " << s.refold_perplexity
              << "\n";
    std::cout << s.stratified.summary();
    std::cout << "transitions neg " << s.transitions.neg << " pos " << s.transitions.pos
              << " neg->pos " << s.transitions.neg_to_pos << " pos->neg "
              << s.transitions.pos_to_neg << "\n";
    std::cout << "grid " << s.first_grid << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Retrieval-augmented refinement for fixed-backbone sequence design"};
    app.require_subcommand(1);
    app.fallthrough();

    unsigned seed = 7;
    int threads = 1;
    std::string config_path;
    app.add_option("--seed", seed, "Global RNG seed");
    app.add_option("--threads", threads, "Worker thread count");
    app.add_option("--config", config_path, "key=value config file");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic family dataset");
    int n = 64, len = 60;
    double mut = 0.15;
    std::string out_dir;
    synth->add_option("--n", n, "Member count");
    synth->add_option("--len", len, "Chain length");
    synth->add_option("--mut", mut, "Mutation rate");
    synth->add_option("--out", out_dir, "Output directory")->required();

    // match
    auto* match = app.add_subcommand("match", "Search a backbone database");
    std::string query_path, db_dir, out_path;
    int k = 10;
    match->add_option("--query", query_path, "Query backbone file")->required();
    match->add_option("--db", db_dir, "Database directory")->required();
    match->add_option("--k", k, "Top-K hits");
    match->add_option("--out", out_path, "Hits TSV output")->required();

    // stack
    auto* stack = app.add_subcommand("stack", "Build a stacked neighbor alignment");
    std::string logits_path, hits_path, seqs_path;
    double beta0 = 0.1;
    stack->add_option("--logits", logits_path, "Base logits file")->required();
    stack->add_option("--hits", hits_path, "Hits TSV")->required();
    stack->add_option("--seqs", seqs_path, "Database FASTA")->required();
    stack->add_option("--k", k, "Neighbor rows");
    stack->add_option("--beta0", beta0, "Anchor reliability bias");
    stack->add_option("--out", out_path, "Stack dump output")->required();

    // train-fusion
    auto* trainf = app.add_subcommand("train-fusion", "Train base + fusion on a dataset");
    std::string data_dir, ckpt_path, mode_str = "frozen";
    bool no_tm_bias = false, row_only = false, all_rows_query = false, priors_only = false;
    trainf->add_option("--data", data_dir, "Dataset directory")->required();
    trainf->add_option("--mode", mode_str, "frozen|joint")
        ->check(CLI::IsMember({"frozen", "joint"}));
    trainf->add_option("--ckpt", ckpt_path, "Checkpoint output")->required();
    trainf->add_option("--k", k, "Neighbors per query");
    trainf->add_flag("--no-tm-bias", no_tm_bias, "Disable the reliability bias");
    trainf->add_flag("--row-only", row_only, "Skip neighbor-axis attention");
    trainf->add_flag("--all-rows-query", all_rows_query, "Average all valid-row queries");
    trainf->add_flag("--priors-only", priors_only, "Predict from neighbor priors alone");

    // train-gate
    auto* traing = app.add_subcommand("train-gate", "Train the utility gate");
    std::string fusion_ckpt, gate_out;
    traing->add_option("--fusion", fusion_ckpt, "Trained fusion checkpoint")->required();
    traing->add_option("--val", data_dir, "Dataset directory (validation split used)")
        ->required();
    traing->add_option("--out", gate_out, "Gate checkpoint output")->required();

    // infer
    auto* infer = app.add_subcommand("infer", "Gated inference for one query");
    std::string gate_ckpt, out_prefix;
    int k_override = -1;
    infer->add_option("--fusion", fusion_ckpt, "Trained fusion checkpoint")->required();
    infer->add_option("--gate", gate_ckpt, "Gate checkpoint (omit to bypass)");
    infer->add_option("--query", query_path, "Query backbone file")->required();
    infer->add_option("--db", data_dir, "Dataset directory used at training time")->required();
    infer->add_option("--k", k_override, "Override retrieval K");
    infer->add_option("--out", out_prefix, "Output prefix (.fasta and .probs.txt)")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained pipeline");
    std::string split_name = "test";
    bool randomize_db = false;
    eval_cmd->add_option("--fusion", fusion_ckpt, "Trained fusion checkpoint")->required();
    eval_cmd->add_option("--gate", gate_ckpt, "Gate checkpoint (omit to bypass)");
    eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    eval_cmd->add_option("--split", split_name, "train|val|test|all")
        ->check(CLI::IsMember({"train", "val", "test", "all"}));
    eval_cmd->add_flag("--randomize-db", randomize_db,
                       "Replace database sequences with random tokens");

    // sweep-k
    auto* sweep = app.add_subcommand("sweep-k", "Recovery across retrieval depths");
    std::string k_list = "1,2,5,10,20";
    sweep->add_option("--fusion", fusion_ckpt, "Trained fusion checkpoint")->required();
    sweep->add_option("--gate", gate_ckpt, "Gate checkpoint (omit to bypass)");
    sweep->add_option("--data", data_dir, "Dataset directory")->required();
    sweep->add_option("--k-values", k_list, "Comma-separated K values");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "Train and evaluate ablation variants");
    ablate->add_option("--data", data_dir, "Dataset directory")->required();
    ablate->add_option("--k", k, "Neighbors per query");

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "Per-protein phase latencies");
    int batch = 16, repeats = 8;
    bench_cmd->add_option("--fusion", fusion_ckpt, "Trained fusion checkpoint")->required();
    bench_cmd->add_option("--gate", gate_ckpt, "Gate checkpoint (omit to bypass)");
    bench_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    bench_cmd->add_option("--batch", batch, "Batch size");
    bench_cmd->add_option("--repeats", repeats, "Passes over the dataset");

    CLI11_PARSE(app, argc, argv);

    try {
        PipelineConfig cfg;
        cfg.seed = seed;
        cfg.threads = threads;
        if (!config_path.empty()) apply_config(cfg, parse_config_file(config_path));

        if (*synth) {
            save_dataset(synth_family(n, len, mut, seed), out_dir);
            std::cout << "wrote " << n << " members to " << out_dir << "\n";
        } else if (*match) {
            Backbone q = parse_backbone_auto(read_file(query_path),
                                            fs::path(query_path).stem().string());
            auto hits = search(q, load_db_dir(db_dir), k, {}, threads);
            write_file(out_path, format_hits(q.id, hits));
            std::cout << "wrote " << hits.size() << " hits to " << out_path << "\n";
        } else if (*stack) {
            LogitMatrix z = read_logits(logits_path);
            auto all_hits = parse_hits(read_file(hits_path));
            if (all_hits.size() != 1)
                throw ParseError("stack: hits file must contain exactly one query");
            std::map<std::string, Sequence> seqs;
            for (auto& s : parse_fasta(read_file(seqs_path))) seqs[s.id] = s;
            StackedAlignment a = build_stack(z, all_hits.begin()->second, seqs, k, beta0);
            write_file(out_path, format_stack(a));
            std::cout << "wrote " << a.rows() << "x" << a.cols() << " stack to " << out_path
                      << "\n";
        } else if (*trainf) {
            SynthDataset ds = load_dataset(data_dir);
            Split split = split_dataset(static_cast<int>(ds.backbones.size()));
            cfg.k = trainf->count("--k") ? k : cfg.k;
            cfg.mode = mode_str == "joint" ? TrainMode::Joint : TrainMode::Frozen;
            cfg.fusion.no_tm_bias = no_tm_bias;
            cfg.fusion.row_only = row_only;
            cfg.fusion.all_rows_query = all_rows_query;
            cfg.fusion.priors_only = priors_only;
            cfg.use_gate = false;
            TrainedPipeline p = train_pipeline(ds, split, cfg);
            save_pipeline(p, ckpt_path);
            std::cout << "wrote " << ckpt_path << "\n";
        } else if (*traing) {
            SynthDataset ds = load_dataset(data_dir);
            Split split = split_dataset(static_cast<int>(ds.backbones.size()));
            TrainedPipeline p =
                load_trained(fusion_ckpt, "", data_dir, seed, threads, ds, split);
            p.gate = train_pipeline_gate(p, ds, split.val, seed);
            Checkpoint ckpt;
            p.gate.save(ckpt, "gate.");
            write_file(gate_out, format_checkpoint(ckpt));
            std::cout << "wrote " << gate_out << " tau " << p.gate.tau << "\n";
        } else if (*infer) {
            SynthDataset ds = load_dataset(data_dir);
            Split split = split_dataset(static_cast<int>(ds.backbones.size()));
            TrainedPipeline p =
                load_trained(fusion_ckpt, gate_ckpt, data_dir, seed, threads, ds, split);
            Backbone q = parse_backbone_auto(read_file(query_path),
                                            fs::path(query_path).stem().string());
            Inference inf = infer_one(p, q, k_override);
            Sequence s;
            s.id = q.id;
            for (int j = 0; j < q.length(); ++j) s.tokens.push_back(argmax_row(inf.p_out, j));
            write_file(out_prefix + ".fasta", format_fasta({s}));
            write_logits(inf.p_out, out_prefix + ".probs.txt");
            std::cout << "gate " << inf.gate_score << " seq " << s.str() << "\n";
        } else if (*eval_cmd) {
            SynthDataset ds = load_dataset(data_dir);
            Split split = split_dataset(static_cast<int>(ds.backbones.size()));
            TrainedPipeline p =
                load_trained(fusion_ckpt, gate_ckpt, data_dir, seed, threads, ds, split);
            if (randomize_db) p.db_seqs = randomize_sequences(p.db_seqs, seed);
            print_summary(evaluate_pipeline(
                p, ds, pick_split(split, split_name, static_cast<int>(ds.backbones.size()))));
        } else if (*sweep) {
            SynthDataset ds = load_dataset(data_dir);
            Split split = split_dataset(static_cast<int>(ds.backbones.size()));
            TrainedPipeline p =
                load_trained(fusion_ckpt, gate_ckpt, data_dir, seed, threads, ds, split);
            std::vector<int> ks;
            std::istringstream kin(k_list);
            std::string tok;
            while (std::getline(kin, tok, ',')) ks.push_back(std::stoi(tok));
            for (const SweepPoint& pt : sweep_k(p, ds, split.test, ks))
                std::cout << "k " << pt.k << " recovery " << pt.recovery << " perplexity "
                          << pt.perplexity << "\n";
        } else if (*ablate) {
            SynthDataset ds = load_dataset(data_dir);
            cfg.k = ablate->count("--k") ? k : cfg.k;
            for (const AblationRow& row : run_ablations(ds, cfg))
                std::cout << row.name << " recovery " << row.recovery << " perplexity "
                          << row.perplexity << "\n";
        } else if (*bench_cmd) {
            SynthDataset ds = load_dataset(data_dir);
            Split split = split_dataset(static_cast<int>(ds.backbones.size()));
            TrainedPipeline p =
                load_trained(fusion_ckpt, gate_ckpt, data_dir, seed, threads, ds, split);
            BenchReport r = bench(p, ds, split.test, batch, repeats);
            std::cout << "proteins " << r.proteins << " batch " << r.batch << " threads "
                      << r.threads << "\n";
            auto line = [](const char* name, const BenchPhase& ph) {
                std::cout << name << " mean " << ph.mean * 1e3 << "ms median " << ph.median * 1e3
                          << "ms p95 " << ph.p95 * 1e3 << "ms\n";
            };
            line("total", r.total);
            line("match", r.match);
            line("stack", r.stack);
            line("fuse", r.fuse);
            line("gate", r.gate);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
