#include "memoir/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "memoir/backbone.hpp"
#include "memoir/datagen.hpp"
#include "memoir/editor.hpp"
#include "memoir/eval.hpp"
#include "memoir/rng.hpp"

namespace memoir {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kToolVersion = "0.1.0";

// relative output paths resolve under MEMOIR_OUT_ROOT when it is set
std::string resolve_out(const std::string& path) {
    if (path.empty()) return path;
    const char* root = std::getenv("MEMOIR_OUT_ROOT");
    if (root == nullptr || *root == '\0') return path;
    fs::path p(path);
    if (p.is_absolute()) return path;
    return (fs::path(root) / p).string();
}

uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return 0;
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string s = ss.str();
    return fnv1a64(s.data(), s.size());
}

// every run leaves a manifest next to its primary output
void write_manifest(const std::string& out_path, const std::string& subcommand, const json& config) {
    json m;
    m["tool_version"] = kToolVersion;
    m["subcommand"] = subcommand;
    m["config"] = config;
    std::ofstream out(out_path + ".manifest.json", std::ios::trunc);
    if (!out) throw std::runtime_error("io: cannot open for writing: " + out_path + ".manifest.json");
    out << m.dump(2) << "\n";
}

struct EditFlags {
    std::string model_path;
    std::string benchmark_path;
    std::string strategy = "memoir";
    std::string selection = "tophash";
    int k = 64;
    double tau = 0.4;
    int steps = 50;
    double lr = 1.0;
    double clip = 1.0;
    int prefix_n = 10;
    int prefix_len = 10;
    int centering_n = 100;
    bool no_conditional_activation = false;
    uint64_t seed = 7;
    int64_t edits = -1;

    SessionConfig to_session_config() const {
        SessionConfig scfg;
        scfg.kind = editor_strategy_from_name(strategy);
        scfg.tcfg.learning_rate = lr;
        scfg.tcfg.grad_clip_norm = clip;
        scfg.tcfg.steps_per_edit = steps;
        scfg.tcfg.n_prefix_augmentations = prefix_n;
        scfg.tcfg.prefix_len = prefix_len;
        scfg.tcfg.rng_seed = seed;
        scfg.rcfg.k = k;
        scfg.rcfg.tau = tau;
        scfg.rcfg.strategy = strategy_from_name(selection);
        scfg.rcfg.conditional_activation = !no_conditional_activation;
        scfg.centering_n = centering_n;
        return scfg;
    }

    json to_json() const {
        return json{{"model", model_path},       {"benchmark", benchmark_path},
                    {"strategy", strategy},      {"selection", selection},
                    {"k", k},                    {"tau", tau},
                    {"steps", steps},            {"lr", lr},
                    {"clip", clip},              {"prefix_n", prefix_n},
                    {"prefix_len", prefix_len},  {"centering_n", centering_n},
                    {"conditional_activation", !no_conditional_activation},
                    {"seed", seed},              {"edits", edits},
                    {"benchmark_checksum", file_checksum(benchmark_path)},
                    {"model_checksum", file_checksum(model_path)}};
    }

    void add_options(CLI::App* cmd) {
        cmd->add_option("--model", model_path, "backbone checkpoint")->required();
        cmd->add_option("--benchmark", benchmark_path, "benchmark records file")->required();
        cmd->add_option("--strategy", strategy, "memoir|dense|codebook");
        cmd->add_option("--selection", selection, "tophash|topk|random|hash");
        cmd->add_option("--k", k, "active indices per mask");
        cmd->add_option("--tau", tau, "conditional activation threshold");
        cmd->add_option("--steps", steps, "gradient steps per edit");
        cmd->add_option("--lr", lr, "edit learning rate");
        cmd->add_option("--clip", clip, "gradient clipping norm");
        cmd->add_option("--prefix-n", prefix_n, "prefix augmentations per edit");
        cmd->add_option("--prefix-len", prefix_len, "prefix token length");
        cmd->add_option("--centering-n", centering_n, "irrelevant prompts used for centering");
        cmd->add_flag("--no-conditional-activation", no_conditional_activation,
                      "apply the query's own mask, no matching (the w/o K.A. arm)");
        cmd->add_option("--seed", seed, "session seed");
        cmd->add_option("--edits", edits, "edits to apply (-1 = all)");
    }
};

int cmd_gen_data(int facts, int rephrases, int irrelevant, int centering, uint64_t seed,
                 const std::string& out_raw) {
    const std::string out = resolve_out(out_raw);
    const BenchmarkSet bench = generate_benchmark(facts, rephrases, irrelevant, seed, centering);
    save_records(bench, out);
    write_manifest(out, "gen-data",
                   json{{"facts", facts},
                        {"rephrases", rephrases},
                        {"irrelevant", irrelevant},
                        {"centering", centering},
                        {"seed", seed},
                        {"out", out_raw}});
    std::printf("wrote %zu edits to %s\n", bench.edits.size(), out.c_str());
    return 0;
}

int cmd_pretrain(const std::string& data, int steps, int batch, double lr, uint64_t seed,
                 int d_model, int n_layers, int n_heads, int d_ffn, int max_seq, int log_every,
                 const std::string& out_raw) {
    const std::string out = resolve_out(out_raw);
    const BenchmarkSet bench = load_records(data);
    if (bench.pretrain_corpus.empty())
        throw std::runtime_error("config: benchmark has no pretraining corpus (" + data +
                                 ".pretrain.jsonl missing?)");
    BackboneConfig cfg;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.d_ffn = d_ffn;
    cfg.max_seq_len = max_seq;
    cfg.edit_layer_index = n_layers >= 2 ? n_layers - 2 : 0;
    cfg.rng_seed = seed;

    PretrainOptions opts;
    opts.batch_size = batch;
    opts.lr = lr;
    opts.log_every = log_every;
    const PretrainResult res = pretrain(cfg, bench.pretrain_corpus, steps, opts);
    save_checkpoint(res.model, out);
    write_manifest(out, "pretrain",
                   json{{"data", data},
                        {"steps", steps},
                        {"batch", batch},
                        {"lr", lr},
                        {"seed", seed},
                        {"d_model", d_model},
                        {"n_layers", n_layers},
                        {"n_heads", n_heads},
                        {"d_ffn", d_ffn},
                        {"max_seq", max_seq},
                        {"data_checksum", file_checksum(data)},
                        {"out", out_raw}});
    std::printf("pretrain done: loss %.4f -> %.4f, checkpoint %s\n", res.first_loss, res.last_loss,
                out.c_str());
    return 0;
}

int cmd_edit(const EditFlags& flags, int snapshot_every, const std::string& out_raw) {
    const std::string out = resolve_out(out_raw);
    auto model = std::make_shared<BackboneModel>(load_checkpoint(flags.model_path));
    const BenchmarkSet bench = load_records(flags.benchmark_path);
    const SessionConfig scfg = flags.to_session_config();

    EditorState st = make_editor_state(model, bench, scfg);
    const int64_t T = flags.edits < 0 ? static_cast<int64_t>(bench.edits.size()) : flags.edits;
    std::function<void(const EditorState&, const EditRecord&)> on_edit;
    if (snapshot_every > 0) {
        on_edit = [&](const EditorState& s, const EditRecord& rec) {
            if ((rec.edit_id + 1) % snapshot_every == 0)
                snapshot(s, out + ".t" + std::to_string(rec.edit_id + 1));
        };
    }
    const EditSessionLog log = run_edits(st, bench, T, on_edit);
    snapshot(st, out);
    save_session_log(log, out + ".log.jsonl");

    json cfg_json = flags.to_json();
    cfg_json["snapshot_every"] = snapshot_every;
    cfg_json["out"] = out_raw;
    write_manifest(out, "edit", cfg_json);
    std::printf("session done: %lld edits, state %s\n", static_cast<long long>(st.edits_applied),
                out.c_str());
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& benchmark_path,
             const std::string& state_path, int64_t up_to, int window, bool with_ppl,
             const std::string& out_raw) {
    const std::string out = resolve_out(out_raw);
    auto model = std::make_shared<BackboneModel>(load_checkpoint(model_path));
    const BenchmarkSet bench = load_records(benchmark_path);
    EditorState st = restore(state_path, model);
    const int64_t T = up_to < 0 ? st.edits_applied : up_to;
    const MetricsReport rep = evaluate(st, bench, T, window, with_ppl);

    {
        std::ofstream csv(out + ".csv", std::ios::trunc);
        if (!csv) throw std::runtime_error("io: cannot open for writing: " + out + ".csv");
        csv << report_csv_header() << "\n"
            << report_csv_row(editor_strategy_name(st.kind), rep) << "\n";
    }
    save_report_json(rep, editor_strategy_name(st.kind), out + ".json");
    write_manifest(out, "eval",
                   json{{"model", model_path},
                        {"benchmark", benchmark_path},
                        {"state", state_path},
                        {"up_to", up_to},
                        {"window", window},
                        {"perplexity", with_ppl},
                        {"state_checksum", file_checksum(state_path)},
                        {"out", out_raw}});
    std::printf("%s\n%s\n", report_csv_header().c_str(),
                report_csv_row(editor_strategy_name(st.kind), rep).c_str());
    return 0;
}

int cmd_ablate(const EditFlags& flags, const std::string& axis_name,
               const std::vector<std::string>& values, int window, const std::string& out_raw) {
    const std::string out = resolve_out(out_raw);
    auto model = std::make_shared<BackboneModel>(load_checkpoint(flags.model_path));
    const BenchmarkSet bench = load_records(flags.benchmark_path);
    const SessionConfig base = flags.to_session_config();
    const AblationAxis axis = ablation_axis_from_name(axis_name);
    const int64_t T = flags.edits < 0 ? static_cast<int64_t>(bench.edits.size()) : flags.edits;

    const BaselineCache baseline = build_baseline_cache(*model, bench, T);
    const auto rows = ablate(model, bench, axis, values, base, T, window, &baseline);

    std::ofstream csv(out, std::ios::trunc);
    if (!csv) throw std::runtime_error("io: cannot open for writing: " + out);
    csv << ablation_axis_name(axis) << "," << report_csv_header() << "\n";
    std::printf("%s,%s\n", ablation_axis_name(axis), report_csv_header().c_str());
    for (const auto& row : rows) {
        csv << row.value << "," << report_csv_row(row.value, row.report) << "\n";
        std::printf("%s,%s\n", row.value.c_str(), report_csv_row(row.value, row.report).c_str());
        save_report_json(row.report, row.value, out + "." + row.value + ".json");
    }
    json cfg_json = flags.to_json();
    cfg_json["axis"] = axis_name;
    cfg_json["values"] = values;
    cfg_json["out"] = out_raw;
    write_manifest(out, "ablate", cfg_json);
    return 0;
}

int cmd_inspect(const std::string& state_path, const std::string& model_path, bool as_json) {
    // weights and database are summarized without requiring the backbone;
    // the checkpoint is only opened when provided
    BinReader probe = BinReader::from_file(state_path);  // checksum gate
    (void)probe;
    std::shared_ptr<const BackboneModel> model;
    EditorState st;
    if (!model_path.empty()) {
        model = std::make_shared<BackboneModel>(load_checkpoint(model_path));
        st = restore(state_path, model);
    } else {
        throw std::runtime_error("config: inspect requires --model to decode the state");
    }

    json j;
    j["strategy"] = editor_strategy_name(st.kind);
    j["selection"] = strategy_name(st.rcfg.strategy);
    j["D"] = st.model().cfg.d_ffn;
    j["k"] = st.rcfg.k;
    j["tau"] = st.rcfg.tau;
    j["conditional_activation"] = st.rcfg.conditional_activation;
    j["edits_applied"] = st.edits_applied;
    j["mask_db_size"] = st.db.size();
    j["collision_count"] = st.db.collision_count();
    j["dirty_column_fraction"] = st.memory.dirty_fraction();
    j["zero_column_fraction"] = st.memory.zero_column_fraction();
    j["centering_n"] = st.centering.n_samples;
    j["steps_per_edit"] = st.tcfg.steps_per_edit;
    j["learning_rate"] = st.tcfg.learning_rate;
    j["codebook_entries"] = st.codebook.size();

    if (!st.db.empty()) {
        // pairwise-overlap summary over all stored mask pairs
        const size_t n = st.db.size();
        double sum = 0.0;
        int max_o = 0, min_o = st.db.k();
        size_t pairs = 0;
        for (size_t i = 0; i < n; ++i)
            for (size_t jdx = i + 1; jdx < n; ++jdx) {
                const int o = st.db.overlap_between(i, jdx);
                sum += o;
                max_o = std::max(max_o, o);
                min_o = std::min(min_o, o);
                ++pairs;
            }
        j["mask_pairwise_overlap"] = {{"pairs", pairs},
                                      {"mean", pairs ? sum / pairs : 0.0},
                                      {"max", pairs ? max_o : 0},
                                      {"min", pairs ? min_o : 0}};
    }

    if (as_json) {
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        std::printf("strategy            %s (selection %s)\n", editor_strategy_name(st.kind),
                    strategy_name(st.rcfg.strategy));
        std::printf("D                   %d\n", st.model().cfg.d_ffn);
        std::printf("k                   %d\n", st.rcfg.k);
        std::printf("tau                 %.3f\n", st.rcfg.tau);
        std::printf("edits applied       %lld\n", static_cast<long long>(st.edits_applied));
        std::printf("mask db size        %zu\n", st.db.size());
        std::printf("mask collisions     %zu\n", st.db.collision_count());
        std::printf("dirty column frac   %.4f\n", st.memory.dirty_fraction());
        std::printf("zero column frac    %.4f\n", st.memory.zero_column_fraction());
        std::printf("centering n         %lld\n", static_cast<long long>(st.centering.n_samples));
        if (j.contains("mask_pairwise_overlap")) {
            const auto& o = j["mask_pairwise_overlap"];
            std::printf("mask overlap        mean %.2f  max %d  min %d (of k=%d)\n",
                        o["mean"].get<double>(), o["max"].get<int>(), o["min"].get<int>(),
                        st.db.k());
        }
    }
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"lifelong model editing workbench: sparse residual memory over a tiny transformer"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic editing benchmark");
    int facts = 100, rephrases = 3, irrelevant = 100, centering = 200;
    uint64_t gen_seed = 7;
    std::string gen_out = "benchmark.jsonl";
    gen->add_option("--facts", facts, "number of edits");
    gen->add_option("--rephrases", rephrases, "rephrases per edit");
    gen->add_option("--irrelevant", irrelevant, "size of the irrelevant pool");
    gen->add_option("--centering", centering, "size of the centering pool");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--out", gen_out, "output records file")->required();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train the frozen backbone on the benchmark corpus");
    std::string pre_data, pre_out = "backbone.ckpt";
    int pre_steps = 4000, pre_batch = 8, pre_dm = 64, pre_layers = 2, pre_heads = 4, pre_dffn = 256,
        pre_maxseq = 80, pre_log = 0;
    double pre_lr = 1.5e-3;
    uint64_t pre_seed = 42;
    pre->add_option("--data", pre_data, "benchmark records file")->required();
    pre->add_option("--steps", pre_steps, "training steps");
    pre->add_option("--batch", pre_batch, "batch size");
    pre->add_option("--lr", pre_lr, "learning rate");
    pre->add_option("--seed", pre_seed, "init + sampling seed");
    pre->add_option("--d-model", pre_dm, "embedding width");
    pre->add_option("--layers", pre_layers, "transformer blocks");
    pre->add_option("--heads", pre_heads, "attention heads");
    pre->add_option("--d-ffn", pre_dffn, "FFN hidden width D");
    pre->add_option("--max-seq", pre_maxseq, "maximum sequence length");
    pre->add_option("--log-every", pre_log, "print loss every N steps (0 = silent)");
    pre->add_option("--out", pre_out, "checkpoint path")->required();

    // edit
    auto* edit = app.add_subcommand("edit", "run a sequential editing session");
    EditFlags edit_flags;
    int snapshot_every = 0;
    std::string edit_out = "editor.state";
    edit_flags.add_options(edit);
    edit->add_option("--snapshot-every", snapshot_every, "periodic snapshot interval (0 = off)");
    edit->add_option("--out", edit_out, "editor state output")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate an editor state");
    std::string ev_model, ev_bench, ev_state, ev_out = "report";
    int64_t ev_upto = -1;
    int ev_window = 100;
    bool ev_ppl = false;
    ev->add_option("--model", ev_model, "backbone checkpoint")->required();
    ev->add_option("--benchmark", ev_bench, "benchmark records file")->required();
    ev->add_option("--state", ev_state, "editor state")->required();
    ev->add_option("--up-to", ev_upto, "evaluate the first T edits (-1 = all)");
    ev->add_option("--window", ev_window, "forgetting-curve window");
    ev->add_flag("--perplexity", ev_ppl, "include mean post-edit perplexity");
    ev->add_option("--out", ev_out, "report path prefix")->required();

    // ablate
    auto* ab = app.add_subcommand("ablate", "sweep one axis with a full session per value");
    EditFlags ab_flags;
    std::string ab_axis, ab_out = "ablation.csv";
    std::vector<std::string> ab_values;
    int ab_window = 100;
    ab_flags.add_options(ab);
    ab->add_option("--axis", ab_axis, "k|tau|strategy|centering_n")->required();
    ab->add_option("--values", ab_values, "swept values")->required()->delimiter(',');
    ab->add_option("--window", ab_window, "forgetting-curve window");
    ab->add_option("--out", ab_out, "summary csv path")->required();

    // inspect
    auto* ins = app.add_subcommand("inspect", "summarize an editor state file");
    std::string ins_state, ins_model;
    bool ins_json = false;
    ins->add_option("--state", ins_state, "editor state")->required();
    ins->add_option("--model", ins_model, "backbone checkpoint the state references");
    ins->add_flag("--json", ins_json, "emit JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            return app.exit(e);
        }
        std::fprintf(stderr, "error: usage: %s\n", e.what());
        return 2;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(facts, rephrases, irrelevant, centering, gen_seed, gen_out);
        if (pre->parsed())
            return cmd_pretrain(pre_data, pre_steps, pre_batch, pre_lr, pre_seed, pre_dm, pre_layers,
                                pre_heads, pre_dffn, pre_maxseq, pre_log, pre_out);
        if (edit->parsed()) return cmd_edit(edit_flags, snapshot_every, edit_out);
        if (ev->parsed())
            return cmd_eval(ev_model, ev_bench, ev_state, ev_upto, ev_window, ev_ppl, ev_out);
        if (ab->parsed()) return cmd_ablate(ab_flags, ab_axis, ab_values, ab_window, ab_out);
        if (ins->parsed()) return cmd_inspect(ins_state, ins_model, ins_json);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    std::fprintf(stderr, "error: usage: no subcommand\n");
    return 2;
}

}  // namespace memoir
