// mergeforge: inspect / merge / evolve / stats / pack for safetensors-style
// checkpoints. Diagnostics go to stderr; machine-readable output to stdout.

#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "mergeforge/evolve.hpp"
#include "mergeforge/gainstats.hpp"
#include "mergeforge/merge_model.hpp"
#include "mergeforge/packer.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/tensor_store.hpp"

namespace {

using namespace mergeforge;

std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cmd_inspect(const std::string& path, bool as_json) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    const ParsedHeader header = parse_header(bytes);

    auto shape_str = [](const std::vector<uint64_t>& s) {
        std::string r = "[";
        for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
        return r + "]";
    };

    if (as_json) {
        nlohmann::ordered_json j;
        j["file"] = path;
        j["header_bytes"] = header.header_length;
        j["metadata"] = header.metadata;
        j["tensors"] = nlohmann::ordered_json::array();
        uint64_t total_bytes = 0, total_elems = 0;
        for (const auto& t : header.tensors) {
            j["tensors"].push_back({{"name", t.name},
                                    {"dtype", dtype_name(t.dtype)},
                                    {"shape", t.shape},
                                    {"data_offsets", {t.data_offsets.first, t.data_offsets.second}},
                                    {"bytes", t.num_bytes()}});
            total_bytes += t.num_bytes();
            total_elems += t.num_elements();
        }
        j["total_tensors"] = header.tensors.size();
        j["total_elements"] = total_elems;
        j["total_bytes"] = total_bytes;
        std::cout << j.dump(2) << "\n";
        return 0;
    }

    uint64_t total_bytes = 0, total_elems = 0;
    for (const auto& t : header.tensors) {
        std::cout << t.name << "  " << dtype_name(t.dtype) << "  " << shape_str(t.shape) << "  "
                  << t.num_bytes() << " bytes\n";
        total_bytes += t.num_bytes();
        total_elems += t.num_elements();
    }
    std::cout << "total: " << header.tensors.size() << " tensors, " << total_elems << " elements, "
              << total_bytes << " bytes\n";
    return 0;
}

int cmd_merge(const std::string& recipe_path, const std::string& out_path, bool allow_missing,
              bool dry_run, unsigned threads) {
    MergeRecipe recipe = parse_recipe(read_text_file(recipe_path));
    if (allow_missing) recipe.allow_missing = true;

    if (dry_run) {
        CachingLoader loader;
        const WeightMap& base = loader.load(recipe.base_path);
        for (const auto& e : recipe.experts) loader.load(e.path);  // validate all inputs
        nlohmann::ordered_json plan;
        plan["method"] = method_name(recipe.method);
        plan["seed"] = recipe.seed;
        plan["base"] = recipe.base_path;
        plan["experts"] = nlohmann::ordered_json::array();
        for (const auto& e : recipe.experts)
            plan["experts"].push_back({{"path", e.path}, {"weight", e.weight}});
        plan["params"] = recipe_to_json(recipe)["params"];
        plan["tensor_count"] = base.tensors.size();
        plan["dry_run"] = true;
        std::cout << plan.dump(2) << "\n";
        return 0;
    }

    CachingLoader loader;
    const WeightMap merged = merge_model(recipe, loader, threads);
    store_weights(merged, out_path, recipe.output_dtype);
    std::cerr << "wrote " << merged.tensors.size() << " tensors to " << out_path << "\n";
    return 0;
}

int cmd_evolve(const std::string& template_path, const std::string& evaluator_cmd,
               const std::string& synthetic_target, int budget, int population, uint64_t seed,
               const std::string& state_path, bool resume, bool keep_candidates,
               double timeout_seconds, const std::string& out_path, const std::string& history_path) {
    const MergeRecipe tmpl = parse_recipe(read_text_file(template_path));

    EvaluatorSpec spec;
    if (!synthetic_target.empty()) {
        spec.kind = EvaluatorKind::SyntheticTarget;
        spec.target_path = synthetic_target;
    } else if (!evaluator_cmd.empty()) {
        spec.kind = EvaluatorKind::ExternalCommand;
        spec.command_template = evaluator_cmd;
        if (evaluator_cmd.find("{model}") == std::string::npos)
            throw std::runtime_error("--evaluator command must contain the {model} placeholder");
    } else {
        throw std::runtime_error("one of --evaluator or --synthetic-target is required");
    }
    spec.timeout_seconds = timeout_seconds;
    spec.keep_candidates = keep_candidates;

    SearchParams params;
    params.budget = budget;
    params.population_size = population;
    params.seed = seed;

    std::optional<std::filesystem::path> state;
    if (!state_path.empty()) state = state_path;
    const SearchResult result = run_search(tmpl, spec, params, state, resume);

    nlohmann::ordered_json out;
    out["seed"] = seed;
    out["budget"] = budget;
    out["evaluations_used"] = result.evaluations_used;
    out["best_fitness"] = result.best_fitness;
    out["best_recipe"] = recipe_to_json(result.best_recipe);
    if (out_path.empty()) {
        std::cout << out.dump(2) << "\n";
    } else {
        std::ofstream f(out_path, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + out_path);
        f << out.dump(2) << "\n";
        std::cerr << "wrote best recipe to " << out_path << "\n";
    }
    if (!history_path.empty()) {
        std::ofstream f(history_path, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + history_path);
        for (const auto& h : result.history) {
            nlohmann::ordered_json e;
            e["generation"] = h.generation;
            e["fitness"] = h.fitness;
            e["method"] = h.genome.method_gene;
            e["weights"] = h.genome.weight_genes;
            f << e.dump() << "\n";
        }
        std::cerr << "wrote " << result.history.size() << " history entries to " << history_path
                  << "\n";
    }
    return 0;
}

int cmd_stats(const std::string& scores_path, const std::string& baseline,
              const std::vector<std::string>& candidates, const std::string& format,
              const std::string& variance) {
    const ScoreTable table = ScoreTable::from_json(read_text_file(scores_path));
    const VarianceForm form =
        variance == "population" ? VarianceForm::Population : VarianceForm::Sample;
    std::vector<GainReport> reports;
    for (const auto& c : candidates) reports.push_back(gain_report(table, baseline, c, form));
    ReportFormat fmt = ReportFormat::TableText;
    if (format == "csv") fmt = ReportFormat::Csv;
    if (format == "json") fmt = ReportFormat::Json;
    std::cout << render_report(reports, fmt);
    return 0;
}

int cmd_pack(const std::string& input_path, uint64_t capacity, const std::string& out_path, bool pit,
             uint32_t eos_id, const std::string& phase) {
    std::ifstream in(input_path);
    if (!in) throw std::runtime_error("cannot open " + input_path);
    std::vector<TokenSequence> sequences = read_sequences(in);

    if (pit) {
        // Interpret the input as task items followed by the source document
        // (last line); the concatenated result is then packed as one sequence.
        if (sequences.empty()) throw PackError("pit mode requires at least one sequence");
        const PitPhase p =
            phase == "task_plus_document" ? PitPhase::TaskPlusDocument : PitPhase::TaskOnly;
        TokenSequence document;
        std::vector<TokenSequence> items = sequences;
        const TokenSequence* doc_ptr = nullptr;
        if (p == PitPhase::TaskPlusDocument) {
            if (items.size() < 2)
                throw PackError("task_plus_document requires task items plus a final document line");
            document = items.back();
            items.pop_back();
            doc_ptr = &document;
        }
        sequences = {pit_concat(items, doc_ptr, eos_id, p)};
    }

    const std::vector<PackedBlock> blocks = best_fit_pack(sequences, capacity);
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    write_blocks(blocks, out);
    std::cerr << "packed " << sequences.size() << " sequences into " << blocks.size()
              << " blocks of capacity " << capacity << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"checkpoint merging toolkit"};
    app.require_subcommand(1);
    unsigned threads = std::max(1u, std::thread::hardware_concurrency());
    app.add_option("--threads", threads, "worker threads for elementwise passes");

    auto* inspect = app.add_subcommand("inspect", "list tensors in a checkpoint");
    std::string inspect_path;
    bool inspect_json = false;
    inspect->add_option("path", inspect_path, "checkpoint file")->required();
    inspect->add_flag("--json", inspect_json, "machine-readable listing");

    auto* merge = app.add_subcommand("merge", "execute a merge recipe");
    std::string merge_recipe, merge_out;
    bool merge_allow_missing = false, merge_dry_run = false;
    merge->add_option("--recipe", merge_recipe, "recipe JSON")->required();
    merge->add_option("--out", merge_out, "output checkpoint");
    merge->add_flag("--allow-missing", merge_allow_missing, "zero-fill missing expert tensors");
    merge->add_flag("--dry-run", merge_dry_run, "validate and print the plan without writing");

    auto* evolve = app.add_subcommand("evolve", "evolutionary recipe search");
    std::string ev_template, ev_evaluator, ev_target, ev_state, ev_out, ev_history;
    int ev_budget = 500, ev_population = 20;
    uint64_t ev_seed = 0;
    bool ev_resume = false, ev_keep = false;
    double ev_timeout = 300.0;
    evolve->add_option("--template", ev_template, "template recipe JSON")->required();
    evolve->add_option("--evaluator", ev_evaluator, "command with {model} placeholder");
    evolve->add_option("--synthetic-target", ev_target, "target checkpoint for -L2 fitness");
    evolve->add_option("--budget", ev_budget, "total evaluator invocations");
    evolve->add_option("--population", ev_population, "population size");
    evolve->add_option("--seed", ev_seed, "search seed");
    evolve->add_option("--state", ev_state, "checkpoint state file");
    evolve->add_flag("--resume", ev_resume, "resume from --state");
    evolve->add_flag("--keep-candidates", ev_keep, "keep candidate checkpoints in the scratch dir");
    evolve->add_option("--timeout", ev_timeout, "evaluator timeout in seconds");
    evolve->add_option("--out", ev_out, "best-recipe output file (default stdout)");
    evolve->add_option("--history", ev_history, "history JSONL output file");

    auto* stats = app.add_subcommand("stats", "benchmark gain reports");
    std::string st_scores, st_baseline, st_format = "table", st_variance = "sample";
    std::vector<std::string> st_candidates;
    stats->add_option("--scores", st_scores, "score table JSON")->required();
    stats->add_option("--baseline", st_baseline, "baseline model name")->required();
    stats->add_option("--candidates", st_candidates, "candidate model names")
        ->required()
        ->delimiter(',');
    stats->add_option("--format", st_format, "table|csv|json")
        ->check(CLI::IsMember({"table", "csv", "json"}));
    stats->add_option("--variance", st_variance, "sample|population")
        ->check(CLI::IsMember({"sample", "population"}));

    auto* pack = app.add_subcommand("pack", "best-fit sequence packing");
    std::string pk_input, pk_out, pk_phase = "task_only";
    uint64_t pk_capacity = kDefaultBlockCapacity;
    bool pk_pit = false;
    uint32_t pk_eos = 0;
    pack->add_option("--input", pk_input, "sequences JSONL")->required();
    pack->add_option("--capacity", pk_capacity, "block capacity in tokens");
    pack->add_option("--out", pk_out, "packed blocks JSONL")->required();
    pack->add_flag("--pit", pk_pit, "concatenate task items (and document) before packing");
    pack->add_option("--eos", pk_eos, "separator token id for --pit");
    pack->add_option("--phase", pk_phase, "task_only|task_plus_document")
        ->check(CLI::IsMember({"task_only", "task_plus_document"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (inspect->parsed()) return cmd_inspect(inspect_path, inspect_json);
        if (merge->parsed()) {
            if (!merge_dry_run && merge_out.empty())
                throw std::runtime_error("--out is required unless --dry-run is given");
            return cmd_merge(merge_recipe, merge_out, merge_allow_missing, merge_dry_run, threads);
        }
        if (evolve->parsed())
            return cmd_evolve(ev_template, ev_evaluator, ev_target, ev_budget, ev_population,
                              ev_seed, ev_state, ev_resume, ev_keep, ev_timeout, ev_out, ev_history);
        if (stats->parsed())
            return cmd_stats(st_scores, st_baseline, st_candidates, st_format, st_variance);
        if (pack->parsed()) return cmd_pack(pk_input, pk_capacity, pk_out, pk_pit, pk_eos, pk_phase);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 1;
}
