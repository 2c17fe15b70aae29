#pragma once

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "mergeforge/merge_model.hpp"
#include "mergeforge/recipe.hpp"

namespace mergeforge {

class EvolveError : public std::runtime_error {
public:
    explicit EvolveError(const std::string& what) : std::runtime_error(what) {}
};

enum class EvaluatorKind : uint8_t { ExternalCommand, SyntheticTarget };

struct EvaluatorSpec {
    EvaluatorKind kind = EvaluatorKind::ExternalCommand;
    std::string command_template;  // must contain "{model}"
    std::string target_path;       // synthetic target checkpoint
    double timeout_seconds = 300.0;
    int parallel_evals = 1;
    bool keep_candidates = false;
};

struct SearchParams {
    int budget = 500;
    int population_size = 20;
    uint64_t seed = 0;
    int tournament_size = 3;
    double crossover_rate = 0.5;   // per gene
    double mutation_rate = 0.3;    // per gene
    double mutation_sigma = 0.1;   // fraction of each gene's range
};

struct Individual {
    Genome genome;
    double fitness = -std::numeric_limits<double>::infinity();
};

struct HistoryEntry {
    Genome genome;
    double fitness = 0.0;
    int generation = 0;
};

struct SearchState {
    int format_version = 1;
    uint64_t seed = 0;
    std::string rng_state;  // serialized mt19937_64
    int generation = 0;
    int evaluations_used = 0;
    std::vector<Individual> population;
    Individual best;
    std::map<std::string, double> cache;  // genome key -> fitness
    std::vector<HistoryEntry> history;
};

struct SearchResult {
    MergeRecipe best_recipe;
    Genome best_genome;
    double best_fitness = -std::numeric_limits<double>::infinity();
    int evaluations_used = 0;
    std::vector<HistoryEntry> history;
};

// ---- subprocess helper ----------------------------------------------------

struct CommandResult {
    int exit_code = -1;
    bool timed_out = false;
    std::string output;  // captured standard output
};

inline CommandResult run_command_capture(const std::string& command, double timeout_seconds) {
    int fds[2];
    if (pipe(fds) != 0) throw EvolveError(std::string("pipe failed: ") + std::strerror(errno));
    const pid_t pid = fork();
    if (pid < 0) {
        close(fds[0]);
        close(fds[1]);
        throw EvolveError(std::string("fork failed: ") + std::strerror(errno));
    }
    if (pid == 0) {
        close(fds[0]);
        dup2(fds[1], STDOUT_FILENO);
        close(fds[1]);
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(fds[1]);

    CommandResult res;
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                              std::chrono::duration<double>(timeout_seconds));
    char buf[4096];
    bool open = true;
    while (open) {
        const auto now = std::chrono::steady_clock::now();
        if (now >= deadline) {
            res.timed_out = true;
            kill(pid, SIGKILL);
            break;
        }
        const int remain_ms = static_cast<int>(
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count());
        pollfd pfd{fds[0], POLLIN, 0};
        const int pr = poll(&pfd, 1, std::max(1, remain_ms));
        if (pr < 0) {
            if (errno == EINTR) continue;
            break;
        }
        if (pr == 0) continue;  // re-check the deadline
        const ssize_t n = read(fds[0], buf, sizeof(buf));
        if (n > 0)
            res.output.append(buf, static_cast<size_t>(n));
        else
            open = false;
    }
    close(fds[0]);
    int status = 0;
    waitpid(pid, &status, 0);
    res.exit_code = res.timed_out ? -1 : (WIFEXITED(status) ? WEXITSTATUS(status) : -1);
    return res;
}

// ---- fitness evaluation ---------------------------------------------------

inline std::filesystem::path scratch_directory() {
    if (const char* env = std::getenv("MERGEFORGE_TMPDIR"); env && *env) return env;
    return std::filesystem::temp_directory_path();
}

inline std::string genome_key(const Genome& g) {
    auto bits = [](double v) {
        uint64_t u;
        std::memcpy(&u, &v, sizeof(u));
        std::ostringstream os;
        os << std::hex << u;
        return os.str();
    };
    std::string k = "m" + std::to_string(g.method_gene);
    for (double w : g.weight_genes) k += ":" + bits(w);
    k += ":d" + bits(g.density_gene) + ":l" + bits(g.lambda_gene) + ":b" + bits(g.beta_gene) +
         ":g" + bits(g.gamma_gene) + ":p" + bits(g.drop_gene);
    return k;
}

// Evaluates decoded genomes. Failures (timeout, bad exit, malformed score
// document) yield -inf fitness; the search keeps going and the attempt still
// consumes budget.
class FitnessEvaluator {
public:
    FitnessEvaluator(MergeRecipe tmpl, EvaluatorSpec spec)
        : template_(std::move(tmpl)), spec_(std::move(spec)) {}

    double evaluate(const Genome& g) {
        MergeRecipe recipe;
        try {
            recipe = genome_to_recipe(g, template_);
        } catch (const std::exception& e) {
            std::cerr << "evaluation failed (decode): " << e.what() << "\n";
            return -std::numeric_limits<double>::infinity();
        }
        try {
            const WeightMap merged = merge_model(recipe, loader_);
            if (spec_.kind == EvaluatorKind::SyntheticTarget) return synthetic_fitness(merged);
            return external_fitness(merged);
        } catch (const std::exception& e) {
            std::cerr << "evaluation failed: " << e.what() << "\n";
            return -std::numeric_limits<double>::infinity();
        }
    }

    int invocation_count() const { return invocations_; }

private:
    double synthetic_fitness(const WeightMap& merged) {
        ++invocations_;
        const WeightMap& target = loader_.load(spec_.target_path);
        double ss = 0.0;
        for (const auto& [name, t] : target.tensors) {
            auto it = merged.tensors.find(name);
            if (it == merged.tensors.end())
                throw EvolveError("merged model is missing tensor \"" + name + "\"");
            for (size_t i = 0; i < t.values.size(); ++i) {
                const double d = static_cast<double>(it->second.values[i]) - t.values[i];
                ss += d * d;
            }
        }
        return -std::sqrt(ss);
    }

    double external_fitness(const WeightMap& merged) {
        ++invocations_;
        const std::filesystem::path path =
            scratch_directory() / ("mf-candidate-" + std::to_string(::getpid()) + "-" +
                                   std::to_string(candidate_counter_++) + ".safetensors");
        store_weights(merged, path, template_.output_dtype);
        std::string cmd = spec_.command_template;
        const std::string placeholder = "{model}";
        for (size_t pos; (pos = cmd.find(placeholder)) != std::string::npos;)
            cmd.replace(pos, placeholder.size(), path.string());

        const CommandResult res = run_command_capture(cmd, spec_.timeout_seconds);
        if (!spec_.keep_candidates) {
            std::error_code ec;
            std::filesystem::remove(path, ec);
        }
        if (res.timed_out) {
            std::cerr << "evaluator timed out: " << cmd << "\n";
            return -std::numeric_limits<double>::infinity();
        }
        if (res.exit_code != 0) {
            std::cerr << "evaluator exited with code " << res.exit_code << ": " << cmd << "\n";
            return -std::numeric_limits<double>::infinity();
        }
        return parse_score_document(res.output);
    }

    double parse_score_document(const std::string& text) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            std::cerr << "evaluator emitted malformed JSON: " << e.what() << "\n";
            return -std::numeric_limits<double>::infinity();
        }
        if (!j.is_object() || !j.contains("scores") || !j["scores"].is_object() ||
            j["scores"].empty()) {
            std::cerr << "evaluator output lacks a non-empty \"scores\" object\n";
            return -std::numeric_limits<double>::infinity();
        }
        double sum = 0.0;
        size_t n = 0;
        for (auto it = j["scores"].begin(); it != j["scores"].end(); ++it) {
            if (!it.value().is_number()) {
                std::cerr << "evaluator score \"" << it.key() << "\" is not a number\n";
                return -std::numeric_limits<double>::infinity();
            }
            const double v = it.value().get<double>();
            if (v < 0.0 || v > 100.0) {
                std::cerr << "evaluator score \"" << it.key() << "\" outside [0,100]\n";
                return -std::numeric_limits<double>::infinity();
            }
            sum += v;
            ++n;
        }
        return sum / static_cast<double>(n);
    }

    MergeRecipe template_;
    EvaluatorSpec spec_;
    CachingLoader loader_;
    int invocations_ = 0;
    int candidate_counter_ = 0;
};

// ---- state serialization --------------------------------------------------

namespace detail {

inline std::string double_bits_hex(double v) {
    uint64_t u;
    std::memcpy(&u, &v, sizeof(u));
    std::ostringstream os;
    os << std::hex << u;
    return os.str();
}

inline double double_from_bits_hex(const std::string& s) {
    const uint64_t u = std::stoull(s, nullptr, 16);
    double v;
    std::memcpy(&v, &u, sizeof(v));
    return v;
}

inline nlohmann::ordered_json genome_to_state_json(const Genome& g) {
    nlohmann::ordered_json j;
    j["method"] = g.method_gene;
    j["weights"] = nlohmann::ordered_json::array();
    for (double w : g.weight_genes) j["weights"].push_back(double_bits_hex(w));
    j["density"] = double_bits_hex(g.density_gene);
    j["lambda"] = double_bits_hex(g.lambda_gene);
    j["beta"] = double_bits_hex(g.beta_gene);
    j["gamma"] = double_bits_hex(g.gamma_gene);
    j["drop"] = double_bits_hex(g.drop_gene);
    return j;
}

inline Genome genome_from_state_json(const nlohmann::json& j) {
    Genome g;
    g.method_gene = j.at("method").get<int>();
    for (const auto& w : j.at("weights")) g.weight_genes.push_back(double_from_bits_hex(w.get<std::string>()));
    g.density_gene = double_from_bits_hex(j.at("density").get<std::string>());
    g.lambda_gene = double_from_bits_hex(j.at("lambda").get<std::string>());
    g.beta_gene = double_from_bits_hex(j.at("beta").get<std::string>());
    g.gamma_gene = double_from_bits_hex(j.at("gamma").get<std::string>());
    g.drop_gene = double_from_bits_hex(j.at("drop").get<std::string>());
    return g;
}

}  // namespace detail

inline void checkpoint_search(const SearchState& state, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["format_version"] = state.format_version;
    j["seed"] = state.seed;
    j["rng_state"] = state.rng_state;
    j["generation"] = state.generation;
    j["evaluations_used"] = state.evaluations_used;
    j["population"] = nlohmann::ordered_json::array();
    for (const auto& ind : state.population) {
        nlohmann::ordered_json e;
        e["genome"] = detail::genome_to_state_json(ind.genome);
        e["fitness"] = detail::double_bits_hex(ind.fitness);
        j["population"].push_back(std::move(e));
    }
    j["best"] = {{"genome", detail::genome_to_state_json(state.best.genome)},
                 {"fitness", detail::double_bits_hex(state.best.fitness)}};
    j["cache"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : state.cache) j["cache"][k] = detail::double_bits_hex(v);
    j["history"] = nlohmann::ordered_json::array();
    for (const auto& h : state.history) {
        nlohmann::ordered_json e;
        e["genome"] = detail::genome_to_state_json(h.genome);
        e["fitness"] = detail::double_bits_hex(h.fitness);
        e["generation"] = h.generation;
        j["history"].push_back(std::move(e));
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw EvolveError("cannot write search state to " + tmp.string());
        out << j.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

inline SearchState resume_search(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw EvolveError("cannot open search state " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw EvolveError("search state is not valid JSON: " + std::string(e.what()));
    }
    if (j.value("format_version", -1) != 1)
        throw EvolveError("unsupported search state format_version");
    SearchState s;
    s.seed = j.at("seed").get<uint64_t>();
    s.rng_state = j.at("rng_state").get<std::string>();
    s.generation = j.at("generation").get<int>();
    s.evaluations_used = j.at("evaluations_used").get<int>();
    for (const auto& e : j.at("population"))
        s.population.push_back({detail::genome_from_state_json(e.at("genome")),
                                detail::double_from_bits_hex(e.at("fitness").get<std::string>())});
    s.best = {detail::genome_from_state_json(j.at("best").at("genome")),
              detail::double_from_bits_hex(j.at("best").at("fitness").get<std::string>())};
    for (auto it = j.at("cache").begin(); it != j.at("cache").end(); ++it)
        s.cache[it.key()] = detail::double_from_bits_hex(it.value().get<std::string>());
    for (const auto& e : j.at("history"))
        s.history.push_back({detail::genome_from_state_json(e.at("genome")),
                             detail::double_from_bits_hex(e.at("fitness").get<std::string>()),
                             e.at("generation").get<int>()});
    return s;
}

// ---- the (mu+lambda) genetic search ---------------------------------------

class EvolutionarySearch {
public:
    EvolutionarySearch(MergeRecipe tmpl, EvaluatorSpec spec, SearchParams params)
        : template_(std::move(tmpl)),
          params_(params),
          evaluator_(template_, std::move(spec)) {
        if (params_.budget < params_.population_size)
            throw EvolveError("budget must be at least the population size");
        if (template_.experts.empty()) throw EvolveError("template recipe has no experts");
    }

    // Fresh run.
    SearchResult run(const std::optional<std::filesystem::path>& state_path = std::nullopt) {
        rng_.seed(params_.seed);
        state_ = SearchState{};
        state_.seed = params_.seed;

        for (int i = 0; i < params_.population_size; ++i)
            state_.population.push_back({random_genome(), 0.0});
        for (auto& ind : state_.population) {
            if (!evaluate_into(ind)) break;
            state_.history.push_back({ind.genome, ind.fitness, 0});
        }
        sort_population();
        save_state(state_path);
        return loop(state_path);
    }

    // Continue from a checkpoint; bit-identical to the uninterrupted run.
    SearchResult run_resumed(const std::filesystem::path& state_path) {
        state_ = resume_search(state_path);
        std::istringstream is(state_.rng_state);
        is >> rng_;
        if (!is) throw EvolveError("corrupt rng_state in " + state_path.string());
        return loop(std::optional<std::filesystem::path>(state_path));
    }

    const SearchState& state() const { return state_; }
    int evaluator_invocations() const { return evaluator_.invocation_count(); }

private:
    SearchResult loop(const std::optional<std::filesystem::path>& state_path) {
        while (state_.evaluations_used < params_.budget) {
            ++state_.generation;
            std::vector<Individual> offspring;
            for (int i = 0; i < params_.population_size; ++i) {
                Genome child = crossover(tournament(), tournament());
                mutate(child);
                offspring.push_back({std::move(child), 0.0});
            }
            std::vector<Individual> evaluated;
            for (auto& child : offspring) {
                if (!evaluate_into(child)) break;
                state_.history.push_back({child.genome, child.fitness, state_.generation});
                evaluated.push_back(std::move(child));
            }
            // (mu+lambda) survivor selection keeps the elite automatically.
            for (auto& e : evaluated) state_.population.push_back(std::move(e));
            sort_population();
            state_.population.resize(
                std::min<size_t>(state_.population.size(), static_cast<size_t>(params_.population_size)));
            save_state(state_path);
        }

        SearchResult result;
        result.best_genome = state_.best.genome;
        result.best_fitness = state_.best.fitness;
        result.best_recipe = genome_to_recipe(state_.best.genome, template_);
        result.evaluations_used = state_.evaluations_used;
        result.history = state_.history;
        return result;
    }

    // Returns false when the budget is exhausted before this evaluation.
    bool evaluate_into(Individual& ind) {
        const std::string key = genome_key(ind.genome);
        if (auto it = state_.cache.find(key); it != state_.cache.end()) {
            ind.fitness = it->second;  // cache hits never consume budget
        } else {
            if (state_.evaluations_used >= params_.budget) return false;
            ++state_.evaluations_used;
            ind.fitness = evaluator_.evaluate(ind.genome);
            state_.cache.emplace(key, ind.fitness);
        }
        if (state_.best.genome.weight_genes.empty() || ind.fitness > state_.best.fitness)
            state_.best = ind;
        return true;
    }

    void sort_population() {
        std::stable_sort(state_.population.begin(), state_.population.end(),
                         [](const Individual& a, const Individual& b) { return a.fitness > b.fitness; });
    }

    const Genome& tournament() {
        const size_t n = state_.population.size();
        size_t best = uniform_index(n);
        for (int i = 1; i < params_.tournament_size; ++i) {
            const size_t c = uniform_index(n);
            if (state_.population[c].fitness > state_.population[best].fitness) best = c;
        }
        return state_.population[best].genome;
    }

    Genome crossover(const Genome& a, const Genome& b) {
        Genome c = a;
        auto pick = [&](double& dst, double other) {
            if (uniform01() < params_.crossover_rate) dst = other;
        };
        if (uniform01() < params_.crossover_rate) c.method_gene = b.method_gene;
        for (size_t i = 0; i < c.weight_genes.size(); ++i) pick(c.weight_genes[i], b.weight_genes[i]);
        pick(c.density_gene, b.density_gene);
        pick(c.lambda_gene, b.lambda_gene);
        pick(c.beta_gene, b.beta_gene);
        pick(c.gamma_gene, b.gamma_gene);
        pick(c.drop_gene, b.drop_gene);
        return c;
    }

    void mutate(Genome& g) {
        auto jitter = [&](double& v, GeneBounds bounds) {
            if (uniform01() < params_.mutation_rate) {
                v += gaussian() * params_.mutation_sigma * (bounds.hi - bounds.lo);
                v = std::clamp(v, bounds.lo, bounds.hi);
            }
        };
        if (uniform01() < params_.mutation_rate)
            g.method_gene = static_cast<int>(uniform_index(kMethodGeneCount));
        for (double& w : g.weight_genes) jitter(w, kWeightBounds);
        jitter(g.density_gene, kDensityBounds);
        jitter(g.lambda_gene, kLambdaBounds);
        jitter(g.beta_gene, kBetaBounds);
        jitter(g.gamma_gene, kGammaBounds);
        jitter(g.drop_gene, kDropBounds);
    }

    Genome random_genome() {
        Genome g;
        g.method_gene = static_cast<int>(uniform_index(kMethodGeneCount));
        for (size_t i = 0; i < template_.experts.size(); ++i)
            g.weight_genes.push_back(uniform_in(kWeightBounds));
        g.density_gene = uniform_in(kDensityBounds);
        g.lambda_gene = uniform_in(kLambdaBounds);
        g.beta_gene = uniform_in(kBetaBounds);
        g.gamma_gene = uniform_in(kGammaBounds);
        g.drop_gene = uniform_in(kDropBounds);
        return g;
    }

    // Distributions are constructed per draw so no hidden distribution state
    // survives a checkpoint boundary.
    double uniform01() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
    double uniform_in(GeneBounds b) { return std::uniform_real_distribution<double>(b.lo, b.hi)(rng_); }
    double gaussian() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }
    size_t uniform_index(size_t n) {
        return std::uniform_int_distribution<size_t>(0, n - 1)(rng_);
    }

    void save_state(const std::optional<std::filesystem::path>& state_path) {
        std::ostringstream os;
        os << rng_;
        state_.rng_state = os.str();
        if (state_path) checkpoint_search(state_, *state_path);
    }

    MergeRecipe template_;
    SearchParams params_;
    FitnessEvaluator evaluator_;
    SearchState state_;
    std::mt19937_64 rng_;
};

inline SearchResult run_search(const MergeRecipe& tmpl, const EvaluatorSpec& evaluator,
                               const SearchParams& params,
                               const std::optional<std::filesystem::path>& state_path = std::nullopt,
                               bool resume = false) {
    EvolutionarySearch search(tmpl, evaluator, params);
    if (resume) {
        if (!state_path) throw EvolveError("resume requested without a state path");
        return search.run_resumed(*state_path);
    }
    return search.run(state_path);
}

}  // namespace mergeforge
