#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/merge_ops.hpp"
#include "mergeforge/tensor_store.hpp"

namespace mergeforge {

class RecipeError : public std::runtime_error {
public:
    explicit RecipeError(const std::string& what) : std::runtime_error(what) {}
};

enum class MergeMethod : uint8_t { Slerp, TaskArithmetic, Ties, Breadcrumbs };

inline const char* method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::Slerp: return "slerp";
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Ties: return "ties";
        case MergeMethod::Breadcrumbs: return "breadcrumbs";
    }
    throw std::logic_error("method_name: bad method tag");
}

inline bool parse_method(const std::string& s, MergeMethod& out) {
    if (s == "slerp") { out = MergeMethod::Slerp; return true; }
    if (s == "task_arithmetic") { out = MergeMethod::TaskArithmetic; return true; }
    if (s == "ties") { out = MergeMethod::Ties; return true; }
    if (s == "breadcrumbs") { out = MergeMethod::Breadcrumbs; return true; }
    return false;
}

struct ExpertRef {
    std::string path;
    double weight = 1.0;
};

// All method hyperparameters live side by side; the selected method reads
// the ones it needs. This keeps genome decoding total and the
// recipe<->genome mapping bijective.
struct MethodParams {
    double t = 0.5;            // slerp proportion of the expert
    double density = 1.0;      // ties
    double lambda = 1.0;       // ties / task_arithmetic / breadcrumbs
    double beta_top = 0.0;     // breadcrumbs
    double gamma_bottom = 0.0; // breadcrumbs
    std::optional<DareParams> dare;
};

struct MergeRecipe {
    std::string base_path;
    std::vector<ExpertRef> experts;
    MergeMethod method = MergeMethod::TaskArithmetic;
    MethodParams params;
    DtypePolicy output_dtype = DtypePolicy::preserve_original();
    uint64_t seed = 0;
    bool allow_missing = false;
};

// Fixed-length numeric encoding of a multi-expert recipe. The method gene
// enumerates {0: task_arithmetic, 1: ties, 2: breadcrumbs}; slerp is pairwise
// by construction and searched by grid enumeration instead.
struct Genome {
    int method_gene = 0;
    std::vector<double> weight_genes;
    double density_gene = 1.0;
    double lambda_gene = 1.0;
    double beta_gene = 0.0;
    double gamma_gene = 0.0;
    double drop_gene = 0.0;

    bool operator==(const Genome&) const = default;
};

struct GeneBounds {
    double lo, hi;
};

inline constexpr GeneBounds kWeightBounds{0.0, 1.5};
inline constexpr GeneBounds kDensityBounds{1e-6, 1.0};  // density must stay > 0
inline constexpr GeneBounds kLambdaBounds{1e-6, 2.0};   // lambda must stay > 0
inline constexpr GeneBounds kBetaBounds{0.0, 0.3};
inline constexpr GeneBounds kGammaBounds{0.0, 0.3};
inline constexpr GeneBounds kDropBounds{0.0, 0.95};
inline constexpr int kMethodGeneCount = 3;

// The paper's SLERP proportions, searched by enumeration.
inline constexpr double kSlerpGrid[] = {0.10, 0.25, 0.50};

namespace detail {

inline double require_range(const nlohmann::json& j, const std::string& path, double lo, double hi,
                            bool lo_open = false, bool hi_open = false) {
    if (!j.is_number()) throw RecipeError(path + ": expected a number");
    const double v = j.get<double>();
    const bool lo_ok = lo_open ? v > lo : v >= lo;
    const bool hi_ok = hi_open ? v < hi : v <= hi;
    if (!lo_ok || !hi_ok)
        throw RecipeError(path + ": value " + std::to_string(v) + " outside " + (lo_open ? "(" : "[") +
                          std::to_string(lo) + ", " + std::to_string(hi) + (hi_open ? ")" : "]"));
    return v;
}

}  // namespace detail

inline MergeRecipe parse_recipe(const std::string& document) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(document);
    } catch (const nlohmann::json::exception& e) {
        throw RecipeError(std::string("recipe is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw RecipeError("recipe: top level must be an object");

    MergeRecipe r;
    if (!j.contains("base") || !j["base"].is_string()) throw RecipeError("base: required string");
    r.base_path = j["base"].get<std::string>();

    if (!j.contains("experts") || !j["experts"].is_array() || j["experts"].empty())
        throw RecipeError("experts: required non-empty array");
    for (size_t i = 0; i < j["experts"].size(); ++i) {
        const auto& e = j["experts"][i];
        const std::string path = "experts[" + std::to_string(i) + "]";
        if (!e.is_object() || !e.contains("path") || !e["path"].is_string())
            throw RecipeError(path + ".path: required string");
        ExpertRef ref;
        ref.path = e["path"].get<std::string>();
        if (e.contains("weight"))
            ref.weight = detail::require_range(e["weight"], path + ".weight", 0.0, 1e18);
        r.experts.push_back(std::move(ref));
    }

    if (!j.contains("method") || !j["method"].is_string()) throw RecipeError("method: required string");
    if (!parse_method(j["method"].get<std::string>(), r.method))
        throw RecipeError("method: unknown method \"" + j["method"].get<std::string>() + "\"");
    if (r.method == MergeMethod::Slerp && r.experts.size() != 1)
        throw RecipeError("experts: slerp requires exactly one expert, got " +
                          std::to_string(r.experts.size()));

    if (j.contains("params")) {
        const auto& p = j["params"];
        if (!p.is_object()) throw RecipeError("params: expected an object");
        if (p.contains("t")) r.params.t = detail::require_range(p["t"], "method_params.t", 0.0, 1.0);
        if (p.contains("density"))
            r.params.density = detail::require_range(p["density"], "method_params.density", 0.0, 1.0, true);
        if (p.contains("lambda"))
            r.params.lambda = detail::require_range(p["lambda"], "method_params.lambda", 0.0, 1e18, true);
        if (p.contains("beta_top"))
            r.params.beta_top = detail::require_range(p["beta_top"], "method_params.beta_top", 0.0, 1.0, false, true);
        if (p.contains("gamma_bottom"))
            r.params.gamma_bottom =
                detail::require_range(p["gamma_bottom"], "method_params.gamma_bottom", 0.0, 1.0, false, true);
        if (r.params.beta_top + r.params.gamma_bottom >= 1.0)
            throw RecipeError("method_params: beta_top + gamma_bottom must be < 1");
        if (p.contains("dare")) {
            const auto& d = p["dare"];
            if (!d.is_object()) throw RecipeError("method_params.dare: expected an object");
            DareParams dare;
            if (d.contains("drop_p"))
                dare.drop_p = detail::require_range(d["drop_p"], "method_params.dare.drop_p", 0.0, 1.0, false, true);
            if (d.contains("seed")) {
                if (!d["seed"].is_number_unsigned())
                    throw RecipeError("method_params.dare.seed: expected an unsigned integer");
                dare.seed = d["seed"].get<uint64_t>();
            }
            r.params.dare = dare;
        }
    }

    if (j.contains("output_dtype")) {
        const std::string s = j["output_dtype"].get<std::string>();
        if (s == "preserve") {
            r.output_dtype = DtypePolicy::preserve_original();
        } else {
            DType d;
            if (!parse_dtype(s, d)) throw RecipeError("output_dtype: unknown value \"" + s + "\"");
            r.output_dtype = DtypePolicy::force(d);
        }
    }
    if (j.contains("allow_missing")) {
        if (!j["allow_missing"].is_boolean()) throw RecipeError("allow_missing: expected a boolean");
        r.allow_missing = j["allow_missing"].get<bool>();
    }
    if (j.contains("seed")) {
        if (!j["seed"].is_number_unsigned()) throw RecipeError("seed: expected an unsigned integer");
        r.seed = j["seed"].get<uint64_t>();
    }
    return r;
}

inline nlohmann::ordered_json recipe_to_json(const MergeRecipe& r) {
    nlohmann::ordered_json j;
    j["base"] = r.base_path;
    j["experts"] = nlohmann::ordered_json::array();
    for (const auto& e : r.experts) j["experts"].push_back({{"path", e.path}, {"weight", e.weight}});
    j["method"] = method_name(r.method);
    nlohmann::ordered_json p;
    p["t"] = r.params.t;
    p["density"] = r.params.density;
    p["lambda"] = r.params.lambda;
    p["beta_top"] = r.params.beta_top;
    p["gamma_bottom"] = r.params.gamma_bottom;
    if (r.params.dare) p["dare"] = {{"drop_p", r.params.dare->drop_p}, {"seed", r.params.dare->seed}};
    j["params"] = std::move(p);
    j["output_dtype"] = r.output_dtype.preserve ? "preserve" : dtype_name(r.output_dtype.forced);
    j["allow_missing"] = r.allow_missing;
    j["seed"] = r.seed;
    return j;
}

namespace detail {

inline double clamp_gene(double v, GeneBounds b, bool* clamped) {
    if (v < b.lo) { if (clamped) *clamped = true; return b.lo; }
    if (v > b.hi) { if (clamped) *clamped = true; return b.hi; }
    return v;
}

}  // namespace detail

// Decodes a genome against a template recipe that supplies the paths. Genes
// outside their declared bounds are clamped, not rejected, so mutation never
// produces an invalid recipe; `clamped` reports whether that happened.
inline MergeRecipe genome_to_recipe(const Genome& g, const MergeRecipe& tmpl, bool* clamped = nullptr) {
    if (g.weight_genes.size() != tmpl.experts.size())
        throw RecipeError("genome has " + std::to_string(g.weight_genes.size()) +
                          " weight genes for " + std::to_string(tmpl.experts.size()) + " experts");
    if (clamped) *clamped = false;
    MergeRecipe r = tmpl;
    const int m = std::clamp(g.method_gene, 0, kMethodGeneCount - 1);
    if (clamped && m != g.method_gene) *clamped = true;
    r.method = m == 0 ? MergeMethod::TaskArithmetic : (m == 1 ? MergeMethod::Ties : MergeMethod::Breadcrumbs);
    for (size_t i = 0; i < r.experts.size(); ++i)
        r.experts[i].weight = detail::clamp_gene(g.weight_genes[i], kWeightBounds, clamped);
    r.params.density = detail::clamp_gene(g.density_gene, kDensityBounds, clamped);
    r.params.lambda = detail::clamp_gene(g.lambda_gene, kLambdaBounds, clamped);
    r.params.beta_top = detail::clamp_gene(g.beta_gene, kBetaBounds, clamped);
    r.params.gamma_bottom = detail::clamp_gene(g.gamma_gene, kGammaBounds, clamped);
    // beta + gamma can reach 0.6 at the individual bounds; keep the pair valid.
    if (r.params.beta_top + r.params.gamma_bottom >= 1.0) {
        r.params.gamma_bottom = 0.999 - r.params.beta_top;
        if (clamped) *clamped = true;
    }
    const double drop = detail::clamp_gene(g.drop_gene, kDropBounds, clamped);
    if (drop > 0.0) {
        DareParams dare;
        dare.drop_p = drop;
        dare.seed = tmpl.params.dare ? tmpl.params.dare->seed : tmpl.seed;
        r.params.dare = dare;
    } else if (!tmpl.params.dare) {
        r.params.dare.reset();
    } else {
        r.params.dare->drop_p = 0.0;
    }
    return r;
}

inline Genome recipe_to_genome(const MergeRecipe& r) {
    Genome g;
    switch (r.method) {
        case MergeMethod::TaskArithmetic: g.method_gene = 0; break;
        case MergeMethod::Ties: g.method_gene = 1; break;
        case MergeMethod::Breadcrumbs: g.method_gene = 2; break;
        case MergeMethod::Slerp:
            throw RecipeError("slerp recipes have no multi-expert genome encoding");
    }
    for (const auto& e : r.experts) g.weight_genes.push_back(e.weight);
    g.density_gene = r.params.density;
    g.lambda_gene = r.params.lambda;
    g.beta_gene = r.params.beta_top;
    g.gamma_gene = r.params.gamma_bottom;
    g.drop_gene = r.params.dare ? r.params.dare->drop_p : 0.0;
    return g;
}

}  // namespace mergeforge
