#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mergeforge/merge_ops.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/tensor_store.hpp"

namespace mergeforge {

// Checkpoint access for merge_model. The caching implementation keeps each
// loaded file resident, which the evolutionary search relies on: one search
// re-merges the same base and experts hundreds of times.
class CheckpointLoader {
public:
    virtual ~CheckpointLoader() = default;
    virtual const WeightMap& load(const std::string& path) = 0;
};

class CachingLoader : public CheckpointLoader {
public:
    const WeightMap& load(const std::string& path) override {
        auto it = cache_.find(path);
        if (it == cache_.end()) it = cache_.emplace(path, load_weights(path)).first;
        return it->second;
    }

private:
    std::map<std::string, WeightMap> cache_;
};

// Executes one recipe end to end: load, difference, optional DARE
// preprocessing, then the selected operator.
inline WeightMap merge_model(const MergeRecipe& recipe, CheckpointLoader& loader,
                             unsigned threads = 1) {
    const WeightMap& base = loader.load(recipe.base_path);

    if (recipe.method == MergeMethod::Slerp) {
        if (recipe.experts.size() != 1) throw RecipeError("slerp requires exactly one expert");
        SlerpParams p;
        p.t = recipe.params.t;
        return slerp_merge(base, loader.load(recipe.experts[0].path), p);
    }

    std::vector<const WeightMap*> experts;
    std::vector<std::string> names;
    std::vector<double> weights;
    for (const auto& e : recipe.experts) {
        experts.push_back(&loader.load(e.path));
        names.push_back(e.path);
        weights.push_back(e.weight);
    }
    TaskVectorSet tv = task_vectors(base, experts, names, recipe.allow_missing);
    tv.base_name = recipe.base_path;
    if (recipe.params.dare && recipe.params.dare->drop_p > 0.0)
        tv = dare_preprocess(tv, *recipe.params.dare, threads);

    switch (recipe.method) {
        case MergeMethod::TaskArithmetic:
            return task_arithmetic_merge(base, tv, weights, recipe.params.lambda);
        case MergeMethod::Ties: {
            TiesParams p;
            p.density = recipe.params.density;
            p.lambda = recipe.params.lambda;
            p.weights = weights;
            return ties_merge(base, tv, p);
        }
        case MergeMethod::Breadcrumbs: {
            BreadcrumbsParams p;
            p.beta_top = recipe.params.beta_top;
            p.gamma_bottom = recipe.params.gamma_bottom;
            p.lambda = recipe.params.lambda;
            p.weights = weights;
            return breadcrumbs_merge(base, tv, p);
        }
        case MergeMethod::Slerp: break;  // handled above
    }
    throw std::logic_error("merge_model: bad method tag");
}

}  // namespace mergeforge
