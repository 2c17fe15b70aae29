#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mergeforge/rng.hpp"
#include "mergeforge/tensor_store.hpp"

namespace mergeforge {

class MergeError : public std::runtime_error {
public:
    explicit MergeError(const std::string& what) : std::runtime_error(what) {}
};

struct ExpertDelta {
    std::string expert_name;
    std::map<std::string, std::vector<float>> tensors;  // θ_expert − θ_base
};

// Task vectors of a set of experts against one base model.
struct TaskVectorSet {
    std::string base_name;
    std::vector<ExpertDelta> deltas;
    std::vector<std::string> warnings;  // missing-tensor relaxation notes
};

struct SlerpParams {
    double t = 0.5;                      // fraction of the expert
    double colinear_threshold = 0.9995;  // |cos| above which lerp is used
};

struct TiesParams {
    double density = 1.0;  // fraction of delta entries kept by magnitude
    double lambda = 1.0;
    std::vector<double> weights;  // per expert, defaults to 1
};

struct DareParams {
    double drop_p = 0.0;
    uint64_t seed = 0;
};

struct BreadcrumbsParams {
    double beta_top = 0.0;      // fraction of largest-magnitude entries dropped
    double gamma_bottom = 0.0;  // fraction of smallest-magnitude entries dropped
    double lambda = 1.0;
    std::vector<double> weights;
};

namespace detail {

inline void check_aligned(const WeightMap& base, const WeightMap& other, const std::string& other_name) {
    for (const auto& [name, t] : base.tensors) {
        auto it = other.tensors.find(name);
        if (it == other.tensors.end())
            throw MergeError("\"" + other_name + "\" is missing tensor \"" + name + "\"");
        if (it->second.shape != t.shape) {
            auto fmt = [](const std::vector<uint64_t>& s) {
                std::string r = "[";
                for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
                return r + "]";
            };
            throw MergeError("shape mismatch on tensor \"" + name + "\": base " + fmt(t.shape) +
                             " vs \"" + other_name + "\" " + fmt(it->second.shape));
        }
    }
    for (const auto& [name, t] : other.tensors)
        if (!base.tensors.count(name))
            throw MergeError("\"" + other_name + "\" has tensor \"" + name + "\" absent from base");
}

inline std::vector<double> resolved_weights(const std::vector<double>& w, size_t n_experts) {
    if (w.empty()) return std::vector<double>(n_experts, 1.0);
    if (w.size() != n_experts)
        throw MergeError("weight count " + std::to_string(w.size()) + " does not match expert count " +
                         std::to_string(n_experts));
    return w;
}

// Expert evaluation order sorted by expert name. Reductions iterate experts
// in this canonical order so that permuting the expert list (with its
// weights) leaves every merge output bitwise unchanged.
inline std::vector<size_t> canonical_expert_order(const std::vector<ExpertDelta>& deltas) {
    std::vector<size_t> order(deltas.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return deltas[a].expert_name < deltas[b].expert_name;
    });
    return order;
}

// Indices of the k largest-magnitude entries; ties at the cutoff go to the
// lower flat index.
inline std::vector<size_t> top_magnitude_indices(const std::vector<float>& v, size_t k) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto cmp = [&](size_t a, size_t b) {
        const float ma = std::fabs(v[a]), mb = std::fabs(v[b]);
        if (ma != mb) return ma > mb;
        return a < b;
    };
    if (k < idx.size()) {
        std::nth_element(idx.begin(), idx.begin() + k, idx.end(), cmp);
        idx.resize(k);
    }
    return idx;
}

}  // namespace detail

inline TaskVectorSet task_vectors(const WeightMap& base, const std::vector<const WeightMap*>& experts,
                                  const std::vector<std::string>& expert_names,
                                  bool allow_missing = false) {
    if (experts.size() != expert_names.size())
        throw MergeError("expert name count does not match expert count");
    TaskVectorSet tv;
    for (size_t e = 0; e < experts.size(); ++e) {
        const WeightMap& expert = *experts[e];
        if (!allow_missing) {
            detail::check_aligned(base, expert, expert_names[e]);
        }
        ExpertDelta delta;
        delta.expert_name = expert_names[e];
        for (const auto& [name, bt] : base.tensors) {
            auto it = expert.tensors.find(name);
            std::vector<float> d(bt.values.size(), 0.0f);
            if (it == expert.tensors.end()) {
                tv.warnings.push_back("expert \"" + expert_names[e] + "\" is missing tensor \"" + name +
                                      "\"; using zero delta");
            } else {
                if (it->second.shape != bt.shape)
                    throw MergeError("shape mismatch on tensor \"" + name + "\" for expert \"" +
                                     expert_names[e] + "\"");
                for (size_t i = 0; i < d.size(); ++i) d[i] = it->second.values[i] - bt.values[i];
            }
            delta.tensors.emplace(name, std::move(d));
        }
        tv.deltas.push_back(std::move(delta));
    }
    return tv;
}

inline TaskVectorSet task_vectors(const WeightMap& base, const std::vector<WeightMap>& experts,
                                  const std::vector<std::string>& expert_names,
                                  bool allow_missing = false) {
    std::vector<const WeightMap*> ptrs;
    for (const auto& e : experts) ptrs.push_back(&e);
    return task_vectors(base, ptrs, expert_names, allow_missing);
}

inline WeightMap slerp_merge(const WeightMap& base, const WeightMap& expert, const SlerpParams& params) {
    if (params.t < 0.0 || params.t > 1.0) throw MergeError("slerp t must lie in [0,1]");
    detail::check_aligned(base, expert, "expert");

    WeightMap out;
    out.metadata = base.metadata;
    for (const auto& [name, bt] : base.tensors) {
        const Tensor& et = expert.tensors.at(name);
        Tensor r;
        r.shape = bt.shape;
        r.original_dtype = bt.original_dtype;
        if (params.t == 0.0) {
            r.values = bt.values;
        } else if (params.t == 1.0) {
            r.values = et.values;
        } else {
            // 64-bit accumulation: the angle is cancellation-prone on
            // multi-million-element vectors.
            double dot = 0.0, n0 = 0.0, n1 = 0.0;
            for (size_t i = 0; i < bt.values.size(); ++i) {
                const double a = bt.values[i], b = et.values[i];
                dot += a * b;
                n0 += a * a;
                n1 += b * b;
            }
            n0 = std::sqrt(n0);
            n1 = std::sqrt(n1);
            r.values.resize(bt.values.size());
            double c0, c1;
            const double cos_omega = (n0 == 0.0 || n1 == 0.0)
                                         ? 1.0
                                         : std::clamp(dot / (n0 * n1), -1.0, 1.0);
            if (n0 == 0.0 || n1 == 0.0 || std::fabs(cos_omega) > params.colinear_threshold) {
                c0 = 1.0 - params.t;  // lerp fallback
                c1 = params.t;
            } else {
                const double omega = std::acos(cos_omega);
                const double s = std::sin(omega);
                c0 = std::sin((1.0 - params.t) * omega) / s;
                c1 = std::sin(params.t * omega) / s;
            }
            for (size_t i = 0; i < r.values.size(); ++i)
                r.values[i] = static_cast<float>(c0 * bt.values[i] + c1 * et.values[i]);
        }
        out.tensors.emplace(name, std::move(r));
    }
    return out;
}

inline WeightMap task_arithmetic_merge(const WeightMap& base, const TaskVectorSet& tv,
                                       const std::vector<double>& weights, double lambda = 1.0) {
    const std::vector<double> w = detail::resolved_weights(weights, tv.deltas.size());
    const std::vector<size_t> order = detail::canonical_expert_order(tv.deltas);
    WeightMap out;
    out.metadata = base.metadata;
    for (const auto& [name, bt] : base.tensors) {
        Tensor r;
        r.shape = bt.shape;
        r.original_dtype = bt.original_dtype;
        r.values.resize(bt.values.size());
        for (size_t i = 0; i < r.values.size(); ++i) {
            double acc = 0.0;
            for (size_t e : order) acc += w[e] * tv.deltas[e].tensors.at(name)[i];
            r.values[i] = static_cast<float>(bt.values[i] + lambda * acc);
        }
        out.tensors.emplace(name, std::move(r));
    }
    return out;
}

// TRIM by magnitude, ELECT a per-position sign from the weighted sum, then
// average the sign-consistent weighted contributions.
inline WeightMap ties_merge(const WeightMap& base, const TaskVectorSet& tv, const TiesParams& params) {
    if (!(params.density > 0.0 && params.density <= 1.0))
        throw MergeError("ties density must lie in (0,1]");
    const std::vector<double> w = detail::resolved_weights(params.weights, tv.deltas.size());
    const std::vector<size_t> order = detail::canonical_expert_order(tv.deltas);

    WeightMap out;
    out.metadata = base.metadata;
    for (const auto& [name, bt] : base.tensors) {
        const size_t n = bt.values.size();
        std::vector<std::vector<float>> trimmed(tv.deltas.size());
        for (size_t e = 0; e < tv.deltas.size(); ++e) {
            const std::vector<float>& d = tv.deltas[e].tensors.at(name);
            const size_t k = n == 0 ? 0 : static_cast<size_t>(std::ceil(params.density * static_cast<double>(n)));
            std::vector<float> t(n, 0.0f);
            for (size_t i : detail::top_magnitude_indices(d, std::min(k, n))) t[i] = d[i];
            trimmed[e] = std::move(t);
        }

        Tensor r;
        r.shape = bt.shape;
        r.original_dtype = bt.original_dtype;
        r.values.resize(n);
        for (size_t i = 0; i < n; ++i) {
            double vote = 0.0;
            for (size_t e : order) vote += w[e] * trimmed[e][i];
            double merged = 0.0;
            if (vote != 0.0) {
                const bool positive = vote > 0.0;
                double sum = 0.0;
                size_t count = 0;
                for (size_t e : order) {
                    const float v = trimmed[e][i];
                    if (v != 0.0f && ((v > 0.0f) == positive)) {
                        sum += w[e] * v;
                        ++count;
                    }
                }
                if (count > 0) merged = sum / static_cast<double>(count);
            }
            r.values[i] = static_cast<float>(bt.values[i] + params.lambda * merged);
        }
        out.tensors.emplace(name, std::move(r));
    }
    return out;
}

// Drop-and-rescale: each delta entry is zeroed with probability drop_p and
// survivors are scaled by 1/(1−p), preserving the delta in expectation.
// The mask is a pure function of (seed, expert, tensor, index), so the
// result is bitwise identical for any thread count.
inline TaskVectorSet dare_preprocess(const TaskVectorSet& tv, const DareParams& params,
                                     unsigned threads = 1) {
    if (!(params.drop_p >= 0.0 && params.drop_p < 1.0))
        throw MergeError("dare drop_p must lie in [0,1)");
    if (params.drop_p == 0.0) return tv;
    if (threads == 0) threads = 1;

    const float scale = static_cast<float>(1.0 / (1.0 - params.drop_p));
    TaskVectorSet out;
    out.base_name = tv.base_name;
    out.warnings = tv.warnings;
    for (const auto& delta : tv.deltas) {
        ExpertDelta d;
        d.expert_name = delta.expert_name;
        for (const auto& [name, values] : delta.tensors) {
            const uint64_t key = stream_key(params.seed, delta.expert_name, name);
            std::vector<float> v(values.size());
            auto fill = [&](size_t lo, size_t hi) {
                for (size_t i = lo; i < hi; ++i)
                    v[i] = uniform_at(key, i) < params.drop_p ? 0.0f : values[i] * scale;
            };
            if (threads == 1 || values.size() < 2 * threads) {
                fill(0, values.size());
            } else {
                std::vector<std::thread> pool;
                const size_t per = (values.size() + threads - 1) / threads;
                for (unsigned t = 0; t < threads; ++t) {
                    const size_t lo = t * per;
                    if (lo >= values.size()) break;
                    pool.emplace_back(fill, lo, std::min(values.size(), lo + per));
                }
                for (auto& th : pool) th.join();
            }
            d.tensors.emplace(name, std::move(v));
        }
        out.deltas.push_back(std::move(d));
    }
    return out;
}

// Per expert and tensor, zero the ⌊β·n⌋ largest- and ⌊γ·n⌋ smallest-magnitude
// entries, then combine the surviving middle band.
inline WeightMap breadcrumbs_merge(const WeightMap& base, const TaskVectorSet& tv,
                                   const BreadcrumbsParams& params) {
    if (!(params.beta_top >= 0.0 && params.gamma_bottom >= 0.0 &&
          params.beta_top + params.gamma_bottom < 1.0))
        throw MergeError("breadcrumbs requires beta_top + gamma_bottom < 1");
    const std::vector<double> w = detail::resolved_weights(params.weights, tv.deltas.size());
    const std::vector<size_t> order = detail::canonical_expert_order(tv.deltas);

    WeightMap out;
    out.metadata = base.metadata;
    for (const auto& [name, bt] : base.tensors) {
        const size_t n = bt.values.size();
        const size_t drop_top = static_cast<size_t>(std::floor(params.beta_top * static_cast<double>(n)));
        const size_t drop_bottom = static_cast<size_t>(std::floor(params.gamma_bottom * static_cast<double>(n)));

        Tensor r;
        r.shape = bt.shape;
        r.original_dtype = bt.original_dtype;
        std::vector<double> acc(n, 0.0);
        for (size_t e : order) {
            const std::vector<float>& d = tv.deltas[e].tensors.at(name);
            std::vector<size_t> rank(n);
            std::iota(rank.begin(), rank.end(), 0);
            std::sort(rank.begin(), rank.end(), [&](size_t a, size_t b) {
                const float ma = std::fabs(d[a]), mb = std::fabs(d[b]);
                if (ma != mb) return ma < mb;
                return a < b;
            });
            for (size_t p = drop_bottom; p + drop_top < n; ++p) {
                const size_t i = rank[p];
                acc[i] += w[e] * d[i];
            }
        }
        r.values.resize(n);
        for (size_t i = 0; i < n; ++i)
            r.values[i] = static_cast<float>(bt.values[i] + params.lambda * acc[i]);
        out.tensors.emplace(name, std::move(r));
    }
    return out;
}

}  // namespace mergeforge
