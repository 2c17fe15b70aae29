#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mergeforge {

class StatsError : public std::runtime_error {
public:
    explicit StatsError(const std::string& what) : std::runtime_error(what) {}
};

// Per-model, per-dataset benchmark scores (percentages in [0, 100]).
struct ScoreTable {
    std::map<std::string, std::map<std::string, double>> scores;

    static ScoreTable from_json(const std::string& document) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(document);
        } catch (const nlohmann::json::exception& e) {
            throw StatsError(std::string("score table is not valid JSON: ") + e.what());
        }
        if (!j.is_object() || !j.contains("models") || !j["models"].is_object())
            throw StatsError("score table: expected {\"models\": {...}}");
        ScoreTable t;
        for (auto it = j["models"].begin(); it != j["models"].end(); ++it) {
            if (!it.value().is_object())
                throw StatsError("score table: model \"" + it.key() + "\" is not an object");
            for (auto d = it.value().begin(); d != it.value().end(); ++d) {
                if (!d.value().is_number())
                    throw StatsError("score table: score \"" + it.key() + "\"/\"" + d.key() +
                                     "\" is not a number");
                t.scores[it.key()][d.key()] = d.value().get<double>();
            }
        }
        return t;
    }
};

// Which standard-deviation form feeds the CV Δ numerator.
enum class VarianceForm : uint8_t { Sample, Population };

struct GainReport {
    std::string baseline;
    std::string candidate;
    std::vector<std::string> datasets;  // lexicographic
    std::vector<double> deltas;         // candidate − baseline, per dataset
    double mean_delta = 0.0;
    double avg_score = 0.0;             // mean of the candidate's scores
    int num_dataset_gains = 0;          // strictly positive deltas
    double cv_delta = 0.0;
    bool cv_defined = false;            // false when |mean_delta| ~ 0
};

inline constexpr double kCvMeanTolerance = 1e-9;

inline GainReport gain_report(const ScoreTable& table, const std::string& baseline,
                              const std::string& candidate,
                              VarianceForm form = VarianceForm::Sample) {
    auto bit = table.scores.find(baseline);
    if (bit == table.scores.end()) throw StatsError("baseline model \"" + baseline + "\" not in table");
    auto cit = table.scores.find(candidate);
    if (cit == table.scores.end()) throw StatsError("candidate model \"" + candidate + "\" not in table");
    const auto& b = bit->second;
    const auto& c = cit->second;
    if (b.empty()) throw StatsError("baseline \"" + baseline + "\" has no datasets");
    for (const auto& [d, _] : b)
        if (!c.count(d)) throw StatsError("candidate \"" + candidate + "\" is missing dataset \"" + d + "\"");
    for (const auto& [d, _] : c)
        if (!b.count(d)) throw StatsError("baseline \"" + baseline + "\" is missing dataset \"" + d + "\"");

    GainReport r;
    r.baseline = baseline;
    r.candidate = candidate;
    double sum_delta = 0.0, sum_cand = 0.0;
    for (const auto& [d, bs] : b) {
        const double delta = c.at(d) - bs;
        r.datasets.push_back(d);
        r.deltas.push_back(delta);
        sum_delta += delta;
        sum_cand += c.at(d);
        if (delta > 0.0) ++r.num_dataset_gains;
    }
    const double n = static_cast<double>(r.deltas.size());
    r.mean_delta = sum_delta / n;
    r.avg_score = sum_cand / n;

    if (std::fabs(r.mean_delta) < kCvMeanTolerance) {
        r.cv_defined = false;
    } else {
        double ss = 0.0;
        for (double d : r.deltas) ss += (d - r.mean_delta) * (d - r.mean_delta);
        const double denom = (form == VarianceForm::Sample && r.deltas.size() > 1) ? n - 1.0 : n;
        r.cv_delta = std::sqrt(ss / denom) / std::fabs(r.mean_delta);
        r.cv_defined = true;
    }
    return r;
}

inline double relative_improvement(double baseline, double candidate) {
    if (baseline == 0.0) throw StatsError("relative improvement undefined for zero baseline");
    return 100.0 * (candidate - baseline) / baseline;
}

// Judge self-consistency counts for one criterion: how many of the M samples
// produced each discrete score value.
struct JudgeCounts {
    int samples = 0;                 // M
    std::map<int, int> counts;       // score value -> count

    double aggregate() const {
        if (samples < 1) throw StatsError("judge counts require at least one sample");
        long total = 0, weighted = 0;
        for (const auto& [score, count] : counts) {
            if (count < 0) throw StatsError("negative judge count for score " + std::to_string(score));
            total += count;
            weighted += static_cast<long>(score) * count;
        }
        if (total != samples)
            throw StatsError("judge counts sum to " + std::to_string(total) + ", expected M = " +
                             std::to_string(samples));
        return static_cast<double>(weighted) / static_cast<double>(samples);
    }
};

inline double aggregate_judge_scores(const JudgeCounts& counts) { return counts.aggregate(); }

enum class ReportFormat : uint8_t { TableText, Csv, Json };

namespace detail {

inline std::string one_decimal(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    return os.str();
}

}  // namespace detail

// Renders reports in the fixed column order AVG, #DG, CV Δ with one decimal
// place. Undefined CV renders as an em dash.
inline std::string render_report(const std::vector<GainReport>& reports, ReportFormat format) {
    std::ostringstream out;
    switch (format) {
        case ReportFormat::TableText: {
            size_t name_w = 5;
            for (const auto& r : reports) name_w = std::max(name_w, r.candidate.size());
            out << std::left << std::setw(static_cast<int>(name_w)) << "model"
                << "  " << std::right << std::setw(6) << "AVG" << std::setw(6) << "#DG"
                << std::setw(8) << "CV D" << "\n";
            for (const auto& r : reports) {
                out << std::left << std::setw(static_cast<int>(name_w)) << r.candidate << "  "
                    << std::right << std::setw(6) << detail::one_decimal(r.avg_score)
                    << std::setw(6) << r.num_dataset_gains << std::setw(8)
                    << (r.cv_defined ? detail::one_decimal(r.cv_delta) : std::string("—")) << "\n";
            }
            break;
        }
        case ReportFormat::Csv: {
            out << "model,avg,dg,cv_delta\n";
            for (const auto& r : reports)
                out << r.candidate << ',' << detail::one_decimal(r.avg_score) << ','
                    << r.num_dataset_gains << ','
                    << (r.cv_defined ? detail::one_decimal(r.cv_delta) : std::string("—")) << "\n";
            break;
        }
        case ReportFormat::Json: {
            nlohmann::ordered_json j = nlohmann::ordered_json::array();
            for (const auto& r : reports) {
                nlohmann::ordered_json e;
                e["model"] = r.candidate;
                e["baseline"] = r.baseline;
                e["avg"] = r.avg_score;
                e["dg"] = r.num_dataset_gains;
                if (r.cv_defined)
                    e["cv_delta"] = r.cv_delta;
                else
                    e["cv_delta"] = nullptr;
                nlohmann::ordered_json deltas = nlohmann::ordered_json::object();
                for (size_t i = 0; i < r.datasets.size(); ++i) deltas[r.datasets[i]] = r.deltas[i];
                e["deltas"] = std::move(deltas);
                j.push_back(std::move(e));
            }
            out << j.dump(2) << "\n";
            break;
        }
    }
    return out.str();
}

}  // namespace mergeforge
