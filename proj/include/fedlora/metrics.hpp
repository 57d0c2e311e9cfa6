#pragma once

#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedlora/aggregation.hpp"
#include "fedlora/errors.hpp"
#include "fedlora/model.hpp"
#include "fedlora/svd.hpp"

namespace fedlora {

// ---------------------------------------------------------------------------
// Per-client accuracy and the three aggregate fairness metrics.

struct EvalReport {
    std::string label;
    std::map<int, double> per_client_acc;  // accuracy in [0, 1]
    double macro_acc = 0.0;
    double min_acc = 0.0;
    double h_mean = 0.0;
    bool h_mean_flagged = false;  // zero-accuracy limit convention applied

    bool operator==(const EvalReport&) const = default;
};

// Fraction of argmax-correct predictions; ties break to the lowest class.
inline double accuracy(const BaseModel& model, const AdapterSet& adapters,
                       const std::vector<Example>& split) {
    if (split.empty()) throw InputError("accuracy: empty test split");
    std::size_t hits = 0;
    for (const Example& ex : split) {
        ForwardCache fc = forward(model, adapters, ex.tokens);
        int best = 0;
        for (std::size_t c = 1; c < fc.logits.size(); ++c)
            if (fc.logits[c] > fc.logits[static_cast<std::size_t>(best)])
                best = static_cast<int>(c);
        if (best == ex.label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(split.size());
}

struct MetricSummary {
    double macro_acc = 0.0;
    double min_acc = 0.0;
    double h_mean = 0.0;
    bool flagged = false;
};

inline MetricSummary aggregate_metrics(const std::map<int, double>& per_client_acc) {
    if (per_client_acc.empty()) throw InputError("aggregate_metrics: no accuracies");
    MetricSummary s;
    s.min_acc = 2.0;
    double sum = 0.0, inv_sum = 0.0;
    bool any_zero = false;
    for (const auto& [id, acc] : per_client_acc) {
        if (acc < 0.0 || acc > 1.0)
            throw InputError("aggregate_metrics: accuracy out of [0,1]");
        sum += acc;
        s.min_acc = std::min(s.min_acc, acc);
        if (acc == 0.0)
            any_zero = true;
        else
            inv_sum += 1.0 / acc;
    }
    const double k = static_cast<double>(per_client_acc.size());
    s.macro_acc = sum / k;
    if (any_zero) {
        s.h_mean = 0.0;  // limit convention, flagged in the report
        s.flagged = true;
    } else {
        s.h_mean = k / inv_sum;
    }
    return s;
}

inline EvalReport make_report(const std::string& label,
                              const std::map<int, double>& per_client_acc) {
    EvalReport r;
    r.label = label;
    r.per_client_acc = per_client_acc;
    const MetricSummary s = aggregate_metrics(per_client_acc);
    r.macro_acc = s.macro_acc;
    r.min_acc = s.min_acc;
    r.h_mean = s.h_mean;
    r.h_mean_flagged = s.flagged;
    return r;
}

inline EvalReport evaluate_model(const std::string& label, const BaseModel& model,
                                 const AdapterSet& adapters,
                                 const std::map<int, std::vector<Example>>& test_sets) {
    std::map<int, double> acc;
    for (const auto& [client, split] : test_sets)
        acc[client] = accuracy(model, adapters, split);
    return make_report(label, acc);
}

// ---------------------------------------------------------------------------
// JSON round-trip helpers. nlohmann prints shortest round-trip doubles, so
// serialize-then-parse reproduces values bit-exactly.

inline std::string dtoa(double v) { return nlohmann::json(v).dump(); }

inline double atod(const std::string& s) {
    return nlohmann::json::parse(s).get<double>();
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json per;
    for (const auto& [id, acc] : r.per_client_acc) per[std::to_string(id)] = acc;
    return {{"label", r.label},         {"per_client_acc", per},
            {"macro_acc", r.macro_acc}, {"min_acc", r.min_acc},
            {"h_mean", r.h_mean},       {"h_mean_flagged", r.h_mean_flagged}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.label = j.at("label").get<std::string>();
    for (const auto& [key, value] : j.at("per_client_acc").items())
        r.per_client_acc[std::stoi(key)] = value.get<double>();
    r.macro_acc = j.at("macro_acc").get<double>();
    r.min_acc = j.at("min_acc").get<double>();
    r.h_mean = j.at("h_mean").get<double>();
    r.h_mean_flagged = j.at("h_mean_flagged").get<bool>();
    return r;
}

// ---------------------------------------------------------------------------
// Comparison tables. The baseline is the report labeled "baseline" (first
// report otherwise); the best single-client variant is the single_client_*
// report with the highest macro accuracy.

struct ComparisonTable {
    std::vector<EvalReport> reports;
    std::string baseline_label;
    std::string best_single_label;  // empty when no single-client variants

    bool operator==(const ComparisonTable&) const = default;
};

inline bool is_single_client_label(const std::string& label) {
    return label.rfind("single_client", 0) == 0;
}

inline ComparisonTable compare(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw InputError("compare: no reports");
    for (const EvalReport& r : reports)
        if (r.per_client_acc.size() != reports.front().per_client_acc.size() ||
            !std::equal(r.per_client_acc.begin(), r.per_client_acc.end(),
                        reports.front().per_client_acc.begin(),
                        [](const auto& a, const auto& b) { return a.first == b.first; }))
            throw InputError("compare: reports cover different client sets");

    ComparisonTable t;
    t.reports = reports;
    t.baseline_label = reports.front().label;
    for (const EvalReport& r : reports)
        if (r.label == "baseline") t.baseline_label = r.label;

    double best_macro = -1.0;
    for (const EvalReport& r : reports)
        if (is_single_client_label(r.label) && r.macro_acc > best_macro) {
            best_macro = r.macro_acc;
            t.best_single_label = r.label;
        }
    return t;
}

namespace detail {

inline const EvalReport* find_report(const ComparisonTable& t, const std::string& label) {
    for (const EvalReport& r : t.reports)
        if (r.label == label) return &r;
    return nullptr;
}

inline std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
    return buf;
}

inline std::string pct_delta(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+.2f", v * 100.0);
    return buf;
}

} // namespace detail

// Aligned text table, accuracies as percent with two decimals.
inline std::string render_comparison_text(const ComparisonTable& t) {
    const EvalReport* baseline = detail::find_report(t, t.baseline_label);
    const EvalReport* best = t.best_single_label.empty()
                                 ? nullptr
                                 : detail::find_report(t, t.best_single_label);
    std::size_t width = 7;
    for (const EvalReport& r : t.reports) width = std::max(width, r.label.size());

    std::ostringstream out;
    auto pad = [&](const std::string& s, std::size_t w) {
        std::string p = s;
        while (p.size() < w) p.insert(p.begin(), ' ');
        return p;
    };
    auto pad_left = [&](const std::string& s, std::size_t w) {
        std::string p = s;
        while (p.size() < w) p.push_back(' ');
        return p;
    };

    out << pad_left("variant", width + 2);
    for (const auto& [id, acc] : t.reports.front().per_client_acc)
        out << pad("acc_c" + std::to_string(id), 9);
    out << pad("macro", 9) << pad("min", 9) << pad("h-mean", 9);
    if (baseline) out << pad("dmin(base)", 12) << pad("dhm(base)", 11);
    if (best) out << pad("dmin(best1)", 13) << pad("dhm(best1)", 12);
    out << '\n';

    for (const EvalReport& r : t.reports) {
        out << pad_left(r.label, width + 2);
        for (const auto& [id, acc] : r.per_client_acc) out << pad(detail::pct(acc), 9);
        out << pad(detail::pct(r.macro_acc), 9) << pad(detail::pct(r.min_acc), 9)
            << pad(detail::pct(r.h_mean), 9);
        if (baseline)
            out << pad(detail::pct_delta(r.min_acc - baseline->min_acc), 12)
                << pad(detail::pct_delta(r.h_mean - baseline->h_mean), 11);
        if (best)
            out << pad(detail::pct_delta(r.min_acc - best->min_acc), 13)
                << pad(detail::pct_delta(r.h_mean - best->h_mean), 12);
        out << '\n';
    }
    return out.str();
}

// CSV with full-precision values; parse_comparison_csv inverts it exactly.
inline std::string render_comparison_csv(const ComparisonTable& t) {
    const EvalReport* baseline = detail::find_report(t, t.baseline_label);
    const EvalReport* best = t.best_single_label.empty()
                                 ? nullptr
                                 : detail::find_report(t, t.best_single_label);
    std::ostringstream out;
    out << "label";
    for (const auto& [id, acc] : t.reports.front().per_client_acc) out << ",acc_c" << id;
    out << ",macro_acc,min_acc,h_mean,h_mean_flagged"
        << ",d_macro_vs_baseline,d_min_vs_baseline,d_hmean_vs_baseline"
        << ",d_macro_vs_best_single,d_min_vs_best_single,d_hmean_vs_best_single\n";
    for (const EvalReport& r : t.reports) {
        out << r.label;
        for (const auto& [id, acc] : r.per_client_acc) out << ',' << dtoa(acc);
        out << ',' << dtoa(r.macro_acc) << ',' << dtoa(r.min_acc) << ',' << dtoa(r.h_mean)
            << ',' << (r.h_mean_flagged ? 1 : 0);
        if (baseline)
            out << ',' << dtoa(r.macro_acc - baseline->macro_acc) << ','
                << dtoa(r.min_acc - baseline->min_acc) << ','
                << dtoa(r.h_mean - baseline->h_mean);
        else
            out << ",,,";
        if (best)
            out << ',' << dtoa(r.macro_acc - best->macro_acc) << ','
                << dtoa(r.min_acc - best->min_acc) << ',' << dtoa(r.h_mean - best->h_mean);
        else
            out << ",,,";
        out << '\n';
    }
    return out.str();
}

inline ComparisonTable parse_comparison_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw InputError("comparison csv: empty");

    std::vector<std::string> header;
    {
        std::istringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) header.push_back(cell);
    }
    std::vector<int> client_ids;
    for (const std::string& h : header)
        if (h.rfind("acc_c", 0) == 0) client_ids.push_back(std::stoi(h.substr(5)));

    std::vector<EvalReport> reports;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() < header.size() - 1)
            throw InputError("comparison csv: short row");
        EvalReport r;
        r.label = cells[0];
        std::size_t col = 1;
        for (int id : client_ids) r.per_client_acc[id] = atod(cells[col++]);
        r.macro_acc = atod(cells[col++]);
        r.min_acc = atod(cells[col++]);
        r.h_mean = atod(cells[col++]);
        r.h_mean_flagged = cells[col++] == "1";
        reports.push_back(std::move(r));
    }
    return compare(reports);
}

// ---------------------------------------------------------------------------
// PCA over client adapter updates (the round-one divergence diagnostic).

struct PcaProjection {
    std::map<int, std::pair<double, double>> points;
    std::pair<double, double> explained_variance;
};

// Flattens each client's reconstructed dense updates across all targets,
// centers across clients, and projects onto the top two principal directions.
inline PcaProjection pca_updates(const std::vector<ClientUpdate>& updates) {
    if (updates.size() < 2) throw InputError("pca_updates: need at least 2 updates");

    std::vector<const ClientUpdate*> ordered;
    for (const ClientUpdate& u : updates) ordered.push_back(&u);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientUpdate* a, const ClientUpdate* b) {
                  return a->client_id < b->client_id;
              });

    std::vector<std::vector<double>> rows;
    for (const ClientUpdate* u : ordered) {
        std::vector<double> flat;
        for (const auto& [t, p] : u->adapters.pairs) {
            Matrix delta = reconstruct_delta(*u, t);
            flat.insert(flat.end(), delta.data(), delta.data() + delta.size());
        }
        if (!rows.empty() && flat.size() != rows.front().size())
            throw ShapeError("pca_updates: inconsistent update shapes");
        rows.push_back(std::move(flat));
    }

    const std::size_t k = rows.size();
    const std::size_t p = rows.front().size();
    Matrix x(k, p);
    for (std::size_t j = 0; j < p; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < k; ++i) mean += rows[i][j];
        mean /= static_cast<double>(k);
        for (std::size_t i = 0; i < k; ++i) x(i, j) = rows[i][j] - mean;
    }

    const std::size_t comps = std::min<std::size_t>(2, std::min(k, p));
    SvdResult svd = truncated_svd(x, comps);

    // Sign convention on the principal directions (rows of vt): largest
    // magnitude loading non-negative.
    for (std::size_t c = 0; c < comps; ++c) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t j = 0; j < p; ++j)
            if (std::abs(svd.vt(c, j)) > best) {
                best = std::abs(svd.vt(c, j));
                arg = j;
            }
        if (svd.vt(c, arg) < 0.0) {
            for (std::size_t j = 0; j < p; ++j) svd.vt(c, j) = -svd.vt(c, j);
            for (std::size_t i = 0; i < k; ++i) svd.u(i, c) = -svd.u(i, c);
        }
    }

    PcaProjection out;
    for (std::size_t i = 0; i < k; ++i) {
        const double pc1 = svd.u(i, 0) * svd.singular_values[0];
        const double pc2 = comps > 1 ? svd.u(i, 1) * svd.singular_values[1] : 0.0;
        out.points[ordered[i]->client_id] = {pc1, pc2};
    }
    const double denom = static_cast<double>(k - 1);
    out.explained_variance = {
        svd.singular_values[0] * svd.singular_values[0] / denom,
        comps > 1 ? svd.singular_values[1] * svd.singular_values[1] / denom : 0.0};
    return out;
}

inline std::string render_pca_points_csv(const PcaProjection& proj) {
    std::ostringstream out;
    out << "client_id,pc1,pc2\n";
    for (const auto& [id, pt] : proj.points)
        out << id << ',' << dtoa(pt.first) << ',' << dtoa(pt.second) << '\n';
    return out.str();
}

inline std::string render_pca_variance_csv(const PcaProjection& proj) {
    std::ostringstream out;
    out << "component,explained_variance\n";
    out << "1," << dtoa(proj.explained_variance.first) << '\n';
    out << "2," << dtoa(proj.explained_variance.second) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Per-round dynamics records.

struct RoundRecord {
    std::uint64_t round = 0;
    EvalReport global;
    std::vector<EvalReport> locals;  // pre-aggregation local models
    std::map<std::string, double> residual_norms;
    std::vector<int> stragglers;
    std::vector<std::pair<int, std::string>> rejected;
    bool round1_dip = false;

    bool operator==(const RoundRecord&) const = default;
};

inline RoundRecord make_round_record(std::uint64_t round, EvalReport global,
                                     std::vector<EvalReport> locals,
                                     const std::map<Target, double>& residuals,
                                     std::vector<int> stragglers,
                                     std::vector<std::pair<int, std::string>> rejected) {
    RoundRecord rec;
    rec.round = round;
    rec.global = std::move(global);
    rec.locals = std::move(locals);
    for (const auto& [t, norm] : residuals) rec.residual_norms[target_name(t)] = norm;
    rec.stragglers = std::move(stragglers);
    rec.rejected = std::move(rejected);
    double best_local = -1.0;
    for (const EvalReport& r : rec.locals) best_local = std::max(best_local, r.macro_acc);
    rec.round1_dip = round == 1 && !rec.locals.empty() &&
                     rec.global.macro_acc < best_local;
    return rec;
}

inline nlohmann::json round_record_to_json(const RoundRecord& rec) {
    nlohmann::json locals = nlohmann::json::array();
    for (const EvalReport& r : rec.locals) locals.push_back(report_to_json(r));
    nlohmann::json rejected = nlohmann::json::array();
    for (const auto& [id, reason] : rec.rejected)
        rejected.push_back({{"client_id", id}, {"reason", reason}});
    return {{"round", rec.round},
            {"global", report_to_json(rec.global)},
            {"locals", locals},
            {"residual_norms", rec.residual_norms},
            {"stragglers", rec.stragglers},
            {"rejected", rejected},
            {"round1_dip", rec.round1_dip}};
}

inline RoundRecord round_record_from_json(const nlohmann::json& j) {
    RoundRecord rec;
    rec.round = j.at("round").get<std::uint64_t>();
    rec.global = report_from_json(j.at("global"));
    for (const auto& item : j.at("locals")) rec.locals.push_back(report_from_json(item));
    rec.residual_norms =
        j.at("residual_norms").get<std::map<std::string, double>>();
    rec.stragglers = j.at("stragglers").get<std::vector<int>>();
    for (const auto& item : j.at("rejected"))
        rec.rejected.emplace_back(item.at("client_id").get<int>(),
                                  item.at("reason").get<std::string>());
    rec.round1_dip = j.at("round1_dip").get<bool>();
    return rec;
}

// JSON-lines, one record per round.
inline std::string serialize_round_records(const std::vector<RoundRecord>& records) {
    std::ostringstream out;
    for (const RoundRecord& rec : records) out << round_record_to_json(rec).dump() << '\n';
    return out.str();
}

inline std::vector<RoundRecord> parse_round_records(const std::string& text) {
    std::vector<RoundRecord> records;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(round_record_from_json(nlohmann::json::parse(line)));
    }
    return records;
}

} // namespace fedlora
