#include "masker/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "masker/errors.hpp"
#include "masker/kernels.hpp"

namespace masker::eval {

namespace {

// Confusion counts at every threshold, from all-negative (no group included)
// to all-positive, over groups of equal confidence in descending order.
struct SweepTable {
    long long p = 0;  // in-distribution total
    long long n = 0;  // out-of-distribution total
    // prefix[k] = (TP, FP) with the k highest-confidence groups predicted
    // positive; prefix.front() = (0, 0), prefix.back() = (P, N).
    std::vector<std::pair<long long, long long>> prefix;
    // per-group positive/negative counts, aligned with prefix[k+1]-prefix[k]
    std::vector<std::pair<long long, long long>> groups;
};

SweepTable build_sweep(const std::vector<ScoredSample>& samples) {
    SweepTable t;
    std::vector<std::pair<double, bool>> scored;
    scored.reserve(samples.size());
    for (const ScoredSample& s : samples) {
        scored.emplace_back(s.confidence, s.is_in_distribution);
        if (s.is_in_distribution) {
            ++t.p;
        } else {
            ++t.n;
        }
    }
    if (t.p == 0 || t.n == 0) {
        throw DataError("detection metrics need both in-distribution and "
                        "out-of-distribution samples");
    }
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    t.prefix.emplace_back(0, 0);
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        long long tp = 0, fp = 0;
        while (j < scored.size() && scored[j].first == scored[i].first) {
            if (scored[j].second) {
                ++tp;
            } else {
                ++fp;
            }
            ++j;
        }
        t.groups.emplace_back(tp, fp);
        t.prefix.emplace_back(t.prefix.back().first + tp, t.prefix.back().second + fp);
        i = j;
    }
    return t;
}

void append_double(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

nlohmann::json conventions_json() {
    return nlohmann::json{{"id_is_positive", true},
                          {"detection_accuracy_balanced", true},
                          {"threshold_rule", "predict positive when confidence >= threshold"},
                          {"tie_break", "lower threshold"},
                          {"attention_summary_slot_excluded", true},
                          {"crosstab_convention", "fraction of target documents with >=1 keyword"},
                          {"idf_log_base", "e"},
                          {"accuracy_protocol", "id_accuracy is measured on the ID test split"}};
}

}  // namespace

double auroc(const std::vector<ScoredSample>& samples) {
    const SweepTable t = build_sweep(samples);
    long long numerator2 = 0;  // 2*wins + ties over all ID/OOD pairs
    long long fp_before = 0;
    for (const auto& [tp, fp] : t.groups) {
        numerator2 += tp * (2 * (t.n - fp_before - fp) + fp);
        fp_before += fp;
    }
    return static_cast<double>(numerator2) / (2.0 * static_cast<double>(t.p * t.n));
}

double eer(const std::vector<ScoredSample>& samples) {
    const SweepTable t = build_sweep(samples);
    // |FPR - FNR| compared as |FP*P - FN*N| (same sign, integer-exact);
    // k grows towards lower thresholds, and ties keep the later (lower) one.
    long long best_diff = -1;
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < t.prefix.size(); ++k) {
        const long long tp = t.prefix[k].first;
        const long long fp = t.prefix[k].second;
        const long long fn = t.p - tp;
        const long long diff = std::llabs(fp * t.p - fn * t.n);
        if (best_diff < 0 || diff <= best_diff) {
            best_diff = diff;
            best_k = k;
        }
    }
    const double fpr = static_cast<double>(t.prefix[best_k].second) / static_cast<double>(t.n);
    const double fnr = static_cast<double>(t.p - t.prefix[best_k].first) / static_cast<double>(t.p);
    return 0.5 * (fpr + fnr);
}

double detection_accuracy(const std::vector<ScoredSample>& samples) {
    const SweepTable t = build_sweep(samples);
    // 0.5*(TPR+TNR) maximized as TP*N + TN*P (integer-exact)
    long long best = -1;
    for (const auto& [tp, fp] : t.prefix) {
        const long long tn = t.n - fp;
        best = std::max(best, tp * t.n + tn * t.p);
    }
    return static_cast<double>(best) / (2.0 * static_cast<double>(t.p * t.n));
}

double tnr_at_tpr(const std::vector<ScoredSample>& samples, long long tpr_num, long long tpr_den) {
    if (tpr_num < 0 || tpr_den <= 0 || tpr_num > tpr_den) {
        throw ConfigError("TPR target must be a fraction in [0, 1]");
    }
    const SweepTable t = build_sweep(samples);
    // smallest k (largest threshold) with TPR >= num/den
    for (const auto& [tp, fp] : t.prefix) {
        if (tp * tpr_den >= t.p * tpr_num) {
            return static_cast<double>(t.n - fp) / static_cast<double>(t.n);
        }
    }
    return 0.0;  // unreachable: the all-positive point has TPR = 1
}

DetectionMetrics detection_metrics(const std::vector<ScoredSample>& samples) {
    DetectionMetrics m;
    m.auroc = auroc(samples);
    m.eer = eer(samples);
    m.detection_accuracy = detection_accuracy(samples);
    m.tnr_at_tpr80 = tnr_at_tpr(samples);
    return m;
}

namespace {

template <typename Fn>
void for_docs(std::size_t count, Fn&& fn) {
#ifdef _OPENMP
    if (kernels::parallel_enabled() && count > 1) {
        const int setting = kernels::threads();
        const int nt = setting > 0 ? setting : omp_get_max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
        for (long long i = 0; i < static_cast<long long>(count); ++i) {
            fn(static_cast<std::size_t>(i));
        }
        return;
    }
#endif
    for (std::size_t i = 0; i < count; ++i) fn(i);
}

}  // namespace

std::vector<ScoredSample> score_corpus(const model::EncoderModel& model,
                                       const corpus::LabeledCorpus& corpus,
                                       bool in_distribution) {
    std::vector<ScoredSample> samples(corpus.documents.size());
    for_docs(corpus.documents.size(), [&](std::size_t i) {
        const model::ForwardResult result = model::forward(model, corpus.documents[i]);
        ScoredSample& s = samples[i];
        s.confidence = model::confidence(result);
        s.is_in_distribution = in_distribution;
        s.predicted_label = model::predicted_label(result);
        s.true_label = in_distribution ? corpus.documents[i].label : -1;
    });
    return samples;
}

double classification_accuracy(const model::EncoderModel& model,
                               const corpus::LabeledCorpus& corpus) {
    if (corpus.documents.empty()) throw DataError("cannot score an empty corpus");
    const std::vector<ScoredSample> samples = score_corpus(model, corpus, true);
    std::size_t correct = 0;
    for (const ScoredSample& s : samples) {
        if (s.predicted_label == s.true_label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

OodReport evaluate_ood(const model::EncoderModel& model, const corpus::LabeledCorpus& id_corpus,
                       const corpus::LabeledCorpus& ood_corpus) {
    if (id_corpus.documents.empty() || ood_corpus.documents.empty()) {
        throw DataError("OOD evaluation needs non-empty ID and OOD corpora");
    }
    std::vector<ScoredSample> samples = score_corpus(model, id_corpus, true);
    const std::vector<ScoredSample> ood = score_corpus(model, ood_corpus, false);
    samples.insert(samples.end(), ood.begin(), ood.end());

    OodReport report;
    report.detection = detection_metrics(samples);
    report.n_id = id_corpus.documents.size();
    report.n_ood = ood_corpus.documents.size();
    std::size_t correct = 0;
    double sum_id = 0.0, sum_ood = 0.0;
    for (std::size_t i = 0; i < report.n_id; ++i) {
        sum_id += samples[i].confidence;
        if (samples[i].predicted_label == samples[i].true_label) ++correct;
    }
    for (std::size_t i = report.n_id; i < samples.size(); ++i) sum_ood += samples[i].confidence;
    report.id_accuracy = static_cast<double>(correct) / static_cast<double>(report.n_id);
    report.mean_confidence_id = sum_id / static_cast<double>(report.n_id);
    report.mean_confidence_ood = sum_ood / static_cast<double>(report.n_ood);
    return report;
}

CrossDomainReport evaluate_cross_domain(const model::EncoderModel& model,
                                        const corpus::LabeledCorpus& id_test,
                                        const corpus::LabeledCorpus& other_test) {
    if (id_test.num_classes != other_test.num_classes) {
        throw DataError("cross-domain corpora disagree on the label space: " +
                        std::to_string(id_test.num_classes) + " vs " +
                        std::to_string(other_test.num_classes) + " classes");
    }
    CrossDomainReport report;
    report.id_accuracy = classification_accuracy(model, id_test);
    report.cross_domain_accuracy = classification_accuracy(model, other_test);
    report.generalization_gap = report.id_accuracy - report.cross_domain_accuracy;
    return report;
}

AttackResult keyword_substitution_attack(const corpus::LabeledCorpus& corpus,
                                         const keywords::KeywordSet& keywords, Rng& rng) {
    if (corpus.num_classes != keywords.num_classes) {
        throw DataError("keyword set covers " + std::to_string(keywords.num_classes) +
                        " classes but the corpus has " + std::to_string(corpus.num_classes));
    }
    const std::vector<std::vector<int>> by_class = keywords.by_class();
    // pools[c] = keywords of every class except c, in (class, rank) order
    std::vector<std::vector<int>> pools(by_class.size());
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        for (std::size_t s = 0; s < by_class.size(); ++s) {
            if (s == c) continue;
            pools[c].insert(pools[c].end(), by_class[s].begin(), by_class[s].end());
        }
    }

    AttackResult result;
    result.attacked.num_classes = corpus.num_classes;
    result.attacked.vocab = corpus.vocab;
    result.attacked.documents.reserve(corpus.documents.size());
    for (const corpus::Document& doc : corpus.documents) {
        corpus::Document out = doc;
        const std::vector<int>& pool = pools[static_cast<std::size_t>(doc.label)];
        bool modified = false;
        if (!pool.empty()) {
            for (int& id : out.token_ids) {
                if (keywords.class_of(id) != doc.label) continue;
                id = pool[static_cast<std::size_t>(rng.below(pool.size()))];
                modified = true;
                ++result.substituted_tokens;
            }
        }
        if (modified) ++result.modified_docs;
        result.attacked.documents.push_back(std::move(out));
    }
    return result;
}

AttackReport evaluate_attack(const model::EncoderModel& model, const corpus::LabeledCorpus& corpus,
                             const keywords::KeywordSet& keywords, std::uint64_t seed) {
    if (corpus.documents.empty()) throw DataError("cannot attack an empty corpus");
    Rng rng(seed);
    const AttackResult attacked = keyword_substitution_attack(corpus, keywords, rng);
    AttackReport report;
    report.clean_accuracy = classification_accuracy(model, corpus);
    report.attacked_accuracy = classification_accuracy(model, attacked.attacked);
    report.accuracy_drop = report.clean_accuracy - report.attacked_accuracy;
    report.modified_fraction =
        static_cast<double>(attacked.modified_docs) / static_cast<double>(corpus.documents.size());
    report.substituted_tokens = attacked.substituted_tokens;
    return report;
}

void export_embeddings(const model::EncoderModel& model, const corpus::LabeledCorpus& corpus,
                       const std::string& path) {
    const std::size_t d = static_cast<std::size_t>(model.config.embed_dim);
    Matrix embeddings(corpus.documents.size(), d);
    for_docs(corpus.documents.size(), [&](std::size_t i) {
        const model::ForwardResult result = model::forward(model, corpus.documents[i]);
        std::copy(result.doc_embedding.begin(), result.doc_embedding.end(), embeddings.row(i));
    });

    std::ofstream out(path);
    if (!out) throw DataError("cannot open embedding file for writing: " + path);
    out << "id,label,domain";
    for (std::size_t j = 0; j < d; ++j) out << ",e" << j;
    out << "\n";
    for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
        std::string line = std::to_string(i) + "," +
                           std::to_string(corpus.documents[i].label) + "," +
                           corpus.documents[i].domain_tag;
        for (std::size_t j = 0; j < d; ++j) {
            line += ',';
            append_double(line, embeddings.at(i, j));
        }
        out << line << "\n";
    }
    if (!out) throw DataError("failed writing embedding file: " + path);
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string report_to_json(const ReliabilityReport& report) {
    nlohmann::json j{{"method", report.method},
                     {"seed", report.seed},
                     {"config_hash", report.config_hash},
                     {"conventions", conventions_json()}};
    if (report.id_accuracy) j["id_accuracy"] = *report.id_accuracy;
    if (report.ood) {
        j["ood"] = {{"auroc", report.ood->detection.auroc},
                    {"eer", report.ood->detection.eer},
                    {"detection_accuracy", report.ood->detection.detection_accuracy},
                    {"tnr_at_tpr80", report.ood->detection.tnr_at_tpr80},
                    {"id_accuracy", report.ood->id_accuracy},
                    {"mean_confidence_id", report.ood->mean_confidence_id},
                    {"mean_confidence_ood", report.ood->mean_confidence_ood},
                    {"n_id", report.ood->n_id},
                    {"n_ood", report.ood->n_ood}};
    }
    if (report.cross_domain) {
        j["cross_domain"] = {{"id_accuracy", report.cross_domain->id_accuracy},
                             {"cross_domain_accuracy", report.cross_domain->cross_domain_accuracy},
                             {"generalization_gap", report.cross_domain->generalization_gap}};
    }
    if (report.attack) {
        j["attack"] = {{"clean_accuracy", report.attack->clean_accuracy},
                       {"attacked_accuracy", report.attack->attacked_accuracy},
                       {"accuracy_drop", report.attack->accuracy_drop},
                       {"modified_fraction", report.attack->modified_fraction},
                       {"substituted_tokens", report.attack->substituted_tokens}};
    }
    return j.dump(2) + "\n";
}

ReliabilityReport report_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed report JSON: " + std::string(e.what()));
    }
    ReliabilityReport report;
    try {
        report.method = j.at("method").get<std::string>();
        report.seed = j.at("seed").get<std::uint64_t>();
        report.config_hash = j.at("config_hash").get<std::string>();
        if (j.contains("id_accuracy")) report.id_accuracy = j.at("id_accuracy").get<double>();
        if (j.contains("ood")) {
            const nlohmann::json& o = j.at("ood");
            OodReport ood;
            ood.detection.auroc = o.at("auroc").get<double>();
            ood.detection.eer = o.at("eer").get<double>();
            ood.detection.detection_accuracy = o.at("detection_accuracy").get<double>();
            ood.detection.tnr_at_tpr80 = o.at("tnr_at_tpr80").get<double>();
            ood.id_accuracy = o.at("id_accuracy").get<double>();
            ood.mean_confidence_id = o.at("mean_confidence_id").get<double>();
            ood.mean_confidence_ood = o.at("mean_confidence_ood").get<double>();
            ood.n_id = o.at("n_id").get<std::size_t>();
            ood.n_ood = o.at("n_ood").get<std::size_t>();
            report.ood = ood;
        }
        if (j.contains("cross_domain")) {
            const nlohmann::json& o = j.at("cross_domain");
            CrossDomainReport xd;
            xd.id_accuracy = o.at("id_accuracy").get<double>();
            xd.cross_domain_accuracy = o.at("cross_domain_accuracy").get<double>();
            xd.generalization_gap = o.at("generalization_gap").get<double>();
            report.cross_domain = xd;
        }
        if (j.contains("attack")) {
            const nlohmann::json& o = j.at("attack");
            AttackReport a;
            a.clean_accuracy = o.at("clean_accuracy").get<double>();
            a.attacked_accuracy = o.at("attacked_accuracy").get<double>();
            a.accuracy_drop = o.at("accuracy_drop").get<double>();
            a.modified_fraction = o.at("modified_fraction").get<double>();
            a.substituted_tokens = o.at("substituted_tokens").get<std::size_t>();
            report.attack = a;
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed report JSON: " + std::string(e.what()));
    }
    return report;
}

std::string report_csv_header() {
    return "method,seed,config_hash,id_accuracy,auroc,eer,detection_accuracy,tnr_at_tpr80,"
           "cross_domain_accuracy,generalization_gap,clean_accuracy,attacked_accuracy,"
           "accuracy_drop";
}

std::string report_csv_row(const ReliabilityReport& report) {
    std::string row = report.method + "," + std::to_string(report.seed) + "," +
                      report.config_hash;
    auto cell = [&row](const std::optional<double>& v) {
        row += ',';
        if (v) append_double(row, *v);
    };
    cell(report.id_accuracy);
    cell(report.ood ? std::optional<double>(report.ood->detection.auroc) : std::nullopt);
    cell(report.ood ? std::optional<double>(report.ood->detection.eer) : std::nullopt);
    cell(report.ood ? std::optional<double>(report.ood->detection.detection_accuracy)
                    : std::nullopt);
    cell(report.ood ? std::optional<double>(report.ood->detection.tnr_at_tpr80) : std::nullopt);
    cell(report.cross_domain ? std::optional<double>(report.cross_domain->cross_domain_accuracy)
                             : std::nullopt);
    cell(report.cross_domain ? std::optional<double>(report.cross_domain->generalization_gap)
                             : std::nullopt);
    cell(report.attack ? std::optional<double>(report.attack->clean_accuracy) : std::nullopt);
    cell(report.attack ? std::optional<double>(report.attack->attacked_accuracy) : std::nullopt);
    cell(report.attack ? std::optional<double>(report.attack->accuracy_drop) : std::nullopt);
    return row;
}

}  // namespace masker::eval
