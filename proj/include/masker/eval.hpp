#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "masker/corpus.hpp"
#include "masker/keywords.hpp"
#include "masker/model.hpp"
#include "masker/rng.hpp"

namespace masker::eval {

struct ScoredSample {
    double confidence = 0.0;
    bool is_in_distribution = false;
    int predicted_label = -1;
    int true_label = -1;  // -1 for OOD samples
};

/// Threshold-sweep detection metrics. In-distribution samples are the
/// positive class; a sample is predicted positive when its confidence is at
/// or above the threshold. All four are computed from integer confusion
/// counts with a single final division, so they match brute-force sweeps
/// exactly. Tie thresholds resolve towards the lower threshold.
double auroc(const std::vector<ScoredSample>& samples);
double eer(const std::vector<ScoredSample>& samples);
double detection_accuracy(const std::vector<ScoredSample>& samples);
/// TNR at the largest threshold with TPR >= tpr_num/tpr_den (default 80%).
double tnr_at_tpr(const std::vector<ScoredSample>& samples, long long tpr_num = 4,
                  long long tpr_den = 5);

struct DetectionMetrics {
    double auroc = 0.0;
    double eer = 0.0;
    double detection_accuracy = 0.0;
    double tnr_at_tpr80 = 0.0;
};

DetectionMetrics detection_metrics(const std::vector<ScoredSample>& samples);

/// Confidence + prediction for every document (eval mode, parallel-safe).
std::vector<ScoredSample> score_corpus(const model::EncoderModel& model,
                                       const corpus::LabeledCorpus& corpus,
                                       bool in_distribution);
double classification_accuracy(const model::EncoderModel& model,
                               const corpus::LabeledCorpus& corpus);

struct OodReport {
    DetectionMetrics detection;
    double id_accuracy = 0.0;
    double mean_confidence_id = 0.0;
    double mean_confidence_ood = 0.0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
};

OodReport evaluate_ood(const model::EncoderModel& model, const corpus::LabeledCorpus& id_corpus,
                       const corpus::LabeledCorpus& ood_corpus);

struct CrossDomainReport {
    double id_accuracy = 0.0;
    double cross_domain_accuracy = 0.0;
    double generalization_gap = 0.0;  // id_accuracy - cross_domain_accuracy
};

CrossDomainReport evaluate_cross_domain(const model::EncoderModel& model,
                                        const corpus::LabeledCorpus& id_test,
                                        const corpus::LabeledCorpus& other_test);

/// Replaces every occurrence of a document's own-class keyword with a
/// uniformly drawn keyword of a different class. Documents whose class has no
/// keywords, or with no other-class keywords to draw from, pass through
/// unchanged. Deterministic given the rng state; draws proceed in document
/// order, then position order.
struct AttackResult {
    corpus::LabeledCorpus attacked;
    std::size_t modified_docs = 0;
    std::size_t substituted_tokens = 0;
};

AttackResult keyword_substitution_attack(const corpus::LabeledCorpus& corpus,
                                         const keywords::KeywordSet& keywords, Rng& rng);

struct AttackReport {
    double clean_accuracy = 0.0;
    double attacked_accuracy = 0.0;
    double accuracy_drop = 0.0;
    double modified_fraction = 0.0;
    std::size_t substituted_tokens = 0;
};

AttackReport evaluate_attack(const model::EncoderModel& model,
                             const corpus::LabeledCorpus& corpus,
                             const keywords::KeywordSet& keywords, std::uint64_t seed);

/// CSV with header "id,label,domain,e0..e{d-1}", one row per document.
void export_embeddings(const model::EncoderModel& model, const corpus::LabeledCorpus& corpus,
                       const std::string& path);

struct ReliabilityReport {
    std::string method;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::optional<double> id_accuracy;
    std::optional<OodReport> ood;
    std::optional<CrossDomainReport> cross_domain;
    std::optional<AttackReport> attack;
};

/// FNV-1a (64-bit) hex digest; used as the config hash embedded in artifacts.
std::string fnv1a_hex(const std::string& text);

std::string report_to_json(const ReliabilityReport& report);
ReliabilityReport report_from_json(const std::string& text);
std::string report_csv_header();
std::string report_csv_row(const ReliabilityReport& report);

}  // namespace masker::eval
