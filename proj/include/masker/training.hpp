#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "masker/corpus.hpp"
#include "masker/keywords.hpp"
#include "masker/model.hpp"
#include "masker/rng.hpp"

namespace masker::training {

enum class MaskKind { keyword, context };

/// Positions of one sampled masking; positions are ascending and never cover
/// reserved tokens. skip_mkr marks documents carrying no keyword occurrence
/// at all, whose reconstruction loss is omitted.
struct MaskPlan {
    MaskKind kind = MaskKind::keyword;
    std::vector<std::size_t> positions;
    double prob = 0.0;
    bool skip_mkr = false;
};

struct MaskedDocument {
    const corpus::Document* original = nullptr;
    MaskPlan plan;
    std::vector<int> masked_ids;  // MASK substituted at plan positions
    std::vector<int> targets;     // original ids at plan positions (keyword kind)

    model::MaskedInput to_input() const;
};

/// Each keyword occurrence is masked independently with probability p.
MaskPlan sample_keyword_mask(const corpus::Document& doc, const keywords::KeywordSet& keywords,
                             double p, Rng& rng);

/// Each non-keyword (context) position is masked independently with
/// probability q; keyword positions are never masked.
MaskPlan sample_context_mask(const corpus::Document& doc, const keywords::KeywordSet& keywords,
                             double q, Rng& rng);

MaskedDocument apply_mask(const corpus::Document& doc, const MaskPlan& plan);

/// Reconstruction loss of a keyword-masked document (sum over masked
/// positions; 0 when skip_mkr). Rejects context-kind inputs.
double mkr_loss(const model::EncoderModel& model, const MaskedDocument& masked);

/// Uniformity loss of a context-masked document. Rejects keyword-kind inputs.
double mer_loss(const model::EncoderModel& model, const MaskedDocument& masked);

struct TrainConfig {
    int epochs = 10;
    int batch_size = 32;
    double keyword_mask_prob = 0.5;  // p
    double context_mask_prob = 0.9;  // q
    double mkr_weight = 0.001;
    double mer_weight = 0.001;
    model::AdamConfig adam;
    std::uint64_t seed = 0;
    std::string log_path;  // optional JSONL per-step log

    void validate() const;
};

/// Builds the masked views for one batch of documents and evaluates the
/// combined objective (batch means; weighted sum in .total) without touching
/// the model. The rng drives mask sampling only.
model::LossBreakdown total_loss(const model::EncoderModel& model,
                                const std::vector<const corpus::Document*>& batch,
                                const keywords::KeywordSet& keywords, const TrainConfig& config,
                                Rng& rng);

struct StepRecord {
    std::size_t step = 0;
    model::LossBreakdown loss;
};

struct TrainResult {
    model::EncoderModel model;
    std::vector<StepRecord> history;
};

/// Cross-entropy-only training. Deterministic under config.seed.
TrainResult train_vanilla(const corpus::LabeledCorpus& train, const model::ModelConfig& mconfig,
                          const TrainConfig& tconfig);

/// Full objective: CE + mkr_weight * MKR + mer_weight * MER, with keyword and
/// context views resampled every step. Starts from a fresh initialization
/// unless init_from is given (shared initial parameters, no other coupling).
TrainResult train_masker(const corpus::LabeledCorpus& train, const model::ModelConfig& mconfig,
                         const TrainConfig& tconfig, const keywords::KeywordSet& keywords,
                         const model::EncoderModel* init_from = nullptr);

}  // namespace masker::training
