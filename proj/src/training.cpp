#include "masker/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "masker/errors.hpp"

namespace masker::training {

namespace {

// Stream tags mixed into derived seeds; distinct per draw context.
constexpr std::uint64_t kShuffleStream = 16;
constexpr std::uint64_t kMaskStream = 17;
constexpr std::uint64_t kDropoutStream = 18;

MaskPlan sample_mask(const corpus::Document& doc, const keywords::KeywordSet& keywords,
                     MaskKind kind, double prob, Rng& rng) {
    if (prob < 0.0 || prob > 1.0) throw ConfigError("mask probability must lie in [0, 1]");
    MaskPlan plan;
    plan.kind = kind;
    plan.prob = prob;
    bool any_keyword = false;
    for (std::size_t i = 0; i < doc.token_ids.size(); ++i) {
        const int id = doc.token_ids[i];
        if (corpus::is_reserved(id)) continue;
        const bool is_keyword = keywords.contains(id);
        any_keyword = any_keyword || is_keyword;
        if (is_keyword != (kind == MaskKind::keyword)) continue;
        if (rng.bernoulli(prob)) plan.positions.push_back(i);
    }
    if (kind == MaskKind::keyword) plan.skip_mkr = !any_keyword;
    return plan;
}

void append_log_line(std::ofstream& out, const StepRecord& rec) {
    nlohmann::json j{{"step", rec.step},
                     {"ce", rec.loss.ce},
                     {"mkr", rec.loss.mkr},
                     {"mer", rec.loss.mer},
                     {"total", rec.loss.total}};
    out << j.dump() << "\n";
}

void validate_inputs(const corpus::LabeledCorpus& train, const model::ModelConfig& mconfig) {
    if (train.documents.empty()) throw DataError("training corpus is empty");
    if (train.num_classes != mconfig.num_classes) {
        throw DataError("corpus has " + std::to_string(train.num_classes) +
                        " classes but the model is configured for " +
                        std::to_string(mconfig.num_classes));
    }
    for (const corpus::Document& doc : train.documents) {
        if (doc.label < 0 || doc.label >= train.num_classes) {
            throw DataError("document label " + std::to_string(doc.label) + " outside " +
                            std::to_string(train.num_classes) + " classes");
        }
    }
}

std::vector<model::BatchEntry> build_batch(const corpus::LabeledCorpus& train,
                                           const std::vector<std::size_t>& perm,
                                           std::size_t begin, std::size_t end,
                                           const keywords::KeywordSet* keywords,
                                           const TrainConfig& cfg, std::size_t step) {
    const bool want_mkr = keywords != nullptr && cfg.mkr_weight != 0.0;
    const bool want_mer = keywords != nullptr && cfg.mer_weight != 0.0;
    std::vector<model::BatchEntry> batch;
    batch.reserve(end - begin);
    for (std::size_t slot = begin; slot < end; ++slot) {
        const corpus::Document& doc = train.documents[perm[slot]];
        model::BatchEntry entry;
        entry.clean = &doc;
        if (want_mkr || want_mer) {
            Rng mask_rng(mix_seed({cfg.seed, kMaskStream, step, slot - begin}));
            if (want_mkr) {
                const MaskPlan plan =
                    sample_mask(doc, *keywords, MaskKind::keyword, cfg.keyword_mask_prob, mask_rng);
                entry.skip_reconstruction = plan.skip_mkr;
                entry.keyword_view = apply_mask(doc, plan).to_input();
            }
            if (want_mer) {
                const MaskPlan plan =
                    sample_mask(doc, *keywords, MaskKind::context, cfg.context_mask_prob, mask_rng);
                entry.context_view = apply_mask(doc, plan).to_input();
            }
        }
        batch.push_back(std::move(entry));
    }
    return batch;
}

TrainResult run_training(const corpus::LabeledCorpus& train, const model::ModelConfig& mconfig,
                         const TrainConfig& tconfig, const keywords::KeywordSet* keywords,
                         const model::EncoderModel* init_from) {
    tconfig.validate();
    mconfig.validate();
    validate_inputs(train, mconfig);

    TrainResult result;
    if (init_from != nullptr) {
        result.model = *init_from;
    } else {
        result.model = model::init_model(mconfig);
    }
    model::AdamOptimizer optimizer(result.model.config, tconfig.adam);

    std::ofstream log;
    if (!tconfig.log_path.empty()) {
        log.open(tconfig.log_path);
        if (!log) throw DataError("cannot open training log for writing: " + tconfig.log_path);
    }

    const model::LossSpec spec{1.0, keywords ? tconfig.mkr_weight : 0.0,
                               keywords ? tconfig.mer_weight : 0.0};
    std::vector<std::size_t> perm(train.documents.size());
    std::iota(perm.begin(), perm.end(), 0);

    std::size_t step = 0;
    model::Parameters grads;
    for (int epoch = 0; epoch < tconfig.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed({tconfig.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)}));
        shuffle_rng.shuffle(perm);
        for (std::size_t begin = 0; begin < perm.size();
             begin += static_cast<std::size_t>(tconfig.batch_size)) {
            const std::size_t end =
                std::min(perm.size(), begin + static_cast<std::size_t>(tconfig.batch_size));
            const std::vector<model::BatchEntry> batch =
                build_batch(train, perm, begin, end, keywords, tconfig, step);
            const std::uint64_t step_seed = mix_seed({tconfig.seed, kDropoutStream, step});
            const model::LossBreakdown loss =
                model::batch_gradients(result.model, batch, spec, grads, true, step_seed);
            if (!std::isfinite(loss.total)) {
                throw DivergenceError(step, "non-finite loss at step " + std::to_string(step));
            }
            optimizer.step(result.model.params, grads);
            result.history.push_back({step, loss});
            if (log.is_open()) append_log_line(log, result.history.back());
            ++step;
        }
    }
    if (log.is_open() && !log) throw DataError("failed writing training log: " + tconfig.log_path);
    return result;
}

}  // namespace

model::MaskedInput MaskedDocument::to_input() const {
    model::MaskedInput input;
    input.token_ids = masked_ids;
    input.positions = plan.positions;
    input.targets = targets;
    return input;
}

MaskPlan sample_keyword_mask(const corpus::Document& doc, const keywords::KeywordSet& keywords,
                             double p, Rng& rng) {
    return sample_mask(doc, keywords, MaskKind::keyword, p, rng);
}

MaskPlan sample_context_mask(const corpus::Document& doc, const keywords::KeywordSet& keywords,
                             double q, Rng& rng) {
    return sample_mask(doc, keywords, MaskKind::context, q, rng);
}

MaskedDocument apply_mask(const corpus::Document& doc, const MaskPlan& plan) {
    MaskedDocument masked;
    masked.original = &doc;
    masked.plan = plan;
    masked.masked_ids = doc.token_ids;
    masked.targets.reserve(plan.positions.size());
    for (std::size_t pos : plan.positions) {
        if (pos >= doc.token_ids.size()) {
            throw DataError("mask position " + std::to_string(pos) +
                            " outside document of length " +
                            std::to_string(doc.token_ids.size()));
        }
        masked.targets.push_back(doc.token_ids[pos]);
        masked.masked_ids[pos] = corpus::kMaskId;
    }
    return masked;
}

double mkr_loss(const model::EncoderModel& model, const MaskedDocument& masked) {
    if (masked.plan.kind != MaskKind::keyword) {
        throw DataError("mkr_loss needs a keyword-masked document");
    }
    if (masked.plan.skip_mkr) return 0.0;
    return model::reconstruction_loss(model, masked.to_input());
}

double mer_loss(const model::EncoderModel& model, const MaskedDocument& masked) {
    if (masked.plan.kind != MaskKind::context) {
        throw DataError("mer_loss needs a context-masked document");
    }
    return model::uniformity_loss(model, masked.to_input());
}

void TrainConfig::validate() const {
    if (epochs <= 0) throw ConfigError("epochs must be positive");
    if (batch_size <= 0) throw ConfigError("batch size must be positive");
    if (keyword_mask_prob < 0.0 || keyword_mask_prob > 1.0) {
        throw ConfigError("keyword mask probability must lie in [0, 1]");
    }
    if (context_mask_prob < 0.0 || context_mask_prob > 1.0) {
        throw ConfigError("context mask probability must lie in [0, 1]");
    }
    if (mkr_weight < 0.0 || mer_weight < 0.0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (adam.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
    if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
}

model::LossBreakdown total_loss(const model::EncoderModel& model,
                                const std::vector<const corpus::Document*>& batch,
                                const keywords::KeywordSet& keywords, const TrainConfig& config,
                                Rng& rng) {
    if (batch.empty()) throw DataError("empty batch");
    std::vector<model::BatchEntry> entries;
    entries.reserve(batch.size());
    for (const corpus::Document* doc : batch) {
        model::BatchEntry entry;
        entry.clean = doc;
        if (config.mkr_weight != 0.0) {
            const MaskPlan plan = sample_mask(*doc, keywords, MaskKind::keyword,
                                              config.keyword_mask_prob, rng);
            entry.skip_reconstruction = plan.skip_mkr;
            entry.keyword_view = apply_mask(*doc, plan).to_input();
        }
        if (config.mer_weight != 0.0) {
            const MaskPlan plan = sample_mask(*doc, keywords, MaskKind::context,
                                              config.context_mask_prob, rng);
            entry.context_view = apply_mask(*doc, plan).to_input();
        }
        entries.push_back(std::move(entry));
    }
    const model::LossSpec spec{1.0, config.mkr_weight, config.mer_weight};
    return model::batch_loss(model, entries, spec);
}

TrainResult train_vanilla(const corpus::LabeledCorpus& train, const model::ModelConfig& mconfig,
                          const TrainConfig& tconfig) {
    return run_training(train, mconfig, tconfig, nullptr, nullptr);
}

TrainResult train_masker(const corpus::LabeledCorpus& train, const model::ModelConfig& mconfig,
                         const TrainConfig& tconfig, const keywords::KeywordSet& keywords,
                         const model::EncoderModel* init_from) {
    return run_training(train, mconfig, tconfig, &keywords, init_from);
}

}  // namespace masker::training
