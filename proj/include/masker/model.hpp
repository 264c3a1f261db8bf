#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "masker/corpus.hpp"
#include "masker/tensor.hpp"

namespace masker::model {

enum class HeadMode { softmax_multiclass, one_vs_rest };

const char* head_mode_name(HeadMode mode);
HeadMode head_mode_from_name(const std::string& name);

struct ModelConfig {
    int vocab_size = 0;
    int num_classes = 0;
    int embed_dim = 64;
    int num_layers = 2;
    int num_heads = 2;
    int hidden_dim = 128;
    int max_length = corpus::kDefaultMaxLength;
    HeadMode head_mode = HeadMode::softmax_multiclass;
    double dropout = 0.1;
    std::uint64_t init_seed = 0;

    void validate() const;
    int head_dim() const { return embed_dim / num_heads; }
};

struct LayerParams {
    Matrix wq, wk, wv, wo;      // d x d
    Matrix bq, bk, bv, bo;      // 1 x d
    Matrix ln1_gain, ln1_bias;  // 1 x d
    Matrix ff_w1;               // d x hidden
    Matrix ff_b1;               // 1 x hidden
    Matrix ff_w2;               // hidden x d
    Matrix ff_b2;               // 1 x d
    Matrix ln2_gain, ln2_bias;  // 1 x d
};

/// All trainable tensors. The same struct doubles as a gradient and as Adam
/// moment storage; for_each visits tensors in a fixed documented order that
/// the checkpoint layout and the optimizer rely on.
struct Parameters {
    Matrix token_embedding;     // V x d
    Matrix position_embedding;  // (max_length + 1) x d, row 0 = summary slot
    Matrix summary_embedding;   // 1 x d
    std::vector<LayerParams> layers;
    Matrix doc_w;  // d x C
    Matrix doc_b;  // 1 x C
    Matrix tok_w;  // d x V
    Matrix tok_b;  // 1 x V

    template <typename Self, typename Fn>
    static void visit(Self& self, Fn&& fn) {
        fn("token_embedding", self.token_embedding);
        fn("position_embedding", self.position_embedding);
        fn("summary_embedding", self.summary_embedding);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& lay = self.layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "wq", lay.wq); fn(p + "bq", lay.bq);
            fn(p + "wk", lay.wk); fn(p + "bk", lay.bk);
            fn(p + "wv", lay.wv); fn(p + "bv", lay.bv);
            fn(p + "wo", lay.wo); fn(p + "bo", lay.bo);
            fn(p + "ln1_gain", lay.ln1_gain); fn(p + "ln1_bias", lay.ln1_bias);
            fn(p + "ff_w1", lay.ff_w1); fn(p + "ff_b1", lay.ff_b1);
            fn(p + "ff_w2", lay.ff_w2); fn(p + "ff_b2", lay.ff_b2);
            fn(p + "ln2_gain", lay.ln2_gain); fn(p + "ln2_bias", lay.ln2_bias);
        }
        fn("doc_w", self.doc_w); fn("doc_b", self.doc_b);
        fn("tok_w", self.tok_w); fn("tok_b", self.tok_b);
    }

    template <typename Fn> void for_each(Fn&& fn) { visit(*this, fn); }
    template <typename Fn> void for_each(Fn&& fn) const { visit(*this, fn); }

    static Parameters zeros_like(const ModelConfig& config);
    std::size_t count() const;
    void zero();
    void add_scaled(const Parameters& other, double alpha);
};

struct EncoderModel {
    ModelConfig config;
    Parameters params;
};

/// Deterministic initialization: weights and embeddings uniform in
/// +-1/sqrt(embed_dim), biases zero, layer-norm gains one.
EncoderModel init_model(const ModelConfig& config);

/// Attention weights over token positions as seen from the document summary
/// slot: final layer, head-averaged, summary slot excluded, renormalized to
/// sum 1. Length equals the document length.
struct AttentionTrace {
    std::vector<double> weights;
};

struct ForwardResult {
    HeadMode head_mode = HeadMode::softmax_multiclass;
    std::vector<double> doc_embedding;  // d
    Matrix token_embeddings;            // T x d
    std::vector<double> doc_logits;     // C
    Matrix token_logits;                // T x V
    AttentionTrace attention;
};

ForwardResult forward(const EncoderModel& model, const corpus::Document& doc,
                      bool train_mode = false, std::uint64_t dropout_seed = 0);

/// Per-class probabilities: softmax distribution or independent sigmoids.
std::vector<double> class_probabilities(const ForwardResult& result);
double cross_entropy_doc(const ForwardResult& result, int label);
double confidence(const ForwardResult& result);
int predicted_label(const ForwardResult& result);

AttentionTrace attention_trace(const EncoderModel& model, const corpus::Document& doc);
std::vector<AttentionTrace> collect_traces(const EncoderModel& model,
                                           const corpus::LabeledCorpus& corpus);

// --- masked views and batched objectives ---

/// A document view with MASK substituted at selected positions; `targets`
/// holds the original vocabulary ids for reconstruction views.
struct MaskedInput {
    std::vector<int> token_ids;
    std::vector<std::size_t> positions;
    std::vector<int> targets;
};

struct BatchEntry {
    const corpus::Document* clean = nullptr;
    std::optional<MaskedInput> keyword_view;  // reconstruction view
    std::optional<MaskedInput> context_view;  // entropy-regularization view
    bool skip_reconstruction = false;         // document carries no keywords
};

struct LossSpec {
    double ce_weight = 1.0;
    double mkr_weight = 0.0;
    double mer_weight = 0.0;
};

/// Batch-mean values of the individual terms; total applies the weights.
struct LossBreakdown {
    double ce = 0.0;
    double mkr = 0.0;
    double mer = 0.0;
    double total = 0.0;
};

/// Reconstruction loss of one masked view: sum of token-level cross-entropies
/// at the masked positions (0 when no position is masked).
double reconstruction_loss(const EncoderModel& model, const MaskedInput& view);

/// Uniformity loss of one masked view: KL(uniform || predicted distribution)
/// for the softmax head, mean per-class KL(Bernoulli(0.5) || Bernoulli(sigma))
/// for the 1-vs-rest head.
double uniformity_loss(const EncoderModel& model, const MaskedInput& view);

LossBreakdown batch_loss(const EncoderModel& model, const std::vector<BatchEntry>& batch,
                         const LossSpec& spec, bool train_mode = false,
                         std::uint64_t step_seed = 0);

/// Exact gradients of the batch_loss scalar with respect to every parameter.
/// Per-document contributions are computed independently and reduced in
/// ascending document order, so the result does not depend on thread count.
LossBreakdown batch_gradients(const EncoderModel& model, const std::vector<BatchEntry>& batch,
                              const LossSpec& spec, Parameters& grads, bool train_mode = false,
                              std::uint64_t step_seed = 0);

// --- optimizer ---

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double embedding_lr_scale = 1.0;  // per-group multiplier for embedding tensors
};

class AdamOptimizer {
public:
    AdamOptimizer(const ModelConfig& config, const AdamConfig& adam);
    void step(Parameters& params, const Parameters& grads);

private:
    AdamConfig cfg_;
    Parameters m_, v_;
    long t_ = 0;
};

// --- checkpoints ---

/// Self-describing binary container: magic + version, a JSON header with the
/// config, seed, config hash and tensor directory, then row-major float32
/// payload in for_each order.
void save_checkpoint(const EncoderModel& model, const std::string& path, std::uint64_t seed,
                     const std::string& config_hash);

struct Checkpoint {
    EncoderModel model;
    std::uint64_t seed = 0;
    std::string config_hash;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace masker::model
