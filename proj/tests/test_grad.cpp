#include <cmath>
#include <string>
#include <vector>

#include <doctest.h>

#include "masker/corpus.hpp"
#include "masker/model.hpp"
#include "masker/rng.hpp"

namespace {

using namespace masker;

struct GradCheckResult {
    double worst_rel = 0.0;
    std::string worst_tensor;
    std::size_t checked = 0;
};

// Central finite differences against the analytic gradient. The relative
// error uses |a - f| / max(1, |a| + |f|) so tiny gradients are compared on an
// absolute scale.
GradCheckResult grad_check(model::EncoderModel& m, const std::vector<model::BatchEntry>& batch,
                           const model::LossSpec& spec, double h) {
    model::Parameters analytic = model::Parameters::zeros_like(m.config);
    model::batch_gradients(m, batch, spec, analytic);

    GradCheckResult res;
    std::vector<std::pair<std::string, Matrix*>> tensors;
    m.params.for_each([&](const std::string& name, Matrix& t) { tensors.emplace_back(name, &t); });
    std::vector<const Matrix*> grads;
    analytic.for_each([&](const std::string&, const Matrix& t) { grads.push_back(&t); });

    for (std::size_t t = 0; t < tensors.size(); ++t) {
        Matrix& tensor = *tensors[t].second;
        const Matrix& grad = *grads[t];
        for (std::size_t i = 0; i < tensor.size(); ++i) {
            const double saved = tensor[i];
            tensor[i] = saved + h;
            const double up = model::batch_loss(m, batch, spec).total;
            tensor[i] = saved - h;
            const double down = model::batch_loss(m, batch, spec).total;
            tensor[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double a = grad[i];
            const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a) + std::abs(fd));
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.worst_tensor = tensors[t].first;
            }
            ++res.checked;
        }
    }
    return res;
}

model::EncoderModel grad_model() {
    model::ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.num_classes = 3;
    cfg.embed_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.hidden_dim = 16;
    cfg.max_length = 12;
    cfg.dropout = 0.0;  // dropout off: finite differences need a smooth loss
    cfg.init_seed = 77;
    return model::init_model(cfg);
}

std::vector<model::BatchEntry> grad_batch(std::vector<corpus::Document>& docs) {
    docs.clear();
    docs.resize(2);
    docs[0].token_ids = {3, 4, 5, 6, 7, 4};
    docs[0].label = 1;
    docs[1].token_ids = {8, 9, 10, 3};
    docs[1].label = 2;

    std::vector<model::BatchEntry> batch(2);
    batch[0].clean = &docs[0];
    model::MaskedInput kv0;
    kv0.token_ids = {3, corpus::kMaskId, 5, 6, 7, corpus::kMaskId};
    kv0.positions = {1, 5};
    kv0.targets = {4, 4};
    batch[0].keyword_view = kv0;
    model::MaskedInput cv0;
    cv0.token_ids = {corpus::kMaskId, 4, corpus::kMaskId, corpus::kMaskId, 7, 4};
    batch[0].context_view = cv0;

    batch[1].clean = &docs[1];
    model::MaskedInput kv1;
    kv1.token_ids = {8, 9, corpus::kMaskId, 3};
    kv1.positions = {2};
    kv1.targets = {10};
    batch[1].keyword_view = kv1;
    model::MaskedInput cv1;
    cv1.token_ids = {corpus::kMaskId, 9, 10, corpus::kMaskId};
    batch[1].context_view = cv1;
    return batch;
}

}  // namespace

TEST_SUITE("grad") {

TEST_CASE("analytic gradients match central differences for every loss term") {
    model::EncoderModel m = grad_model();
    std::vector<corpus::Document> docs;
    const std::vector<model::BatchEntry> batch = grad_batch(docs);
    const double h = 1e-4;

    SUBCASE("cross-entropy only") {
        const GradCheckResult r = grad_check(m, batch, {1.0, 0.0, 0.0}, h);
        CAPTURE(r.worst_tensor);
        CHECK(r.checked == m.params.count());
        CHECK(r.worst_rel < 1e-3);
    }
    SUBCASE("reconstruction only") {
        const GradCheckResult r = grad_check(m, batch, {0.0, 1.0, 0.0}, h);
        CAPTURE(r.worst_tensor);
        CHECK(r.worst_rel < 1e-3);
    }
    SUBCASE("uniformity only") {
        const GradCheckResult r = grad_check(m, batch, {0.0, 0.0, 1.0}, h);
        CAPTURE(r.worst_tensor);
        CHECK(r.worst_rel < 1e-3);
    }
    SUBCASE("weighted combination") {
        const GradCheckResult r = grad_check(m, batch, {1.0, 0.5, 0.25}, h);
        CAPTURE(r.worst_tensor);
        CHECK(r.worst_rel < 1e-3);
    }
}

TEST_CASE("gradients of the one-vs-rest head also match central differences") {
    model::ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.num_classes = 3;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.hidden_dim = 16;
    cfg.max_length = 12;
    cfg.dropout = 0.0;
    cfg.init_seed = 78;
    cfg.head_mode = model::HeadMode::one_vs_rest;
    model::EncoderModel m = model::init_model(cfg);

    std::vector<corpus::Document> docs;
    const std::vector<model::BatchEntry> batch = grad_batch(docs);
    const GradCheckResult r = grad_check(m, batch, {1.0, 0.3, 0.7}, 1e-4);
    CAPTURE(r.worst_tensor);
    CHECK(r.worst_rel < 1e-3);
}

TEST_CASE("a skipped reconstruction view contributes no gradient") {
    model::EncoderModel m = grad_model();
    corpus::Document doc;
    doc.token_ids = {3, 4, 5};
    doc.label = 0;
    std::vector<model::BatchEntry> batch(1);
    batch[0].clean = &doc;
    model::MaskedInput kv;
    kv.token_ids = {3, 4, 5};
    batch[0].keyword_view = kv;
    batch[0].skip_reconstruction = true;

    model::Parameters grads = model::Parameters::zeros_like(m.config);
    const model::LossBreakdown out = model::batch_gradients(m, batch, {0.0, 1.0, 0.0}, grads);
    CHECK(out.mkr == 0.0);
    bool all_zero = true;
    grads.for_each([&](const std::string&, const Matrix& t) {
        for (std::size_t i = 0; i < t.size(); ++i) all_zero = all_zero && t[i] == 0.0;
    });
    CHECK(all_zero);
}

}  // TEST_SUITE
