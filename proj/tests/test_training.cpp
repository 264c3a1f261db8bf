#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "masker/corpus.hpp"
#include "masker/errors.hpp"
#include "masker/keywords.hpp"
#include "masker/model.hpp"
#include "masker/rng.hpp"
#include "masker/training.hpp"

namespace {

namespace fs = std::filesystem;
using namespace masker;

keywords::KeywordSet make_keyword_set(std::vector<int> tokens, std::vector<int> classes,
                                      int num_classes) {
    keywords::KeywordSet set;
    set.scheme = keywords::Scheme::frequency;
    set.mode = keywords::SelectionMode::class_agnostic;
    set.requested_k = static_cast<int>(tokens.size());
    set.num_classes = num_classes;
    set.scores.assign(tokens.size(), 1.0);
    set.tokens = std::move(tokens);
    set.classes = std::move(classes);
    set.rebuild_lookup();
    return set;
}

corpus::Document make_doc(std::vector<int> ids, int label = 0) {
    corpus::Document d;
    d.token_ids = std::move(ids);
    d.label = label;
    return d;
}

corpus::SyntheticSpec tiny_spec(std::uint64_t seed) {
    corpus::SyntheticSpec spec;
    spec.num_classes = 2;
    spec.context_vocab_size = 10;
    spec.doc_len_min = 5;
    spec.doc_len_max = 8;
    spec.train_docs_per_class = 8;
    spec.test_docs_per_class = 4;
    spec.ood_docs = 8;
    spec.crossdomain_docs_per_class = 4;
    spec.seed = seed;
    return spec;
}

model::ModelConfig tiny_model_config(const corpus::LabeledCorpus& c, std::uint64_t seed) {
    model::ModelConfig cfg;
    cfg.vocab_size = c.vocab->size();
    cfg.num_classes = c.num_classes;
    cfg.embed_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.hidden_dim = 16;
    cfg.max_length = 16;
    cfg.dropout = 0.1;
    cfg.init_seed = seed;
    return cfg;
}

bool params_equal(const model::Parameters& a, const model::Parameters& b) {
    std::vector<const Matrix*> av, bv;
    a.for_each([&](const std::string&, const Matrix& m) { av.push_back(&m); });
    b.for_each([&](const std::string&, const Matrix& m) { bv.push_back(&m); });
    if (av.size() != bv.size()) return false;
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (!(*av[i] == *bv[i])) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("keyword masking covers exactly the keyword positions") {
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    const corpus::Document doc = make_doc({5, 6, 5, 7, 5});
    Rng rng(1);

    const training::MaskPlan all = training::sample_keyword_mask(doc, set, 1.0, rng);
    CHECK(all.kind == training::MaskKind::keyword);
    CHECK(all.positions == std::vector<std::size_t>{0, 2, 4});
    CHECK(all.prob == 1.0);
    CHECK_FALSE(all.skip_mkr);

    const training::MaskPlan none = training::sample_keyword_mask(doc, set, 0.0, rng);
    CHECK(none.positions.empty());
    CHECK_FALSE(none.skip_mkr);  // the document does carry keywords

    const corpus::Document no_kw = make_doc({6, 7, 8});
    const training::MaskPlan skip = training::sample_keyword_mask(no_kw, set, 1.0, rng);
    CHECK(skip.positions.empty());
    CHECK(skip.skip_mkr);
}

TEST_CASE("context masking covers exactly the non-keyword positions") {
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    const corpus::Document doc = make_doc({5, 6, 5, 7});
    Rng rng(2);
    const training::MaskPlan all = training::sample_context_mask(doc, set, 1.0, rng);
    CHECK(all.kind == training::MaskKind::context);
    CHECK(all.positions == std::vector<std::size_t>{1, 3});
    const training::MaskPlan none = training::sample_context_mask(doc, set, 0.0, rng);
    CHECK(none.positions.empty());
}

TEST_CASE("reserved tokens are never masked") {
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    const corpus::Document doc =
        make_doc({corpus::kPadId, corpus::kMaskId, corpus::kUnkId, 5, 6});
    Rng rng(3);
    const training::MaskPlan kw = training::sample_keyword_mask(doc, set, 1.0, rng);
    CHECK(kw.positions == std::vector<std::size_t>{3});
    const training::MaskPlan ctx = training::sample_context_mask(doc, set, 1.0, rng);
    CHECK(ctx.positions == std::vector<std::size_t>{4});
}

TEST_CASE("mask sampling rates converge to their probabilities") {
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    std::vector<int> ids;
    for (int i = 0; i < 20000; ++i) ids.push_back(i % 2 == 0 ? 5 : 6);
    const corpus::Document doc = make_doc(std::move(ids));

    Rng rng(4);
    const training::MaskPlan kw = training::sample_keyword_mask(doc, set, 0.5, rng);
    const double kw_rate = static_cast<double>(kw.positions.size()) / 10000.0;
    CHECK(std::abs(kw_rate - 0.5) < 0.03);
    for (std::size_t p : kw.positions) CHECK(doc.token_ids[p] == 5);

    const training::MaskPlan ctx = training::sample_context_mask(doc, set, 0.9, rng);
    const double ctx_rate = static_cast<double>(ctx.positions.size()) / 10000.0;
    CHECK(std::abs(ctx_rate - 0.9) < 0.03);
    for (std::size_t p : ctx.positions) CHECK(doc.token_ids[p] == 6);
}

TEST_CASE("mask sampling is seed-deterministic") {
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    std::vector<int> ids;
    for (int i = 0; i < 100; ++i) ids.push_back(5 + (i % 3));
    const corpus::Document doc = make_doc(std::move(ids));
    Rng a(11), b(11), c(12);
    const auto pa = training::sample_keyword_mask(doc, set, 0.5, a).positions;
    const auto pb = training::sample_keyword_mask(doc, set, 0.5, b).positions;
    const auto pc = training::sample_keyword_mask(doc, set, 0.5, c).positions;
    CHECK(pa == pb);
    CHECK(pa != pc);
}

TEST_CASE("invalid mask probabilities are rejected") {
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    const corpus::Document doc = make_doc({5, 6});
    Rng rng(5);
    CHECK_THROWS_AS(training::sample_keyword_mask(doc, set, -0.1, rng), ConfigError);
    CHECK_THROWS_AS(training::sample_context_mask(doc, set, 1.5, rng), ConfigError);
}

TEST_CASE("apply_mask substitutes MASK and records the original targets") {
    const corpus::Document doc = make_doc({5, 6, 7, 8});
    training::MaskPlan plan;
    plan.kind = training::MaskKind::keyword;
    plan.positions = {1, 3};
    const training::MaskedDocument masked = training::apply_mask(doc, plan);
    CHECK(masked.masked_ids == std::vector<int>{5, corpus::kMaskId, 7, corpus::kMaskId});
    CHECK(masked.targets == std::vector<int>{6, 8});
    CHECK(masked.original == &doc);

    const model::MaskedInput view = masked.to_input();
    CHECK(view.token_ids == masked.masked_ids);
    CHECK(view.positions == plan.positions);
    CHECK(view.targets == masked.targets);

    training::MaskPlan empty;
    const training::MaskedDocument untouched = training::apply_mask(doc, empty);
    CHECK(untouched.masked_ids == doc.token_ids);
    CHECK(untouched.targets.empty());

    training::MaskPlan bad;
    bad.positions = {9};
    CHECK_THROWS_AS(training::apply_mask(doc, bad), DataError);
}

TEST_CASE("mkr and mer losses validate the mask kind") {
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(31));
    const model::EncoderModel m = model::init_model(tiny_model_config(data.train, 1));
    const keywords::KeywordSet set = make_keyword_set({5}, {0}, 2);
    const corpus::Document doc = make_doc({5, 6, 7});
    Rng rng(6);

    training::MaskedDocument kw =
        training::apply_mask(doc, training::sample_keyword_mask(doc, set, 1.0, rng));
    training::MaskedDocument ctx =
        training::apply_mask(doc, training::sample_context_mask(doc, set, 1.0, rng));

    CHECK_THROWS_AS(training::mkr_loss(m, ctx), DataError);
    CHECK_THROWS_AS(training::mer_loss(m, kw), DataError);

    // matching kinds agree with the model-level losses on the same view
    CHECK(training::mkr_loss(m, kw) ==
          doctest::Approx(model::reconstruction_loss(m, kw.to_input())).epsilon(1e-15));
    CHECK(training::mer_loss(m, ctx) ==
          doctest::Approx(model::uniformity_loss(m, ctx.to_input())).epsilon(1e-15));

    // a skipped document contributes exactly zero reconstruction loss
    training::MaskedDocument skipped = kw;
    skipped.plan.skip_mkr = true;
    CHECK(training::mkr_loss(m, skipped) == 0.0);
}

TEST_CASE("total_loss equals a manual replay of mask sampling and loss terms") {
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(32));
    const corpus::LabeledCorpus& train = data.train;
    model::ModelConfig mcfg = tiny_model_config(train, 2);
    const model::EncoderModel m = model::init_model(mcfg);

    const keywords::ScoreTable table = keywords::frequency_scores(train);
    const keywords::KeywordSet set =
        keywords::select_keywords(table, 4, keywords::SelectionMode::class_agnostic, *train.vocab);

    training::TrainConfig tcfg;
    tcfg.mkr_weight = 0.01;
    tcfg.mer_weight = 0.002;
    std::vector<const corpus::Document*> batch;
    for (std::size_t i = 0; i < 6; ++i) batch.push_back(&train.documents[i]);

    Rng replay(99);
    double ce = 0.0, mkr = 0.0, mer = 0.0;
    for (const corpus::Document* doc : batch) {
        ce += model::cross_entropy_doc(model::forward(m, *doc), doc->label);
        const training::MaskPlan kw_plan =
            training::sample_keyword_mask(*doc, set, tcfg.keyword_mask_prob, replay);
        if (!kw_plan.skip_mkr) {
            mkr += model::reconstruction_loss(m, training::apply_mask(*doc, kw_plan).to_input());
        }
        const training::MaskPlan ctx_plan =
            training::sample_context_mask(*doc, set, tcfg.context_mask_prob, replay);
        mer += model::uniformity_loss(m, training::apply_mask(*doc, ctx_plan).to_input());
    }
    const double n = static_cast<double>(batch.size());
    ce /= n;
    mkr /= n;
    mer /= n;

    Rng rng(99);
    const model::LossBreakdown got = training::total_loss(m, batch, set, tcfg, rng);
    CHECK(got.ce == doctest::Approx(ce).epsilon(1e-12));
    CHECK(got.mkr == doctest::Approx(mkr).epsilon(1e-12));
    CHECK(got.mer == doctest::Approx(mer).epsilon(1e-12));
    CHECK(got.total ==
          doctest::Approx(ce + tcfg.mkr_weight * mkr + tcfg.mer_weight * mer).epsilon(1e-12));
}

TEST_CASE("train config validation") {
    training::TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = training::TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = training::TrainConfig{};
    cfg.keyword_mask_prob = 1.2;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = training::TrainConfig{};
    cfg.mkr_weight = -0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = training::TrainConfig{};
    cfg.adam.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("vanilla training is deterministic in the seed") {
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(33));
    const model::ModelConfig mcfg = tiny_model_config(data.train, 3);
    training::TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    tcfg.seed = 7;

    const training::TrainResult a = training::train_vanilla(data.train, mcfg, tcfg);
    const training::TrainResult b = training::train_vanilla(data.train, mcfg, tcfg);
    CHECK(params_equal(a.model.params, b.model.params));
    REQUIRE(a.history.size() == b.history.size());
    CHECK(a.history.size() == 4);  // 16 docs / batch 8 * 2 epochs
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].step == i);
        CHECK(a.history[i].loss.total == b.history[i].loss.total);
    }

    tcfg.seed = 8;
    const training::TrainResult c = training::train_vanilla(data.train, mcfg, tcfg);
    CHECK_FALSE(params_equal(a.model.params, c.model.params));
}

TEST_CASE("masker training with zero weights reproduces the vanilla trajectory") {
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(34));
    const model::ModelConfig mcfg = tiny_model_config(data.train, 4);
    training::TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    tcfg.seed = 9;
    tcfg.mkr_weight = 0.0;
    tcfg.mer_weight = 0.0;

    const keywords::ScoreTable table = keywords::frequency_scores(data.train);
    const keywords::KeywordSet set =
        keywords::select_keywords(table, 4, keywords::SelectionMode::class_agnostic,
                                  *data.train.vocab);

    const training::TrainResult vanilla = training::train_vanilla(data.train, mcfg, tcfg);
    const training::TrainResult masker = training::train_masker(data.train, mcfg, tcfg, set);
    CHECK(params_equal(vanilla.model.params, masker.model.params));
    REQUIRE(vanilla.history.size() == masker.history.size());
    for (std::size_t i = 0; i < vanilla.history.size(); ++i) {
        CHECK(vanilla.history[i].loss.total == masker.history[i].loss.total);
    }
}

TEST_CASE("masker training regularizes while still minimizing cross-entropy") {
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(35));
    const model::ModelConfig mcfg = tiny_model_config(data.train, 5);
    training::TrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.batch_size = 8;
    tcfg.seed = 10;
    tcfg.mkr_weight = 0.01;
    tcfg.mer_weight = 0.01;

    const keywords::ScoreTable table = keywords::frequency_scores(data.train);
    const keywords::KeywordSet set =
        keywords::select_keywords(table, 4, keywords::SelectionMode::class_agnostic,
                                  *data.train.vocab);
    const training::TrainResult result = training::train_masker(data.train, mcfg, tcfg, set);
    REQUIRE(result.history.size() == 6);
    CHECK(result.history.back().loss.ce < result.history.front().loss.ce);
    for (const auto& rec : result.history) {
        CHECK(std::isfinite(rec.loss.total));
        CHECK(rec.loss.mkr >= 0.0);
        CHECK(rec.loss.mer >= 0.0);
    }
}

TEST_CASE("training writes a parseable per-step log") {
    const fs::path dir = fs::temp_directory_path() / "masker_tests" / "trainlog";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(36));
    const model::ModelConfig mcfg = tiny_model_config(data.train, 6);
    training::TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 8;
    tcfg.log_path = (dir / "log.jsonl").string();

    training::train_vanilla(data.train, mcfg, tcfg);
    std::ifstream in(tcfg.log_path);
    REQUIRE(in.good());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.at("step").get<std::size_t>() == lines);
        CHECK(std::isfinite(j.at("ce").get<double>()));
        CHECK(j.contains("mkr"));
        CHECK(j.contains("mer"));
        CHECK(j.contains("total"));
        ++lines;
    }
    CHECK(lines == 2);  // 16 docs / batch 8 * 1 epoch
}

TEST_CASE("divergence raises a dedicated error") {
    const corpus::SyntheticData data = corpus::generate_synthetic(tiny_spec(37));
    const model::ModelConfig mcfg = tiny_model_config(data.train, 7);
    training::TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    // large enough that the first update overflows the attention scores to
    // inf and the loss turns NaN on the next step (layer norm would absorb
    // any merely-large learning rate)
    tcfg.adam.learning_rate = 1e200;
    CHECK_THROWS_AS(training::train_vanilla(data.train, mcfg, tcfg), DivergenceError);
}

TEST_CASE("training rejects inconsistent corpora") {
    const model::ModelConfig mcfg = tiny_model_config(corpus::generate_synthetic(tiny_spec(38)).train, 8);
    corpus::LabeledCorpus empty;
    empty.num_classes = 2;
    training::TrainConfig tcfg;
    CHECK_THROWS_AS(training::train_vanilla(empty, mcfg, tcfg), DataError);
}

}  // TEST_SUITE
