#include "masker/cli.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "masker/corpus.hpp"
#include "masker/errors.hpp"
#include "masker/eval.hpp"
#include "masker/kernels.hpp"
#include "masker/keywords.hpp"
#include "masker/model.hpp"
#include "masker/rng.hpp"
#include "masker/training.hpp"

namespace masker::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Stream tag for the substitution attack; training owns 16..18, corpus
// generation owns 1..4.
constexpr std::uint64_t kAttackStream = 19;

struct ExperimentConfig {
    std::string out_dir = "out";
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    corpus::SyntheticSpec synthetic;
    model::ModelConfig model;     // vocab_size/num_classes/init_seed resolved per run
    training::TrainConfig train;  // seed/log_path resolved per run
    keywords::Scheme scheme = keywords::Scheme::frequency;
    keywords::SelectionMode mode = keywords::SelectionMode::class_agnostic;
    int k_multiplier = 10;
};

std::string fmt(double v, const char* spec = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* name : allowed) {
            if (item.key() == name) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError("unknown key '" + item.key() + "' in " + section);
    }
}

template <typename T>
void read_into(const json& j, const char* key, T& value) {
    if (j.contains(key)) value = j.at(key).get<T>();
}

ExperimentConfig load_config(const std::string& path) {
    ExperimentConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed config " + path + ": " + e.what());
    }
    check_keys(j, "config", {"out_dir", "seeds", "synthetic", "model", "train", "keywords"});
    try {
        read_into(j, "out_dir", cfg.out_dir);
        read_into(j, "seeds", cfg.seeds);
        if (j.contains("synthetic")) {
            const json& s = j.at("synthetic");
            check_keys(s, "synthetic",
                       {"num_classes", "keywords_per_class", "context_vocab_size", "doc_len_min",
                        "doc_len_max", "keyword_injection_rate", "keyword_copies",
                        "ood_keyword_overlap_rate", "context_affinity", "crossdomain_swap",
                        "train_docs_per_class", "test_docs_per_class", "ood_docs",
                        "crossdomain_docs_per_class", "seed"});
            read_into(s, "num_classes", cfg.synthetic.num_classes);
            read_into(s, "keywords_per_class", cfg.synthetic.keywords_per_class);
            read_into(s, "context_vocab_size", cfg.synthetic.context_vocab_size);
            read_into(s, "doc_len_min", cfg.synthetic.doc_len_min);
            read_into(s, "doc_len_max", cfg.synthetic.doc_len_max);
            read_into(s, "keyword_injection_rate", cfg.synthetic.keyword_injection_rate);
            read_into(s, "keyword_copies", cfg.synthetic.keyword_copies);
            read_into(s, "ood_keyword_overlap_rate", cfg.synthetic.ood_keyword_overlap_rate);
            read_into(s, "context_affinity", cfg.synthetic.context_affinity);
            read_into(s, "crossdomain_swap", cfg.synthetic.crossdomain_swap);
            read_into(s, "train_docs_per_class", cfg.synthetic.train_docs_per_class);
            read_into(s, "test_docs_per_class", cfg.synthetic.test_docs_per_class);
            read_into(s, "ood_docs", cfg.synthetic.ood_docs);
            read_into(s, "crossdomain_docs_per_class", cfg.synthetic.crossdomain_docs_per_class);
            read_into(s, "seed", cfg.synthetic.seed);
        }
        if (j.contains("model")) {
            const json& m = j.at("model");
            check_keys(m, "model",
                       {"embed_dim", "num_layers", "num_heads", "hidden_dim", "max_length",
                        "head_mode", "dropout"});
            read_into(m, "embed_dim", cfg.model.embed_dim);
            read_into(m, "num_layers", cfg.model.num_layers);
            read_into(m, "num_heads", cfg.model.num_heads);
            read_into(m, "hidden_dim", cfg.model.hidden_dim);
            read_into(m, "max_length", cfg.model.max_length);
            if (m.contains("head_mode")) {
                cfg.model.head_mode =
                    model::head_mode_from_name(m.at("head_mode").get<std::string>());
            }
            read_into(m, "dropout", cfg.model.dropout);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            check_keys(t, "train",
                       {"epochs", "batch_size", "keyword_mask_prob", "context_mask_prob",
                        "mkr_weight", "mer_weight", "learning_rate", "embedding_lr_scale"});
            read_into(t, "epochs", cfg.train.epochs);
            read_into(t, "batch_size", cfg.train.batch_size);
            read_into(t, "keyword_mask_prob", cfg.train.keyword_mask_prob);
            read_into(t, "context_mask_prob", cfg.train.context_mask_prob);
            read_into(t, "mkr_weight", cfg.train.mkr_weight);
            read_into(t, "mer_weight", cfg.train.mer_weight);
            read_into(t, "learning_rate", cfg.train.adam.learning_rate);
            read_into(t, "embedding_lr_scale", cfg.train.adam.embedding_lr_scale);
        }
        if (j.contains("keywords")) {
            const json& k = j.at("keywords");
            check_keys(k, "keywords", {"scheme", "mode", "k_multiplier"});
            if (k.contains("scheme")) {
                cfg.scheme = keywords::scheme_from_name(k.at("scheme").get<std::string>());
            }
            if (k.contains("mode")) {
                cfg.mode = keywords::selection_mode_from_name(k.at("mode").get<std::string>());
            }
            read_into(k, "k_multiplier", cfg.k_multiplier);
        }
    } catch (const json::exception& e) {
        throw ConfigError("bad value in config " + path + ": " + e.what());
    }
    if (cfg.seeds.empty()) throw ConfigError("seeds must not be empty");
    if (cfg.k_multiplier <= 0) throw ConfigError("k_multiplier must be positive");
    return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
    const auto& s = cfg.synthetic;
    const auto& m = cfg.model;
    const auto& t = cfg.train;
    json j;
    j["synthetic"] = json{{"num_classes", s.num_classes},
                          {"keywords_per_class", s.keywords_per_class},
                          {"context_vocab_size", s.context_vocab_size},
                          {"doc_len_min", s.doc_len_min},
                          {"doc_len_max", s.doc_len_max},
                          {"keyword_injection_rate", s.keyword_injection_rate},
                          {"keyword_copies", s.keyword_copies},
                          {"ood_keyword_overlap_rate", s.ood_keyword_overlap_rate},
                          {"context_affinity", s.context_affinity},
                          {"crossdomain_swap", s.crossdomain_swap},
                          {"train_docs_per_class", s.train_docs_per_class},
                          {"test_docs_per_class", s.test_docs_per_class},
                          {"ood_docs", s.ood_docs},
                          {"crossdomain_docs_per_class", s.crossdomain_docs_per_class},
                          {"seed", s.seed}};
    j["model"] = json{{"embed_dim", m.embed_dim},
                      {"num_layers", m.num_layers},
                      {"num_heads", m.num_heads},
                      {"hidden_dim", m.hidden_dim},
                      {"max_length", m.max_length},
                      {"head_mode", model::head_mode_name(m.head_mode)},
                      {"dropout", m.dropout}};
    j["train"] = json{{"epochs", t.epochs},
                      {"batch_size", t.batch_size},
                      {"keyword_mask_prob", t.keyword_mask_prob},
                      {"context_mask_prob", t.context_mask_prob},
                      {"mkr_weight", t.mkr_weight},
                      {"mer_weight", t.mer_weight},
                      {"learning_rate", t.adam.learning_rate},
                      {"embedding_lr_scale", t.adam.embedding_lr_scale}};
    j["keywords"] = json{{"scheme", keywords::scheme_name(cfg.scheme)},
                         {"mode", keywords::selection_mode_name(cfg.mode)},
                         {"k_multiplier", cfg.k_multiplier}};
    return j;
}

// The hash identifies the behavioural configuration; out_dir and the seed
// list are orchestration and stay out of it (the seed is stamped separately).
std::string config_hash(const ExperimentConfig& cfg) {
    return eval::fnv1a_hex(config_to_json(cfg).dump());
}

struct Paths {
    fs::path out;

    explicit Paths(const std::string& dir) : out(dir) {}
    fs::path corpus_file(const std::string& split) const { return out / (split + ".jsonl"); }
    fs::path vocab_file() const { return out / "vocab.txt"; }
    fs::path keywords_file() const { return out / "keywords.json"; }
    fs::path config_file() const { return out / "config.json"; }
    fs::path summary_file(const char* ext) const { return out / (std::string("summary.") + ext); }
    fs::path seed_dir(std::uint64_t seed) const { return out / ("seed" + std::to_string(seed)); }
    fs::path checkpoint(std::uint64_t seed, const std::string& method) const {
        return seed_dir(seed) / (method + ".ckpt");
    }
    fs::path train_log(std::uint64_t seed, const std::string& method) const {
        return seed_dir(seed) / (method + "_train_log.jsonl");
    }
    fs::path report(std::uint64_t seed, const std::string& method, const std::string& target,
                    const char* ext) const {
        return seed_dir(seed) / (method + "_" + target + "_report." + ext);
    }
    fs::path embeddings(std::uint64_t seed, const std::string& method,
                        const std::string& split) const {
        return seed_dir(seed) / (method + "_embeddings_" + split + ".csv");
    }
};

// Adds provenance fields to an existing JSON artifact in place.
void stamp_json_file(const fs::path& path, const std::string& hash, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open for stamping: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("malformed JSON " + path.string() + ": " + e.what());
    }
    in.close();
    j["config_hash"] = hash;
    j["seed"] = seed;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
}

corpus::LabeledCorpus load_split(const Paths& paths, const std::string& split) {
    return corpus::load_corpus(paths.corpus_file(split).string());
}

model::ModelConfig resolved_model(const ExperimentConfig& cfg, const corpus::LabeledCorpus& data,
                                  std::uint64_t seed) {
    model::ModelConfig m = cfg.model;
    m.vocab_size = data.vocab->size();
    m.num_classes = data.num_classes;
    m.init_seed = seed;
    m.validate();
    return m;
}

// Runs fn(index, seed) for every seed; opt-in parallelism keeps sequential
// execution the default so logs stay ordered.
template <typename Fn>
void run_per_seed(const std::vector<std::uint64_t>& seeds, bool parallel, Fn&& fn) {
    if (!parallel || seeds.size() <= 1) {
        for (std::size_t i = 0; i < seeds.size(); ++i) fn(i, seeds[i]);
        return;
    }
    std::vector<std::exception_ptr> errors(seeds.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(seeds.size()); ++i) {
        try {
            fn(static_cast<std::size_t>(i), seeds[i]);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (const auto& err : errors) {
        if (err) std::rethrow_exception(err);
    }
}

void write_report_files(const Paths& paths, std::uint64_t seed, const std::string& method,
                        const std::string& target, const eval::ReliabilityReport& report) {
    const fs::path jpath = paths.report(seed, method, target, "json");
    std::ofstream jout(jpath);
    if (!jout) throw DataError("cannot open for writing: " + jpath.string());
    jout << eval::report_to_json(report);
    const fs::path cpath = paths.report(seed, method, target, "csv");
    std::ofstream cout_(cpath);
    if (!cout_) throw DataError("cannot open for writing: " + cpath.string());
    cout_ << eval::report_csv_header() << '\n' << eval::report_csv_row(report) << '\n';
}

int cmd_gen_synthetic(const ExperimentConfig& cfg) {
    const std::string hash = config_hash(cfg);
    const Paths paths(cfg.out_dir);
    cfg.synthetic.validate();
    const corpus::SyntheticData data = corpus::generate_synthetic(cfg.synthetic);
    fs::create_directories(paths.out);
    const struct {
        const char* name;
        const corpus::LabeledCorpus* split;
    } splits[] = {{"train", &data.train},
                  {"test_id", &data.test_id},
                  {"test_ood", &data.test_ood},
                  {"test_crossdomain", &data.test_crossdomain}};
    for (const auto& s : splits) {
        const fs::path path = paths.corpus_file(s.name);
        corpus::save_corpus(*s.split, path.string());
        stamp_json_file(corpus::sidecar_path(path.string()), hash, cfg.synthetic.seed);
        std::cout << s.name << ": " << s.split->documents.size() << " docs -> " << path.string()
                  << '\n';
    }
    corpus::save_vocabulary(*data.train.vocab, paths.vocab_file().string());
    json effective = config_to_json(cfg);
    effective["config_hash"] = hash;
    effective["seed"] = cfg.synthetic.seed;
    std::ofstream cfg_out(paths.config_file());
    if (!cfg_out) throw DataError("cannot open for writing: " + paths.config_file().string());
    cfg_out << effective.dump(2) << '\n';
    std::cout << "vocabulary: " << data.train.vocab->size() << " tokens -> "
              << paths.vocab_file().string() << '\n';
    return 0;
}

int cmd_build_vocab(const ExperimentConfig& cfg, const std::string& input, int min_count) {
    if (min_count < 1) throw ConfigError("--min-count must be >= 1");
    std::ifstream in(input);
    if (!in) throw DataError("cannot open corpus: " + input);
    std::vector<std::string> texts;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("malformed JSONL at " + input + ":" + std::to_string(line_no) + ": " +
                            e.what());
        }
        if (!obj.contains("text") || !obj["text"].is_string()) {
            throw DataError("malformed JSONL at " + input + ":" + std::to_string(line_no) +
                            ": need string \"text\"");
        }
        texts.push_back(obj["text"].get<std::string>());
    }
    const corpus::Vocabulary vocab = corpus::build_vocabulary(texts, min_count);
    const Paths paths(cfg.out_dir);
    fs::create_directories(paths.out);
    corpus::save_vocabulary(vocab, paths.vocab_file().string());
    std::cout << "vocabulary: " << vocab.size() << " tokens -> " << paths.vocab_file().string()
              << '\n';
    return 0;
}

int cmd_select_keywords(const ExperimentConfig& cfg, std::uint64_t seed,
                        const std::string& checkpoint) {
    const std::string hash = config_hash(cfg);
    const Paths paths(cfg.out_dir);
    const corpus::LabeledCorpus train = load_split(paths, "train");
    const int k = cfg.k_multiplier * train.num_classes;
    keywords::ScoreTable table;
    if (cfg.scheme == keywords::Scheme::frequency) {
        table = keywords::frequency_scores(train);
    } else {
        model::EncoderModel scorer;
        if (!checkpoint.empty()) {
            scorer = model::load_checkpoint(checkpoint).model;
        } else {
            training::TrainConfig tcfg = cfg.train;
            tcfg.seed = seed;
            tcfg.log_path.clear();
            scorer = training::train_vanilla(train, resolved_model(cfg, train, seed), tcfg).model;
        }
        table = keywords::attention_scores(train, model::collect_traces(scorer, train));
    }
    const keywords::KeywordSet set = keywords::select_keywords(table, k, cfg.mode, *train.vocab);
    keywords::save_keywords(set, *train.vocab, paths.keywords_file().string());
    stamp_json_file(paths.keywords_file(), hash, seed);
    std::cout << "selected " << set.size() << " keywords (" << keywords::scheme_name(set.scheme)
              << ", " << keywords::selection_mode_name(set.mode) << ") -> "
              << paths.keywords_file().string() << '\n';
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& method, bool parallel_seeds) {
    const std::string hash = config_hash(cfg);
    const Paths paths(cfg.out_dir);
    const corpus::LabeledCorpus train = load_split(paths, "train");
    keywords::KeywordSet kws;
    if (method == "masker") {
        kws = keywords::load_keywords(paths.keywords_file().string(), *train.vocab);
    }
    run_per_seed(cfg.seeds, parallel_seeds, [&](std::size_t, std::uint64_t seed) {
        fs::create_directories(paths.seed_dir(seed));
        training::TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;
        tcfg.log_path = paths.train_log(seed, method).string();
        const model::ModelConfig mcfg = resolved_model(cfg, train, seed);
        const training::TrainResult result =
            method == "masker" ? training::train_masker(train, mcfg, tcfg, kws)
                               : training::train_vanilla(train, mcfg, tcfg);
        model::save_checkpoint(result.model, paths.checkpoint(seed, method).string(), seed, hash);
    });
    for (std::uint64_t seed : cfg.seeds) {
        std::cout << method << " seed " << seed << ": checkpoint -> "
                  << paths.checkpoint(seed, method).string() << '\n';
    }
    return 0;
}

int cmd_eval_ood(const ExperimentConfig& cfg, const std::string& method, bool with_embeddings,
                 bool parallel_seeds) {
    const Paths paths(cfg.out_dir);
    const corpus::LabeledCorpus id_test = load_split(paths, "test_id");
    const corpus::LabeledCorpus ood_test = load_split(paths, "test_ood");
    std::vector<eval::OodReport> results(cfg.seeds.size());
    run_per_seed(cfg.seeds, parallel_seeds, [&](std::size_t i, std::uint64_t seed) {
        const model::Checkpoint ckpt = model::load_checkpoint(paths.checkpoint(seed, method).string());
        const eval::OodReport ood = eval::evaluate_ood(ckpt.model, id_test, ood_test);
        eval::ReliabilityReport report;
        report.method = method;
        report.seed = ckpt.seed;
        report.config_hash = ckpt.config_hash;
        report.id_accuracy = ood.id_accuracy;
        report.ood = ood;
        write_report_files(paths, seed, method, "ood", report);
        if (with_embeddings) {
            eval::export_embeddings(ckpt.model, id_test,
                                    paths.embeddings(seed, method, "id").string());
            eval::export_embeddings(ckpt.model, ood_test,
                                    paths.embeddings(seed, method, "ood").string());
        }
        results[i] = ood;
    });
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        const eval::OodReport& r = results[i];
        std::cout << method << " seed " << cfg.seeds[i] << " ood: auroc=" << fmt(r.detection.auroc)
                  << " eer=" << fmt(r.detection.eer)
                  << " det_acc=" << fmt(r.detection.detection_accuracy)
                  << " tnr@tpr80=" << fmt(r.detection.tnr_at_tpr80)
                  << " id_acc=" << fmt(r.id_accuracy) << '\n';
    }
    return 0;
}

int cmd_eval_cross_domain(const ExperimentConfig& cfg, const std::string& method,
                          bool parallel_seeds) {
    const Paths paths(cfg.out_dir);
    const corpus::LabeledCorpus id_test = load_split(paths, "test_id");
    const corpus::LabeledCorpus xd_test = load_split(paths, "test_crossdomain");
    std::vector<eval::CrossDomainReport> results(cfg.seeds.size());
    run_per_seed(cfg.seeds, parallel_seeds, [&](std::size_t i, std::uint64_t seed) {
        const model::Checkpoint ckpt = model::load_checkpoint(paths.checkpoint(seed, method).string());
        const eval::CrossDomainReport xd = eval::evaluate_cross_domain(ckpt.model, id_test, xd_test);
        eval::ReliabilityReport report;
        report.method = method;
        report.seed = ckpt.seed;
        report.config_hash = ckpt.config_hash;
        report.id_accuracy = xd.id_accuracy;
        report.cross_domain = xd;
        write_report_files(paths, seed, method, "crossdomain", report);
        results[i] = xd;
    });
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        const eval::CrossDomainReport& r = results[i];
        std::cout << method << " seed " << cfg.seeds[i]
                  << " crossdomain: id_acc=" << fmt(r.id_accuracy)
                  << " xd_acc=" << fmt(r.cross_domain_accuracy) << " gap="
                  << fmt(r.generalization_gap) << '\n';
    }
    return 0;
}

int cmd_attack(const ExperimentConfig& cfg, const std::string& method, bool parallel_seeds) {
    const Paths paths(cfg.out_dir);
    const corpus::LabeledCorpus id_test = load_split(paths, "test_id");
    const keywords::KeywordSet kws =
        keywords::load_keywords(paths.keywords_file().string(), *id_test.vocab);
    std::vector<eval::AttackReport> results(cfg.seeds.size());
    run_per_seed(cfg.seeds, parallel_seeds, [&](std::size_t i, std::uint64_t seed) {
        const model::Checkpoint ckpt = model::load_checkpoint(paths.checkpoint(seed, method).string());
        const eval::AttackReport atk =
            eval::evaluate_attack(ckpt.model, id_test, kws, mix_seed({ckpt.seed, kAttackStream}));
        eval::ReliabilityReport report;
        report.method = method;
        report.seed = ckpt.seed;
        report.config_hash = ckpt.config_hash;
        report.attack = atk;
        write_report_files(paths, seed, method, "attack", report);
        results[i] = atk;
    });
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        const eval::AttackReport& r = results[i];
        std::cout << method << " seed " << cfg.seeds[i]
                  << " attack: clean=" << fmt(r.clean_accuracy)
                  << " attacked=" << fmt(r.attacked_accuracy) << " drop=" << fmt(r.accuracy_drop)
                  << " modified=" << fmt(r.modified_fraction) << '\n';
    }
    return 0;
}

struct SummaryRow {
    std::string method;
    std::string target;
    std::string metric;
    std::vector<double> values;
};

int cmd_report(const ExperimentConfig& cfg) {
    const Paths paths(cfg.out_dir);
    std::vector<SummaryRow> rows;
    auto add = [&rows](const std::string& method, const std::string& target,
                       const std::string& metric, double value) {
        for (auto& row : rows) {
            if (row.method == method && row.target == target && row.metric == metric) {
                row.values.push_back(value);
                return;
            }
        }
        rows.push_back({method, target, metric, {value}});
    };
    std::size_t found = 0;
    for (const char* method : {"vanilla", "masker"}) {
        for (const char* target : {"ood", "crossdomain", "attack"}) {
            for (std::uint64_t seed : cfg.seeds) {
                const fs::path path = paths.report(seed, method, target, "json");
                if (!fs::exists(path)) continue;
                std::ifstream in(path);
                if (!in) throw DataError("cannot open report: " + path.string());
                std::stringstream buffer;
                buffer << in.rdbuf();
                const eval::ReliabilityReport rep = eval::report_from_json(buffer.str());
                ++found;
                if (rep.ood) {
                    add(method, target, "id_accuracy", rep.ood->id_accuracy);
                    add(method, target, "auroc", rep.ood->detection.auroc);
                    add(method, target, "eer", rep.ood->detection.eer);
                    add(method, target, "detection_accuracy", rep.ood->detection.detection_accuracy);
                    add(method, target, "tnr_at_tpr80", rep.ood->detection.tnr_at_tpr80);
                }
                if (rep.cross_domain) {
                    add(method, target, "id_accuracy", rep.cross_domain->id_accuracy);
                    add(method, target, "cross_domain_accuracy",
                        rep.cross_domain->cross_domain_accuracy);
                    add(method, target, "generalization_gap",
                        rep.cross_domain->generalization_gap);
                }
                if (rep.attack) {
                    add(method, target, "clean_accuracy", rep.attack->clean_accuracy);
                    add(method, target, "attacked_accuracy", rep.attack->attacked_accuracy);
                    add(method, target, "accuracy_drop", rep.attack->accuracy_drop);
                    add(method, target, "modified_fraction", rep.attack->modified_fraction);
                }
            }
        }
    }
    if (found == 0) throw DataError("no report files found under " + paths.out.string());

    std::ofstream csv(paths.summary_file("csv"));
    if (!csv) throw DataError("cannot open for writing: " + paths.summary_file("csv").string());
    csv << "method,target,metric,mean,std,n\n";
    std::ostringstream md;
    md << "| method | target | metric | value |\n|---|---|---|---|\n";
    for (const auto& row : rows) {
        double sum = 0.0;
        for (double v : row.values) sum += v;
        const double mean = sum / static_cast<double>(row.values.size());
        double ss = 0.0;
        for (double v : row.values) ss += (v - mean) * (v - mean);
        const double sd = row.values.size() > 1
                              ? std::sqrt(ss / static_cast<double>(row.values.size() - 1))
                              : 0.0;
        csv << row.method << ',' << row.target << ',' << row.metric << ',' << fmt(mean, "%.17g")
            << ',' << fmt(sd, "%.17g") << ',' << row.values.size() << '\n';
        md << "| " << row.method << " | " << row.target << " | " << row.metric << " | "
           << fmt(mean) << "<sub>" << fmt(sd) << "</sub> |\n";
    }
    std::ofstream mdf(paths.summary_file("md"));
    if (!mdf) throw DataError("cannot open for writing: " + paths.summary_file("md").string());
    mdf << md.str();
    std::cout << md.str();
    std::cout << "summary -> " << paths.summary_file("csv").string() << ", "
              << paths.summary_file("md").string() << '\n';
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    try {
        CLI::App app{"masked keyword regularization experiments on synthetic text"};
        app.require_subcommand(1);

        std::string config_path;
        std::string out_dir;
        std::vector<std::uint64_t> seed_values;
        int threads = -1;
        bool serial = false;
        std::string method = "vanilla";
        std::string checkpoint;
        std::string input;
        int min_count = 1;
        bool embeddings = false;
        bool parallel_seeds = false;

        CLI::App* gen = app.add_subcommand("gen-synthetic", "generate the synthetic corpora");
        CLI::App* vocab_cmd =
            app.add_subcommand("build-vocab", "build a vocabulary from a JSONL corpus");
        vocab_cmd->add_option("--input", input, "JSONL corpus to scan")->required();
        vocab_cmd->add_option("--min-count", min_count, "minimum token count to keep");
        CLI::App* select =
            app.add_subcommand("select-keywords", "score and select biased keywords");
        select->add_option("--checkpoint", checkpoint,
                           "attention scheme: reuse this checkpoint instead of training one");
        CLI::App* train = app.add_subcommand("train", "train classifiers, one per seed");
        CLI::App* ood = app.add_subcommand("eval-ood", "out-of-distribution detection metrics");
        ood->add_flag("--embeddings", embeddings, "also export document embeddings as CSV");
        CLI::App* xd =
            app.add_subcommand("eval-cross-domain", "accuracy under swapped keyword domains");
        CLI::App* attack =
            app.add_subcommand("attack", "keyword substitution attack on the ID test set");
        CLI::App* report = app.add_subcommand("report", "aggregate per-seed reports");

        for (CLI::App* sub : {gen, vocab_cmd, select, train, ood, xd, attack, report}) {
            sub->add_option("--config", config_path, "experiment config JSON");
            sub->add_option("--out", out_dir, "output directory (overrides config)");
            sub->add_option("--seed", seed_values, "seed override (repeatable)");
            sub->add_option("--threads", threads, "kernel thread count (0 = library default)");
            sub->add_flag("--serial", serial, "force single-threaded kernels");
        }
        for (CLI::App* sub : {train, ood, xd, attack}) {
            sub->add_option("--method", method, "vanilla or masker")
                ->check(CLI::IsMember({"vanilla", "masker"}));
            sub->add_flag("--parallel-seeds", parallel_seeds, "run seeds in parallel");
        }

        std::vector<std::string> reversed(args.rbegin(), args.rend());
        try {
            app.parse(reversed);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e);
            return code == 0 ? 0 : 2;
        }

        ExperimentConfig cfg = load_config(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!seed_values.empty()) cfg.seeds = seed_values;
        if (serial) {
            kernels::set_threads(1);
        } else if (threads >= 0) {
            kernels::set_threads(threads);
        }

        if (app.got_subcommand(gen)) {
            if (!seed_values.empty()) cfg.synthetic.seed = seed_values.front();
            return cmd_gen_synthetic(cfg);
        }
        if (app.got_subcommand(vocab_cmd)) return cmd_build_vocab(cfg, input, min_count);
        if (app.got_subcommand(select)) return cmd_select_keywords(cfg, cfg.seeds.front(), checkpoint);
        if (app.got_subcommand(train)) return cmd_train(cfg, method, parallel_seeds);
        if (app.got_subcommand(ood)) return cmd_eval_ood(cfg, method, embeddings, parallel_seeds);
        if (app.got_subcommand(xd)) return cmd_eval_cross_domain(cfg, method, parallel_seeds);
        if (app.got_subcommand(attack)) return cmd_attack(cfg, method, parallel_seeds);
        if (app.got_subcommand(report)) return cmd_report(cfg);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}

}  // namespace masker::cli
