#include "masker/keywords.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "masker/errors.hpp"

namespace masker::keywords {

namespace {

void require_classes(const corpus::LabeledCorpus& corpus) {
    if (corpus.documents.empty()) throw DataError("keyword scoring needs a non-empty corpus");
    if (corpus.num_classes < 2) {
        throw DataError("keyword scoring needs at least 2 classes, got " +
                        std::to_string(corpus.num_classes));
    }
}

// (score desc, token string asc) ordering shared by selection and ranking.
std::vector<std::pair<int, double>> ranked(const std::unordered_map<int, double>& scores,
                                           const corpus::Vocabulary& vocab) {
    std::vector<std::pair<int, double>> items(scores.begin(), scores.end());
    std::sort(items.begin(), items.end(), [&vocab](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return vocab.token(a.first) < vocab.token(b.first);
    });
    return items;
}

}  // namespace

const char* scheme_name(Scheme scheme) {
    return scheme == Scheme::frequency ? "frequency" : "attention";
}

Scheme scheme_from_name(const std::string& name) {
    if (name == "frequency") return Scheme::frequency;
    if (name == "attention") return Scheme::attention;
    throw ConfigError("unknown keyword scheme '" + name + "' (expected frequency or attention)");
}

const char* selection_mode_name(SelectionMode mode) {
    return mode == SelectionMode::class_agnostic ? "class_agnostic" : "class_balanced";
}

SelectionMode selection_mode_from_name(const std::string& name) {
    if (name == "class_agnostic") return SelectionMode::class_agnostic;
    if (name == "class_balanced") return SelectionMode::class_balanced;
    throw ConfigError("unknown selection mode '" + name +
                      "' (expected class_agnostic or class_balanced)");
}

double term_frequency_weight(long long n, long long max_n) {
    if (max_n <= 0) throw DataError("term_frequency_weight needs max_n > 0");
    return 0.5 + 0.5 * static_cast<double>(n) / static_cast<double>(max_n);
}

double inverse_document_frequency(std::size_t num_docs, std::size_t doc_freq) {
    if (doc_freq == 0 || doc_freq > num_docs) {
        throw DataError("document frequency must lie in [1, |D|]");
    }
    return std::log(static_cast<double>(num_docs) / static_cast<double>(doc_freq));
}

ScoreTable frequency_scores(const corpus::LabeledCorpus& corpus) {
    require_classes(corpus);
    const int c = corpus.num_classes;

    std::vector<std::unordered_map<int, long long>> counts(static_cast<std::size_t>(c));
    std::unordered_map<int, std::size_t> doc_freq;
    for (const corpus::Document& doc : corpus.documents) {
        auto& class_counts = counts[static_cast<std::size_t>(doc.label)];
        std::unordered_set<int> seen;
        for (int id : doc.token_ids) {
            if (corpus::is_reserved(id)) continue;
            ++class_counts[id];
            seen.insert(id);
        }
        for (int id : seen) ++doc_freq[id];
    }

    std::vector<long long> max_n(static_cast<std::size_t>(c), 0);
    for (int cls = 0; cls < c; ++cls) {
        for (const auto& [id, n] : counts[static_cast<std::size_t>(cls)]) {
            max_n[static_cast<std::size_t>(cls)] = std::max(max_n[static_cast<std::size_t>(cls)], n);
        }
    }

    ScoreTable table;
    table.scheme = Scheme::frequency;
    table.num_classes = c;
    table.per_class.resize(static_cast<std::size_t>(c));
    const std::size_t total = corpus.documents.size();
    for (int cls = 0; cls < c; ++cls) {
        if (max_n[static_cast<std::size_t>(cls)] == 0) continue;
        for (const auto& [id, n] : counts[static_cast<std::size_t>(cls)]) {
            const double tf = term_frequency_weight(n, max_n[static_cast<std::size_t>(cls)]);
            const double idf = inverse_document_frequency(total, doc_freq.at(id));
            const double score = tf * idf;
            table.per_class[static_cast<std::size_t>(cls)][id] = score;
            auto it = table.combined.find(id);
            if (it == table.combined.end()) {
                table.combined.emplace(id, score);
            } else {
                it->second = std::max(it->second, score);
            }
        }
    }
    return table;
}

ScoreTable attention_scores(const corpus::LabeledCorpus& corpus,
                            const std::vector<model::AttentionTrace>& traces) {
    require_classes(corpus);
    if (traces.size() != corpus.documents.size()) {
        throw DataError("got " + std::to_string(traces.size()) + " attention traces for " +
                        std::to_string(corpus.documents.size()) + " documents");
    }

    ScoreTable table;
    table.scheme = Scheme::attention;
    table.num_classes = corpus.num_classes;
    table.per_class.resize(static_cast<std::size_t>(corpus.num_classes));
    for (std::size_t di = 0; di < corpus.documents.size(); ++di) {
        const corpus::Document& doc = corpus.documents[di];
        const std::vector<double>& w = traces[di].weights;
        if (w.size() != doc.token_ids.size()) {
            throw DataError("attention trace length " + std::to_string(w.size()) +
                            " does not match document length " +
                            std::to_string(doc.token_ids.size()));
        }
        double norm_sq = 0.0;
        for (double v : w) norm_sq += v * v;
        if (norm_sq <= 0.0) continue;
        const double inv_norm = 1.0 / std::sqrt(norm_sq);

        std::unordered_map<int, std::pair<double, int>> sums;  // token -> (weight sum, count)
        for (std::size_t i = 0; i < w.size(); ++i) {
            const int id = doc.token_ids[i];
            if (corpus::is_reserved(id)) continue;
            auto& entry = sums[id];
            entry.first += w[i] * inv_norm;
            entry.second += 1;
        }
        auto& class_scores = table.per_class[static_cast<std::size_t>(doc.label)];
        for (const auto& [id, entry] : sums) {
            const double contribution = entry.first / static_cast<double>(entry.second);
            class_scores[id] += contribution;
            table.combined[id] += contribution;
        }
    }
    return table;
}

int KeywordSet::class_of(int token) const {
    auto it = lookup_.find(token);
    return it == lookup_.end() ? -1 : classes[static_cast<std::size_t>(it->second)];
}

std::vector<std::vector<int>> KeywordSet::by_class() const {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        out[static_cast<std::size_t>(classes[i])].push_back(tokens[i]);
    }
    return out;
}

void KeywordSet::rebuild_lookup() {
    lookup_.clear();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        lookup_[tokens[i]] = static_cast<int>(i);
    }
}

KeywordSet select_keywords(const ScoreTable& table, int k, SelectionMode mode,
                           const corpus::Vocabulary& vocab) {
    if (k <= 0) throw ConfigError("keyword count must be positive");
    KeywordSet set;
    set.scheme = table.scheme;
    set.mode = mode;
    set.requested_k = k;
    set.num_classes = table.num_classes;

    auto argmax_class = [&](int token) {
        int best = 0;
        double best_score = -1.0;
        bool found = false;
        for (int cls = 0; cls < table.num_classes; ++cls) {
            const auto& m = table.per_class[static_cast<std::size_t>(cls)];
            auto it = m.find(token);
            if (it != m.end() && (!found || it->second > best_score)) {
                found = true;
                best = cls;
                best_score = it->second;
            }
        }
        return best;
    };

    if (mode == SelectionMode::class_agnostic) {
        const auto items = ranked(table.combined, vocab);
        const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), items.size());
        for (std::size_t i = 0; i < take; ++i) {
            set.tokens.push_back(items[i].first);
            set.scores.push_back(items[i].second);
            set.classes.push_back(argmax_class(items[i].first));
        }
    } else {
        const int c = table.num_classes;
        const int quota = (k + c - 1) / c;
        std::vector<std::vector<std::pair<int, double>>> pools(static_cast<std::size_t>(c));
        for (int cls = 0; cls < c; ++cls) {
            pools[static_cast<std::size_t>(cls)] =
                ranked(table.per_class[static_cast<std::size_t>(cls)], vocab);
        }
        std::unordered_set<int> taken;
        for (int r = 0; r < quota && static_cast<int>(set.tokens.size()) < k; ++r) {
            for (int cls = 0; cls < c && static_cast<int>(set.tokens.size()) < k; ++cls) {
                // each round a class takes its best not-yet-taken candidate
                for (const auto& [token, score] : pools[static_cast<std::size_t>(cls)]) {
                    if (taken.count(token)) continue;
                    set.tokens.push_back(token);
                    set.scores.push_back(score);
                    set.classes.push_back(cls);
                    taken.insert(token);
                    break;
                }
            }
        }
    }
    set.rebuild_lookup();
    return set;
}

Matrix keyword_crosstab(const corpus::LabeledCorpus& corpus, const KeywordSet& keywords) {
    require_classes(corpus);
    if (keywords.num_classes != corpus.num_classes) {
        throw DataError("keyword set covers " + std::to_string(keywords.num_classes) +
                        " classes but the corpus has " + std::to_string(corpus.num_classes));
    }
    const int c = corpus.num_classes;
    Matrix hits(static_cast<std::size_t>(c), static_cast<std::size_t>(c));
    std::vector<std::size_t> totals(static_cast<std::size_t>(c), 0);
    for (const corpus::Document& doc : corpus.documents) {
        ++totals[static_cast<std::size_t>(doc.label)];
        std::unordered_set<int> present;
        for (int id : doc.token_ids) {
            const int cls = keywords.class_of(id);
            if (cls >= 0) present.insert(cls);
        }
        for (int cls : present) {
            hits.at(static_cast<std::size_t>(cls), static_cast<std::size_t>(doc.label)) += 1.0;
        }
    }
    for (int s = 0; s < c; ++s) {
        for (int t = 0; t < c; ++t) {
            if (totals[static_cast<std::size_t>(t)] > 0) {
                hits.at(static_cast<std::size_t>(s), static_cast<std::size_t>(t)) /=
                    static_cast<double>(totals[static_cast<std::size_t>(t)]);
            }
        }
    }
    return hits;
}

void save_keywords(const KeywordSet& keywords, const corpus::Vocabulary& vocab,
                   const std::string& path) {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < keywords.tokens.size(); ++i) {
        entries.push_back({{"token", vocab.token(keywords.tokens[i])},
                           {"class", keywords.classes[i]},
                           {"score", keywords.scores[i]}});
    }
    nlohmann::json j{{"scheme", scheme_name(keywords.scheme)},
                     {"mode", selection_mode_name(keywords.mode)},
                     {"k", keywords.requested_k},
                     {"num_classes", keywords.num_classes},
                     {"entries", entries}};
    std::ofstream out(path);
    if (!out) throw DataError("cannot open keyword file for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw DataError("failed writing keyword file: " + path);
}

KeywordSet load_keywords(const std::string& path, const corpus::Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open keyword file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed keyword file " + path + ": " + e.what());
    }
    KeywordSet set;
    try {
        set.scheme = scheme_from_name(j.at("scheme").get<std::string>());
        set.mode = selection_mode_from_name(j.at("mode").get<std::string>());
        set.requested_k = j.at("k").get<int>();
        set.num_classes = j.at("num_classes").get<int>();
        for (const nlohmann::json& entry : j.at("entries")) {
            const std::string token = entry.at("token").get<std::string>();
            if (!vocab.contains(token)) {
                throw DataError("keyword '" + token + "' is not in the vocabulary");
            }
            set.tokens.push_back(vocab.id_or_unk(token));
            set.classes.push_back(entry.at("class").get<int>());
            set.scores.push_back(entry.at("score").get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed keyword file " + path + ": " + e.what());
    }
    for (int cls : set.classes) {
        if (cls < 0 || cls >= set.num_classes) {
            throw DataError("keyword class " + std::to_string(cls) + " outside " +
                            std::to_string(set.num_classes) + " classes");
        }
    }
    set.rebuild_lookup();
    return set;
}

}  // namespace masker::keywords
