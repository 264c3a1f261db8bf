#pragma once

#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "masker/corpus.hpp"
#include "masker/model.hpp"
#include "masker/tensor.hpp"

namespace masker::keywords {

enum class Scheme { frequency, attention };
enum class SelectionMode { class_agnostic, class_balanced };

const char* scheme_name(Scheme scheme);
Scheme scheme_from_name(const std::string& name);
const char* selection_mode_name(SelectionMode mode);
SelectionMode selection_mode_from_name(const std::string& name);

/// tf weight of a count against the most frequent term of the same class
/// concatenation: 0.5 + 0.5 * n / max_n.
double term_frequency_weight(long long n, long long max_n);

/// ln(|D| / df), df counted once per document.
double inverse_document_frequency(std::size_t num_docs, std::size_t doc_freq);

/// Candidate scores per token id. per_class[c] holds the class-restricted
/// score of every token occurring in class c; `combined` aggregates across
/// classes (max for the frequency scheme, sum for the attention scheme).
/// Reserved ids never appear.
struct ScoreTable {
    Scheme scheme = Scheme::frequency;
    int num_classes = 0;
    std::vector<std::unordered_map<int, double>> per_class;
    std::unordered_map<int, double> combined;
};

/// Frequency scheme: each class's documents are concatenated, a token scores
/// tf(t, X_c) * idf(t, D) there, and the best class wins.
ScoreTable frequency_scores(const corpus::LabeledCorpus& corpus);

/// Attention scheme: per document, the attention weights are l2-normalized
/// and a token collects the mean weight over its own occurrences; documents
/// without the token contribute nothing.
ScoreTable attention_scores(const corpus::LabeledCorpus& corpus,
                            const std::vector<model::AttentionTrace>& traces);

/// A ranked keyword list. `classes[i]` is the class a keyword is attributed
/// to: the argmax of its per-class score (lowest class on ties) under
/// class-agnostic selection, or the class whose quota it filled under
/// class-balanced selection.
struct KeywordSet {
    Scheme scheme = Scheme::frequency;
    SelectionMode mode = SelectionMode::class_agnostic;
    int requested_k = 0;
    int num_classes = 0;
    std::vector<int> tokens;
    std::vector<int> classes;
    std::vector<double> scores;

    std::size_t size() const { return tokens.size(); }
    bool contains(int token) const { return lookup_.count(token) != 0; }
    // Class of a selected keyword; -1 for non-keywords.
    int class_of(int token) const;
    // class -> selected token ids, each list in rank order.
    std::vector<std::vector<int>> by_class() const;

    void rebuild_lookup();

private:
    std::unordered_map<int, int> lookup_;  // token -> index into tokens
};

/// Top-k selection. Ties break towards the lexicographically smaller token
/// string. class_balanced fills per-class quotas of ceil(k / C) in rank-major
/// round-robin order, skipping tokens already taken, and truncates to k.
KeywordSet select_keywords(const ScoreTable& table, int k, SelectionMode mode,
                           const corpus::Vocabulary& vocab);

/// crosstab(s, t) = fraction of documents labeled t containing at least one
/// keyword attributed to class s.
Matrix keyword_crosstab(const corpus::LabeledCorpus& corpus, const KeywordSet& keywords);

/// JSON persistence; tokens are stored as strings and resolved against the
/// vocabulary on load.
void save_keywords(const KeywordSet& keywords, const corpus::Vocabulary& vocab,
                   const std::string& path);
KeywordSet load_keywords(const std::string& path, const corpus::Vocabulary& vocab);

}  // namespace masker::keywords
