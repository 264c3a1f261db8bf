#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "masker/errors.hpp"

namespace masker::corpus {

// Reserved token ids. These are never produced from corpus text.
constexpr int kPadId = 0;
constexpr int kMaskId = 1;
constexpr int kUnkId = 2;
constexpr int kNumReserved = 3;

constexpr int kDefaultMaxLength = 128;

inline bool is_reserved(int token_id) { return token_id >= 0 && token_id < kNumReserved; }

/// Ordered token list with the inverse lookup map. Ids are contiguous from 0,
/// the first three ids being PAD, MASK and UNK.
class Vocabulary {
public:
    Vocabulary();

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // Id of a token string, or kUnkId if unknown (reserved strings included).
    int id_or_unk(const std::string& token) const;
    bool contains(const std::string& token) const;

    // Appends a non-reserved token; throws DataError on duplicates.
    void add(const std::string& token);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> token_to_id_;
};

/// Lowercases and splits text into runs of [a-z0-9_].
std::vector<std::string> split_words(const std::string& text);

/// Builds a vocabulary: words with count >= min_count ordered by descending
/// count, ties broken lexicographically, after the three reserved tokens.
Vocabulary build_vocabulary(const std::vector<std::string>& raw_texts, int min_count);

struct Document {
    std::vector<int> token_ids;
    int label = 0;
    std::string domain_tag;

    std::size_t length() const { return token_ids.size(); }
};

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& token_ids, const Vocabulary& vocab);

struct LabeledCorpus {
    std::vector<Document> documents;
    int num_classes = 0;
    std::shared_ptr<const Vocabulary> vocab;

    std::size_t size() const { return documents.size(); }
    // Indices of documents with the given label.
    std::vector<std::size_t> class_indices(int label) const;
};

/// Synthetic biased-corpus generator. Every class has planted keyword tokens
/// that co-occur with the label; context tokens are shared across domains but
/// tilted towards per-class groups so context carries a recoverable signal.
struct SyntheticSpec {
    int num_classes = 4;
    int keywords_per_class = 1;
    int context_vocab_size = 48;
    int doc_len_min = 16;
    int doc_len_max = 28;
    double keyword_injection_rate = 0.9;  // chance an in-distribution doc carries its keyword
    int keyword_copies = 2;               // occurrences planted per carrier doc
    double ood_keyword_overlap_rate = 0.5;  // chance an OOD doc carries some ID keyword
    double context_affinity = 0.7;  // chance a context slot draws from the label's group
    // crossdomain_swap[c] = class whose keywords replace class c's in the
    // cross-domain corpus; default is rotation by one.
    std::vector<int> crossdomain_swap;
    int train_docs_per_class = 250;
    int test_docs_per_class = 125;
    int ood_docs = 500;
    int crossdomain_docs_per_class = 125;
    std::uint64_t seed = 0;

    void validate() const;
    // Canonical token strings used by the generator, handy for ground-truth
    // checks against generated corpora.
    static std::string keyword_token(int cls, int j);
    static std::string context_token(int i);
};

struct SyntheticData {
    LabeledCorpus train;
    LabeledCorpus test_id;
    LabeledCorpus test_ood;
    LabeledCorpus test_crossdomain;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// JSONL persistence. One object per line: {"text":..., "label":..., "domain":...}.
/// A sidecar <stem>.meta.json holds num_classes, max_length and the vocabulary.
void save_corpus(const LabeledCorpus& corpus, const std::string& jsonl_path);
LabeledCorpus load_corpus(const std::string& jsonl_path);
LabeledCorpus load_corpus(const std::string& jsonl_path,
                          std::shared_ptr<const Vocabulary> vocab,
                          int declared_classes,  // 0 = infer as 1 + max label
                          int max_length = kDefaultMaxLength);

/// Vocabulary file: one token per line, line number = id.
void save_vocabulary(const Vocabulary& vocab, const std::string& path);
std::shared_ptr<const Vocabulary> load_vocabulary(const std::string& path);

std::string sidecar_path(const std::string& jsonl_path);

}  // namespace masker::corpus
