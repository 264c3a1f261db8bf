#include "masker/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "masker/rng.hpp"

namespace masker::corpus {

namespace {

const char* kReservedTokens[kNumReserved] = {"<pad>", "<mask>", "<unk>"};

bool is_word_char(char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

void truncate_to(Document& doc, int max_length) {
    if (max_length > 0 && doc.token_ids.size() > static_cast<std::size_t>(max_length)) {
        doc.token_ids.resize(static_cast<std::size_t>(max_length));
    }
}

}  // namespace

Vocabulary::Vocabulary() {
    for (const char* t : kReservedTokens) {
        token_to_id_.emplace(t, static_cast<int>(tokens_.size()));
        tokens_.emplace_back(t);
    }
}

int Vocabulary::id_or_unk(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end() || is_reserved(it->second)) return kUnkId;
    return it->second;
}

bool Vocabulary::contains(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it != token_to_id_.end() && !is_reserved(it->second);
}

void Vocabulary::add(const std::string& token) {
    if (token_to_id_.count(token)) throw DataError("duplicate vocabulary token: " + token);
    token_to_id_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string current;
    for (char raw : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (is_word_char(c)) {
            current.push_back(c);
        } else if (!current.empty()) {
            words.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

Vocabulary build_vocabulary(const std::vector<std::string>& raw_texts, int min_count) {
    if (raw_texts.empty()) throw DataError("empty corpus");
    std::unordered_map<std::string, std::int64_t> counts;
    for (const auto& text : raw_texts) {
        for (auto& w : split_words(text)) ++counts[w];
    }
    std::vector<std::pair<std::string, std::int64_t>> kept;
    kept.reserve(counts.size());
    for (auto& [word, n] : counts) {
        if (n >= min_count) kept.emplace_back(word, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary vocab;
    for (auto& [word, n] : kept) vocab.add(word);
    return vocab;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(vocab.id_or_unk(w));
    return ids;
}

std::string detokenize(const std::vector<int>& token_ids, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (i) out.push_back(' ');
        out += vocab.token(token_ids[i]);
    }
    return out;
}

std::vector<std::size_t> LabeledCorpus::class_indices(int label) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < documents.size(); ++i) {
        if (documents[i].label == label) idx.push_back(i);
    }
    return idx;
}

void SyntheticSpec::validate() const {
    if (num_classes < 2) throw ConfigError("synthetic spec: num_classes must be >= 2");
    if (keywords_per_class < 1) throw ConfigError("synthetic spec: keywords_per_class must be >= 1");
    if (context_vocab_size < num_classes)
        throw ConfigError("synthetic spec: context_vocab_size must be >= num_classes");
    if (doc_len_min < 1 || doc_len_max < doc_len_min)
        throw ConfigError("synthetic spec: invalid document length range");
    auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
    if (!rate_ok(keyword_injection_rate) || !rate_ok(ood_keyword_overlap_rate) ||
        !rate_ok(context_affinity))
        throw ConfigError("synthetic spec: rates must lie in [0,1]");
    if (keyword_copies < 1) throw ConfigError("synthetic spec: keyword_copies must be >= 1");
    if (!crossdomain_swap.empty()) {
        if (static_cast<int>(crossdomain_swap.size()) != num_classes)
            throw ConfigError("synthetic spec: swap table size must equal num_classes");
        for (int s : crossdomain_swap) {
            if (s < 0 || s >= num_classes)
                throw ConfigError("synthetic spec: swap table entries must be valid classes");
        }
    }
}

std::string SyntheticSpec::keyword_token(int cls, int j) {
    return "kw" + std::to_string(cls) + "_" + std::to_string(j);
}

std::string SyntheticSpec::context_token(int i) { return "ctx" + std::to_string(i); }

namespace {

struct RawDoc {
    std::string text;
    int label;
    std::string domain;
};

// One synthetic document as a list of token strings. Context slots draw from
// the label's group with probability `affinity`, otherwise from the whole
// pool; carriers get `copies` occurrences of one keyword at distinct slots.
std::vector<std::string> synth_tokens(const SyntheticSpec& spec, Rng& rng, int ctx_group,
                                      bool carrier, const std::string& keyword) {
    const int len = rng.range(spec.doc_len_min, spec.doc_len_max);
    std::vector<std::string> toks(static_cast<std::size_t>(len));
    for (auto& t : toks) {
        int ctx_id;
        if (ctx_group >= 0 && rng.bernoulli(spec.context_affinity)) {
            // group g owns context ids congruent to g mod C
            const int group_size =
                (spec.context_vocab_size - ctx_group + spec.num_classes - 1) / spec.num_classes;
            ctx_id = ctx_group + spec.num_classes * rng.range(0, group_size - 1);
        } else {
            ctx_id = rng.range(0, spec.context_vocab_size - 1);
        }
        t = SyntheticSpec::context_token(ctx_id);
    }
    if (carrier) {
        const std::size_t copies =
            std::min<std::size_t>(static_cast<std::size_t>(spec.keyword_copies), toks.size());
        for (std::size_t pos : rng.distinct(toks.size(), copies)) toks[pos] = keyword;
    }
    return toks;
}

std::string join(const std::vector<std::string>& toks) {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out.push_back(' ');
        out += toks[i];
    }
    return out;
}

LabeledCorpus assemble(const std::vector<RawDoc>& raw, int num_classes,
                       const std::shared_ptr<const Vocabulary>& vocab, int max_length) {
    LabeledCorpus corpus;
    corpus.num_classes = num_classes;
    corpus.vocab = vocab;
    corpus.documents.reserve(raw.size());
    for (const auto& r : raw) {
        Document doc;
        doc.token_ids = tokenize(r.text, *vocab);
        doc.label = r.label;
        doc.domain_tag = r.domain;
        truncate_to(doc, max_length);
        corpus.documents.push_back(std::move(doc));
    }
    return corpus;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::vector<int> swap = spec.crossdomain_swap;
    if (swap.empty()) {
        swap.resize(static_cast<std::size_t>(spec.num_classes));
        for (int c = 0; c < spec.num_classes; ++c) swap[c] = (c + 1) % spec.num_classes;
    }

    auto pick_keyword = [&](Rng& rng, int cls) {
        return SyntheticSpec::keyword_token(cls, rng.range(0, spec.keywords_per_class - 1));
    };

    std::vector<RawDoc> train_raw, id_raw, ood_raw, xd_raw;
    {
        Rng rng(mix_seed({spec.seed, 1}));
        for (int c = 0; c < spec.num_classes; ++c) {
            for (int i = 0; i < spec.train_docs_per_class; ++i) {
                const bool carrier = rng.bernoulli(spec.keyword_injection_rate);
                const std::string kw = pick_keyword(rng, c);
                train_raw.push_back({join(synth_tokens(spec, rng, c, carrier, kw)), c, ""});
            }
        }
    }
    {
        Rng rng(mix_seed({spec.seed, 2}));
        for (int c = 0; c < spec.num_classes; ++c) {
            for (int i = 0; i < spec.test_docs_per_class; ++i) {
                const bool carrier = rng.bernoulli(spec.keyword_injection_rate);
                const std::string kw = pick_keyword(rng, c);
                id_raw.push_back({join(synth_tokens(spec, rng, c, carrier, kw)), c, ""});
            }
        }
    }
    {
        Rng rng(mix_seed({spec.seed, 3}));
        for (int i = 0; i < spec.ood_docs; ++i) {
            const bool carrier = rng.bernoulli(spec.ood_keyword_overlap_rate);
            const int cls = rng.range(0, spec.num_classes - 1);  // keyword source class
            const std::string kw = pick_keyword(rng, cls);
            ood_raw.push_back({join(synth_tokens(spec, rng, -1, carrier, kw)), 0, "ood"});
        }
    }
    {
        Rng rng(mix_seed({spec.seed, 4}));
        for (int c = 0; c < spec.num_classes; ++c) {
            for (int i = 0; i < spec.crossdomain_docs_per_class; ++i) {
                const bool carrier = rng.bernoulli(spec.keyword_injection_rate);
                const std::string kw = pick_keyword(rng, swap[c]);
                xd_raw.push_back(
                    {join(synth_tokens(spec, rng, c, carrier, kw)), c, "crossdomain"});
            }
        }
    }

    std::vector<std::string> train_texts;
    train_texts.reserve(train_raw.size());
    for (const auto& r : train_raw) train_texts.push_back(r.text);
    auto vocab = std::make_shared<const Vocabulary>(build_vocabulary(train_texts, 1));

    SyntheticData data;
    data.train = assemble(train_raw, spec.num_classes, vocab, kDefaultMaxLength);
    data.test_id = assemble(id_raw, spec.num_classes, vocab, kDefaultMaxLength);
    data.test_ood = assemble(ood_raw, spec.num_classes, vocab, kDefaultMaxLength);
    data.test_crossdomain = assemble(xd_raw, spec.num_classes, vocab, kDefaultMaxLength);
    return data;
}

std::string sidecar_path(const std::string& jsonl_path) {
    const std::string suffix = ".jsonl";
    if (jsonl_path.size() > suffix.size() &&
        jsonl_path.compare(jsonl_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return jsonl_path.substr(0, jsonl_path.size() - suffix.size()) + ".meta.json";
    }
    return jsonl_path + ".meta.json";
}

void save_corpus(const LabeledCorpus& corpus, const std::string& jsonl_path) {
    if (!corpus.vocab) throw DataError("cannot save a corpus without a vocabulary");
    std::ofstream out(jsonl_path);
    if (!out) throw DataError("cannot open for writing: " + jsonl_path);
    for (const auto& doc : corpus.documents) {
        nlohmann::json line;
        line["text"] = detokenize(doc.token_ids, *corpus.vocab);
        line["label"] = doc.label;
        if (!doc.domain_tag.empty()) line["domain"] = doc.domain_tag;
        out << line.dump() << '\n';
    }
    nlohmann::json meta;
    meta["num_classes"] = corpus.num_classes;
    meta["max_length"] = kDefaultMaxLength;
    meta["vocabulary"] = corpus.vocab->tokens();
    std::ofstream mout(sidecar_path(jsonl_path));
    if (!mout) throw DataError("cannot open for writing: " + sidecar_path(jsonl_path));
    mout << meta.dump(2) << '\n';
}

LabeledCorpus load_corpus(const std::string& jsonl_path) {
    std::ifstream min(sidecar_path(jsonl_path));
    if (!min) throw DataError("missing sidecar metadata: " + sidecar_path(jsonl_path));
    nlohmann::json meta;
    try {
        min >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed sidecar " + sidecar_path(jsonl_path) + ": " + e.what());
    }
    auto vocab = std::make_shared<Vocabulary>();
    const auto& toks = meta.at("vocabulary");
    for (std::size_t i = kNumReserved; i < toks.size(); ++i) {
        vocab->add(toks[i].get<std::string>());
    }
    const int declared = meta.value("num_classes", 0);
    const int max_length = meta.value("max_length", kDefaultMaxLength);
    return load_corpus(jsonl_path, std::shared_ptr<const Vocabulary>(vocab), declared, max_length);
}

LabeledCorpus load_corpus(const std::string& jsonl_path,
                          std::shared_ptr<const Vocabulary> vocab, int declared_classes,
                          int max_length) {
    std::ifstream in(jsonl_path);
    if (!in) throw DataError("cannot open corpus: " + jsonl_path);
    LabeledCorpus corpus;
    corpus.vocab = std::move(vocab);
    std::string line;
    int line_no = 0;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed JSONL at " + jsonl_path + ":" + std::to_string(line_no) +
                            ": " + e.what());
        }
        if (!obj.contains("text") || !obj.contains("label") || !obj["label"].is_number_integer()) {
            throw DataError("malformed JSONL at " + jsonl_path + ":" + std::to_string(line_no) +
                            ": need string \"text\" and integer \"label\"");
        }
        Document doc;
        doc.token_ids = tokenize(obj["text"].get<std::string>(), *corpus.vocab);
        doc.label = obj["label"].get<int>();
        doc.domain_tag = obj.value("domain", "");
        if (doc.label < 0 ||
            (declared_classes > 0 && doc.label >= declared_classes)) {
            throw DataError("label out of range at " + jsonl_path + ":" +
                            std::to_string(line_no) + ": label " + std::to_string(doc.label) +
                            " with " + std::to_string(declared_classes) + " classes");
        }
        max_label = std::max(max_label, doc.label);
        truncate_to(doc, max_length);
        corpus.documents.push_back(std::move(doc));
    }
    corpus.num_classes = declared_classes > 0 ? declared_classes : max_label + 1;
    return corpus;
}

void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& t : vocab.tokens()) out << t << '\n';
}

std::shared_ptr<const Vocabulary> load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    auto vocab = std::make_shared<Vocabulary>();
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no <= kNumReserved) {
            // reserved rows are fixed; tolerate and verify
            if (line != vocab->token(line_no - 1))
                throw DataError("vocabulary file must start with the reserved tokens: " + path);
            continue;
        }
        if (!line.empty()) vocab->add(line);
    }
    return vocab;
}

}  // namespace masker::corpus
