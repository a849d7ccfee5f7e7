// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-domain corpora with controllable domain signatures, a
// character-level vocabulary, and JSONL ingestion for external question sets.

#pragma once

#include <array>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmoe/common.hpp"

namespace dsmoe {

// ---------------------------------------------------------------------------
// Vocabulary: fixed character-level symbol table. Id 0 is padding, id 1 is
// unknown; printable ASCII and newline map to stable ids above that.
// ---------------------------------------------------------------------------

class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnknown = 1;

    Vocab() {
        for (char c = ' '; c <= '~'; ++c) add_symbol(c);
        add_symbol('\n');
    }

    int size() const { return static_cast<int>(id_to_char_.size()) + 2; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (char c : text) {
            auto it = char_to_id_.find(c);
            ids.push_back(it == char_to_id_.end() ? kUnknown : it->second);
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string text;
        text.reserve(ids.size());
        for (int id : ids) {
            if (id == kPad) continue;
            if (id == kUnknown || id < 0 || id >= size()) {
                text.push_back('\x1a');  // substitute char, outside the alphabet
                continue;
            }
            text.push_back(id_to_char_[static_cast<size_t>(id - 2)]);
        }
        return text;
    }

    bool in_alphabet(char c) const { return char_to_id_.count(c) > 0; }

private:
    void add_symbol(char c) {
        char_to_id_[c] = static_cast<int>(id_to_char_.size()) + 2;
        id_to_char_.push_back(c);
    }

    std::map<char, int> char_to_id_;
    std::vector<char> id_to_char_;
};

// ---------------------------------------------------------------------------
// Samples and domains
// ---------------------------------------------------------------------------

struct Sample {
    std::string id;
    std::string domain;
    std::string question;
    std::string answer;
    std::vector<int> question_tokens;
    std::vector<int> answer_tokens;

    std::string text() const { return question + answer; }
    std::vector<int> tokens() const {
        std::vector<int> all = question_tokens;
        all.insert(all.end(), answer_tokens.begin(), answer_tokens.end());
        return all;
    }
    size_t length() const { return question_tokens.size() + answer_tokens.size(); }

    bool operator==(const Sample&) const = default;
};

enum class DomainFamily { Arith, ChemToy, Filler };

struct Domain {
    std::string name;
    DomainFamily family;
    uint64_t seed = 0;
    double filler_rate = 0.3;  // approximate share of filler characters in questions
};

inline Domain make_domain(const std::string& name, uint64_t seed) {
    if (name == "arith") return Domain{name, DomainFamily::Arith, seed};
    if (name == "chem-toy") return Domain{name, DomainFamily::ChemToy, seed};
    if (name == "filler") return Domain{name, DomainFamily::Filler, seed};
    fail(ErrorKind::Config, "unknown domain '" + name + "' (available: arith, chem-toy, filler)");
}

namespace detail {

inline const std::array<std::string, 6>& filler_words() {
    static const std::array<std::string, 6> words = {".", "..", "...", ". .", "....", ".."};
    return words;
}

// Fixed substitution ciphers used by the arith template's echoes: digits and
// operators are restated in two disjoint character classes, so each echo is
// predictable from the operands without reusing their characters and neither
// echo can be derived from the other.
inline char cipher_char(char c) {
    if (c >= '0' && c <= '9') return static_cast<char>('B' + (c - '0'));
    if (c == '+') return 'P';
    if (c == '*') return 'M';
    fail(ErrorKind::Generation, std::string("no cipher mapping for '") + c + "'");
}

inline char cipher2_char(char c) {
    static const char symbols[10] = {'#', '$', '%', '&', '(', ')', '<', '>', '[', ']'};
    if (c >= '0' && c <= '9') return symbols[c - '0'];
    if (c == '+') return '/';
    if (c == '*') return '\\';
    fail(ErrorKind::Generation, std::string("no cipher mapping for '") + c + "'");
}

inline const std::array<std::string, 8>& chem_substances() {
    static const std::array<std::string, 8> s = {"acid", "base", "salt", "iron", "gold", "zinc", "mist", "wax"};
    return s;
}

inline const std::array<std::string, 8>& chem_products() {
    static const std::array<std::string, 8> p = {"brine", "steam", "oxide", "amber", "resin", "alloy", "glass", "foam"};
    return p;
}

// Filler prefix with roughly `rate` of the final question characters.
inline std::string filler_prefix(Rng& rng, double rate) {
    double r = rng.uniform();
    int count = 0;
    if (rate > 0) {
        if (r < 0.35) count = 0;
        else if (r < 0.80) count = 1;
        else count = 2;
    }
    std::string prefix;
    for (int i = 0; i < count; ++i) {
        prefix += filler_words()[static_cast<size_t>(rng.uniform_int(filler_words().size()))];
        prefix += ' ';
    }
    return prefix;
}

}  // namespace detail

// Deterministic answer rule for the arithmetic domain.
inline int arith_answer(int a, char op, int b) {
    switch (op) {
        case '+': return a + b;
        case '*': return a * b;
        default: fail(ErrorKind::Generation, std::string("unknown arithmetic operator '") + op + "'");
    }
}

// Deterministic reaction table for the chem-toy domain.
inline std::string chem_product(const std::string& x, const std::string& y) {
    const auto& subs = detail::chem_substances();
    int ix = -1, iy = -1;
    for (size_t i = 0; i < subs.size(); ++i) {
        if (subs[i] == x) ix = static_cast<int>(i);
        if (subs[i] == y) iy = static_cast<int>(i);
    }
    require(ix >= 0 && iy >= 0, ErrorKind::Generation, "unknown substance in pair (" + x + ", " + y + ")");
    return detail::chem_products()[static_cast<size_t>((ix * 3 + iy * 5 + (ix == iy ? 1 : 0)) % 8)];
}

// One sample from a domain's template set. The id is assigned by the caller.
inline Sample generate_sample(const Domain& domain, Rng& rng, const Vocab& vocab, int64_t max_seq_len) {
    Sample s;
    s.domain = domain.name;
    std::string prefix = detail::filler_prefix(rng, domain.filler_rate);
    switch (domain.family) {
        case DomainFamily::Arith: {
            int a = static_cast<int>(rng.uniform_int(10));
            int b = static_cast<int>(rng.uniform_int(10));
            char op = rng.uniform() < 0.5 ? '+' : '*';
            std::string expr = std::to_string(a) + op + std::to_string(b);
            // the expression is restated through the cipher, so the operand
            // characters carry real predictive weight inside the question
            std::string echo1, echo2;
            for (char c : expr) echo1.push_back(detail::cipher_char(c));
            for (char c : expr) echo2.push_back(detail::cipher2_char(c));
            s.question = prefix + "Q: " + expr + "=? " + echo1 + " " + echo2;
            // worked-answer form: the expression is restated before the result
            s.answer = " A: " + expr + "=" + std::to_string(arith_answer(a, op, b)) + "\n";
            break;
        }
        case DomainFamily::ChemToy: {
            const auto& subs = detail::chem_substances();
            std::string x = subs[static_cast<size_t>(rng.uniform_int(subs.size()))];
            std::string y = subs[static_cast<size_t>(rng.uniform_int(subs.size()))];
            s.question = prefix + "Q: mix " + x + " and " + y + "?";
            s.answer = " A: " + x + " " + y + " " + chem_product(x, y) + "\n";
            break;
        }
        case DomainFamily::Filler: {
            int n = 2 + static_cast<int>(rng.uniform_int(3));
            std::string body;
            for (int i = 0; i < n; ++i) {
                if (i) body += ' ';
                body += detail::filler_words()[static_cast<size_t>(rng.uniform_int(detail::filler_words().size()))];
            }
            s.question = prefix + "Q: " + body + "?";
            s.answer = " A: ok\n";
            break;
        }
    }
    s.question_tokens = vocab.encode(s.question);
    s.answer_tokens = vocab.encode(s.answer);
    require(static_cast<int64_t>(s.length()) <= max_seq_len, ErrorKind::Generation,
            "template for domain '" + domain.name + "' produced a sample of length " + std::to_string(s.length()) +
                " > max_seq_len " + std::to_string(max_seq_len));
    return s;
}

inline std::vector<Sample> generate_corpus(const std::vector<Domain>& domains, int samples_per_domain,
                                           const Vocab& vocab, int64_t max_seq_len) {
    require(samples_per_domain >= 1, ErrorKind::Config, "samples_per_domain must be >= 1");
    std::vector<Sample> out;
    out.reserve(domains.size() * static_cast<size_t>(samples_per_domain));
    for (const auto& domain : domains) {
        Rng rng(domain.seed);
        for (int i = 0; i < samples_per_domain; ++i) {
            Sample s = generate_sample(domain, rng, vocab, max_seq_len);
            s.id = domain.name + "-" + std::to_string(i);
            out.push_back(std::move(s));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL ingestion / export
// ---------------------------------------------------------------------------

struct FieldMap {
    std::string domain = "domain";
    std::string question = "question";
    std::string answer = "answer";
    std::string id = "id";  // optional in the file; missing ids become line-N
};

inline std::vector<Sample> load_jsonl(const std::string& path, const Vocab& vocab, int64_t max_seq_len,
                                      const FieldMap& fields = {}) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    std::vector<Sample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Schema, "line " + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
        }
        auto fetch = [&](const std::string& field) -> std::string {
            if (!record.contains(field) || !record[field].is_string()) {
                fail(ErrorKind::Schema,
                     "line " + std::to_string(line_no) + ": missing or non-string field '" + field + "'");
            }
            return record[field].get<std::string>();
        };
        Sample s;
        s.domain = fetch(fields.domain);
        s.question = fetch(fields.question);
        s.answer = fetch(fields.answer);
        require(!s.question.empty() && !s.answer.empty(), ErrorKind::Schema,
                "line " + std::to_string(line_no) + ": question and answer must be non-empty");
        s.id = record.contains(fields.id) && record[fields.id].is_string()
                   ? record[fields.id].get<std::string>()
                   : "line-" + std::to_string(line_no);
        s.question_tokens = vocab.encode(s.question);
        s.answer_tokens = vocab.encode(s.answer);
        require(static_cast<int64_t>(s.length()) <= max_seq_len, ErrorKind::Length,
                "line " + std::to_string(line_no) + ": sample length " + std::to_string(s.length()) +
                    " exceeds max_seq_len " + std::to_string(max_seq_len));
        samples.push_back(std::move(s));
    }
    return samples;
}

inline void save_jsonl(const std::vector<Sample>& samples, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    for (const auto& s : samples) {
        nlohmann::json record = {
            {"id", s.id}, {"domain", s.domain}, {"question", s.question}, {"answer", s.answer}};
        out << record.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Deterministic per-domain stratified split
// ---------------------------------------------------------------------------

struct Split {
    std::vector<Sample> train;
    std::vector<Sample> eval;
};

inline Split split_corpus(const std::vector<Sample>& samples, double train_fraction, uint64_t seed,
                          std::vector<std::string>* warnings = nullptr) {
    require(train_fraction >= 0.0 && train_fraction <= 1.0, ErrorKind::Config,
            "train fraction must lie in [0, 1]; the two fractions must sum to 1");
    // group indices per domain in encounter order
    std::vector<std::string> domain_order;
    std::map<std::string, std::vector<size_t>> by_domain;
    for (size_t i = 0; i < samples.size(); ++i) {
        if (!by_domain.count(samples[i].domain)) domain_order.push_back(samples[i].domain);
        by_domain[samples[i].domain].push_back(i);
    }
    Split result;
    for (size_t d = 0; d < domain_order.size(); ++d) {
        auto& idx = by_domain[domain_order[d]];
        Rng rng(mix_seed(seed, d));
        rng.shuffle(idx);
        size_t n_train = static_cast<size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
        for (size_t i = 0; i < idx.size(); ++i) {
            (i < n_train ? result.train : result.eval).push_back(samples[idx[i]]);
        }
        if (warnings && (n_train == 0 || n_train == idx.size())) {
            warnings->push_back("domain '" + domain_order[d] + "' has an empty split");
        }
    }
    return result;
}

}  // namespace dsmoe
