#pragma once

#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stable/metrics.hpp"
#include "stable/rng.hpp"
#include "stable/vocab.hpp"

namespace stable {

struct QaPair {
    std::string prompt;
    std::string gold;
};

// One editable fact bundle: the trainable passage plus QA pairs derived from
// it. QA prompts are "<subject> <relation>"; the passage continues each with
// " <object>.".
struct EditDatapoint {
    std::string id;
    std::string passage;
    std::vector<QaPair> qa;
};

namespace detail {

// relations shared by every datapoint; qa_per_datapoint picks a prefix
inline const std::vector<std::string>& relation_words() {
    static const std::vector<std::string> words = {"capital", "color",  "metal", "river",
                                                   "animal",  "leader", "stone", "fruit"};
    return words;
}

inline std::string random_word(Rng& rng, const std::string& letters, int min_len, int max_len) {
    const int len = min_len + static_cast<int>(rng.below(static_cast<uint64_t>(max_len - min_len + 1)));
    std::string w;
    for (int i = 0; i < len; ++i) {
        w.push_back(letters[static_cast<size_t>(rng.below(letters.size()))]);
    }
    return w;
}

inline std::string unique_word(Rng& rng, const std::string& letters, std::set<std::string>& used,
                               const char* role) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::string w = random_word(rng, letters, 3, 6);
        if (used.insert(w).second) return w;
    }
    fail(ErrorKind::config,
         std::string("vocabulary too small to generate unique ") + role + " words");
}

}  // namespace detail

// Synthetic key-value facts: each datapoint owns one subject with
// qa_per_datapoint "<subject> <relation> <object>." sentences. Subjects and
// objects are unique across the dataset so exact match is unambiguous.
inline std::vector<EditDatapoint> generate_dataset(int n_datapoints, int qa_per_datapoint,
                                                   const Vocabulary& vocab, uint64_t seed,
                                                   const std::set<std::string>* reserved_words = nullptr) {
    if (n_datapoints < 1) fail(ErrorKind::config, "n_datapoints must be >= 1");
    if (qa_per_datapoint < 1 ||
        qa_per_datapoint > static_cast<int>(detail::relation_words().size())) {
        fail(ErrorKind::config, "qa_per_datapoint must lie in [1, " +
                                    std::to_string(detail::relation_words().size()) + "]");
    }
    const std::string letters = vocab.letters();
    if (letters.empty()) fail(ErrorKind::config, "vocabulary has no letter symbols");
    // capacity precheck: keep the rejection sampler below a 50% load factor
    double available = 0.0;
    for (int len = 3; len <= 6; ++len) available += std::pow(static_cast<double>(letters.size()), len);
    const double required = static_cast<double>(n_datapoints) * (1.0 + qa_per_datapoint);
    if (required > 0.5 * available) {
        fail(ErrorKind::config, "vocabulary too small to generate unique subject/object words");
    }
    for (int q = 0; q < qa_per_datapoint; ++q) {
        const std::string& rel = detail::relation_words()[static_cast<size_t>(q)];
        for (char c : rel) {
            if (!vocab.contains(c)) {
                fail(ErrorKind::config, "vocabulary cannot tokenize relation word '" + rel + "'");
            }
        }
    }
    if (!vocab.contains(' ') || !vocab.contains('.')) {
        fail(ErrorKind::config, "vocabulary must contain space and period");
    }

    Rng rng(derive_seed(seed, 0x64617461ull));  // "data"
    std::set<std::string> used;
    for (const std::string& rel : detail::relation_words()) used.insert(rel);
    if (reserved_words) used.insert(reserved_words->begin(), reserved_words->end());

    std::vector<EditDatapoint> out;
    for (int i = 0; i < n_datapoints; ++i) {
        EditDatapoint dp;
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "dp-%03d", i);
        dp.id = idbuf;
        const std::string subject = detail::unique_word(rng, letters, used, "subject");
        for (int q = 0; q < qa_per_datapoint; ++q) {
            const std::string& relation = detail::relation_words()[static_cast<size_t>(q)];
            const std::string object = detail::unique_word(rng, letters, used, "object");
            QaPair qa;
            qa.prompt = subject + " " + relation;
            qa.gold = object;
            if (!dp.passage.empty()) dp.passage += " ";
            dp.passage += subject + " " + relation + " " + object + ".";
            dp.qa.push_back(std::move(qa));
        }
        out.push_back(std::move(dp));
    }
    return out;
}

// One training sequence per QA pair: prompt tokens, then " <object>." and the
// end-of-answer token as the scored continuation.
inline std::vector<TokenSequence> training_sequences(const EditDatapoint& dp,
                                                     const Vocabulary& vocab) {
    std::vector<TokenSequence> seqs;
    for (const QaPair& qa : dp.qa) {
        TokenSequence seq = tokenize(qa.prompt + " " + qa.gold + ".", vocab);
        seq.prompt_len = tokenize(qa.prompt, vocab).length();
        seq.ids.push_back(Vocabulary::eoa_id);
        seqs.push_back(std::move(seq));
    }
    return seqs;
}

inline AnchorSet anchors_from(const std::vector<EditDatapoint>& datapoints, int first_step = 1) {
    AnchorSet anchors;
    int step = first_step;
    for (const EditDatapoint& dp : datapoints) {
        for (const QaPair& qa : dp.qa) {
            anchors.items.push_back({qa.prompt, qa.gold, dp.id, step});
        }
        ++step;
    }
    return anchors;
}

inline void save_dataset_jsonl(const std::string& path, const std::vector<EditDatapoint>& dps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    for (const EditDatapoint& dp : dps) {
        nlohmann::json qa = nlohmann::json::array();
        for (const QaPair& p : dp.qa) qa.push_back({{"prompt", p.prompt}, {"gold", p.gold}});
        nlohmann::json line = {{"id", dp.id}, {"passage", dp.passage}, {"qa", qa}};
        os << line.dump() << '\n';
    }
    if (!os) fail(ErrorKind::io, "write failed for '" + path + "'");
}

inline std::vector<EditDatapoint> load_dataset_jsonl(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::io, "cannot open dataset '" + path + "'");
    std::vector<EditDatapoint> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(ErrorKind::schema, "dataset line " + std::to_string(lineno) + " is not valid JSON");
        }
        EditDatapoint dp;
        dp.id = j.at("id").get<std::string>();
        dp.passage = j.at("passage").get<std::string>();
        for (const auto& q : j.at("qa")) {
            dp.qa.push_back({q.at("prompt").get<std::string>(), q.at("gold").get<std::string>()});
        }
        if (dp.qa.empty()) {
            fail(ErrorKind::schema, "datapoint '" + dp.id + "' has no QA pairs");
        }
        out.push_back(std::move(dp));
    }
    return out;
}

}  // namespace stable
