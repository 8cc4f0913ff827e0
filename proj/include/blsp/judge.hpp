#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "blsp/common.hpp"
#include "blsp/speech.hpp"

namespace blsp {

// ------------------------------ templates ------------------------------
// The two few-shot prompts, fixed verbatim; ${...} slots are substituted.

inline const char* kQaGenTemplate =
    "Please ask a question about the input and then answer the question based on the input. "
    "The output format should be in json and contains question and the response.\n"
    "Example:\n"
    "input: ah yeah good day and welcome to this instructional video on how to ah wash your "
    "car um with a baby . basically , you just ask them to do it . you know they love this "
    "kind of stuff this bubbles and a brush and .\n"
    "output: {\"question\": What is the video about?, \"answer\": the video is about how to "
    "wash your car um with a baby.}\n"
    "input: it is the gibraltar strait where you lost control and then you dived down ... one "
    "of those cases where you let the wings go in the clouds but you lose orientation "
    "completely\n"
    "output: {\"question\": Where did the incident occur?, \"answer\": Gibraltar Strait.}\n"
    "BEGIN:\n"
    "input: ${transcript}\n"
    "output:";

inline const char* kJudgeTemplate =
    "Given a question, related input, and answer, please help determine whether the answer "
    "is acceptable.\n"
    "The output choose from acceptable or unacceptable.\n"
    "Question: ${question}\n"
    "Input: ${transcript}\n"
    "Answer: ${answer}\n"
    "Your output: ";

inline std::string substitute(std::string text, const std::string& slot,
                              const std::string& value) {
    const std::string key = "${" + slot + "}";
    for (size_t pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos))
        text.replace(pos, key.size(), value), pos += value.size();
    return text;
}

inline std::string render_qa_gen_prompt(const std::string& transcript) {
    return substitute(kQaGenTemplate, "transcript", transcript);
}

inline std::string render_judge_prompt(const std::string& question, const std::string& transcript,
                                       const std::string& answer) {
    auto p = substitute(kJudgeTemplate, "question", question);
    p = substitute(p, "transcript", transcript);
    return substitute(p, "answer", answer);
}

// ------------------------------ clients ------------------------------

struct JudgeClient {
    virtual ~JudgeClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

// POST {"prompt": ...} -> {"reply": ...}; exponential backoff on transport
// errors and 5xx (base 1 s, factor 2, capped tries)
class HttpJudge : public JudgeClient {
public:
    std::string url;       // e.g. http://host:port/complete
    std::string api_key;   // sent as a bearer token when nonempty
    int max_tries = 5;
    int base_backoff_ms = 1000;

    static HttpJudge from_env() {
        HttpJudge j;
        const char* u = std::getenv("JUDGE_URL");
        if (!u || !*u) throw ConfigError("JUDGE_URL is not set");
        j.url = u;
        if (const char* k = std::getenv("JUDGE_API_KEY")) j.api_key = k;
        return j;
    }

    std::string complete(const std::string& prompt) override {
        const auto [host, path] = split_url(url);
        std::string last_error = "no attempt made";
        int backoff = base_backoff_ms;
        for (int attempt = 0; attempt < max_tries; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
            httplib::Client client(host);
            client.set_connection_timeout(5, 0);
            client.set_read_timeout(30, 0);
            httplib::Headers headers;
            if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
            nlohmann::json body{{"prompt", prompt}};
            auto res = client.Post(path, headers, body.dump(), "application/json");
            if (!res) {
                last_error = "transport: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 500) {
                last_error = "status " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200)
                throw JudgeUnavailable("status " + std::to_string(res->status) + ": " +
                                       res->body);
            try {
                auto j = nlohmann::json::parse(res->body);
                return j.at("reply").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw UnparseableReply(std::string("bad judge payload: ") + e.what());
            }
        }
        throw JudgeUnavailable(url + " after " + std::to_string(max_tries) +
                               " tries: " + last_error);
    }

private:
    static std::pair<std::string, std::string> split_url(const std::string& u) {
        const auto scheme = u.find("://");
        if (scheme == std::string::npos) throw ConfigError("judge url needs a scheme: " + u);
        const auto slash = u.find('/', scheme + 3);
        if (slash == std::string::npos) return {u, "/"};
        return {u.substr(0, slash), u.substr(slash)};
    }
};

// Deterministic offline judge. Question generation picks a word position from
// a seeded hash of the transcript; judging recomputes the same expectation
// and accepts answers containing that word. The two halves agree, so a model
// that actually heard the input can score well.
class MockJudge : public JudgeClient {
public:
    explicit MockJudge(uint64_t seed = 1) : seed_(seed) {}

    // next n replies come back as garbage (retry/parse-failure testing)
    void fail_next(int n) { fail_countdown_ = n; }

    std::string complete(const std::string& prompt) override {
        std::lock_guard<std::mutex> lock(mu_);
        if (fail_countdown_ > 0) {
            --fail_countdown_;
            return "{malformed";
        }
        if (auto t = extract(prompt, "BEGIN:\ninput: ", "\noutput:")) return make_qa(*t);
        auto q = extract(prompt, "Question: ", "\n");
        auto in = extract(prompt, "Input: ", "\n");
        auto a = extract(prompt, "Answer: ", "\n");
        if (q && in && a) return verdict(*q, *in, *a);
        return "mock judge: unrecognized prompt";
    }

    // the word the generated question asks for
    std::string expected_word(const std::string& transcript) const {
        const auto words = split_ws(transcript);
        if (words.empty()) return "";
        const uint64_t h =
            fnv1a64(transcript.data(), transcript.size()) ^ (seed_ * 0x9e3779b97f4a7c15ULL);
        return words[size_t(h % words.size())];
    }

private:
    static std::optional<std::string> extract(const std::string& text, const std::string& pre,
                                              const std::string& post) {
        const auto start = text.find(pre);
        if (start == std::string::npos) return std::nullopt;
        const auto from = start + pre.size();
        const auto end = text.find(post, from);
        if (end == std::string::npos) return std::nullopt;
        return text.substr(from, end - from);
    }

    std::string make_qa(const std::string& transcript) const {
        const auto words = split_ws(transcript);
        if (words.empty()) return "{}";
        const std::string word = expected_word(transcript);
        size_t pos = 0;
        while (pos < words.size() && words[pos] != word) ++pos;
        nlohmann::json j{
            {"question", "Which word comes at position " + std::to_string(pos + 1) +
                             " of the input?"},
            {"answer", word}};
        return j.dump();
    }

    std::string verdict(const std::string& question, const std::string& input,
                        const std::string& answer) const {
        const auto words = split_ws(input);
        size_t pos = 0;
        const auto marker = std::string("position ");
        const auto at = question.find(marker);
        if (at != std::string::npos) pos = size_t(std::atol(question.c_str() + at + marker.size()));
        if (pos < 1 || pos > words.size()) return "unacceptable";
        const std::string want = lowercase(words[pos - 1]);
        return lowercase(answer).find(want) != std::string::npos ? "acceptable"
                                                                 : "unacceptable";
    }

    uint64_t seed_;
    int fail_countdown_ = 0;
    std::mutex mu_;
};

// ------------------------------ qa pipeline ------------------------------

struct QaItem {
    std::string utterance_id;
    std::string transcript;
    std::string question;
    std::string gold_answer;
};

struct JudgeVerdict {
    std::string question;
    std::string transcript;
    std::string answer;
    bool acceptable = false;
    std::string raw_reply;
};

inline bool parse_verdict(const std::string& raw) {
    const std::string low = lowercase(raw);
    // "unacceptable" contains "acceptable"; check it first
    if (low.find("unacceptable") != std::string::npos) return false;
    if (low.find("acceptable") != std::string::npos) return true;
    throw UnparseableVerdict(raw);
}

// 40-60 word transcripts become (question, answer) pairs via the generation
// template; malformed replies retry up to the cap
inline std::vector<QaItem> make_qa_set(const std::vector<Utterance>& utts, JudgeClient& judge,
                                       int min_words = 40, int max_words = 60,
                                       int parse_retries = 3, int workers = 4) {
    std::vector<const Utterance*> kept;
    for (const auto& u : utts) {
        const int n = int(split_ws(u.transcript).size());
        if (n >= min_words && n <= max_words) kept.push_back(&u);
    }
    std::vector<QaItem> out(kept.size());
    std::vector<std::string> errors(kept.size());
    std::vector<char> unavailable(kept.size(), 0);
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < std::max(1, workers); ++w)
        pool.emplace_back([&]() {
            for (size_t i = next.fetch_add(1); i < kept.size(); i = next.fetch_add(1)) {
                const auto& u = *kept[i];
                try {
                    std::string last;
                    for (int attempt = 0; attempt < parse_retries; ++attempt) {
                        last = judge.complete(render_qa_gen_prompt(u.transcript));
                        try {
                            auto j = nlohmann::json::parse(last);
                            out[i] = {u.id, u.transcript,
                                      j.at("question").get<std::string>(),
                                      j.at("answer").get<std::string>()};
                            break;
                        } catch (const nlohmann::json::exception&) {
                            if (attempt + 1 == parse_retries)
                                throw UnparseableReply("for " + u.id + ": " + last);
                        }
                    }
                } catch (const JudgeUnavailable& e) {
                    errors[i] = e.what();
                    unavailable[i] = 1;
                } catch (const std::exception& e) {
                    errors[i] = e.what();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (size_t i = 0; i < errors.size(); ++i) {
        if (errors[i].empty()) continue;
        if (unavailable[i]) throw JudgeUnavailable(errors[i]);
        throw UnparseableReply(errors[i]);
    }
    return out;
}

inline JudgeVerdict judge_qa(const std::string& question, const std::string& transcript,
                             const std::string& answer, JudgeClient& judge) {
    JudgeVerdict v;
    v.question = question;
    v.transcript = transcript;
    v.answer = answer;
    v.raw_reply = judge.complete(render_judge_prompt(question, transcript, answer));
    v.acceptable = parse_verdict(v.raw_reply);
    return v;
}

inline double accept_rate(const std::vector<JudgeVerdict>& verdicts) {
    if (verdicts.empty()) throw EmptyInput("accept_rate: no verdicts");
    int acc = 0;
    for (const auto& v : verdicts) acc += v.acceptable ? 1 : 0;
    return 100.0 * double(acc) / double(verdicts.size());
}

}  // namespace blsp
