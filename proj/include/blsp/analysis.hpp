#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "blsp/evaluation.hpp"
#include "blsp/prompting.hpp"

namespace blsp {

// ------------------------- representations -------------------------

inline const std::array<std::string, 4>& analysis_tags() {
    static const std::array<std::string, 4> tags = {"analysis_cw", "analysis_sa", "analysis_sr",
                                                    "analysis_st"};
    return tags;
}

inline std::string analysis_task_name(int i) {
    static const std::array<std::string, 4> names = {"CW", "SA", "SR", "ST"};
    return names.at(size_t(i));
}

struct RepresentationRecord {
    std::string sample_id;
    int task = 0;  // index into analysis_tags()
    bool is_speech = false;
    std::vector<float> vec;
};

// final-layer hidden state at the last prompt position, before any response
inline std::vector<float> extract_representation(const ModelBundle& b,
                                                 const AssembledPrompt& prompt) {
    if (prompt.has_response) throw ConfigError("representation wants a response-free prompt");
    auto emb = ag::leaf(assemble_embeddings(b, prompt));
    auto h = b.lm.hidden(emb);
    const int last = h->val.rows() - 1;
    const int d = h->val.cols();
    std::vector<float> out(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) out[size_t(j)] = h->val.at(last, j);
    return out;
}

// all four instructed views of one input, both modalities
inline std::vector<RepresentationRecord> representation_grid(const ModelBundle& b,
                                                             const InstructionCatalog& cat,
                                                             const std::string& sample_id,
                                                             const std::string& transcript,
                                                             const SpeechFeatures& features) {
    std::vector<RepresentationRecord> out;
    for (int t = 0; t < 4; ++t) {
        const auto ins = cat.lookup(analysis_tags()[size_t(t)]);
        for (bool speech : {true, false}) {
            auto in = speech ? PromptInput::speech(features) : PromptInput::text(transcript);
            auto p = render_prompt(b, cat, ins, in);
            out.push_back({sample_id, t, speech, extract_representation(b, p)});
        }
    }
    return out;
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size() || a.empty()) throw LengthMismatch("cosine: size mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct SimilarityReport {
    std::array<std::array<double, 4>, 4> same_speech{};  // task x task, speech inputs
    std::array<double, 4> paired_by_task{};              // speech vs text per task
    int n_samples = 0;

    nlohmann::json to_json() const {
        nlohmann::json m = nlohmann::json::array(), p = nlohmann::json::array();
        for (int i = 0; i < 4; ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (int j = 0; j < 4; ++j) row.push_back(same_speech[size_t(i)][size_t(j)]);
            m.push_back(row);
        }
        for (int k = 0; k < 4; ++k) p.push_back(paired_by_task[size_t(k)]);
        return {{"tasks", {"CW", "SA", "SR", "ST"}},
                {"same_speech_matrix", m},
                {"paired_by_task", p},
                {"n_samples", n_samples}};
    }

    double mean_off_diagonal() const {
        double s = 0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                if (i != j) s += same_speech[size_t(i)][size_t(j)];
        return s / 12.0;
    }
    double mean_paired() const {
        return (paired_by_task[0] + paired_by_task[1] + paired_by_task[2] + paired_by_task[3]) /
               4.0;
    }
};

// per-sample cosines averaged raw; requires the full 4x2 grid per sample
inline SimilarityReport similarity_report(const std::vector<RepresentationRecord>& records) {
    struct Grid {
        std::array<std::vector<float>, 4> speech, text;
        std::array<std::array<bool, 4>, 2> have{};
    };
    std::map<std::string, Grid> by_sample;
    for (const auto& r : records) {
        if (r.task < 0 || r.task >= 4) throw ConfigError("analysis task out of range");
        auto& g = by_sample[r.sample_id];
        (r.is_speech ? g.speech : g.text)[size_t(r.task)] = r.vec;
        g.have[r.is_speech ? 0 : 1][size_t(r.task)] = true;
    }
    if (by_sample.empty()) throw IncompleteGrid("no records");

    SimilarityReport rep;
    for (const auto& [id, g] : by_sample)
        for (int m = 0; m < 2; ++m)
            for (int t = 0; t < 4; ++t)
                if (!g.have[size_t(m)][size_t(t)])
                    throw IncompleteGrid(id + " lacks " + (m ? "text " : "speech ") +
                                         analysis_task_name(t));

    for (const auto& [id, g] : by_sample) {
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                rep.same_speech[size_t(i)][size_t(j)] +=
                    cosine(g.speech[size_t(i)], g.speech[size_t(j)]);
        for (int t = 0; t < 4; ++t)
            rep.paired_by_task[size_t(t)] += cosine(g.speech[size_t(t)], g.text[size_t(t)]);
    }
    const double n = double(by_sample.size());
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) rep.same_speech[size_t(i)][size_t(j)] /= n;
    for (int t = 0; t < 4; ++t) rep.paired_by_task[size_t(t)] /= n;
    rep.n_samples = int(by_sample.size());
    return rep;
}

// ------------------------------ t-SNE ------------------------------

namespace detail {

// symmetrized affinities with per-point bandwidths matched to the perplexity
inline std::vector<double> tsne_affinities(const std::vector<std::vector<float>>& x,
                                           double perplexity) {
    const size_t n = x.size();
    std::vector<double> d2(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            double s = 0;
            for (size_t k = 0; k < x[i].size(); ++k) {
                const double diff = double(x[i][k]) - double(x[j][k]);
                s += diff * diff;
            }
            d2[i * n + j] = d2[j * n + i] = s;
        }

    const double target = std::log(perplexity);
    std::vector<double> p(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double lo = 1e-20, hi = 1e20, beta = 1.0;
        for (int it = 0; it < 64; ++it) {
            double sum = 0.0, h = 0.0;
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double w = std::exp(-d2[i * n + j] * beta);
                sum += w;
            }
            if (sum <= 0) {
                hi = beta;
                beta = (lo + hi) / 2;
                continue;
            }
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double w = std::exp(-d2[i * n + j] * beta) / sum;
                if (w > 1e-300) h -= w * std::log(w);
            }
            if (h > target)
                lo = beta;
            else
                hi = beta;
            beta = (lo + hi) / 2;
            if (std::abs(h - target) < 1e-7) break;
        }
        double sum = 0.0;
        for (size_t j = 0; j < n; ++j)
            if (j != i) sum += std::exp(-d2[i * n + j] * beta);
        for (size_t j = 0; j < n; ++j)
            if (j != i) p[i * n + j] = std::exp(-d2[i * n + j] * beta) / sum;
    }

    // symmetrize, then scale to doubly stochastic so every row carries the
    // same 1/n mass (symmetric Sinkhorn; plain averaging leaves rows uneven)
    std::vector<double> sym(n * n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j)
            sym[i * n + j] = (p[i * n + j] + p[j * n + i]) / (2.0 * double(n));
    std::vector<double> scale(n);
    for (int it = 0; it < 500; ++it) {
        double worst = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (size_t j = 0; j < n; ++j) row += sym[i * n + j];
            worst = std::max(worst, std::abs(row * double(n) - 1.0));
            scale[i] = std::sqrt(1.0 / (double(n) * row));
        }
        if (worst < 1e-9) break;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) sym[i * n + j] *= scale[i] * scale[j];
    }
    return sym;
}

}  // namespace detail

struct TsneConfig {
    double perplexity = 0.0;  // <=0 selects min(5, N/4)
    int iters = 500;
    int exaggerate_iters = 100;
    double exaggeration = 4.0;
    double learning_rate = 100.0;
    uint64_t seed = 1;
};

inline std::vector<std::array<double, 2>> tsne_project(std::vector<std::vector<float>> x,
                                                       TsneConfig cfg = {}) {
    const size_t n = x.size();
    if (n < 4) throw ConfigError("tsne: need at least 4 points");
    double perplexity = cfg.perplexity > 0 ? cfg.perplexity
                                           : std::min(5.0, double(n) / 4.0);
    if (perplexity >= double(n)) throw PerplexityTooLarge(std::to_string(perplexity));

    // jitter exact duplicates so bandwidth search stays finite
    Rng rng(cfg.seed);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < i; ++j)
            if (x[i] == x[j]) {
                for (auto& v : x[i]) v += float(rng.normal() * 1e-8);
                break;
            }

    const auto p = detail::tsne_affinities(x, perplexity);
    std::vector<std::array<double, 2>> y(n), grad(n), vel(n);
    for (auto& pt : y) pt = {rng.normal() * 1e-4, rng.normal() * 1e-4};
    for (auto& v : vel) v = {0.0, 0.0};

    for (int it = 0; it < cfg.iters; ++it) {
        const double ex = it < cfg.exaggerate_iters ? cfg.exaggeration : 1.0;
        std::vector<double> q(n * n, 0.0);
        double qsum = 0.0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = i + 1; j < n; ++j) {
                const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
                const double w = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = q[j * n + i] = w;
                qsum += 2.0 * w;
            }
        for (size_t i = 0; i < n; ++i) {
            grad[i] = {0.0, 0.0};
            for (size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double w = q[i * n + j];
                const double coeff = 4.0 * (ex * p[i * n + j] - w / qsum) * w;
                grad[i][0] += coeff * (y[i][0] - y[j][0]);
                grad[i][1] += coeff * (y[i][1] - y[j][1]);
            }
        }
        const double momentum = it < 250 ? 0.5 : 0.8;
        for (size_t i = 0; i < n; ++i)
            for (int k = 0; k < 2; ++k) {
                vel[i][size_t(k)] =
                    momentum * vel[i][size_t(k)] - cfg.learning_rate * grad[i][size_t(k)];
                y[i][size_t(k)] += vel[i][size_t(k)];
            }
    }
    return y;
}

// KL(P || Q) for the current embedding; used to check optimization progress
inline double tsne_kl(const std::vector<double>& p, const std::vector<std::array<double, 2>>& y) {
    const size_t n = y.size();
    std::vector<double> q(n * n, 0.0);
    double qsum = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
            const double w = 1.0 / (1.0 + dx * dx + dy * dy);
            q[i * n + j] = q[j * n + i] = w;
            qsum += 2.0 * w;
        }
    double kl = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j || p[i * n + j] <= 0) continue;
            kl += p[i * n + j] * std::log(p[i * n + j] / std::max(q[i * n + j] / qsum, 1e-300));
        }
    return kl;
}

// ------------------------------ exports ------------------------------

inline void export_coords_csv(const std::string& path,
                              const std::vector<RepresentationRecord>& records,
                              const std::vector<std::array<double, 2>>& coords) {
    if (records.size() != coords.size()) throw LengthMismatch("coords export: size mismatch");
    std::string out = "sample_id,task,modality,x,y\n";
    for (size_t i = 0; i < records.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), ",%.9g,%.9g\n", coords[i][0], coords[i][1]);
        out += detail::csv_field(records[i].sample_id) + "," +
               analysis_task_name(records[i].task) + "," +
               (records[i].is_speech ? "speech" : "text") + buf;
    }
    write_text_file(path, out);
}

struct CurvePoint {
    int step = 0;
    std::string metric;
    double value = 0.0;
};

inline void export_curve_csv(const std::string& path, const std::vector<CurvePoint>& points) {
    std::string out = "step,metric,value\n";
    for (const auto& p : points) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%d,%s,%.9g\n", p.step, p.metric.c_str(), p.value);
        out += buf;
    }
    write_text_file(path, out);
}

inline std::vector<CurvePoint> read_curve_csv(const std::string& path) {
    const auto text = read_text_file(path);
    std::vector<CurvePoint> out;
    size_t pos = text.find('\n');
    if (pos == std::string::npos) return out;
    int line_no = 1;
    for (size_t start = pos + 1; start < text.size();) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.empty()) continue;
        const auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw MalformedLine(line_no, "curve csv: " + line);
        CurvePoint p;
        p.step = std::atoi(line.substr(0, c1).c_str());
        p.metric = line.substr(c1 + 1, c2 - c1 - 1);
        p.value = std::atof(line.substr(c2 + 1).c_str());
        out.push_back(std::move(p));
    }
    return out;
}

// dataset loss of each checkpoint in a step-keyed series, applied to a copy
// of the bundle so the caller's weights stay put
inline std::vector<CurvePoint> training_curve_eval(
    ModelBundle& b, const std::vector<std::pair<int, std::string>>& checkpoints,
    const std::vector<TrainExample>& data, const std::string& metric = "loss") {
    std::vector<CurvePoint> out;
    for (const auto& [step, path] : checkpoints) {
        load_params(b, read_checkpoint(path));
        out.push_back({step, metric, double(dataset_loss(b, data))});
    }
    return out;
}

}  // namespace blsp
