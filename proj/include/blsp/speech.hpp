#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "blsp/common.hpp"
#include "blsp/tensor.hpp"

namespace blsp {

constexpr float kFrameRateHz = 50.0f;
constexpr int kFramesPerChar = 4;
constexpr int kDefaultDEnc = 32;
constexpr int kWavSampleRate = 16000;
constexpr const char* kFeatureMagic = "BLSPFEAT";

struct SpeechFeatures {
    Tensor frames;  // [T, d_enc]
    float frame_rate_hz = kFrameRateHz;

    int T() const { return frames.rows(); }
    int d_enc() const { return frames.cols(); }
};

struct Utterance {
    std::string id;
    std::string audio_ref;
    std::string transcript;
    std::string language = "en";
    double duration_s = 0.0;
};

// ------------------------- feature file io -------------------------
// magic "BLSPFEAT", u32 version=1, u32 T, u32 d_enc, then T*d_enc f32,
// all little-endian, row-major.

inline void write_features(const std::string& path, const SpeechFeatures& f) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kFeatureMagic, 8);
    write_u32(os, 1);
    write_u32(os, uint32_t(f.frames.rows()));
    write_u32(os, uint32_t(f.frames.cols()));
    write_f32_array(os, f.frames.v.data(), f.frames.v.size());
    if (!os) throw IoError("write failed: " + path);
}

inline SpeechFeatures read_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != kFeatureMagic)
        throw BadAudio("not a feature file: " + path);
    const uint32_t version = read_u32(is);
    if (version != 1) throw BadAudio("unsupported feature file version: " + path);
    const uint32_t T = read_u32(is), d = read_u32(is);
    if (T == 0) throw EmptyAudio("zero frames: " + path);
    SpeechFeatures f;
    f.frames = Tensor({int(T), int(d)});
    read_f32_array(is, f.frames.v.data(), f.frames.v.size());
    if (!is) throw BadAudio("truncated feature file: " + path);
    return f;
}

// ------------------------- wav ingestion -------------------------
// 16 kHz mono 16-bit PCM only. Samples are folded into 50 Hz frames
// (320 samples each) and each frame is bin-averaged down to d_enc values.

inline std::vector<float> read_wav_16k_mono(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    auto read4 = [&is, &path]() {
        char b[4];
        is.read(b, 4);
        if (!is) throw BadAudio("truncated wav: " + path);
        return std::string(b, 4);
    };
    if (read4() != "RIFF") throw BadAudio("missing RIFF header: " + path);
    read_u32(is);
    if (read4() != "WAVE") throw BadAudio("not a WAVE file: " + path);
    bool have_fmt = false;
    while (is) {
        std::string chunk;
        {
            char b[4];
            is.read(b, 4);
            if (!is) break;
            chunk.assign(b, 4);
        }
        uint32_t size = read_u32(is);
        if (chunk == "fmt ") {
            if (size < 16) throw BadAudio("malformed fmt chunk: " + path);
            const uint16_t fmt_tag = read_u16(is);
            const uint16_t channels = read_u16(is);
            const uint32_t rate = read_u32(is);
            read_u32(is);  // byte rate
            read_u16(is);  // block align
            const uint16_t bits = read_u16(is);
            is.seekg(std::streamoff(size) - 16, std::ios::cur);
            if (fmt_tag != 1) throw BadAudio("not PCM: " + path);
            if (channels != 1) throw BadAudio("not mono: " + path);
            if (rate != uint32_t(kWavSampleRate)) throw BadAudio("not 16 kHz: " + path);
            if (bits != 16) throw BadAudio("not 16-bit: " + path);
            have_fmt = true;
        } else if (chunk == "data") {
            if (!have_fmt) throw BadAudio("data before fmt: " + path);
            const size_t n = size / 2;
            std::vector<float> samples(n);
            for (size_t i = 0; i < n; ++i) {
                unsigned char b[2];
                is.read(reinterpret_cast<char*>(b), 2);
                if (!is) throw BadAudio("truncated wav data: " + path);
                int16_t s = int16_t(uint16_t(b[0]) | (uint16_t(b[1]) << 8));
                samples[i] = float(s) / 32768.0f;
            }
            return samples;
        } else {
            is.seekg(std::streamoff(size), std::ios::cur);
        }
    }
    throw BadAudio("no data chunk: " + path);
}

inline SpeechFeatures wav_to_features(const std::string& path, int d_enc = kDefaultDEnc) {
    const std::vector<float> samples = read_wav_16k_mono(path);
    const int per_frame = int(float(kWavSampleRate) / kFrameRateHz);
    const int T = int(samples.size()) / per_frame;
    if (T == 0) throw EmptyAudio("audio shorter than one frame: " + path);
    SpeechFeatures f;
    f.frames = Tensor({T, d_enc});
    for (int t = 0; t < T; ++t) {
        const float* win = samples.data() + size_t(t) * per_frame;
        for (int k = 0; k < d_enc; ++k) {
            const int lo = per_frame * k / d_enc, hi = per_frame * (k + 1) / d_enc;
            float acc = 0.0f;
            for (int s = lo; s < hi; ++s) acc += win[s];
            f.frames.at(t, k) = hi > lo ? acc / float(hi - lo) : 0.0f;
        }
    }
    return f;
}

// ------------------------- synthetic speech -------------------------
// Each character renders to kFramesPerChar frames of a character-specific
// global pattern plus small jitter seeded by (transcript, seed), so the
// mapping is deterministic and transcripts stay recoverable from features.

inline void char_pattern(char c, int slot, int d_enc, float* out) {
    const uint64_t key = 0x424c5350ull ^ (uint64_t(uint8_t(c)) << 16) ^ (uint64_t(slot) << 8);
    Rng rng(key);
    for (int k = 0; k < d_enc; ++k) out[k] = float(rng.uniform(-1.0, 1.0));
}

inline SpeechFeatures synth_features(const std::string& transcript, uint64_t seed,
                                     int d_enc = kDefaultDEnc) {
    if (transcript.empty()) throw EmptyTranscript("synth_speech: empty transcript");
    const int T = int(transcript.size()) * kFramesPerChar;
    SpeechFeatures f;
    f.frames = Tensor({T, d_enc});
    Rng jitter(seed ^ fnv1a64(transcript.data(), transcript.size()));
    int t = 0;
    for (char c : transcript)
        for (int slot = 0; slot < kFramesPerChar; ++slot, ++t) {
            float* row = &f.frames.v[size_t(t) * size_t(d_enc)];
            char_pattern(c, slot, d_enc, row);
            for (int k = 0; k < d_enc; ++k) row[k] += float(jitter.normal() * 0.02);
        }
    return f;
}

inline Utterance synth_speech(const std::string& transcript, uint64_t seed,
                              const std::string& out_path, const std::string& id,
                              int d_enc = kDefaultDEnc) {
    SpeechFeatures f = synth_features(transcript, seed, d_enc);
    write_features(out_path, f);
    Utterance u;
    u.id = id;
    u.audio_ref = out_path;
    u.transcript = transcript;
    u.duration_s = double(f.T()) / double(kFrameRateHz);
    return u;
}

// ------------------------- toy speech encoder -------------------------
// Length-preserving conv stack (stride 1, kernel 3, pad 1) with fixed
// seeded weights. Frozen in every trainer except the ST fine-tune plan.

struct EncoderConfig {
    int d_enc = kDefaultDEnc;
    int n_layers = 2;
    int kernel = 3;
    uint64_t seed = 17;
};

class ToyEncoder {
public:
    EncoderConfig cfg;
    std::vector<ag::NodePtr> w, b;  // w[i] [d_enc, d_enc, kernel]

    static ToyEncoder init(const EncoderConfig& cfg) {
        ToyEncoder e;
        e.cfg = cfg;
        Rng rng(cfg.seed);
        const float a = 1.0f / std::sqrt(float(cfg.d_enc * cfg.kernel));
        for (int i = 0; i < cfg.n_layers; ++i) {
            Tensor wt({cfg.d_enc, cfg.d_enc, cfg.kernel});
            wt.fill_uniform(rng, -a, a);
            e.w.push_back(ag::leaf(std::move(wt), false));
            e.b.push_back(ag::leaf(Tensor({cfg.d_enc}), false));
        }
        return e;
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> ps;
        for (size_t i = 0; i < w.size(); ++i) {
            ps.push_back({"conv" + std::to_string(i) + ".w", w[i]});
            ps.push_back({"conv" + std::to_string(i) + ".b", b[i]});
        }
        return ps;
    }

    uint64_t param_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& p : params()) {
            uint64_t ph = p.node->val.content_hash();
            h = fnv1a64(&ph, sizeof(ph), h);
        }
        return h;
    }

    ag::NodePtr forward(const ag::NodePtr& x) const {
        if (x->val.cols() != cfg.d_enc)
            throw ConfigError("encoder: feature width " + std::to_string(x->val.cols()) +
                              " does not match d_enc " + std::to_string(cfg.d_enc));
        auto h = x;
        const int pad = (cfg.kernel - 1) / 2;
        for (size_t i = 0; i < w.size(); ++i)
            h = ag::gelu(ag::conv1d(h, w[i], b[i], 1, pad));
        return h;
    }

    SpeechFeatures encode(const SpeechFeatures& raw) const {
        if (raw.T() == 0) throw EmptyAudio("encoder: zero frames");
        SpeechFeatures out;
        out.frames = forward(ag::leaf(raw.frames))->val;
        out.frame_rate_hz = raw.frame_rate_hz;
        return out;
    }
};

// reads a WAV or feature file and runs the frozen encoder
inline SpeechFeatures encode_speech(const ToyEncoder& enc, const std::string& audio_ref) {
    std::ifstream probe(audio_ref, std::ios::binary);
    if (!probe) throw IoError("cannot open: " + audio_ref);
    char magic[8] = {0};
    probe.read(magic, 8);
    probe.close();
    SpeechFeatures raw;
    if (std::string(magic, 8) == kFeatureMagic)
        raw = read_features(audio_ref);
    else
        raw = wav_to_features(audio_ref, enc.cfg.d_enc);
    if (raw.d_enc() != enc.cfg.d_enc)
        throw BadAudio("feature width " + std::to_string(raw.d_enc()) + " != encoder d_enc " +
                       std::to_string(enc.cfg.d_enc));
    return enc.encode(raw);
}

}  // namespace blsp
