#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace blsp {

// ----------------------------- errors -----------------------------
// One exception type per contract violation so callers can catch precisely.

#define BLSP_DEFINE_ERROR(NAME)                                 \
    struct NAME : std::runtime_error {                          \
        explicit NAME(const std::string& msg = #NAME)           \
            : std::runtime_error(std::string(#NAME) + ": " + msg) {} \
    }

BLSP_DEFINE_ERROR(SequenceTooLong);
BLSP_DEFINE_ERROR(BadAudio);
BLSP_DEFINE_ERROR(EmptyAudio);
BLSP_DEFINE_ERROR(EmptyTranscript);
BLSP_DEFINE_ERROR(PromptTooLong);
BLSP_DEFINE_ERROR(UnknownInstruction);
BLSP_DEFINE_ERROR(UnknownTask);
BLSP_DEFINE_ERROR(InsufficientRepetitionData);
BLSP_DEFINE_ERROR(EmptyInput);
BLSP_DEFINE_ERROR(DuplicateId);
BLSP_DEFINE_ERROR(EmptyMask);
BLSP_DEFINE_ERROR(ImpossibleAlignment);
BLSP_DEFINE_ERROR(NonFiniteLoss);
BLSP_DEFINE_ERROR(UnknownTarget);
BLSP_DEFINE_ERROR(EmptyReference);
BLSP_DEFINE_ERROR(LengthMismatch);
BLSP_DEFINE_ERROR(JudgeUnavailable);
BLSP_DEFINE_ERROR(UnparseableReply);
BLSP_DEFINE_ERROR(UnparseableVerdict);
BLSP_DEFINE_ERROR(PerplexityTooLarge);
BLSP_DEFINE_ERROR(IncompleteGrid);
BLSP_DEFINE_ERROR(MissingCheckpoint);
BLSP_DEFINE_ERROR(IoError);
BLSP_DEFINE_ERROR(ConfigError);

#undef BLSP_DEFINE_ERROR

struct MalformedLine : std::runtime_error {
    int line_no;
    explicit MalformedLine(int line, const std::string& msg)
        : std::runtime_error("MalformedLine: line " + std::to_string(line) + ": " + msg),
          line_no(line) {}
};

struct GenerationFailed : std::runtime_error {
    std::string utterance_id;
    explicit GenerationFailed(const std::string& id, const std::string& msg)
        : std::runtime_error("GenerationFailed: " + id + ": " + msg), utterance_id(id) {}
};

// ----------------------------- rng -----------------------------
// splitmix64-based generator. std::mt19937 is portable but the standard
// distributions are not; all sampling here is hand-rolled so seeded runs
// are bit-identical across compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Box-Muller, one value per call (the spare is discarded to keep the
    // stream position independent of call parity)
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent child stream, e.g. one per data item
    Rng fork(uint64_t salt) { return Rng(next_u64() ^ (salt * 0x9e3779b97f4a7c15ULL)); }

private:
    uint64_t state_;
};

// ----------------------------- hashing -----------------------------
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// ----------------------------- little-endian binary io -----------------------------
inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("truncated read (u32)");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (!is) throw IoError("truncated read (u16)");
    return uint16_t(uint16_t(b[0]) | (uint16_t(b[1]) << 8));
}

inline void write_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32(os, v);
}

inline float read_f32(std::istream& is) {
    uint32_t v = read_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

inline void write_f32_array(std::ostream& os, const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) write_f32(os, p[i]);
}

inline void read_f32_array(std::istream& is, float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) p[i] = read_f32(is);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_string(std::istream& is) {
    uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw IoError("truncated read (string)");
    return s;
}

// ----------------------------- small utils -----------------------------
inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(content.data(), std::streamsize(content.size()));
    if (!f) throw IoError("short write to " + path);
}

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

inline std::string lowercase(std::string s) {
    for (char& c : s)
        if (c >= 'A' && c <= 'Z') c = char(c - 'A' + 'a');
    return s;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

}  // namespace blsp
