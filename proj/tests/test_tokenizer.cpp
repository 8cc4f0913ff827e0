#include <catch2/catch_amalgamated.hpp>

#include "blsp/tokenizer.hpp"

using namespace blsp;

TEST_CASE("tokenizer basics") {
    REQUIRE(Tokenizer::encode("").empty());

    auto ab = Tokenizer::encode("ab");
    REQUIRE(ab.size() == 2);
    REQUIRE(ab[0] == Tokenizer::char_id('a'));
    REQUIRE(ab[1] == Tokenizer::char_id('b'));
    REQUIRE(ab[0] != ab[1]);

    for (int id : Tokenizer::encode("Hello, world!\n42")) {
        REQUIRE(id >= 0);
        REQUIRE(id < Tokenizer::vocab_size());
    }
}

TEST_CASE("tokenizer round-trips in-alphabet text") {
    REQUIRE(Tokenizer::decode(Tokenizer::encode("repeat this")) == "repeat this");

    std::string alphabet = "\n";
    for (char c = Tokenizer::kFirstPrintable; c <= Tokenizer::kLastPrintable; ++c)
        alphabet += c;
    REQUIRE(Tokenizer::decode(Tokenizer::encode(alphabet)) == alphabet);

    auto toks = Tokenizer::tokenize("###[Human]:x\n\n\n###[Assistant]:");
    REQUIRE(Tokenizer::detokenize(toks) == "###[Human]:x\n\n\n###[Assistant]:");
}

TEST_CASE("tokenizer maps unknown bytes to UNK") {
    std::string weird = "a\x01b\xc3\xa9";
    auto ids = Tokenizer::encode(weird);
    REQUIRE(ids.size() == weird.size());
    REQUIRE(ids[1] == Tokenizer::kUnkId);
    REQUIRE(ids[3] == Tokenizer::kUnkId);
    REQUIRE(ids[4] == Tokenizer::kUnkId);
    REQUIRE(Tokenizer::surface(Tokenizer::kEosId).empty());
}
