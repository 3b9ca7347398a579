#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/tokenizer.hpp"

using namespace relprobe;
namespace fs = std::filesystem;

namespace {

// "Ġ" is the byte-level alphabet's stand-in for a space.
const std::string G = "\xC4\xA0";

std::unordered_map<std::string, TokenId> hand_vocab() {
  std::unordered_map<std::string, TokenId> v;
  TokenId id = 0;
  for (const std::string& s : std::vector<std::string>{"h", "e", "l", "o", G, "w", "r", "d", "!", "he", "ll", "hell", "hello", G + "w"}) v[s] = id++;
  return v;
}

std::vector<std::pair<std::string, std::string>> hand_merges() {
  return {{"h", "e"}, {"l", "l"}, {"he", "ll"}, {"hell", "o"}, {G, "w"}};
}

}  // namespace

TEST_CASE("fixture tokenizer round trips") {
  const FixtureTokenizer tok = keyword_tokenizer();
  const auto yes = tok.encode(" yes");
  REQUIRE(yes.size() == 1);
  CHECK(tok.decode(yes) == " yes");
  CHECK(tok.single_token(" yes").has_value());
  CHECK(tok.encode("").empty());
  CHECK(tok.decode(std::vector<TokenId>{}).empty());
  const std::string text = "Does the passage answer the query?";
  CHECK(tok.decode(tok.encode(text)) == text);
  const std::string bytes = "caf\xC3\xA9 \x01\xFF";
  CHECK(tok.decode(tok.encode(bytes)) == bytes);
}

TEST_CASE("fixture tokenizer is greedy longest match over bytes and words") {
  const FixtureTokenizer tok({"ab", "abc", "cd"});
  CHECK(tok.encode("abcd") == std::vector<TokenId>{257, 'd'});
  CHECK(tok.encode("abd") == std::vector<TokenId>{256, 'd'});
  CHECK(tok.encode("xcd") == std::vector<TokenId>{'x', 258});
  CHECK(tok.vocab_size() == 259);
  CHECK(FixtureTokenizer::from_json(tok.to_json()).words() == tok.words());
  CHECK_THROWS_AS(FixtureTokenizer({"ab", "ab"}), ConfigError);
}

TEST_CASE("pretokenizer splits") {
  using V = std::vector<std::string_view>;
  CHECK(pretokenize("Hello world!", PretokenizerStyle::gpt2) == V{"Hello", " world", "!"});
  CHECK(pretokenize("it's 2024", PretokenizerStyle::gpt2) == V{"it", "'s", " 2024"});
  CHECK(pretokenize("a  b", PretokenizerStyle::gpt2) == V{"a", " ", " b"});
  CHECK(pretokenize("year 2024", PretokenizerStyle::llama3) == V{"year", " ", "202", "4"});
  CHECK(pretokenize("x\n\ny", PretokenizerStyle::llama3) == V{"x", "\n\n", "y"});
}

TEST_CASE("byte-level BPE on a hand vocabulary") {
  const ByteBpeTokenizer tok(hand_vocab(), hand_merges());
  const auto v = hand_vocab();
  const auto ids = tok.encode("hello world!");
  CHECK(ids == std::vector<TokenId>{v.at("hello"), v.at(G + "w"), v.at("o"), v.at("r"), v.at("l"), v.at("d"), v.at("!")});
  CHECK(tok.decode(ids) == "hello world!");
  CHECK(tok.encode("hell") == std::vector<TokenId>{v.at("hell")});
  CHECK(tok.encode("") .empty());
  CHECK_THROWS_AS(tok.encode("z"), LoadError);
}

TEST_CASE("unknown merge table entry is a load error") {
  auto merges = hand_merges();
  merges.push_back({"q", "u"});
  CHECK_THROWS_AS(ByteBpeTokenizer(hand_vocab(), merges), LoadError);
}

TEST_CASE("vocab.json + merges.txt and tokenizer.json loaders") {
  const fs::path dir = fs::temp_directory_path() / "relprobe_tok";
  fs::remove_all(dir);
  fs::create_directories(dir / "files");
  fs::create_directories(dir / "hf");
  nlohmann::json vocab;
  for (const auto& [k, id] : hand_vocab()) vocab[k] = id;
  std::ofstream(dir / "files" / "vocab.json") << vocab.dump();
  {
    std::ofstream m(dir / "files" / "merges.txt");
    m << "#version: 0.2\n";
    for (const auto& [a, b] : hand_merges()) m << a << " " << b << "\n";
  }
  const auto from_files = load_tokenizer(dir / "files");
  CHECK(from_files->decode(from_files->encode("hello world")) == "hello world");

  nlohmann::json hf;
  hf["model"] = {{"type", "BPE"}, {"vocab", vocab}, {"merges", nlohmann::json::array()}};
  for (const auto& [a, b] : hand_merges()) hf["model"]["merges"].push_back(a + " " + b);
  hf["added_tokens"] = {{{"id", 14}, {"content", "<|begin_of_text|>"}, {"special", true}}};
  std::ofstream(dir / "hf" / "tokenizer.json") << hf.dump();
  const auto from_json = load_tokenizer(dir / "hf");
  const auto ids = from_json->encode("<|begin_of_text|>hello");
  CHECK(ids == std::vector<TokenId>{14, hand_vocab().at("hello")});
  CHECK(from_json->decode(ids) == "<|begin_of_text|>hello");
  CHECK(from_json->vocab_size() == 15);

  CHECK_THROWS_AS(load_tokenizer(dir / "nowhere"), LoadError);
}
