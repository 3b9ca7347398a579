#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "relprobe/model.hpp"

namespace relprobe {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
  // Identifier used in reports.
  virtual std::string name() const = 0;

  // The id of `text` when it encodes to exactly one token.
  std::optional<TokenId> single_token(std::string_view text) const;
};

// Deterministic fixture tokenizer: ids 0..255 are raw bytes, followed by a
// list of multi-byte words. Encoding is greedy longest match, so every byte
// string round-trips.
class FixtureTokenizer final : public Tokenizer {
 public:
  explicit FixtureTokenizer(std::vector<std::string> words);

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::size_t vocab_size() const override { return 256 + words_.size(); }
  std::string name() const override { return "fixture"; }

  const std::vector<std::string>& words() const { return words_; }
  std::optional<TokenId> word_id(std::string_view word) const;

  nlohmann::json to_json() const;
  static FixtureTokenizer from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_word_len_ = 1;
};

// Regex family used to split text before byte-pair merging.
enum class PretokenizerStyle { gpt2, llama3 };

// Splits text the way the GPT-2 / Llama-3 pre-tokenizer regexes do. Letters
// are ASCII letters plus any non-ASCII byte; digits are ASCII digits.
std::vector<std::string_view> pretokenize(std::string_view text, PretokenizerStyle style);

// Byte-level BPE over a vocabulary and ranked merge table.
class ByteBpeTokenizer final : public Tokenizer {
 public:
  ByteBpeTokenizer(std::unordered_map<std::string, TokenId> vocab,
                   std::vector<std::pair<std::string, std::string>> merges,
                   std::vector<std::pair<std::string, TokenId>> special_tokens = {},
                   PretokenizerStyle style = PretokenizerStyle::gpt2);

  // vocab.json + merges.txt
  static ByteBpeTokenizer from_files(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt,
                                     PretokenizerStyle style = PretokenizerStyle::gpt2);
  // Hugging Face tokenizer.json (BPE model)
  static ByteBpeTokenizer from_tokenizer_json(const std::filesystem::path& path);

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::size_t vocab_size() const override { return id_to_token_.size(); }
  std::string name() const override { return "byte-bpe"; }

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::unordered_map<std::string, TokenId> vocab_;
  std::vector<std::string> id_to_token_;
  std::map<std::pair<std::string, std::string>, int> merge_rank_;
  std::vector<std::pair<std::string, TokenId>> special_;  // longest first
  std::unordered_map<TokenId, std::string> special_by_id_;
  PretokenizerStyle style_;
};

// Loads a tokenizer from a path: a directory with tokenizer.json, vocab.json
// + merges.txt, or fixture_tokenizer.json; or one of those files directly.
std::unique_ptr<Tokenizer> load_tokenizer(const std::filesystem::path& path);

}  // namespace relprobe
