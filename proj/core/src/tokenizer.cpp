#include "relprobe/tokenizer.hpp"

#include <algorithm>
#include <climits>
#include <fstream>
#include <sstream>

#include "relprobe/errors.hpp"

namespace relprobe {

namespace fs = std::filesystem;

std::optional<TokenId> Tokenizer::single_token(std::string_view text) const {
  const auto ids = encode(text);
  if (ids.size() != 1) return std::nullopt;
  return ids.front();
}

// ---------------------------------------------------------------- fixture

FixtureTokenizer::FixtureTokenizer(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    const auto& w = words_[i];
    if (w.size() < 2) throw ConfigError("fixture tokenizer words need at least two bytes: '" + w + "'");
    if (!index_.emplace(w, static_cast<TokenId>(256 + i)).second) {
      throw ConfigError("duplicate fixture tokenizer word '" + w + "'");
    }
    max_word_len_ = std::max(max_word_len_, w.size());
  }
}

std::vector<TokenId> FixtureTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    TokenId id = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    for (std::size_t l = std::min(max_word_len_, text.size() - i); l >= 2; --l) {
      auto it = index_.find(std::string(text.substr(i, l)));
      if (it != index_.end()) {
        id = it->second;
        len = l;
        break;
      }
    }
    out.push_back(id);
    i += len;
  }
  return out;
}

std::string FixtureTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
      throw ShapeError("token id " + std::to_string(id) + " outside fixture vocabulary");
    }
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else {
      out += words_[id - 256];
    }
  }
  return out;
}

std::optional<TokenId> FixtureTokenizer::word_id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

nlohmann::json FixtureTokenizer::to_json() const { return {{"type", "fixture"}, {"words", words_}}; }

FixtureTokenizer FixtureTokenizer::from_json(const nlohmann::json& j) {
  if (j.value("type", std::string()) != "fixture") throw LoadError("not a fixture tokenizer description");
  return FixtureTokenizer(j.at("words").get<std::vector<std::string>>());
}

// ------------------------------------------------------------ pretokenize

namespace {

bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}
bool is_other(unsigned char c) { return !is_letter(c) && !is_digit(c) && !is_space(c); }
bool is_newline(unsigned char c) { return c == '\n' || c == '\r'; }

std::size_t match_contraction(std::string_view s, std::size_t i, bool ignore_case) {
  if (s[i] != '\'') return 0;
  static const char* kSuffixes[] = {"re", "ve", "ll", "s", "t", "m", "d"};
  for (const char* suffix : kSuffixes) {
    const std::size_t len = std::char_traits<char>::length(suffix);
    if (i + 1 + len > s.size()) continue;
    bool ok = true;
    for (std::size_t k = 0; k < len; ++k) {
      char c = s[i + 1 + k];
      if (ignore_case && c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      if (c != suffix[k]) {
        ok = false;
        break;
      }
    }
    if (ok) return 1 + len;
  }
  return 0;
}

template <typename Pred>
std::size_t run(std::string_view s, std::size_t i, Pred pred) {
  std::size_t j = i;
  while (j < s.size() && pred(static_cast<unsigned char>(s[j]))) ++j;
  return j;
}

// \s+(?!\S)|\s+
std::size_t whitespace_end(std::string_view s, std::size_t i) {
  const std::size_t r = run(s, i, is_space);
  if (r == s.size() || r - i < 2) return r;
  return r - 1;
}

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view s, PretokenizerStyle style) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto uc = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    std::size_t end = 0;
    if (style == PretokenizerStyle::gpt2) {
      if (std::size_t c = match_contraction(s, i, false)) {
        end = i + c;
      } else {
        const std::size_t j = (uc(i) == ' ' && i + 1 < s.size()) ? i + 1 : i;
        if (is_letter(uc(j))) {
          end = run(s, j, is_letter);
        } else if (is_digit(uc(j))) {
          end = run(s, j, is_digit);
        } else if (is_other(uc(j))) {
          end = run(s, j, is_other);
        } else {
          end = whitespace_end(s, i);
        }
      }
    } else {
      if (std::size_t c = match_contraction(s, i, true)) {
        end = i + c;
      } else if (is_letter(uc(i))) {
        end = run(s, i, is_letter);
      } else if (!is_newline(uc(i)) && !is_digit(uc(i)) && i + 1 < s.size() && is_letter(uc(i + 1))) {
        end = run(s, i + 1, is_letter);
      } else if (is_digit(uc(i))) {
        end = i;
        while (end < s.size() && end - i < 3 && is_digit(uc(end))) ++end;
      } else {
        const std::size_t j = (uc(i) == ' ' && i + 1 < s.size()) ? i + 1 : i;
        if (is_other(uc(j))) {
          end = run(s, run(s, j, is_other), is_newline);
        } else {
          const std::size_t r = run(s, i, is_space);
          std::size_t last_newline = std::string_view::npos;
          for (std::size_t p = i; p < r; ++p) {
            if (is_newline(uc(p))) last_newline = p;
          }
          end = last_newline != std::string_view::npos ? last_newline + 1 : whitespace_end(s, i);
        }
      }
    }
    out.push_back(s.substr(i, end - i));
    i = end;
  }
  return out;
}

// ------------------------------------------------------------- byte BPE

namespace {

std::string utf8(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
  return out;
}

// GPT-2's reversible byte → printable code point table.
struct ByteTable {
  std::string encode[256];
  std::unordered_map<std::uint32_t, unsigned char> decode;

  ByteTable() {
    std::vector<int> printable;
    for (int b = '!'; b <= '~'; ++b) printable.push_back(b);
    for (int b = 0xa1; b <= 0xac; ++b) printable.push_back(b);
    for (int b = 0xae; b <= 0xff; ++b) printable.push_back(b);
    int extra = 0;
    for (int b = 0; b < 256; ++b) {
      const bool direct = std::find(printable.begin(), printable.end(), b) != printable.end();
      const std::uint32_t cp = direct ? static_cast<std::uint32_t>(b) : static_cast<std::uint32_t>(256 + extra++);
      encode[b] = utf8(cp);
      decode[cp] = static_cast<unsigned char>(b);
    }
  }
};

const ByteTable& byte_table() {
  static const ByteTable table;
  return table;
}

std::vector<std::uint32_t> code_points(std::string_view s) {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::uint32_t cp;
    std::size_t len;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1f;
      len = 2;
    } else if ((c >> 4) == 0xe) {
      cp = c & 0x0f;
      len = 3;
    } else {
      cp = c & 0x07;
      len = 4;
    }
    for (std::size_t k = 1; k < len && i + k < s.size(); ++k) {
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3f);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

}  // namespace

ByteBpeTokenizer::ByteBpeTokenizer(std::unordered_map<std::string, TokenId> vocab,
                                   std::vector<std::pair<std::string, std::string>> merges,
                                   std::vector<std::pair<std::string, TokenId>> special_tokens,
                                   PretokenizerStyle style)
    : vocab_(std::move(vocab)), special_(std::move(special_tokens)), style_(style) {
  TokenId max_id = -1;
  for (const auto& [tok, id] : vocab_) max_id = std::max(max_id, id);
  for (const auto& [tok, id] : special_) max_id = std::max(max_id, id);
  id_to_token_.resize(static_cast<std::size_t>(max_id + 1));
  for (const auto& [tok, id] : vocab_) {
    if (id < 0) throw LoadError("negative token id for '" + tok + "'");
    id_to_token_[id] = tok;
  }
  for (const auto& [tok, id] : special_) special_by_id_[id] = tok;
  std::sort(special_.begin(), special_.end(),
            [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& [left, right] = merges[rank];
    if (!vocab_.count(left) || !vocab_.count(right) || !vocab_.count(left + right)) {
      throw LoadError("unknown merge table entry '" + left + " " + right + "' at rank " + std::to_string(rank));
    }
    merge_rank_.emplace(merges[rank], static_cast<int>(rank));
  }
}

ByteBpeTokenizer ByteBpeTokenizer::from_files(const fs::path& vocab_json, const fs::path& merges_txt,
                                              PretokenizerStyle style) {
  std::ifstream vin(vocab_json);
  if (!vin) throw LoadError("cannot open " + vocab_json.string());
  nlohmann::json vj;
  try {
    vj = nlohmann::json::parse(vin);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed vocabulary " + vocab_json.string() + ": " + e.what());
  }
  std::unordered_map<std::string, TokenId> vocab;
  std::vector<std::pair<std::string, TokenId>> special;
  for (const auto& [tok, id] : vj.items()) {
    vocab[tok] = id.get<TokenId>();
    if (tok.size() > 4 && tok.rfind("<|", 0) == 0 && tok.substr(tok.size() - 2) == "|>") {
      special.emplace_back(tok, id.get<TokenId>());
    }
  }
  std::ifstream min(merges_txt);
  if (!min) throw LoadError("cannot open " + merges_txt.string());
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  while (std::getline(min, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.rfind("#version", 0) == 0) continue;
    const auto space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 == line.size()) {
      throw LoadError("malformed merge line '" + line + "' in " + merges_txt.string());
    }
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  return ByteBpeTokenizer(std::move(vocab), std::move(merges), std::move(special), style);
}

ByteBpeTokenizer ByteBpeTokenizer::from_tokenizer_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed tokenizer file " + path.string() + ": " + e.what());
  }
  const auto& model = j.at("model");
  if (model.value("type", std::string("BPE")) != "BPE") throw LoadError("tokenizer model is not BPE");
  std::unordered_map<std::string, TokenId> vocab;
  for (const auto& [tok, id] : model.at("vocab").items()) vocab[tok] = id.get<TokenId>();
  std::vector<std::pair<std::string, std::string>> merges;
  for (const auto& m : model.at("merges")) {
    if (m.is_array()) {
      merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    } else {
      const auto s = m.get<std::string>();
      const auto space = s.find(' ');
      if (space == std::string::npos) throw LoadError("malformed merge entry '" + s + "'");
      merges.emplace_back(s.substr(0, space), s.substr(space + 1));
    }
  }
  std::vector<std::pair<std::string, TokenId>> special;
  if (j.contains("added_tokens")) {
    for (const auto& t : j.at("added_tokens")) {
      special.emplace_back(t.at("content").get<std::string>(), t.at("id").get<TokenId>());
    }
  }
  PretokenizerStyle style = PretokenizerStyle::gpt2;
  if (j.contains("pre_tokenizer") && j.at("pre_tokenizer").dump().find("\\\\p{N}{1,3}") != std::string::npos) {
    style = PretokenizerStyle::llama3;
  }
  return ByteBpeTokenizer(std::move(vocab), std::move(merges), std::move(special), style);
}

void ByteBpeTokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  const auto& table = byte_table();
  std::vector<std::string> symbols;
  symbols.reserve(chunk.size());
  for (char c : chunk) symbols.push_back(table.encode[static_cast<unsigned char>(c)]);
  while (symbols.size() > 1) {
    int best_rank = INT_MAX;
    std::size_t best = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = i;
      }
    }
    if (best_rank == INT_MAX) break;
    const std::string left = symbols[best];
    const std::string right = symbols[best + 1];
    std::vector<std::string> merged;
    merged.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
        merged.push_back(left + right);
        i += 2;
      } else {
        merged.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(merged);
  }
  for (const auto& sym : symbols) {
    auto it = vocab_.find(sym);
    if (it == vocab_.end()) throw LoadError("byte symbol missing from vocabulary: '" + sym + "'");
    out.push_back(it->second);
  }
}

std::vector<TokenId> ByteBpeTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t plain_start = 0;
  auto flush = [&](std::size_t end) {
    const auto plain = text.substr(plain_start, end - plain_start);
    for (auto piece : pretokenize(plain, style_)) encode_chunk(piece, out);
  };
  for (std::size_t i = 0; i < text.size();) {
    bool matched = false;
    for (const auto& [content, id] : special_) {
      if (!content.empty() && text.compare(i, content.size(), content) == 0) {
        flush(i);
        out.push_back(id);
        i += content.size();
        plain_start = i;
        matched = true;
        break;
      }
    }
    if (!matched) ++i;
  }
  flush(text.size());
  return out;
}

std::string ByteBpeTokenizer::decode(std::span<const TokenId> ids) const {
  const auto& table = byte_table();
  std::string out;
  for (TokenId id : ids) {
    if (auto it = special_by_id_.find(id); it != special_by_id_.end()) {
      out += it->second;
      continue;
    }
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw ShapeError("token id " + std::to_string(id) + " outside vocabulary");
    }
    for (std::uint32_t cp : code_points(id_to_token_[id])) {
      auto it = table.decode.find(cp);
      if (it == table.decode.end()) throw ShapeError("token " + std::to_string(id) + " is not byte-level");
      out.push_back(static_cast<char>(it->second));
    }
  }
  return out;
}

std::unique_ptr<Tokenizer> load_tokenizer(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("tokenizer path does not exist: " + path.string());
  auto load_fixture = [](const fs::path& file) {
    std::ifstream in(file);
    return std::make_unique<FixtureTokenizer>(FixtureTokenizer::from_json(nlohmann::json::parse(in)));
  };
  if (fs::is_directory(path)) {
    if (fs::exists(path / "fixture_tokenizer.json")) return load_fixture(path / "fixture_tokenizer.json");
    if (fs::exists(path / "tokenizer.json")) {
      return std::make_unique<ByteBpeTokenizer>(ByteBpeTokenizer::from_tokenizer_json(path / "tokenizer.json"));
    }
    if (fs::exists(path / "vocab.json") && fs::exists(path / "merges.txt")) {
      return std::make_unique<ByteBpeTokenizer>(ByteBpeTokenizer::from_files(path / "vocab.json", path / "merges.txt"));
    }
    throw LoadError("no tokenizer files found in " + path.string());
  }
  if (path.filename() == "fixture_tokenizer.json") return load_fixture(path);
  if (path.filename() == "vocab.json") {
    return std::make_unique<ByteBpeTokenizer>(
        ByteBpeTokenizer::from_files(path, path.parent_path() / "merges.txt"));
  }
  return std::make_unique<ByteBpeTokenizer>(ByteBpeTokenizer::from_tokenizer_json(path));
}

}  // namespace relprobe
