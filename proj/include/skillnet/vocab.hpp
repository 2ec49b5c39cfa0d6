// SPDX-License-Identifier: Apache-2.0
//
// Whitespace tokenizer over a fixed vocabulary. Ids 0-4 are reserved for
// [PAD], [UNK], [CLS], [SEP], [MASK].
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "skillnet/error.hpp"

namespace skillnet {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecial = 5;

inline std::vector<std::string> split_ws(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

inline std::string join_ws(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

class Vocab {
 public:
  Vocab() {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(s);
  }

  explicit Vocab(const std::vector<std::string>& tokens) : Vocab() {
    for (const auto& t : tokens) add(t);
  }

  int add(const std::string& token) {
    if (token.empty() || token.find_first_of(" \t\n") != std::string::npos)
      throw DataError("vocabulary token must be a non-empty word: '" + token + "'");
    auto [it, fresh] = ids_.emplace(token, static_cast<int>(tokens_.size()));
    if (fresh) tokens_.push_back(token);
    return it->second;
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw DataError("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  static bool is_special(int id) { return id >= 0 && id < kNumSpecial; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line, in id order, specials included.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read vocabulary " + path);
    Vocab v;
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line); ++line_no) {
      if (line_no < kNumSpecial) {
        if (line != v.tokens_[line_no]) throw DataError("vocabulary must start with the five special tokens");
        continue;
      }
      v.add(line);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct Encoded {
  std::vector<int> ids;
  std::vector<int> segments;
  std::size_t len_a = 0;  // tokens of segment a kept after truncation
  std::size_t len_b = 0;

  /// Position of token i of segment b.
  std::size_t b_offset() const { return len_a + 2; }
};

namespace detail {

inline std::vector<int> to_ids(const Vocab& v, const std::vector<std::string>& tokens) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(v.id(t));
  return out;
}

}  // namespace detail

/// [CLS] a [SEP], truncated to max_len.
inline Encoded encode_single(const Vocab& v, const std::vector<std::string>& a, std::size_t max_len) {
  if (a.empty()) throw DataError("cannot encode empty text");
  if (max_len < 3) throw ConfigError("max_len too small for [CLS] x [SEP]");
  Encoded e;
  auto ids = detail::to_ids(v, a);
  if (ids.size() > max_len - 2) ids.resize(max_len - 2);
  e.ids.push_back(kClsId);
  e.ids.insert(e.ids.end(), ids.begin(), ids.end());
  e.ids.push_back(kSepId);
  e.segments.assign(e.ids.size(), 0);
  e.len_a = ids.size();
  return e;
}

inline Encoded encode_single(const Vocab& v, const std::string& text, std::size_t max_len) {
  return encode_single(v, split_ws(text), max_len);
}

/// [CLS] a [SEP] b [SEP] with segments 0 then 1; the longer segment loses
/// its last token until the pair fits (b on ties).
inline Encoded encode_pair(const Vocab& v, const std::vector<std::string>& a, const std::vector<std::string>& b,
                           std::size_t max_len) {
  if (a.empty() || b.empty()) throw DataError("cannot encode empty text");
  if (max_len < 5) throw ConfigError("max_len too small for a pair");
  auto ia = detail::to_ids(v, a);
  auto ib = detail::to_ids(v, b);
  while (ia.size() + ib.size() + 3 > max_len) {
    if (ia.size() > ib.size())
      ia.pop_back();
    else
      ib.pop_back();
  }
  Encoded e;
  e.ids.push_back(kClsId);
  e.ids.insert(e.ids.end(), ia.begin(), ia.end());
  e.ids.push_back(kSepId);
  e.segments.assign(e.ids.size(), 0);
  e.ids.insert(e.ids.end(), ib.begin(), ib.end());
  e.ids.push_back(kSepId);
  e.segments.resize(e.ids.size(), 1);
  e.len_a = ia.size();
  e.len_b = ib.size();
  return e;
}

inline Encoded encode_pair(const Vocab& v, const std::string& a, const std::string& b, std::size_t max_len) {
  return encode_pair(v, split_ws(a), split_ws(b), max_len);
}

/// Surface text of the non-special ids; [SEP] between segments is dropped.
inline std::string decode(const Vocab& v, const std::vector<int>& ids) {
  std::vector<std::string> out;
  for (int id : ids)
    if (!Vocab::is_special(id) || id == kUnkId || id == kMaskId) out.push_back(v.token(id));
  return join_ws(out);
}

}  // namespace skillnet
