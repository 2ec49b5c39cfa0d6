// SPDX-License-Identifier: Apache-2.0
//
// Task examples and their JSONL files. One object per line:
//   single   {"text": ..., "label": ...}
//   pair     {"text_a": ..., "text_b": ..., "label": ..., "group": n}   (group only for ranking)
//   tagging  {"tokens": [...], "tags": [...]}
//   span     {"question": ..., "passage": ..., "answer_start": i, "answer_end": j}
// Span indices are inclusive whitespace-token offsets into the passage.
#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "skillnet/routing.hpp"
#include "skillnet/vocab.hpp"

namespace skillnet {

struct TextExample {
  std::string text;
  std::string label;
  friend bool operator==(const TextExample&, const TextExample&) = default;
};

struct PairExample {
  std::string text_a;
  std::string text_b;
  std::string label;
  std::optional<int> group;
  friend bool operator==(const PairExample&, const PairExample&) = default;
};

struct TaggingExample {
  std::vector<std::string> tokens;
  std::vector<std::string> tags;
  friend bool operator==(const TaggingExample&, const TaggingExample&) = default;
};

struct SpanExample {
  std::string question;
  std::string passage;
  int answer_start = 0;
  int answer_end = 0;
  friend bool operator==(const SpanExample&, const SpanExample&) = default;
};

using Example = std::variant<TextExample, PairExample, TaggingExample, SpanExample>;

inline nlohmann::json to_json(const Example& ex) {
  nlohmann::json j;
  std::visit(
      [&](const auto& e) {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, TextExample>) {
          j["text"] = e.text;
          j["label"] = e.label;
        } else if constexpr (std::is_same_v<T, PairExample>) {
          j["text_a"] = e.text_a;
          j["text_b"] = e.text_b;
          j["label"] = e.label;
          if (e.group) j["group"] = *e.group;
        } else if constexpr (std::is_same_v<T, TaggingExample>) {
          j["tokens"] = e.tokens;
          j["tags"] = e.tags;
        } else {
          j["question"] = e.question;
          j["passage"] = e.passage;
          j["answer_start"] = e.answer_start;
          j["answer_end"] = e.answer_end;
        }
      },
      ex);
  return j;
}

inline Example example_from_json(const nlohmann::json& j, HeadType head) {
  try {
    switch (head) {
      case HeadType::sequence_classification:
        return TextExample{j.at("text").get<std::string>(), j.at("label").get<std::string>()};
      case HeadType::pair_classification: {
        PairExample p{j.at("text_a").get<std::string>(), j.at("text_b").get<std::string>(),
                      j.at("label").get<std::string>(), std::nullopt};
        if (j.contains("group")) p.group = j.at("group").get<int>();
        return p;
      }
      case HeadType::token_tagging:
        return TaggingExample{j.at("tokens").get<std::vector<std::string>>(), j.at("tags").get<std::vector<std::string>>()};
      case HeadType::span_extraction:
        return SpanExample{j.at("question").get<std::string>(), j.at("passage").get<std::string>(),
                           j.at("answer_start").get<int>(), j.at("answer_end").get<int>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed example: ") + e.what());
  }
  throw DataError("unknown head type");
}

inline void write_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& ex : examples) out << to_json(ex).dump() << '\n';
}

inline std::vector<Example> read_jsonl(const std::string& path, HeadType head) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::vector<Example> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line), head));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline int label_index(const TaskSpec& task, const std::string& label) {
  auto it = std::find(task.labels.begin(), task.labels.end(), label);
  if (it == task.labels.end()) throw DataError("label '" + label + "' not declared by task " + task.id);
  return static_cast<int>(it - task.labels.begin());
}

/// Checks labels against the task and span offsets against passages.
inline void validate_examples(const TaskSpec& task, const std::vector<Example>& examples) {
  for (const auto& ex : examples) {
    if (const auto* t = std::get_if<TextExample>(&ex)) {
      label_index(task, t->label);
    } else if (const auto* p = std::get_if<PairExample>(&ex)) {
      label_index(task, p->label);
      if (task.ranking && !p->group) throw DataError("ranking task " + task.id + " needs a group on every example");
    } else if (const auto* g = std::get_if<TaggingExample>(&ex)) {
      if (g->tokens.size() != g->tags.size() || g->tokens.empty())
        throw DataError("tagging example with mismatched tokens/tags");
      for (const auto& tag : g->tags) label_index(task, tag);
    } else {
      const auto& s = std::get<SpanExample>(ex);
      const int n = static_cast<int>(split_ws(s.passage).size());
      if (s.answer_start < 0 || s.answer_end >= n || s.answer_start > s.answer_end)
        throw DataError("answer span outside passage in task " + task.id);
    }
  }
}

}  // namespace skillnet
