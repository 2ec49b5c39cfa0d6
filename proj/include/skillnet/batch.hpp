// SPDX-License-Identifier: Apache-2.0
//
// Turns task examples into padded encoder batches plus head targets.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "skillnet/dataset.hpp"
#include "skillnet/encoder.hpp"
#include "skillnet/vocab.hpp"

namespace skillnet {

struct Batch {
  EncoderInput input;
  std::vector<int> labels;  // classification
  std::vector<std::vector<std::size_t>> tag_rows;  // tagging: flattened rows per sequence
  std::vector<std::vector<int>> tags;
  std::vector<int> passage_mask;  // span: [batch x seq_len]
  std::vector<int> span_start;    // span: positions in the encoded sequence
  std::vector<int> span_end;
  std::vector<std::size_t> passage_offset;  // span: position of passage token 0

  std::size_t size() const { return input.batch; }
};

namespace detail {

inline Encoded encode_example(const Vocab& v, const Example& ex, std::size_t max_len) {
  if (const auto* t = std::get_if<TextExample>(&ex)) return encode_single(v, t->text, max_len);
  if (const auto* p = std::get_if<PairExample>(&ex)) return encode_pair(v, p->text_a, p->text_b, max_len);
  if (const auto* g = std::get_if<TaggingExample>(&ex)) return encode_single(v, g->tokens, max_len);
  const auto& s = std::get<SpanExample>(ex);
  return encode_pair(v, s.question, s.passage, max_len);
}

}  // namespace detail

/// Pads to the longest sequence in the batch. Throws DataError when an
/// example does not match the task's head or a span is truncated away.
inline Batch make_batch(const Vocab& vocab, const TaskSpec& task, const std::vector<const Example*>& examples,
                        std::size_t max_len) {
  if (examples.empty()) throw DataError("empty batch");
  std::vector<Encoded> enc;
  enc.reserve(examples.size());
  std::size_t L = 0;
  for (const Example* ex : examples) {
    const bool ok = (task.head == HeadType::sequence_classification && std::holds_alternative<TextExample>(*ex)) ||
                    (task.head == HeadType::pair_classification && std::holds_alternative<PairExample>(*ex)) ||
                    (task.head == HeadType::token_tagging && std::holds_alternative<TaggingExample>(*ex)) ||
                    (task.head == HeadType::span_extraction && std::holds_alternative<SpanExample>(*ex));
    if (!ok) throw DataError("example type does not match the head of task " + task.id);
    enc.push_back(detail::encode_example(vocab, *ex, max_len));
    L = std::max(L, enc.back().ids.size());
  }
  Batch b;
  b.input.batch = examples.size();
  b.input.seq_len = L;
  for (const auto& e : enc) {
    const std::size_t pad = L - e.ids.size();
    b.input.token_ids.insert(b.input.token_ids.end(), e.ids.begin(), e.ids.end());
    b.input.token_ids.insert(b.input.token_ids.end(), pad, kPadId);
    b.input.segment_ids.insert(b.input.segment_ids.end(), e.segments.begin(), e.segments.end());
    b.input.segment_ids.insert(b.input.segment_ids.end(), pad, 0);
    b.input.attention_mask.insert(b.input.attention_mask.end(), e.ids.size(), 1);
    b.input.attention_mask.insert(b.input.attention_mask.end(), pad, 0);
  }
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = *examples[i];
    if (const auto* t = std::get_if<TextExample>(&ex)) {
      b.labels.push_back(label_index(task, t->label));
    } else if (const auto* p = std::get_if<PairExample>(&ex)) {
      b.labels.push_back(label_index(task, p->label));
    } else if (const auto* g = std::get_if<TaggingExample>(&ex)) {
      std::vector<std::size_t> rows;
      std::vector<int> tags;
      for (std::size_t j = 0; j < enc[i].len_a; ++j) {
        rows.push_back(i * L + 1 + j);
        tags.push_back(label_index(task, g->tags[j]));
      }
      b.tag_rows.push_back(std::move(rows));
      b.tags.push_back(std::move(tags));
    } else {
      const auto& s = std::get<SpanExample>(ex);
      if (b.passage_mask.empty()) b.passage_mask.assign(examples.size() * L, 0);
      const std::size_t off = enc[i].b_offset();
      for (std::size_t j = 0; j < enc[i].len_b; ++j) b.passage_mask[i * L + off + j] = 1;
      if (static_cast<std::size_t>(s.answer_end) >= enc[i].len_b) throw DataError("answer truncated away");
      b.span_start.push_back(static_cast<int>(off) + s.answer_start);
      b.span_end.push_back(static_cast<int>(off) + s.answer_end);
      b.passage_offset.push_back(off);
    }
  }
  return b;
}

}  // namespace skillnet
